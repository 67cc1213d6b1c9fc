use ndarray::s;
use serde::{Deserialize, Serialize};

use super::net::{argmax, voicing_masked, ContextBundle, Model, Prepared};
use super::{ConstraintTrack, ExposureStrategy, Mode, ModelConfig};
use crate::codec::QuantizedF0;
use crate::error::{Error, Result};
use crate::features::{context_features, FrameFeatures};
use crate::neural::{AdamConfig, RngStream};

/// Longest constraint segment drawn during training, in frames (1 s).
pub const MAX_SEGMENT_FRAMES: usize = 100;
/// Utterances at least this long may be split into context and target.
const MIN_SPLIT_FRAMES: usize = 30;

/// A training utterance: frame features and its quantised reference F0.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub feats: FrameFeatures,
    pub target: QuantizedF0,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.target.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// When set, training stops after this many steps instead of `epochs`.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 9,
            max_steps: None,
            seed: 0,
        }
    }
}

/// One training item in model time order, with its autoregressive inputs fixed.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub(crate) prepared: Prepared,
    pub(crate) ar: Vec<Option<u8>>,
}

impl TrainItem {
    pub fn frames(&self) -> usize {
        self.prepared.frames()
    }

    /// Autoregressive inputs, in model time order.
    pub fn ar_inputs(&self) -> &[Option<u8>] {
        &self.ar
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<TrainItem>,
}

impl Batch {
    pub fn frames(&self) -> usize {
        self.items.iter().map(|i| i.frames()).sum()
    }
}

/// Raw segments behind [`sample_training_constraints`], before clipping.
fn draw_segments(frames: usize, rng: &mut RngStream) -> Vec<std::ops::Range<usize>> {
    if frames == 0 {
        return Vec::new();
    }
    let k = rng.below(3);
    (0..k)
        .map(|_| {
            let len = 1 + rng.below(MAX_SEGMENT_FRAMES.min(frames));
            let start = rng.below(frames);
            start..start + len
        })
        .collect()
}

/// Draws `K ∈ {0, 1, 2}` segments of `1..=min(100, T)` frames at uniform
/// starts, clipped to the utterance. Bins are left at 0; see
/// [`ConstraintTrack::from_mask`] to copy ground truth in.
pub fn sample_training_constraints(frames: usize, rng: &mut RngStream) -> ConstraintTrack {
    let mut track = ConstraintTrack::empty(frames);
    for seg in draw_segments(frames, rng) {
        for t in seg.start..seg.end.min(frames) {
            track.mask[t] = true;
        }
    }
    track
}

/// Model-sample probability after `epochs` (fractional) epochs.
pub fn scheduled_sampling_prob(cfg: &ModelConfig, epochs: f64) -> f64 {
    let s = cfg.scheduled_sampling;
    if s.ramp_epochs <= 0.0 {
        return s.max_prob;
    }
    s.max_prob * (epochs / s.ramp_epochs).clamp(0.0, 1.0)
}

/// Teacher AR inputs: nothing at frame 0, then the previous reference class.
fn teacher_ar(teacher: &[u8]) -> Vec<Option<u8>> {
    std::iter::once(None)
        .chain(teacher[..teacher.len().saturating_sub(1)].iter().map(|&c| Some(c)))
        .collect()
}

/// Fraction of voiced frames whose voicing-masked argmax of the teacher-forced
/// post-postnet logits equals the reference class. Whole utterances, no
/// context, no constraints.
pub fn accuracy_teacher_forced(model: &Model, utts: &[Utterance]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in utts.chunks(8) {
        let mut items = Vec::new();
        let mut ars = Vec::new();
        for u in chunk {
            let voiced = u.target.voiced_mask();
            let p = model.prepare(
                u.feats.matrix.view(),
                &voiced,
                &ContextBundle::absent(),
                Some(&u.target.bins),
                &ConstraintTrack::empty(u.frames()),
            )?;
            ars.push(teacher_ar(p.teacher.as_ref().expect("teacher set")));
            items.push(p);
        }
        for (p, (_, post)) in items.iter().zip(model.batch_logits(&items, &ars)?) {
            let teacher = p.teacher.as_ref().expect("teacher set");
            for t in 0..p.frames() {
                if !p.voiced[t] {
                    continue;
                }
                total += 1;
                if argmax(&voicing_masked(post.row(t), true)) == teacher[t] as usize {
                    hit += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Owns a model plus optimiser state and the data-order random streams.
pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    adam: AdamConfig,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    examples_seen: u64,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let adam = AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        };
        let rng = RngStream::new(config.seed);
        Ok(Self {
            model,
            config,
            adam,
            rng,
            order: Vec::new(),
            cursor: 0,
            examples_seen: 0,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Completed epochs as a fraction, for the sampling schedule.
    pub fn epochs_completed(&self, corpus_len: usize) -> f64 {
        if corpus_len == 0 {
            0.0
        } else {
            self.examples_seen as f64 / corpus_len as f64
        }
    }

    /// Builds one training item: optional context split, sampled
    /// constraints, and autoregressive inputs according to the exposure
    /// strategy.
    pub fn make_item(&mut self, utt: &Utterance, sample_prob: f64) -> Result<TrainItem> {
        let cfg = self.model.config().clone();
        let frames = utt.frames();
        if utt.feats.frames() != frames {
            return Err(Error::Shape(format!("utterance {}: features vs target length", utt.id)));
        }
        let (a, b) = if cfg.use_context && frames >= MIN_SPLIT_FRAMES && self.rng.bernoulli(0.5) {
            let min_len = frames / 3;
            let len = min_len + self.rng.below(frames - min_len + 1);
            let a = self.rng.below(frames - len + 1);
            (a, a + len)
        } else {
            (0, frames)
        };
        let ctx_slice = |lo: usize, hi: usize| -> Result<Option<ndarray::Array2<f64>>> {
            if lo >= hi {
                return Ok(None);
            }
            let f = utt.feats.slice_frames(lo..hi);
            let q = QuantizedF0::new(utt.target.bins[lo..hi].to_vec())?;
            context_features(&f, &q).map(Some)
        };
        let ctx = ContextBundle {
            preceding: ctx_slice(0, a)?,
            following: ctx_slice(b, frames)?,
            summary: Vec::new(),
        };
        let target = QuantizedF0::new(utt.target.bins[a..b].to_vec())?;
        let cons = if cfg.train_constraints {
            let mask = sample_training_constraints(b - a, &mut self.rng).mask;
            ConstraintTrack::from_mask(mask, &target)?
        } else {
            ConstraintTrack::empty(b - a)
        };
        let voiced = target.voiced_mask();
        let prepared = self.model.prepare(
            utt.feats.matrix.slice(s![a..b, ..]),
            &voiced,
            &ctx,
            Some(&target.bins),
            &cons,
        )?;
        let ar = match cfg.exposure {
            ExposureStrategy::DataDropout => {
                let teacher = prepared.teacher.as_ref().expect("teacher set");
                let mut ar = vec![None; prepared.frames()];
                for t in 1..prepared.frames() {
                    ar[t] = match prepared.cons.get(t - 1) {
                        Some(c) => Some(c),
                        None if self.rng.bernoulli(cfg.data_dropout_p) => None,
                        None => Some(teacher[t - 1]),
                    };
                }
                ar
            }
            ExposureStrategy::ScheduledSampling if sample_prob <= 0.0 => {
                let teacher = prepared.teacher.as_ref().expect("teacher set");
                (0..prepared.frames())
                    .map(|t| (t > 0).then(|| prepared.cons.get(t - 1).unwrap_or(teacher[t - 1])))
                    .collect()
            }
            ExposureStrategy::ScheduledSampling => {
                let mode = Mode::TrainScheduledSampling { p: sample_prob };
                self.model.run_mode(&prepared, &mut self.rng, mode)?.1
            }
        };
        Ok(TrainItem { prepared, ar })
    }

    /// Next batch from a shuffled pass over `corpus` (reshuffled each epoch).
    pub fn next_batch(&mut self, corpus: &[Utterance]) -> Result<Batch> {
        if corpus.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        let p = scheduled_sampling_prob(self.model.config(), self.epochs_completed(corpus.len()));
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size.min(corpus.len()) {
            if self.cursor >= self.order.len() {
                self.order = self.rng.permutation(corpus.len());
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            items.push(self.make_item(&corpus[idx], p)?);
        }
        self.examples_seen += items.len() as u64;
        Ok(Batch { items })
    }

    /// Mean per-frame `xent(pre) + xent(post)` and its gradients, without
    /// updating anything.
    pub fn evaluate(&self, batch: &Batch) -> Result<(f64, crate::neural::Gradients)> {
        let (items, ars): (Vec<Prepared>, Vec<Vec<Option<u8>>>) = batch
            .items
            .iter()
            .map(|i| (i.prepared.clone(), i.ar.clone()))
            .unzip();
        self.model.batch_loss(&items, &ars)
    }

    /// Loss, backward pass and one Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = self.evaluate(batch)?;
        let params = self.model.params_mut();
        params.accumulate(&grads);
        params.adam_step(&self.adam)?;
        self.steps += 1;
        Ok(loss)
    }

    /// Steps the configured budget (`max_steps`, or `epochs` passes over the
    /// corpus), calling `log(step, loss)` after each update.
    pub fn fit(&mut self, corpus: &[Utterance], mut log: impl FnMut(u64, f64)) -> Result<()> {
        let per_epoch = corpus.len().div_ceil(self.config.batch_size.min(corpus.len()).max(1)) as u64;
        let budget = self
            .config
            .max_steps
            .unwrap_or(per_epoch * self.config.epochs as u64);
        while self.steps < budget {
            let batch = self.next_batch(corpus)?;
            let loss = self.train_step(&batch)?;
            log(self.steps, loss);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drawn_segments_are_1_to_100_frames() {
        let mut rng = RngStream::new(8);
        let mut counts = [0usize; 3];
        for i in 0..3000 {
            let frames = 1 + (i * 13) % 350;
            let segs = draw_segments(frames, &mut rng);
            counts[segs.len()] += 1;
            for s in segs {
                assert!(s.start < frames);
                assert!((1..=MAX_SEGMENT_FRAMES.min(frames)).contains(&s.len()));
            }
        }
        assert!(counts.iter().all(|&c| c > 850), "{counts:?}");
        assert_eq!(sample_training_constraints(0, &mut rng).len(), 0);
    }
}
