//! Autoregressive F0 generation: the DAR baseline and the constrained,
//! context-aware C-DAR variant.
//!
//! Per frame the model sees `[features ∥ context summary ∥ constraint one-hot ∥
//! mask bit]`, runs two dense+ReLU layers, a bidirectional GRU, and an
//! autoregressive GRU fed with the previous frame's class, then projects to
//! 128 logits refined by a residual convolutional postnet.

mod net;
mod train;

pub use net::{ContextBundle, Model, ModelOutput, MODEL_MAGIC};
pub use train::{
    accuracy_teacher_forced, sample_training_constraints, scheduled_sampling_prob, Batch,
    TrainItem, Trainer, TrainingConfig, Utterance, MAX_SEGMENT_FRAMES,
};

use serde::{Deserialize, Serialize};

use crate::codec::{QuantizedF0, N_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

/// How the autoregressive input is corrupted during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureStrategy {
    DataDropout,
    ScheduledSampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostnetConfig {
    pub layers: usize,
    pub kernel: usize,
    pub channels: usize,
}

/// Linear ramp of the model-sample probability up to `max_prob` over
/// `ramp_epochs`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSchedule {
    pub ramp_epochs: f64,
    pub max_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub fc_dims: [usize; 2],
    pub bi_hidden: usize,
    pub uni_hidden: usize,
    pub n_classes: usize,
    pub postnet: PostnetConfig,
    pub data_dropout_p: f64,
    pub exposure: ExposureStrategy,
    pub scheduled_sampling: SamplingSchedule,
    pub direction: Direction,
    /// Whether the context summariser exists (C-DAR) or not (DAR).
    pub use_context: bool,
    /// Whether training samples user-style constraint segments.
    pub train_constraints: bool,
    pub context_hidden: usize,
    pub context_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::cdar()
    }
}

impl ModelConfig {
    /// Constrained, context-aware generator.
    pub fn cdar() -> Self {
        Self {
            embedding_dim: crate::features::DEFAULT_EMBEDDING_DIM,
            fc_dims: [64, 64],
            bi_hidden: 16,
            uni_hidden: 256,
            n_classes: N_CLASSES,
            postnet: PostnetConfig {
                layers: 5,
                kernel: 5,
                channels: 128,
            },
            data_dropout_p: 0.5,
            exposure: ExposureStrategy::ScheduledSampling,
            scheduled_sampling: SamplingSchedule {
                ramp_epochs: 5.0,
                max_prob: 0.5,
            },
            direction: Direction::Reverse,
            use_context: true,
            train_constraints: true,
            context_hidden: 128,
            context_layers: 2,
        }
    }

    /// Unconstrained baseline with data dropout and a wide bidirectional RNN.
    pub fn dar() -> Self {
        Self {
            bi_hidden: 256,
            exposure: ExposureStrategy::DataDropout,
            direction: Direction::Forward,
            use_context: false,
            train_constraints: false,
            ..Self::cdar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.fc_dims[0],
            self.fc_dims[1],
            self.bi_hidden,
            self.uni_hidden,
            self.postnet.channels,
            self.context_hidden,
        ];
        if widths.contains(&0) || self.context_layers == 0 {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("n_classes must be {N_CLASSES}")));
        }
        if self.postnet.layers == 0 || self.postnet.kernel % 2 == 0 {
            return Err(Error::Config("postnet needs ≥1 layer and an odd kernel".into()));
        }
        if self.postnet.channels != self.n_classes && self.postnet.layers == 1 {
            return Err(Error::Config("single-layer postnet must map classes to classes".into()));
        }
        for (name, p) in [
            ("data_dropout_p", self.data_dropout_p),
            ("scheduled_sampling.max_prob", self.scheduled_sampling.max_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.scheduled_sampling.ramp_epochs >= 0.0) {
            return Err(Error::Config("ramp_epochs must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of a frame-feature row for this configuration.
    pub fn feature_width(&self) -> usize {
        crate::features::FeatureLayout::new(self.embedding_dim).width()
    }

    /// Width of one context row (features plus F0 one-hot).
    pub fn context_width(&self) -> usize {
        self.feature_width() + self.n_classes
    }

    pub fn summary_width(&self) -> usize {
        if self.use_context {
            2 * 2 * self.context_hidden
        } else {
            0
        }
    }
}

/// Per-frame optional user-specified classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTrack {
    pub mask: Vec<bool>,
    pub bins: Vec<u8>,
}

impl ConstraintTrack {
    pub fn empty(frames: usize) -> Self {
        Self {
            mask: vec![false; frames],
            bins: vec![0; frames],
        }
    }

    /// Constraints at `mask` copied from `q`.
    pub fn from_mask(mask: Vec<bool>, q: &QuantizedF0) -> Result<Self> {
        if mask.len() != q.len() {
            return Err(Error::Shape("constraint mask vs contour length".into()));
        }
        let bins = mask
            .iter()
            .zip(&q.bins)
            .map(|(&m, &b)| if m { b } else { 0 })
            .collect();
        Ok(Self { mask, bins })
    }

    /// Every frame constrained to `q`.
    pub fn full(q: &QuantizedF0) -> Self {
        Self {
            mask: vec![true; q.len()],
            bins: q.bins.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<u8> {
        self.mask[t].then_some(self.bins[t])
    }

    pub fn constrained_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Checks shape, class range and agreement with the voicing mask.
    pub fn validate(&self, voiced: &[bool]) -> Result<()> {
        if self.bins.len() != self.mask.len() || self.mask.len() != voiced.len() {
            return Err(Error::Shape(format!(
                "constraints cover {} frames, utterance has {}",
                self.mask.len(),
                voiced.len()
            )));
        }
        for t in 0..self.mask.len() {
            if !self.mask[t] {
                continue;
            }
            if self.bins[t] as usize >= N_CLASSES {
                return Err(Error::OutOfRange(format!("constraint class {} at frame {t}", self.bins[t])));
            }
            if (self.bins[t] != 0) != voiced[t] {
                return Err(Error::VuvMismatch { frame: t });
            }
        }
        Ok(())
    }

    pub fn reversed(&self) -> Self {
        let mut c = self.clone();
        c.mask.reverse();
        c.bins.reverse();
        c
    }
}

/// Forward-pass behaviour of the autoregressive channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Teacher forcing with each previous-frame input zeroed with probability `p`.
    TrainDataDropout { p: f64 },
    /// Teacher forcing with each previous-frame input replaced by a model
    /// sample with probability `p`.
    TrainScheduledSampling { p: f64 },
    /// Free-running generation at the given sampling temperature.
    Infer { temperature: f64 },
}

impl Mode {
    /// Plain teacher forcing.
    pub fn teacher() -> Self {
        Mode::TrainDataDropout { p: 0.0 }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Mode::Infer { .. })
    }
}
