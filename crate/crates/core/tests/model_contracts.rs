use ndarray::Array2;
use prosody_core::codec::{dequantize, QuantGrid, QuantizedF0};
use prosody_core::features::{FeatureLayout, FrameFeatures};
use prosody_core::model::{
    sample_training_constraints, ConstraintTrack, ContextBundle, Direction, Model, ModelConfig,
    PostnetConfig, Trainer, TrainingConfig, Utterance, MAX_SEGMENT_FRAMES,
};
use prosody_core::neural::RngStream;

fn small(direction: Direction) -> ModelConfig {
    ModelConfig {
        fc_dims: [16, 16],
        bi_hidden: 8,
        uni_hidden: 32,
        postnet: PostnetConfig {
            layers: 2,
            kernel: 3,
            channels: 16,
        },
        context_hidden: 8,
        direction,
        ..ModelConfig::cdar()
    }
}

fn features(cfg: &ModelConfig, voiced: &[bool], seed: u64) -> FrameFeatures {
    let layout = FeatureLayout::new(cfg.embedding_dim);
    let mut rng = RngStream::new(seed);
    let mut m = Array2::from_shape_fn((voiced.len(), layout.width()), |_| rng.uniform() - 0.5);
    for (t, &v) in voiced.iter().enumerate() {
        m[[t, layout.vuv]] = v as u8 as f64;
    }
    FrameFeatures { matrix: m, layout }
}

fn voicing(frames: usize) -> Vec<bool> {
    (0..frames).map(|t| (t / 7) % 3 != 0).collect()
}

fn random_bins(voiced: &[bool], seed: u64) -> QuantizedF0 {
    let mut rng = RngStream::new(seed);
    QuantizedF0::new(voiced.iter().map(|&v| if v { 1 + rng.below(127) as u8 } else { 0 }).collect()).unwrap()
}

fn context(cfg: &ModelConfig, frames: usize, seed: u64) -> Array2<f64> {
    let voiced = voicing(frames);
    prosody_core::features::context_features(&features(cfg, &voiced, seed), &random_bins(&voiced, seed)).unwrap()
}

#[test]
fn absent_context_summarises_to_zeros() {
    let model = Model::new(ModelConfig::cdar(), 0).unwrap();
    let b = model.summarize_context(None, None).unwrap();
    assert_eq!(b.summary, vec![0.0; 512]);
}

#[test]
fn single_frame_context_determines_its_half() {
    let cfg = small(Direction::Forward);
    let model = Model::new(cfg.clone(), 1).unwrap();
    let frame = context(&cfg, 1, 5);
    let a = model.summarize_context(Some(frame.clone()), Some(context(&cfg, 4, 6))).unwrap();
    let b = model.summarize_context(Some(frame), Some(context(&cfg, 9, 7))).unwrap();
    let half = a.summary.len() / 2;
    assert_eq!(a.summary[..half], b.summary[..half]);
    assert_ne!(a.summary[half..], b.summary[half..]);
    assert!(a.summary[..half].iter().any(|v| *v != 0.0));
    let other = model.summarize_context(Some(context(&cfg, 1, 8)), None).unwrap();
    assert_ne!(a.summary[..half], other.summary[..half]);
}

#[test]
fn permuted_context_changes_summary() {
    let cfg = small(Direction::Forward);
    let model = Model::new(cfg.clone(), 2).unwrap();
    let ctx = context(&cfg, 6, 9);
    let mut permuted = ctx.clone();
    for (dst, src) in [0usize, 3, 1, 5, 2, 4].into_iter().enumerate() {
        permuted.row_mut(dst).assign(&ctx.row(src));
    }
    let a = model.summarize_context(Some(ctx), None).unwrap();
    let b = model.summarize_context(Some(permuted), None).unwrap();
    assert_ne!(a.summary, b.summary);
}

#[test]
fn reverse_fully_constrained_output_equals_forward() {
    let voiced = voicing(30);
    let q = random_bins(&voiced, 3);
    let cons = ConstraintTrack::full(&q);
    let mut outs = Vec::new();
    for dir in [Direction::Forward, Direction::Reverse] {
        let cfg = small(dir);
        let model = Model::new(cfg.clone(), 4).unwrap();
        let grid = QuantGrid::new(7.5, 0.2).unwrap();
        let (out, contour) = model
            .generate(
                &features(&cfg, &voiced, 11),
                &ContextBundle::absent(),
                &cons,
                &voiced,
                &grid,
                &mut RngStream::new(0),
                1.0,
            )
            .unwrap();
        assert_eq!(out.sampled_bins, q.bins);
        assert_eq!(contour, dequantize(&q, &grid).unwrap());
        outs.push(out.sampled_bins);
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn unvoiced_utterance_generates_zeros() {
    for dir in [Direction::Forward, Direction::Reverse] {
        let cfg = small(dir);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let voiced = vec![false; 25];
        let (out, contour) = model
            .generate(
                &features(&cfg, &voiced, 1),
                &ContextBundle::absent(),
                &ConstraintTrack::empty(25),
                &voiced,
                &QuantGrid::new(7.5, 0.2).unwrap(),
                &mut RngStream::new(9),
                1.0,
            )
            .unwrap();
        assert!(out.sampled_bins.iter().all(|&b| b == 0));
        assert_eq!(contour.voiced_count(), 0);
    }
}

/// Contiguous runs of `true` in a mask.
fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < mask.len() {
        if mask[t] {
            let s = t;
            while t < mask.len() && mask[t] {
                t += 1;
            }
            out.push((s, t));
        } else {
            t += 1;
        }
    }
    out
}

#[test]
fn training_constraint_segments_respect_bounds() {
    let mut rng = RngStream::new(17);
    let mut empty = 0;
    for i in 0..2000 {
        let frames = 1 + (i * 37) % 400;
        let track = sample_training_constraints(frames, &mut rng);
        assert_eq!(track.len(), frames);
        let rs = runs(&track.mask);
        if rs.is_empty() {
            empty += 1;
        }
        // two segments can merge; each run is at most two segment lengths
        assert!(rs.len() <= 2);
        for (s, e) in rs {
            assert!(e - s >= 1 && e - s <= 2 * MAX_SEGMENT_FRAMES);
        }
        assert!(track.constrained_count() <= 2 * MAX_SEGMENT_FRAMES.min(frames));
    }
    // K is uniform on {0, 1, 2}
    assert!((550..790).contains(&empty), "empty draws {empty}");
    let a = sample_training_constraints(300, &mut RngStream::new(4));
    let b = sample_training_constraints(300, &mut RngStream::new(4));
    assert_eq!(a, b);
}

#[test]
fn trained_model_samples_depend_on_seed() {
    let cfg = small(Direction::Reverse);
    let voiced = voicing(40);
    let utts: Vec<Utterance> = (0..4)
        .map(|i| Utterance {
            id: format!("u{i}"),
            feats: features(&cfg, &voiced, 20 + i),
            target: random_bins(&voiced, 30 + i),
        })
        .collect();
    let mut trainer = Trainer::new(
        Model::new(cfg.clone(), 0).unwrap(),
        TrainingConfig {
            batch_size: 2,
            learning_rate: 3e-3,
            max_steps: Some(60),
            ..Default::default()
        },
    )
    .unwrap();
    trainer.fit(&utts, |_, _| {}).unwrap();
    let gen = |seed| {
        trainer
            .model
            .generate(
                &utts[0].feats,
                &ContextBundle::absent(),
                &ConstraintTrack::empty(40),
                &voiced,
                &QuantGrid::new(7.5, 0.2).unwrap(),
                &mut RngStream::new(seed),
                1.0,
            )
            .unwrap()
            .0
            .sampled_bins
    };
    let (a, b) = (gen(1), gen(2));
    assert_eq!(a, gen(1));
    assert!((0..40).any(|t| voiced[t] && a[t] != b[t]));
    for t in 0..40 {
        assert_eq!(a[t] != 0, voiced[t]);
    }
}
