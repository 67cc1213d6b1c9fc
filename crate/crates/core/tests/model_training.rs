use ndarray::Array2;
use prosody_core::codec::QuantizedF0;
use prosody_core::features::{FeatureLayout, FrameFeatures};
use prosody_core::model::{
    accuracy_teacher_forced, ContextBundle, ConstraintTrack, Mode, Model, ModelConfig, Trainer,
    TrainingConfig, Utterance,
};
use prosody_core::neural::RngStream;

/// A smooth voiced contour over random-but-fixed frame features.
fn utterance(frames: usize, seed: u64) -> Utterance {
    let layout = FeatureLayout::new(ModelConfig::cdar().embedding_dim);
    let mut rng = RngStream::new(seed);
    let mut m = Array2::zeros((frames, layout.width()));
    let mut bins = Vec::new();
    for t in 0..frames {
        let voiced = t >= 3 && t + 4 < frames;
        m[[t, rng.below(layout.phoneme.len())]] = 1.0;
        for c in layout.embedding.clone() {
            m[[t, c]] = rng.uniform() - 0.5;
        }
        m[[t, layout.vuv]] = voiced as u8 as f64;
        let phase = t as f64 / frames as f64 * std::f64::consts::TAU + seed as f64;
        bins.push(if voiced { (64.0 + 30.0 * phase.sin()).round() as u8 } else { 0 });
    }
    Utterance {
        id: format!("u{seed}"),
        feats: FrameFeatures { matrix: m, layout },
        target: QuantizedF0::new(bins).unwrap(),
    }
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let model = Model::new(ModelConfig::cdar(), 0).unwrap();
    let u = utterance(60, 1);
    let out = model
        .forward(
            &u.feats,
            &ContextBundle::absent(),
            Some(&u.target),
            &ConstraintTrack::empty(60),
            &mut RngStream::new(0),
            Mode::teacher(),
        )
        .unwrap();
    let xent = |l: &Array2<f64>| {
        let mut total = 0.0;
        for (t, row) in l.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            total += lse - row[u.target.bins[t] as usize];
        }
        total / l.nrows() as f64
    };
    let loss = xent(&out.pre_logits) + xent(&out.post_logits);
    let expect = 2.0 * 128f64.ln();
    assert!((loss - expect).abs() / expect < 0.05, "loss {loss}");
}

#[test]
fn overfits_one_utterance() {
    let corpus = vec![utterance(50, 7)];
    let model = Model::new(ModelConfig::cdar(), 0).unwrap();
    let cfg = TrainingConfig {
        batch_size: 1,
        learning_rate: 1e-2,
        max_steps: Some(200),
        ..TrainingConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let start = std::time::Instant::now();
    let mut last = 0.0;
    trainer.fit(&corpus, |_, l| last = l).unwrap();
    let acc = accuracy_teacher_forced(&trainer.model, &corpus).unwrap();
    eprintln!("loss {last:.3} acc {acc:.3} in {:?}", start.elapsed());
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let corpus: Vec<_> = (0..3).map(|s| utterance(40, s)).collect();
    let run = || {
        let model = Model::new(ModelConfig::cdar(), 3).unwrap();
        let cfg = TrainingConfig {
            batch_size: 2,
            max_steps: Some(4),
            seed: 11,
            ..TrainingConfig::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        t.fit(&corpus, |_, _| {}).unwrap();
        t.model.to_bytes()
    };
    assert_eq!(run(), run());
}
