//! Writes a small synthetic corpus, trains a reduced C-DAR model on it for a
//! few hundred steps and saves the checkpoint.
//!
//!     cargo run -p prosody-core --example train_toy [out_dir]

use prosody_core::corpus::{corpus_stats, training_set, write_toy_corpus, ToyCorpusSpec};
use prosody_core::model::{accuracy_teacher_forced, Model, ModelConfig, PostnetConfig, Trainer, TrainingConfig};

fn out_dir() -> std::path::PathBuf {
    std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("prosody-examples"))
}

fn main() -> prosody_core::Result<()> {
    let dir = out_dir();
    let manifest = write_toy_corpus(dir.join("toy"), ToyCorpusSpec { utterances: 8, ..Default::default() })?;
    let utts = manifest.load_all()?;
    let stats = corpus_stats(&utts)?;
    let set = training_set(&utts, &stats)?;

    // a narrower network than the default so this finishes in seconds
    let cfg = ModelConfig {
        fc_dims: [32, 32],
        bi_hidden: 16,
        uni_hidden: 32,
        postnet: PostnetConfig { layers: 2, kernel: 3, channels: 16 },
        context_hidden: 16,
        ..ModelConfig::cdar()
    };
    let training = TrainingConfig { batch_size: 4, max_steps: Some(300), seed: 1, ..Default::default() };
    let mut trainer = Trainer::new(Model::new(cfg, 1)?, training)?;
    trainer.fit(&set, |step, loss| {
        if step % 50 == 0 {
            println!("step {step:4}  loss {loss:.3}");
        }
    })?;
    println!("teacher-forced accuracy {:.3}", accuracy_teacher_forced(&trainer.model, &set)?);
    let ckpt = dir.join("toy.ckpt");
    trainer.model.save(&ckpt)?;
    println!("saved {}", ckpt.display());
    Ok(())
}
