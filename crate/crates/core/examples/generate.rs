//! Generates F0 for a toy utterance with a few user constraints and shows
//! that constrained frames come back exactly while the rest is sampled.
//!
//!     cargo run -p prosody-core --example generate [checkpoint]
//!
//! Without a checkpoint an untrained model is used (the constraints still hold).

use prosody_core::codec::{quantize, QuantGrid};
use prosody_core::corpus::{corpus_stats, training_set, write_toy_corpus, ToyCorpusSpec};
use prosody_core::model::{ConstraintTrack, ContextBundle, Model, ModelConfig};
use prosody_core::neural::RngStream;

fn main() -> prosody_core::Result<()> {
    let dir = std::env::temp_dir().join("prosody-examples").join("generate");
    let manifest = write_toy_corpus(&dir, ToyCorpusSpec { utterances: 2, ..Default::default() })?;
    let utts = manifest.load_all()?;
    let stats = corpus_stats(&utts)?;
    let set = training_set(&utts, &stats)?;
    let model = match std::env::args().nth(1) {
        Some(p) => Model::load(p)?,
        None => Model::new(ModelConfig::cdar(), 0)?,
    };

    let utt = &set[0];
    let grid = QuantGrid::from_stats(&stats[&utts[0].speaker])?;
    let voiced = utt.target.voiced_mask();
    // pin the first and last five voiced frames to the reference
    let voiced_frames: Vec<usize> = (0..voiced.len()).filter(|&t| voiced[t]).collect();
    let mut mask = vec![false; voiced.len()];
    for &t in voiced_frames.iter().take(5).chain(voiced_frames.iter().rev().take(5)) {
        mask[t] = true;
    }
    let track = ConstraintTrack::from_mask(mask, &utt.target)?;

    let mut rng = RngStream::new(7);
    let (_, contour) = model.generate(&utt.feats, &ContextBundle::absent(), &track, &voiced, &grid, &mut rng, 1.0)?;
    let bins = quantize(&contour, &grid).bins;
    for t in 0..contour.len() {
        if let Some(hz) = contour.voiced_hz(t) {
            let tag = if track.mask[t] { "constrained" } else { "" };
            println!("frame {t:3}: class {:3}  {hz:6.1} Hz  {tag}", bins[t]);
        }
    }
    let kept = (0..bins.len()).filter(|&t| track.mask[t] && bins[t] == track.bins[t]).count();
    println!("{kept}/{} constraints honoured", track.constrained_count());
    Ok(())
}
