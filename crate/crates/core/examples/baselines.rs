//! Applies the four non-neural contour manipulations to a toy utterance:
//! monotone, word swap, word replacement from a bank and re-punctuation.
//!
//!     cargo run -p prosody-core --example baselines

use prosody_core::baselines::{monotone, replace_words, repunctuate_heuristic, swap_words, PunctuationTarget, WordContourBank};
use prosody_core::corpus::{corpus_stats, write_toy_corpus, ToyCorpusSpec};
use prosody_core::neural::RngStream;
use prosody_core::pitch::F0Contour;

fn describe(name: &str, c: &F0Contour) {
    let hz: Vec<f64> = (0..c.len()).filter_map(|t| c.voiced_hz(t)).collect();
    let (lo, hi) = hz.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    let last = hz.last().copied().unwrap_or(0.0);
    println!("{name:>10}: {} voiced frames, {lo:6.1}..{hi:6.1} Hz, ends at {last:6.1} Hz", hz.len());
}

fn main() -> prosody_core::Result<()> {
    let dir = std::env::temp_dir().join("prosody-examples").join("baselines");
    let manifest = write_toy_corpus(&dir, ToyCorpusSpec { utterances: 6, ..Default::default() })?;
    let utts = manifest.load_all()?;
    let stats = corpus_stats(&utts)?;
    let mut bank = WordContourBank::new();
    for u in &utts[1..] {
        bank.add_utterance(&u.speaker, &u.reference, &u.alignment)?;
    }

    let u = &utts[0];
    let s = &stats[&u.speaker];
    let mut rng = RngStream::new(3);
    describe("original", &u.reference);
    describe("monotone", &monotone(&u.reference, s));
    describe("swap", &swap_words(&u.reference, &u.alignment, &mut rng)?);
    describe("replace", &replace_words(&u.reference, &u.alignment, &bank, &u.speaker, &mut rng)?);
    describe("question", &repunctuate_heuristic(&u.reference, &u.alignment, PunctuationTarget::Question, s)?);
    describe("statement", &repunctuate_heuristic(&u.reference, &u.alignment, PunctuationTarget::Statement, s)?);
    Ok(())
}
