//! Scores the baseline systems against the reference contours of a toy
//! corpus: pitch RMSE in log2 Hz and voicing precision/recall.
//!
//!     cargo run -p prosody-core --example eval

use prosody_core::baselines::PunctuationTarget;
use prosody_core::corpus::{write_toy_corpus, ToyCorpusSpec};
use prosody_core::evaluation::{evaluate_corpus, EvalConfig, SystemSpec};

fn main() -> prosody_core::Result<()> {
    let dir = std::env::temp_dir().join("prosody-examples").join("eval");
    let manifest = write_toy_corpus(&dir, ToyCorpusSpec { utterances: 6, ..Default::default() })?;
    let config = EvalConfig {
        systems: vec![
            SystemSpec::Identity,
            SystemSpec::Monotone,
            SystemSpec::Swap,
            SystemSpec::Replace { bank: None },
            SystemSpec::Repunct { target: PunctuationTarget::Question },
        ],
        seed: 0,
    };
    let report = evaluate_corpus(&manifest, &config)?;
    println!("{:>18} {:>8} {:>9} {:>9}", "system", "rmse", "vuv prec", "vuv rec");
    for a in &report.aggregate {
        println!("{:>18} {:8.4} {:9.3} {:9.3}", a.system, a.rmse_log2, a.vuv_precision, a.vuv_recall);
    }
    println!("config hash {}", report.provenance.config_hash);
    Ok(())
}
