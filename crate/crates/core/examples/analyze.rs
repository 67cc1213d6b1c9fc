//! Tracks F0 on a synthetic gliding vowel (or a WAV given as the first
//! argument) and prints the contour, speaker statistics and posteriorgram size.
//!
//!     cargo run -p prosody-core --example analyze [in.wav]

use prosody_core::audio::{load_audio_file, CANONICAL_RATE};
use prosody_core::pitch::{analyze_detailed, export_posteriorgram, speaker_stats, VoicingThresholds};
use prosody_core::synth;

fn main() -> prosody_core::Result<()> {
    let audio = match std::env::args().nth(1) {
        Some(path) => load_audio_file(path, CANONICAL_RATE)?,
        None => synth::vowel(1.0, 0.5, |t| 140.0 + 60.0 * t),
    };
    let analysis = analyze_detailed(&audio, VoicingThresholds::default())?;
    let contour = &analysis.contour;
    println!("{} frames, {} voiced", contour.len(), contour.voiced_count());
    for t in (0..contour.len()).step_by(10) {
        match contour.voiced_hz(t) {
            Some(hz) => println!("  frame {t:3}: {hz:6.1} Hz  (confidence {:.2})", analysis.confidence.confidence[t]),
            None => println!("  frame {t:3}: unvoiced"),
        }
    }
    let stats = speaker_stats([contour])?;
    println!("mu = {:.3} log2 Hz ({:.1} Hz), sigma = {:.3} octaves", stats.mu, stats.mu.exp2(), stats.sigma);
    let bytes = export_posteriorgram(&analysis.posteriorgram, &analysis.confidence);
    println!("posteriorgram export: {} bytes", bytes.len());
    Ok(())
}
