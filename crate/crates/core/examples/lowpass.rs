//! Renders the low-pass listening stimulus for a vowel: everything above the
//! highest F0 (plus 10 Hz) is removed, leaving the intonation audible but the
//! words not.
//!
//!     cargo run -p prosody-core --example lowpass [out_dir]

use prosody_core::audio::write_wav_file;
use prosody_core::evaluation::{make_lowpass_stimulus, stimulus_cutoff};
use prosody_core::pitch::{analyze, cents, VoicingThresholds};
use prosody_core::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: std::path::PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("prosody-examples"));
    std::fs::create_dir_all(&dir)?;

    let audio = synth::vowel(1.5, 0.5, |t| 130.0 + 50.0 * t);
    let contour = analyze(&audio, VoicingThresholds::default())?;
    let stimulus = make_lowpass_stimulus(&audio, &contour)?;
    println!("cutoff {:.1} Hz", stimulus_cutoff(&contour)?);
    println!("rms {:.4} -> {:.4}", audio.rms(), stimulus.rms());

    let again = analyze(&stimulus, VoicingThresholds::default())?;
    let devs: Vec<f64> = (0..contour.len())
        .filter_map(|t| Some(cents(again.voiced_hz(t)?, contour.voiced_hz(t)?).abs()))
        .collect();
    let within = devs.iter().filter(|d| **d <= 20.0 + 1e-6).count();
    println!("re-analysed F0 within 20 cents on {within}/{} frames", devs.len());

    write_wav_file(&stimulus, dir.join("stimulus.wav"))?;
    println!("wrote {}", dir.join("stimulus.wav").display());
    Ok(())
}
