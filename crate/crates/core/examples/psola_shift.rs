//! Shifts a synthetic vowel up a fifth with TD-PSOLA, writes both WAVs and
//! checks the result by re-analysis.
//!
//!     cargo run -p prosody-core --example psola_shift [out_dir]

use prosody_core::audio::write_wav_file;
use prosody_core::pitch::{analyze, cents, VoicingThresholds};
use prosody_core::psola::shift_to_contour;
use prosody_core::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: std::path::PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("prosody-examples"));
    std::fs::create_dir_all(&dir)?;

    let audio = synth::vowel(1.0, 0.5, |t| 180.0 + 40.0 * t);
    let analysis = analyze(&audio, VoicingThresholds::default())?;
    let target = analysis.map_voiced(|_, hz| hz * 1.5)?;
    let shifted = shift_to_contour(&audio, &analysis, &target)?;

    let again = analyze(&shifted, VoicingThresholds::default())?;
    let voiced: Vec<usize> = (0..target.len()).filter(|&t| target.is_voiced(t)).collect();
    let close = voiced
        .iter()
        .filter(|&&t| again.voiced_hz(t).is_some_and(|hz| cents(hz, target.hz()[t]).abs() <= 15.0))
        .count();
    println!("{close}/{} voiced frames within 15 cents of the target", voiced.len());

    write_wav_file(&audio, dir.join("vowel.wav"))?;
    write_wav_file(&shifted, dir.join("vowel_up_a_fifth.wav"))?;
    println!("wrote vowel.wav and vowel_up_a_fifth.wav to {}", dir.display());
    Ok(())
}
