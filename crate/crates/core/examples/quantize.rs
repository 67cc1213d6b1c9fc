//! Builds a speaker-adaptive grid from an analysed contour and round-trips
//! the contour through its 128 classes, reporting the worst error.
//!
//!     cargo run -p prosody-core --example quantize

use prosody_core::codec::{dequantize, quantize, QuantGrid};
use prosody_core::pitch::{analyze, speaker_stats, VoicingThresholds};
use prosody_core::synth;

fn main() -> prosody_core::Result<()> {
    let audio = synth::vowel(1.0, 0.5, |t| 120.0 * (1.0 + 0.8 * t));
    let contour = analyze(&audio, VoicingThresholds::default())?;
    let stats = speaker_stats([&contour])?;
    let grid = QuantGrid::from_stats(&stats)?;
    println!(
        "grid: {:.1}..{:.1} Hz, bin width {:.1} cents",
        grid.center_hz(1),
        grid.center_hz(127),
        1200.0 * grid.bin_width()
    );

    let q = quantize(&contour, &grid);
    let back = dequantize(&q, &grid)?;
    let worst = (0..contour.len())
        .filter_map(|t| Some((contour.voiced_hz(t)?, back.voiced_hz(t)?)))
        .map(|(a, b)| (1200.0 * (b / a).log2()).abs())
        .fold(0.0, f64::max);
    println!("classes: {:?} ...", &q.bins[..q.len().min(24)]);
    println!("voicing preserved: {}", back.voiced() == contour.voiced());
    println!("worst round-trip error {worst:.2} cents");
    Ok(())
}
