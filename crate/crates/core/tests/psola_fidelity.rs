use prosody_core::audio::AudioBuffer;
use prosody_core::pitch::{analyze, cents, F0Contour, VoicingThresholds};
use prosody_core::psola::shift_to_contour;
use prosody_core::synth;

fn fraction_within(out: &AudioBuffer, target: &F0Contour, tol_cents: f64) -> f64 {
    let got = analyze(out, VoicingThresholds::default()).unwrap();
    let voiced: Vec<usize> = (0..target.len()).filter(|&t| target.is_voiced(t)).collect();
    let ok = voiced
        .iter()
        .filter(|&&t| got.voiced_hz(t).is_some_and(|h| cents(h, target.hz()[t]).abs() <= tol_cents))
        .count();
    ok as f64 / voiced.len() as f64
}

#[test]
fn vowel_shifts_land_on_target() {
    let audio = synth::vowel(1.0, 0.5, |_| 200.0);
    let analysis = analyze(&audio, VoicingThresholds::default()).unwrap();
    for ratio in [0.75, 1.5] {
        let target = analysis.map_voiced(|_, h| h * ratio).unwrap();
        let out = shift_to_contour(&audio, &analysis, &target).unwrap();
        assert_eq!(out.len(), audio.len());
        let frac = fraction_within(&out, &target, 15.0);
        assert!(frac >= 0.8, "ratio {ratio}: {frac}");
    }
}

#[test]
fn identity_shift_is_transparent() {
    let audio = synth::vowel(1.0, 0.5, |_| 200.0);
    let analysis = analyze(&audio, VoicingThresholds::default()).unwrap();
    let out = shift_to_contour(&audio, &analysis, &analysis).unwrap();
    let (sig, err) = audio
        .samples
        .iter()
        .zip(&out.samples)
        .skip(1600)
        .take(audio.len() - 3200)
        .fold((0.0, 0.0), |(s, e), (x, y)| (s + x * x, e + (x - y).powi(2)));
    let snr = 10.0 * (sig / err.max(1e-300)).log10();
    assert!(snr >= 20.0, "snr {snr}");
}

#[test]
fn shift_then_unshift_returns() {
    let audio = synth::vowel(1.0, 0.5, |_| 200.0);
    let analysis = analyze(&audio, VoicingThresholds::default()).unwrap();
    let up = analysis.map_voiced(|_, h| h * 1.5).unwrap();
    let shifted = shift_to_contour(&audio, &analysis, &up).unwrap();
    let back = shift_to_contour(&shifted, &up, &analysis).unwrap();
    let frac = fraction_within(&back, &analysis, 20.0);
    assert!(frac >= 0.8, "{frac}");
}

#[test]
fn gliding_vowel_follows_a_gliding_target() {
    let audio = synth::vowel(1.0, 0.5, |t| 180.0 + 60.0 * t);
    let analysis = analyze(&audio, VoicingThresholds::default()).unwrap();
    let target = analysis.map_voiced(|t, h| h * (1.0 + 0.3 * t as f64 / 100.0)).unwrap();
    let out = shift_to_contour(&audio, &analysis, &target).unwrap();
    assert!(fraction_within(&out, &target, 20.0) >= 0.8);
}
