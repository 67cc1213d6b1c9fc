//! Deterministic synthetic stimuli: tones, glottal pulse trains and
//! formant-filtered vowels with an arbitrary F0 trajectory.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioBuffer, CANONICAL_RATE};

pub fn sine(freq: f64, seconds: f64, amplitude: f64) -> AudioBuffer {
    let n = (seconds * CANONICAL_RATE as f64).round() as usize;
    let samples = (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / CANONICAL_RATE as f64).sin())
        .collect();
    AudioBuffer::new(samples, CANONICAL_RATE).expect("finite tone")
}

pub fn silence(seconds: f64) -> AudioBuffer {
    let n = (seconds * CANONICAL_RATE as f64).round() as usize;
    AudioBuffer::new(vec![0.0; n], CANONICAL_RATE).expect("silence")
}

pub fn white_noise(seconds: f64, amplitude: f64, seed: u64) -> AudioBuffer {
    let n = (seconds * CANONICAL_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| amplitude * rng.random_range(-1.0..1.0))
        .collect();
    AudioBuffer::new(samples, CANONICAL_RATE).expect("finite noise")
}

/// Impulse train whose instantaneous frequency follows `f0(t)`, where a
/// non-positive return value marks silence. Single-sample impulses carry
/// energy at every harmonic.
pub fn pulse_train(seconds: f64, amplitude: f64, f0: impl Fn(f64) -> f64) -> AudioBuffer {
    let sr = CANONICAL_RATE as f64;
    let n = (seconds * sr).round() as usize;
    let mut out = vec![0.0; n];
    // starts at 1 so a pulse fires on every voicing onset
    let mut phase: f64 = 1.0;
    for (i, o) in out.iter_mut().enumerate() {
        let f = f0(i as f64 / sr);
        if f <= 0.0 {
            phase = 1.0;
            continue;
        }
        if phase >= 1.0 - 1e-9 {
            phase = (phase - 1.0).max(0.0);
            *o = amplitude;
        }
        phase += f / sr;
    }
    AudioBuffer::new(out, CANONICAL_RATE).expect("finite pulses")
}

/// Two-pole resonator.
fn resonate(x: &[f64], freq: f64, bandwidth: f64) -> Vec<f64> {
    let sr = CANONICAL_RATE as f64;
    let r = (-PI * bandwidth / sr).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / sr).cos();
    let a2 = -r * r;
    let gain = 1.0 - r;
    let mut y = vec![0.0; x.len()];
    for i in 0..x.len() {
        let y1 = if i >= 1 { y[i - 1] } else { 0.0 };
        let y2 = if i >= 2 { y[i - 2] } else { 0.0 };
        y[i] = gain * x[i] + a1 * y1 + a2 * y2;
    }
    y
}

/// Vowel-like signal: glottal pulses following `f0(t)` through three formants
/// (/a/-like: 730, 1090, 2440 Hz), peak-normalised to `amplitude`.
pub fn vowel(seconds: f64, amplitude: f64, f0: impl Fn(f64) -> f64) -> AudioBuffer {
    let pulses = pulse_train(seconds, 1.0, &f0);
    let mut y = vec![0.0; pulses.len()];
    for (freq, bw) in [(730.0, 90.0), (1090.0, 110.0), (2440.0, 160.0)] {
        let r = resonate(&pulses.samples, freq, bw);
        for (a, b) in y.iter_mut().zip(r) {
            *a += b;
        }
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        y.iter_mut().for_each(|v| *v *= amplitude / peak);
    }
    AudioBuffer::new(y, CANONICAL_RATE).expect("finite vowel")
}

/// Constant-pitch vowel.
pub fn steady_vowel(f0: f64, seconds: f64) -> AudioBuffer {
    vowel(seconds, 0.5, move |_| f0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pulse_spacing_matches_period() {
        let p = pulse_train(0.1, 1.0, |_| 200.0);
        let idx: Vec<usize> = p
            .samples
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert!(idx.len() >= 19);
        for w in idx.windows(2) {
            assert_eq!(w[1] - w[0], 80);
        }
    }

    #[test]
    fn silent_regions_stay_silent() {
        let p = vowel(0.3, 0.5, |t| if (0.1..0.2).contains(&t) { 0.0 } else { 150.0 });
        let mid = &p.samples[2200..3200];
        assert!(mid.iter().all(|v| v.abs() < 1e-3));
        assert!(p.samples[..1600].iter().any(|v| v.abs() > 0.1));
    }
}
