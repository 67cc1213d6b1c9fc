use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::wav::{bessel_i0, sinc};
use super::AudioBuffer;
use crate::error::{Error, Result};

/// Kaiser-windowed-sinc low-pass specification.
#[derive(Debug, Clone, Copy)]
pub struct LowpassDesign {
    /// Passband edge in Hz.
    pub cutoff_hz: f64,
    /// Width of the transition band in Hz; the stopband starts at `cutoff + transition`.
    pub transition_hz: f64,
    /// Target stopband attenuation in dB.
    pub attenuation_db: f64,
}

impl LowpassDesign {
    /// Listening-stimulus filter: 20 Hz transition, designed for 70 dB so the
    /// guaranteed 60 dB stopband holds with margin.
    pub fn stimulus(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            transition_hz: 20.0,
            attenuation_db: 70.0,
        }
    }
}

/// Odd-length symmetric (linear-phase) FIR taps for `design` at `sample_rate`.
pub fn design_lowpass(design: LowpassDesign, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let a = design.attenuation_db;
    let beta = if a > 50.0 {
        0.1102 * (a - 8.7)
    } else if a >= 21.0 {
        0.5842 * (a - 21.0).powf(0.4) + 0.07886 * (a - 21.0)
    } else {
        0.0
    };
    let dw = 2.0 * std::f64::consts::PI * design.transition_hz / sr;
    let mut n = ((a - 7.95) / (2.285 * dw)).ceil() as usize + 1;
    if n % 2 == 0 {
        n += 1;
    }
    // ideal cutoff in the middle of the transition band, as a fraction of Nyquist
    let fc = ((design.cutoff_hz + design.transition_hz / 2.0) / nyquist).min(1.0);
    let half = (n / 2) as f64;
    let i0_beta = bessel_i0(beta);
    (0..n)
        .map(|i| {
            let k = i as f64 - half;
            let r = k / half;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            fc * sinc(fc * k) * w
        })
        .collect()
}

/// Applies symmetric odd-length `taps` with the group delay removed, so the
/// output is time-aligned with the input and has the same length.
pub fn filter_zero_phase(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let delay = taps.len() / 2;
    let full_len = signal.len() + taps.len() - 1;
    if (taps.len() as u64) * (signal.len() as u64) < 4_000_000 {
        return (0..signal.len())
            .map(|n| {
                let center = n + delay;
                let k_lo = center.saturating_sub(signal.len() - 1);
                let k_hi = center.min(taps.len() - 1);
                (k_lo..=k_hi).map(|k| taps[k] * signal[center - k]).sum()
            })
            .collect();
    }
    let size = full_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = signal
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut b: Vec<Complex<f64>> = taps
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    ifft.process(&mut a);
    let scale = 1.0 / size as f64;
    a[delay..delay + signal.len()]
        .iter()
        .map(|c| c.re * scale)
        .collect()
}

/// Zero-phase low-pass with passband edge `cutoff_hz`, 20 Hz transition and at
/// least 60 dB of stopband attenuation. Output length equals input length.
pub fn lowpass_render(audio: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    let nyquist = audio.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::OutOfRange(format!(
            "cutoff {cutoff_hz} Hz outside (0, {nyquist})"
        )));
    }
    let taps = design_lowpass(LowpassDesign::stimulus(cutoff_hz), audio.sample_rate);
    let samples = filter_zero_phase(&audio.samples, &taps);
    AudioBuffer::new(samples, audio.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::rms;
    use std::f64::consts::PI;

    fn sine(freq: f64, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (seconds * 16_000.0) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        AudioBuffer::new(s, 16_000).unwrap()
    }

    // Skip the filter's settling region so edge effects don't enter the measurement.
    fn interior(x: &[f64]) -> &[f64] {
        let m = 4000;
        &x[m..x.len() - m]
    }

    #[test]
    fn passband_sine_keeps_its_level() {
        let input = sine(100.0, 1.5, 0.5);
        let out = lowpass_render(&input, 300.0).unwrap();
        assert_eq!(out.len(), input.len());
        let db = 20.0 * (rms(interior(&out.samples)) / rms(interior(&input.samples))).log10();
        assert!(db.abs() < 0.5, "{db} dB");
    }

    #[test]
    fn stopband_sine_is_removed() {
        let input = sine(2000.0, 1.5, 0.5);
        let out = lowpass_render(&input, 300.0).unwrap();
        let db = 20.0 * (rms(interior(&out.samples)) / rms(interior(&input.samples))).log10();
        assert!(db <= -60.0, "{db} dB");
    }

    #[test]
    fn near_nyquist_cutoff_is_near_identity() {
        let mut input = sine(440.0, 0.5, 0.3);
        let other = sine(5000.0, 0.5, 0.2);
        for (a, b) in input.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
        let out = lowpass_render(&input, 0.999 * 8000.0).unwrap();
        let err: Vec<f64> = out
            .samples
            .iter()
            .zip(&input.samples)
            .map(|(a, b)| a - b)
            .collect();
        let snr = 20.0 * (rms(&input.samples) / rms(&err).max(1e-300)).log10();
        assert!(snr >= 40.0, "{snr}");
    }

    #[test]
    fn filtering_twice_matches_once() {
        let mut input = sine(150.0, 1.5, 0.4);
        for (i, s) in input.samples.iter_mut().enumerate() {
            *s += 0.3 * (2.0 * PI * 1200.0 * i as f64 / 16_000.0).sin();
        }
        let once = lowpass_render(&input, 300.0).unwrap();
        let twice = lowpass_render(&once, 300.0).unwrap();
        let diff: Vec<f64> = once
            .samples
            .iter()
            .zip(&twice.samples)
            .map(|(a, b)| a - b)
            .collect();
        assert!(rms(&diff) <= 1e-3, "{}", rms(&diff));
    }

    #[test]
    fn cutoff_out_of_range() {
        let input = sine(100.0, 0.1, 0.5);
        assert!(lowpass_render(&input, 0.0).is_err());
        assert!(lowpass_render(&input, 8000.0).is_err());
    }

    #[test]
    fn direct_and_fft_paths_agree() {
        let x: Vec<f64> = (0..3000).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        let taps = design_lowpass(
            LowpassDesign {
                cutoff_hz: 1000.0,
                transition_hz: 400.0,
                attenuation_db: 60.0,
            },
            16_000,
        );
        let direct = filter_zero_phase(&x, &taps);
        let long: Vec<f64> = x.iter().cycle().take(30_000).copied().collect();
        let fft = filter_zero_phase(&long, &taps);
        for i in 200..2800 {
            assert!((direct[i] - fft[i]).abs() < 1e-9);
        }
    }
}
