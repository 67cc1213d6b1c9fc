use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioBuffer, FrameGrid};
use crate::error::{Error, Result};

pub const MCEP_WINDOW_SECONDS: f64 = 0.025;
pub const MCEP_BANDS: usize = 80;
const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the bins of an `n_fft`-point spectrum.
fn mel_filterbank(n_bands: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_bands + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_bands, n_bins));
    for b in 0..n_bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II, first `order` coefficients.
fn dct2_ortho(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..order)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Mel-cepstral coefficients per frame: 25 ms Hann window, magnitude spectrum,
/// 80-band mel filterbank, natural log floored at `ln(1e-10)`, orthonormal DCT-II.
///
/// Returns a `T × order` matrix.
pub fn mcep_extract(audio: &AudioBuffer, grid: &FrameGrid, order: usize) -> Result<Array2<f64>> {
    let win_len = (MCEP_WINDOW_SECONDS * audio.sample_rate as f64).round() as usize;
    if audio.len() < win_len {
        return Err(Error::AudioTooShort {
            samples: audio.len(),
            required: win_len,
        });
    }
    if order == 0 || order > MCEP_BANDS {
        return Err(Error::OutOfRange(format!("mcep order {order}")));
    }
    let n_fft = (2 * win_len).next_power_of_two();
    let fb = mel_filterbank(MCEP_BANDS, n_fft, audio.sample_rate);
    let hann: Vec<f64> = (0..win_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win_len as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut out = Array2::zeros((grid.frame_count, order));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..grid.frame_count {
        let frame = grid.centered_window(&audio.samples, t, win_len);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (x, w)) in frame.iter().zip(&hann).enumerate() {
            buf[i].re = x * w;
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
        let log_mel: Vec<f64> = fb
            .rows()
            .into_iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        for (k, c) in dct2_ortho(&log_mel, order).into_iter().enumerate() {
            out[[t, k]] = c;
        }
    }
    Ok(out)
}
