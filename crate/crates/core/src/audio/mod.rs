//! Waveform containers, the 10 ms frame grid, WAV I/O, μ-law companding,
//! mel-cepstral features and the zero-phase low-pass used for listening stimuli.

mod filter;
mod mcep;
mod mulaw;
mod wav;

pub use filter::{design_lowpass, filter_zero_phase, lowpass_render, LowpassDesign};
pub use mcep::{mcep_extract, MCEP_BANDS, MCEP_WINDOW_SECONDS};
pub use mulaw::{mulaw_decode, mulaw_encode, MULAW_LEVELS};
pub use wav::{load_audio, load_audio_file, resample, write_wav, write_wav_file};

use crate::error::{Error, Result};

/// Internal sample rate for every analysis and synthesis stage.
pub const CANONICAL_RATE: u32 = 16_000;

/// Frame hop in seconds.
pub const HOP_SECONDS: f64 = 0.010;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, clamping into `[-1, 1]` and rejecting non-finite samples.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::OutOfRange("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i}")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// The 10 ms frame grid covering this buffer.
    pub fn grid(&self) -> FrameGrid {
        FrameGrid::for_samples(self.samples.len(), self.sample_rate)
    }
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Uniform 10 ms frame grid.
///
/// Frame `t` owns samples `[t·hop, (t+1)·hop)`. Analysis windows of any length
/// are centred on the middle of that span and zero-padded past the signal ends,
/// so every per-frame quantity (F0, features, cepstra) refers to the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub sample_rate: u32,
    pub hop: usize,
    pub frame_count: usize,
}

impl FrameGrid {
    pub fn hop_for_rate(sample_rate: u32) -> usize {
        (HOP_SECONDS * sample_rate as f64).round() as usize
    }

    pub fn for_samples(n_samples: usize, sample_rate: u32) -> Self {
        let hop = Self::hop_for_rate(sample_rate);
        Self {
            sample_rate,
            hop,
            frame_count: n_samples / hop,
        }
    }

    pub fn with_frames(frame_count: usize, sample_rate: u32) -> Self {
        Self {
            sample_rate,
            hop: Self::hop_for_rate(sample_rate),
            frame_count,
        }
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Sample index at the centre of frame `t`.
    pub fn center_sample(&self, t: usize) -> usize {
        t * self.hop + self.hop / 2
    }

    /// Centre time of frame `t` in seconds.
    pub fn center_time(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.hop_seconds()
    }

    /// Frame owning sample `n`, clamped to the last frame.
    pub fn frame_of_sample(&self, n: usize) -> usize {
        (n / self.hop).min(self.frame_count.saturating_sub(1))
    }

    /// Copies a window of `len` samples centred on frame `t`, zero-padded past the ends.
    pub(crate) fn centered_window(&self, samples: &[f64], t: usize, len: usize) -> Vec<f64> {
        let center = self.center_sample(t) as isize;
        let start = center - (len / 2) as isize;
        (0..len as isize)
            .map(|i| {
                let j = start + i;
                if j >= 0 && (j as usize) < samples.len() {
                    samples[j as usize]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
