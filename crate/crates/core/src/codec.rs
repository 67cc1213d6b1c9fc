//! Speaker-adaptive 128-class F0 quantisation.
//!
//! Class 0 means "unvoiced"; classes 1..=127 evenly divide `mu ± 4 sigma` in
//! log2-Hz. Frequencies outside the span clamp to the end classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pitch::{F0Contour, SpeakerStats};

pub const N_CLASSES: usize = 128;
pub const UNVOICED_BIN: u8 = 0;
pub const VOICED_BINS: usize = N_CLASSES - 1;
/// Half-width of the grid in standard deviations.
pub const SPAN_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl QuantGrid {
    pub fn from_stats(stats: &SpeakerStats) -> Result<Self> {
        Self::new(stats.mu, stats.sigma)
    }

    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("quantisation grid".into()));
        }
        if sigma <= 0.0 {
            return Err(Error::OutOfRange(format!("grid sigma {sigma} must be positive")));
        }
        Ok(Self {
            mu,
            sigma,
            lo: mu - SPAN_SIGMAS * sigma,
            hi: mu + SPAN_SIGMAS * sigma,
        })
    }

    /// Width of one voiced class in log2-Hz.
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / VOICED_BINS as f64
    }

    /// Centre of voiced class `k` (1..=127) in log2-Hz.
    pub fn center_log2(&self, k: u8) -> f64 {
        self.lo + (k as f64 - 0.5) * self.bin_width()
    }

    pub fn center_hz(&self, k: u8) -> f64 {
        self.center_log2(k).exp2()
    }

    /// Voiced class of a frequency, clamped to 1..=127.
    pub fn bin_of_hz(&self, hz: f64) -> u8 {
        let rel = (hz.log2() - self.lo) / (self.hi - self.lo);
        let k = 1.0 + (rel * VOICED_BINS as f64).floor();
        k.clamp(1.0, VOICED_BINS as f64) as u8
    }
}

pub fn build_grid(stats: &SpeakerStats) -> Result<QuantGrid> {
    QuantGrid::from_stats(stats)
}

/// Per-frame class indices; 0 exactly where the source frame was unvoiced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedF0 {
    pub bins: Vec<u8>,
}

impl QuantizedF0 {
    pub fn new(bins: Vec<u8>) -> Result<Self> {
        if let Some(t) = bins.iter().position(|&b| b as usize >= N_CLASSES) {
            return Err(Error::OutOfRange(format!(
                "class {} at frame {t} (max {})",
                bins[t],
                N_CLASSES - 1
            )));
        }
        Ok(Self { bins })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn voiced_mask(&self) -> Vec<bool> {
        self.bins.iter().map(|&b| b != UNVOICED_BIN).collect()
    }
}

pub fn quantize(contour: &F0Contour, grid: &QuantGrid) -> QuantizedF0 {
    let bins = (0..contour.len())
        .map(|t| match contour.voiced_hz(t) {
            Some(hz) => grid.bin_of_hz(hz),
            None => UNVOICED_BIN,
        })
        .collect();
    QuantizedF0 { bins }
}

pub fn dequantize(q: &QuantizedF0, grid: &QuantGrid) -> Result<F0Contour> {
    let q = QuantizedF0::new(q.bins.clone())?;
    let hz = q
        .bins
        .iter()
        .map(|&b| if b == UNVOICED_BIN { 0.0 } else { grid.center_hz(b) })
        .collect();
    F0Contour::new(hz, q.voiced_mask())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_200() -> QuantGrid {
        QuantGrid::new(200f64.log2(), 0.25).unwrap()
    }

    #[test]
    fn span_is_one_octave_each_side() {
        let g = grid_200();
        assert!((g.lo.exp2() - 100.0).abs() < 1e-9);
        assert!((g.hi.exp2() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn floored_sigma_spans_eight_sigma() {
        let stats = SpeakerStats::new(7.0, 0.0, 10).unwrap();
        let g = build_grid(&stats).unwrap();
        assert_eq!(g.sigma, 0.05);
        assert!((g.hi - g.lo - 8.0 * 0.05).abs() < 1e-9);
    }

    #[test]
    fn midpoint_lands_in_class_64() {
        let g = grid_200();
        assert_eq!(g.bin_of_hz(200.0), 64);
        assert_eq!(g.bin_of_hz(400.0), 127);
        assert_eq!(g.bin_of_hz(1e5), 127);
        assert_eq!(g.bin_of_hz(1.0), 1);
    }

    #[test]
    fn class_64_centre() {
        let g = grid_200();
        let expected = (g.lo + 63.5 * (g.hi - g.lo) / 127.0).exp2();
        assert!((g.center_hz(64) - expected).abs() < 1e-9);
        // 63.5 widths of 2/127 octave is exactly one octave above lo
        assert!((g.center_hz(64) - 200.0).abs() < 1e-9);
    }

    #[test]
    fn unvoiced_maps_to_zero_and_back() {
        let c = F0Contour::new(vec![0.0, 210.0, 0.0], vec![false, true, false]).unwrap();
        let g = grid_200();
        let q = quantize(&c, &g);
        assert_eq!(q.bins[0], 0);
        assert_eq!(q.bins[2], 0);
        assert_ne!(q.bins[1], 0);
        let back = dequantize(&q, &g).unwrap();
        assert_eq!(back.voiced(), c.voiced());
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let q = QuantizedF0 { bins: vec![0, 128] };
        assert!(dequantize(&q, &grid_200()).is_err());
    }
}
