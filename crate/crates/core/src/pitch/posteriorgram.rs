use ndarray::Array2;

use crate::audio::{AudioBuffer, FrameGrid};
use crate::error::{Error, Result};

/// Number of pitch bins on the default grid.
pub const PITCH_BINS: usize = 360;
pub const CENTS_PER_BIN: f64 = 20.0;
/// Frequency of bin 0.
pub const REFERENCE_HZ: f64 = 32.70;
/// Analysis window for the difference function; long enough to hold two
/// periods of the lowest bin.
pub const ANALYSIS_WINDOW_SECONDS: f64 = 0.064;

const SALIENCE_SPREAD_CENTS: f64 = 25.0;
/// Beta(a, b) prior over the dip threshold, mean 0.15 (as in probabilistic
/// YIN), discretised on `THRESHOLD_STEPS` midpoints.
const THRESHOLD_BETA: (f64, f64) = (2.0, 34.0 / 3.0);
const THRESHOLD_STEPS: usize = 100;
/// Share of a threshold's mass given to the deepest dip when no dip falls
/// below that threshold.
const FALLBACK_MASS: f64 = 0.01;
/// Uniform per-bin floor added to voiced rows so the decoder can always cross
/// between candidates.
const ROW_FLOOR: f64 = 1e-6;
/// Windows quieter than this RMS (-60 dBFS) are treated as silence; the
/// normalised difference function is scale-invariant and would otherwise call
/// decaying resonances periodic.
const SILENCE_RMS: f64 = 1e-3;

/// Per-frame distribution over a log-spaced pitch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    values: Array2<f64>,
    pub reference_hz: f64,
    pub cents_per_bin: f64,
}

impl Posteriorgram {
    /// Validates and row-normalises `values` (frames × bins) on the default grid.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        Self::with_grid(values, REFERENCE_HZ, CENTS_PER_BIN)
    }

    pub fn with_grid(mut values: Array2<f64>, reference_hz: f64, cents_per_bin: f64) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Shape("posteriorgram needs at least one bin".into()));
        }
        if !(reference_hz > 0.0 && cents_per_bin > 0.0) {
            return Err(Error::OutOfRange("posteriorgram grid parameters".into()));
        }
        for (t, mut row) in values.rows_mut().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("posteriorgram row {t}")));
            }
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::OutOfRange(format!("negative posterior in row {t}")));
            }
            let sum = row.sum();
            if sum <= 0.0 {
                return Err(Error::DegenerateRow { row: t });
            }
            row.mapv_inplace(|v| v / sum);
        }
        Ok(Self {
            values,
            reference_hz,
            cents_per_bin,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        self.reference_hz * 2f64.powf(bin as f64 * self.cents_per_bin / 1200.0)
    }

    /// Largest transition the decoder allows, in bins (exclusive weight-zero edge).
    pub fn max_jump_bins(&self) -> f64 {
        240.0 / self.cents_per_bin
    }
}

/// Per-frame periodicity confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicityTrack {
    pub confidence: Vec<f64>,
}

/// Frequency of `bin` on the default grid.
pub fn bin_to_hz(bin: usize) -> f64 {
    REFERENCE_HZ * 2f64.powf(bin as f64 * CENTS_PER_BIN / 1200.0)
}

/// Fractional bin position of `hz` on the default grid.
pub fn hz_to_bin(hz: f64) -> f64 {
    1200.0 * (hz / REFERENCE_HZ).log2() / CENTS_PER_BIN
}

/// Cumulative-mean-normalised difference function for lags `0..=max_lag`.
fn cmnd(frame: &[f64], max_lag: usize) -> Vec<f64> {
    let w = frame.len() - max_lag - 1;
    let mut d = vec![0.0; max_lag + 1];
    for (tau, slot) in d.iter_mut().enumerate().skip(1) {
        let (a, b) = (&frame[..w], &frame[tau..tau + w]);
        *slot = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    }
    let mut out = vec![1.0; max_lag + 1];
    let mut running = 0.0;
    for tau in 1..=max_lag {
        running += d[tau];
        out[tau] = if running > 1e-12 {
            d[tau] * tau as f64 / running
        } else {
            1.0
        };
    }
    out
}

/// Sub-sample positions and depths of the local minima of `d` over
/// `lo..=hi`, refined by fitting a parabola through each dip.
fn refined_dips(d: &[f64], lo: usize, hi: usize) -> Vec<(f64, f64)> {
    let mut dips = Vec::new();
    for tau in lo.max(2)..hi.min(d.len() - 1) {
        let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
        if !(b < a && b <= c) {
            continue;
        }
        let curv = a - 2.0 * b + c;
        let shift = if curv > 1e-12 { (0.5 * (a - c) / curv).clamp(-0.5, 0.5) } else { 0.0 };
        let depth = b - 0.25 * (a - c) * shift;
        dips.push((tau as f64 + shift, depth.max(0.0)));
    }
    dips
}

/// Discretised threshold prior: `(threshold, probability)` pairs.
fn threshold_prior() -> Vec<(f64, f64)> {
    let (a, b) = THRESHOLD_BETA;
    let pts: Vec<(f64, f64)> = (0..THRESHOLD_STEPS)
        .map(|k| {
            let s = (k as f64 + 0.5) / THRESHOLD_STEPS as f64;
            (s, s.powf(a - 1.0) * (1.0 - s).powf(b - 1.0))
        })
        .collect();
    let z: f64 = pts.iter().map(|p| p.1).sum();
    pts.into_iter().map(|(s, w)| (s, w / z)).collect()
}

/// Probability of each dip (in ascending-lag order) being the pitch period:
/// for each threshold the shortest-lag dip below it takes the threshold's
/// mass; if none is below, the deepest dip takes a small share.
fn dip_masses(dips: &[(f64, f64)], thresholds: &[(f64, f64)]) -> Vec<f64> {
    let mut mass = vec![0.0; dips.len()];
    let Some(deepest) = (0..dips.len()).min_by(|&i, &j| dips[i].1.total_cmp(&dips[j].1)) else {
        return mass;
    };
    for &(s, p) in thresholds {
        match dips.iter().position(|&(_, d)| d < s) {
            Some(i) => mass[i] += p,
            None => mass[deepest] += p * FALLBACK_MASS,
        }
    }
    mass
}

/// Classical stand-in for a neural pitch front-end, after probabilistic YIN:
/// the dips of a YIN-style difference function are refined to sub-sample
/// lags and weighted by the chance that each is the first dip under a
/// threshold drawn from a Beta prior; each dip places a 25-cent Gaussian at
/// its pitch and rows are normalised per frame.
///
/// Placing candidates at the refined dip (rather than reading the difference
/// function off at every bin's lag) keeps the estimate sharp for signals with
/// few harmonics, whose dips are shallow-sided and nearly flat across
/// neighbouring bins. The first-dip rule resolves the equally deep dips an
/// exactly periodic signal has at every multiple of its period.
pub fn candidate_posteriorgram(
    audio: &AudioBuffer,
    grid: &FrameGrid,
) -> Result<(Posteriorgram, HarmonicityTrack)> {
    let sr = audio.sample_rate as f64;
    let window = (ANALYSIS_WINDOW_SECONDS * sr).round() as usize;
    if audio.len() < window {
        return Err(Error::AudioTooShort {
            samples: audio.len(),
            required: window,
        });
    }
    let max_lag = (sr / bin_to_hz(0)).ceil() as usize + 1;
    let min_lag = sr / bin_to_hz(PITCH_BINS - 1);
    if max_lag + 2 >= window {
        return Err(Error::OutOfRange(format!(
            "sample rate {sr} too low for the pitch grid"
        )));
    }
    let sigma_bins = SALIENCE_SPREAD_CENTS / CENTS_PER_BIN;
    let radius = 4.0 * sigma_bins;
    let top = (PITCH_BINS - 1) as f64;
    let thresholds = threshold_prior();

    let mut values = Array2::zeros((grid.frame_count, PITCH_BINS));
    let mut confidence = Vec::with_capacity(grid.frame_count);
    for t in 0..grid.frame_count {
        let frame = grid.centered_window(&audio.samples, t, window);
        let mut dips = if crate::audio::rms(&frame) < SILENCE_RMS {
            Vec::new()
        } else {
            let d = cmnd(&frame, max_lag);
            refined_dips(&d, min_lag.floor() as usize, max_lag)
        };
        // half a bin of slack at the grid edges, as for bin-centre lags
        dips.retain(|&(lag, _)| (-0.5..=top + 0.5).contains(&hz_to_bin(sr / lag)));
        let min_d = dips.iter().map(|&(_, d)| d).fold(1.0, f64::min);
        confidence.push((1.0 - min_d).clamp(0.0, 1.0));

        let mut row = values.row_mut(t);
        let mass = dip_masses(&dips, &thresholds);
        for (&(lag, _), &m) in dips.iter().zip(&mass) {
            if m <= 0.0 {
                continue;
            }
            let pos = hz_to_bin(sr / lag);
            let lo = (pos - radius).ceil().max(0.0) as usize;
            let hi = (pos + radius).floor().min(top) as usize;
            for b in lo..=hi {
                let z = (b as f64 - pos) / sigma_bins;
                row[b] += m * (-0.5 * z * z).exp();
            }
        }
        if row.sum() <= 0.0 {
            row.fill(1.0);
        } else {
            row.mapv_inplace(|v| v + ROW_FLOOR);
        }
    }
    Ok((Posteriorgram::new(values)?, HarmonicityTrack { confidence }))
}

const PGRM_MAGIC: &[u8; 4] = b"PGRM";

/// Serialises a posteriorgram and its confidences in the `PGRM` layout:
/// magic, u32 T, u32 B, f32 reference Hz, f32 cents per bin, T×B f32
/// row-major, T f32 confidences; all little-endian.
pub fn export_posteriorgram(post: &Posteriorgram, conf: &HarmonicityTrack) -> Vec<u8> {
    let (t, b) = post.values.dim();
    let mut out = Vec::with_capacity(20 + 4 * t * (b + 1));
    out.extend_from_slice(PGRM_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    out.extend_from_slice(&(post.reference_hz as f32).to_le_bytes());
    out.extend_from_slice(&(post.cents_per_bin as f32).to_le_bytes());
    for v in post.values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for c in &conf.confidence {
        out.extend_from_slice(&(*c as f32).to_le_bytes());
    }
    out
}

/// Parses a `PGRM` file; rows are renormalised.
pub fn ingest_posteriorgram(bytes: &[u8]) -> Result<(Posteriorgram, HarmonicityTrack)> {
    const KIND: &str = "posteriorgram";
    if bytes.len() < 20 {
        return Err(Error::format(KIND, "truncated header"));
    }
    if &bytes[..4] != PGRM_MAGIC {
        return Err(Error::format(KIND, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let (t, b) = (u32_at(4), u32_at(8));
    let (reference_hz, cents) = (f32_at(12), f32_at(16));
    if t == 0 || b == 0 {
        return Err(Error::Shape(format!("posteriorgram dimensions {t}x{b}")));
    }
    let expected = t
        .checked_mul(b + 1)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(20))
        .ok_or_else(|| Error::Shape("posteriorgram dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::format(
            KIND,
            format!("truncated: {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::Shape(format!(
            "{} trailing bytes after {t}x{b} payload",
            bytes.len() - expected
        )));
    }
    let values = Array2::from_shape_fn((t, b), |(i, j)| f32_at(20 + 4 * (i * b + j)));
    let conf_base = 20 + 4 * t * b;
    let confidence: Vec<f64> = (0..t).map(|i| f32_at(conf_base + 4 * i)).collect();
    if confidence.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
        return Err(Error::OutOfRange("confidence outside [0, 1]".into()));
    }
    let post = Posteriorgram::with_grid(values, reference_hz, cents)?;
    Ok((post, HarmonicityTrack { confidence }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn sine_110_peaks_at_its_bin() {
        let audio = synth::sine(110.0, 0.5, 0.5);
        let (post, conf) = candidate_posteriorgram(&audio, &audio.grid()).unwrap();
        let expected = (1200.0 * (110.0f64 / 32.70).log2() / 20.0).round() as isize;
        assert_eq!(expected, 105);
        for t in 5..post.frames() - 5 {
            let row = post.values().row(t);
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m })
                .0 as isize;
            assert!((arg - expected).abs() <= 1, "frame {t}: {arg}");
            assert!(conf.confidence[t] >= 0.9);
        }
    }

    #[test]
    fn noise_has_low_confidence() {
        let audio = synth::white_noise(1.0, 0.5, 11);
        let (_, conf) = candidate_posteriorgram(&audio, &audio.grid()).unwrap();
        let mean = conf.confidence.iter().sum::<f64>() / conf.confidence.len() as f64;
        assert!(mean <= 0.5, "{mean}");
    }

    #[test]
    fn silence_has_zero_confidence_and_valid_rows() {
        let audio = synth::silence(0.3);
        let (post, conf) = candidate_posteriorgram(&audio, &audio.grid()).unwrap();
        assert!(conf.confidence.iter().all(|&c| c == 0.0));
        for row in post.values().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn short_audio_is_rejected() {
        let audio = synth::silence(0.03);
        assert!(candidate_posteriorgram(&audio, &audio.grid()).is_err());
    }

    #[test]
    fn three_frame_file_ingests() {
        let values = Array2::from_shape_fn((3, PITCH_BINS), |(t, b)| ((t + b) % 7) as f64 + 0.1);
        let post = Posteriorgram::new(values).unwrap();
        let conf = HarmonicityTrack {
            confidence: vec![0.1, 0.5, 0.9],
        };
        let bytes = export_posteriorgram(&post, &conf);
        let (back, back_conf) = ingest_posteriorgram(&bytes).unwrap();
        assert_eq!(back.frames(), 3);
        for (a, b) in back.values().iter().zip(post.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in back_conf.confidence.iter().zip(&conf.confidence) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let mut values = Array2::from_elem((3, PITCH_BINS), 1.0);
        values.row_mut(1).fill(0.0);
        assert!(matches!(
            Posteriorgram::new(values.clone()),
            Err(Error::DegenerateRow { row: 1 })
        ));
        // through the file path too
        let mut bytes = export_posteriorgram(
            &Posteriorgram::new(Array2::from_elem((3, PITCH_BINS), 1.0)).unwrap(),
            &HarmonicityTrack {
                confidence: vec![0.0; 3],
            },
        );
        for b in 0..PITCH_BINS {
            let o = 20 + 4 * (PITCH_BINS + b);
            bytes[o..o + 4].copy_from_slice(&0f32.to_le_bytes());
        }
        assert!(matches!(
            ingest_posteriorgram(&bytes),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let post = Posteriorgram::new(Array2::from_elem((2, 4), 1.0)).unwrap();
        let conf = HarmonicityTrack {
            confidence: vec![0.5; 2],
        };
        let bytes = export_posteriorgram(&post, &conf);
        assert!(matches!(
            ingest_posteriorgram(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(ingest_posteriorgram(&long), Err(Error::Shape(_))));
        let mut neg = bytes.clone();
        neg[20..24].copy_from_slice(&(-1f32).to_le_bytes());
        assert!(matches!(ingest_posteriorgram(&neg), Err(Error::OutOfRange(_))));
    }
}
