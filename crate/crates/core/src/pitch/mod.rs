//! Pitch posteriorgrams, constrained Viterbi decoding, hysteresis voicing and
//! per-speaker log-F0 statistics.

mod posteriorgram;
mod viterbi;

pub use posteriorgram::{
    bin_to_hz, candidate_posteriorgram, export_posteriorgram, hz_to_bin, ingest_posteriorgram,
    HarmonicityTrack, Posteriorgram, ANALYSIS_WINDOW_SECONDS, CENTS_PER_BIN, PITCH_BINS,
    REFERENCE_HZ,
};
pub use viterbi::{log_transitions, transition_weight, viterbi_decode, OBSERVATION_FLOOR};

use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, HOP_SECONDS};
use crate::error::{Error, Result};

pub const DEFAULT_T_HIGH: f64 = 0.6;
pub const DEFAULT_T_LOW: f64 = 0.4;
pub const SIGMA_FLOOR: f64 = 0.05;

/// Per-frame F0 with voicing flags. Unvoiced frames may carry any positive
/// value, which downstream code ignores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContourRecord", into = "ContourRecord")]
pub struct F0Contour {
    hz: Vec<f64>,
    voiced: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ContourRecord {
    hop_seconds: f64,
    hz: Vec<f64>,
    voiced: Vec<bool>,
}

impl TryFrom<ContourRecord> for F0Contour {
    type Error = Error;

    fn try_from(r: ContourRecord) -> Result<Self> {
        if (r.hop_seconds - HOP_SECONDS).abs() > 1e-9 {
            return Err(Error::format(
                "contour",
                format!("hop {} s, expected {HOP_SECONDS}", r.hop_seconds),
            ));
        }
        F0Contour::new(r.hz, r.voiced)
    }
}

impl From<F0Contour> for ContourRecord {
    fn from(c: F0Contour) -> Self {
        ContourRecord {
            hop_seconds: HOP_SECONDS,
            hz: c.hz,
            voiced: c.voiced,
        }
    }
}

impl F0Contour {
    pub fn new(hz: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        if hz.len() != voiced.len() {
            return Err(Error::Shape(format!(
                "contour has {} values and {} voicing flags",
                hz.len(),
                voiced.len()
            )));
        }
        for (t, (&f, &v)) in hz.iter().zip(&voiced).enumerate() {
            if v && !(f.is_finite() && f > 0.0) {
                return Err(Error::OutOfRange(format!("voiced frame {t} has F0 {f}")));
            }
        }
        Ok(Self { hz, voiced })
    }

    pub fn unvoiced(frames: usize) -> Self {
        Self {
            hz: vec![0.0; frames],
            voiced: vec![false; frames],
        }
    }

    pub fn len(&self) -> usize {
        self.hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hz.is_empty()
    }

    pub fn hz(&self) -> &[f64] {
        &self.hz
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn is_voiced(&self, t: usize) -> bool {
        self.voiced[t]
    }

    /// F0 at a voiced frame, `None` when unvoiced.
    pub fn voiced_hz(&self, t: usize) -> Option<f64> {
        self.voiced[t].then_some(self.hz[t])
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|v| **v).count()
    }

    /// `log2(hz)` for every voiced frame, in frame order.
    pub fn voiced_log2(&self) -> impl Iterator<Item = f64> + '_ {
        self.hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, v)| **v)
            .map(|(f, _)| f.log2())
    }

    /// Replaces voiced values through `f`, leaving voicing untouched.
    pub fn map_voiced(&self, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        let hz = self
            .hz
            .iter()
            .enumerate()
            .map(|(t, &h)| if self.voiced[t] { f(t, h) } else { h })
            .collect();
        Self::new(hz, self.voiced.clone())
    }
}

/// Mean and (floored) standard deviation of a speaker's voiced `log2(F0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub mu: f64,
    pub sigma: f64,
    pub frame_count: usize,
}

impl SpeakerStats {
    pub fn new(mu: f64, sigma: f64, frame_count: usize) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("speaker statistics".into()));
        }
        Ok(Self {
            mu,
            sigma: sigma.max(SIGMA_FLOOR),
            frame_count,
        })
    }
}

pub fn speaker_stats<'a>(contours: impl IntoIterator<Item = &'a F0Contour>) -> Result<SpeakerStats> {
    let logs: Vec<f64> = contours
        .into_iter()
        .flat_map(|c| c.voiced_log2())
        .collect();
    if logs.is_empty() {
        return Err(Error::NoVoicedFrames);
    }
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
    SpeakerStats::new(mu, var.sqrt(), logs.len())
}

/// Two-threshold voicing: a frame is voiced when it lies in a run of frames at
/// or above `t_low` that contains at least one frame at or above `t_high`.
pub fn vuv_from_confidence(conf: &HarmonicityTrack, t_high: f64, t_low: f64) -> Result<Vec<bool>> {
    if !(0.0 <= t_low && t_low <= t_high && t_high <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "hysteresis thresholds need 0 <= low ({t_low}) <= high ({t_high}) <= 1"
        )));
    }
    let c = &conf.confidence;
    let mut voiced = vec![false; c.len()];
    let mut start = 0;
    while start < c.len() {
        if c[start] < t_low {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < c.len() && c[end] >= t_low {
            end += 1;
        }
        if c[start..end].iter().any(|&v| v >= t_high) {
            voiced[start..end].iter_mut().for_each(|v| *v = true);
        }
        start = end;
    }
    Ok(voiced)
}

/// Hysteresis thresholds used by [`analyze`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoicingThresholds {
    pub t_high: f64,
    pub t_low: f64,
}

impl Default for VoicingThresholds {
    fn default() -> Self {
        Self {
            t_high: DEFAULT_T_HIGH,
            t_low: DEFAULT_T_LOW,
        }
    }
}

/// Intermediate products of [`analyze`], kept for export.
#[derive(Debug, Clone)]
pub struct PitchAnalysis {
    pub contour: F0Contour,
    pub posteriorgram: Posteriorgram,
    pub confidence: HarmonicityTrack,
    pub path: Vec<usize>,
}

pub fn analyze_detailed(audio: &AudioBuffer, thresholds: VoicingThresholds) -> Result<PitchAnalysis> {
    let grid = audio.grid();
    let (post, conf) = candidate_posteriorgram(audio, &grid)?;
    decode_posteriorgram(post, conf, thresholds)
}

/// Decodes an already computed (or ingested) posteriorgram into a contour.
pub fn decode_posteriorgram(
    post: Posteriorgram,
    conf: HarmonicityTrack,
    thresholds: VoicingThresholds,
) -> Result<PitchAnalysis> {
    if conf.confidence.len() != post.frames() {
        return Err(Error::Shape(format!(
            "{} confidences for {} frames",
            conf.confidence.len(),
            post.frames()
        )));
    }
    let voiced = vuv_from_confidence(&conf, thresholds.t_high, thresholds.t_low)?;
    let path = if post.frames() == 0 {
        Vec::new()
    } else {
        viterbi_decode(&post)?
    };
    let hz = path.iter().map(|&b| post.bin_hz(b)).collect();
    Ok(PitchAnalysis {
        contour: F0Contour::new(hz, voiced)?,
        posteriorgram: post,
        confidence: conf,
        path,
    })
}

/// F0 contour of `audio` on its 10 ms grid.
pub fn analyze(audio: &AudioBuffer, thresholds: VoicingThresholds) -> Result<F0Contour> {
    Ok(analyze_detailed(audio, thresholds)?.contour)
}

/// Pitch distance in cents.
pub fn cents(a_hz: f64, b_hz: f64) -> f64 {
    1200.0 * (a_hz / b_hz).log2()
}
