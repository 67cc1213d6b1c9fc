//! Non-neural F0 generators: monotone, word swapping, word replacement from
//! a contour bank, and a template-based repunctuation heuristic.
//!
//! Every generator keeps the voicing mask. Word operations act on the voiced
//! frames of each word only, stretching segments of different lengths by
//! linear interpolation in `log2(Hz)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{FrameGrid, CANONICAL_RATE};
use crate::error::{Error, Result};
use crate::features::Alignment;
use crate::neural::RngStream;
use crate::pitch::{F0Contour, SpeakerStats};

/// Span of the heuristic templates in standard deviations.
pub const TEMPLATE_SIGMAS: f64 = 2.0;

/// Every voiced frame at the speaker mean `2^mu`.
pub fn monotone(contour: &F0Contour, stats: &SpeakerStats) -> F0Contour {
    let hz = stats.mu.exp2();
    contour.map_voiced(|_, _| hz).expect("positive constant")
}

/// Linear interpolation of `src` onto `len` points with matching endpoints.
/// A single output point takes the middle of `src`.
pub fn resample_linear(src: &[f64], len: usize) -> Vec<f64> {
    if len == 0 || src.is_empty() {
        return Vec::new();
    }
    let n = src.len();
    (0..len)
        .map(|j| {
            let pos = if len == 1 {
                (n - 1) as f64 / 2.0
            } else {
                j as f64 * (n - 1) as f64 / (len - 1) as f64
            };
            let i = (pos.floor() as usize).min(n - 1);
            let frac = pos - i as f64;
            if i + 1 < n {
                src[i] * (1.0 - frac) + src[i + 1] * frac
            } else {
                src[i]
            }
        })
        .collect()
}

fn grid_for(contour: &F0Contour) -> FrameGrid {
    FrameGrid::with_frames(contour.len(), CANONICAL_RATE)
}

/// Voiced frame indices of each word, in time order.
pub fn word_voiced_frames(contour: &F0Contour, align: &Alignment) -> Vec<Vec<usize>> {
    let grid = grid_for(contour);
    (0..align.words.len())
        .map(|w| {
            align
                .word_frames(w, &grid)
                .filter(|&t| contour.is_voiced(t))
                .collect()
        })
        .collect()
}

fn log2_at(contour: &F0Contour, frames: &[usize]) -> Vec<f64> {
    frames.iter().map(|&t| contour.hz()[t].log2()).collect()
}

/// Writes `segment` (log2 Hz), stretched to fit, onto `frames` of `hz`.
fn imprint(hz: &mut [f64], frames: &[usize], segment: &[f64]) {
    for (&t, v) in frames.iter().zip(resample_linear(segment, frames.len())) {
        hz[t] = v.exp2();
    }
}

/// Gives each word the contour of another word under a uniformly random
/// permutation. A word whose source has no voiced frames keeps its own values.
pub fn swap_words(contour: &F0Contour, align: &Alignment, rng: &mut RngStream) -> Result<F0Contour> {
    if align.words.is_empty() {
        return Err(Error::Alignment("swap_words needs at least one word".into()));
    }
    let frames = word_voiced_frames(contour, align);
    let perm = rng.permutation(frames.len());
    let mut hz = contour.hz().to_vec();
    for (w, &src) in perm.iter().enumerate() {
        if frames[src].len() == frames[w].len() {
            // Equal lengths: copy values verbatim (no log/exp rounding).
            for (&dst, &from) in frames[w].iter().zip(&frames[src]) {
                hz[dst] = contour.hz()[from];
            }
        } else if !frames[src].is_empty() {
            imprint(&mut hz, &frames[w], &log2_at(contour, &frames[src]));
        }
    }
    F0Contour::new(hz, contour.voiced().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub speaker: String,
    pub word: String,
    /// Voiced-frame contour in log2 Hz.
    pub log2_hz: Vec<f64>,
}

/// Word-level contour segments collected from a speaker's utterances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordContourBank {
    pub entries: Vec<BankEntry>,
}

impl WordContourBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        if entry.log2_hz.is_empty() {
            return Err(Error::OutOfRange(format!("empty segment for word {:?}", entry.word)));
        }
        if entry.log2_hz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("segment for word {:?}", entry.word)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Adds every word of an utterance that has voiced frames.
    pub fn add_utterance(&mut self, speaker: &str, contour: &F0Contour, align: &Alignment) -> Result<()> {
        for (w, frames) in word_voiced_frames(contour, align).iter().enumerate() {
            if frames.is_empty() {
                continue;
            }
            self.push(BankEntry {
                speaker: speaker.to_string(),
                word: align.words[w].text.clone(),
                log2_hz: log2_at(contour, frames),
            })?;
        }
        Ok(())
    }

    pub fn for_speaker<'a>(&'a self, speaker: &'a str) -> impl Iterator<Item = &'a BankEntry> + 'a {
        self.entries.iter().filter(move |e| e.speaker == speaker)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: Self = serde_json::from_str(text)?;
        let mut checked = Self::new();
        for e in bank.entries {
            checked.push(e)?;
        }
        Ok(checked)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Replaces each word's voiced contour with an independently drawn bank
/// segment from the same speaker.
pub fn replace_words(
    contour: &F0Contour,
    align: &Alignment,
    bank: &WordContourBank,
    speaker: &str,
    rng: &mut RngStream,
) -> Result<F0Contour> {
    let pool: Vec<&BankEntry> = bank.for_speaker(speaker).collect();
    if pool.is_empty() {
        return Err(Error::EmptyBank(speaker.to_string()));
    }
    let mut hz = contour.hz().to_vec();
    for frames in word_voiced_frames(contour, align) {
        let entry = pool[rng.below(pool.len())];
        imprint(&mut hz, &frames, &entry.log2_hz);
    }
    F0Contour::new(hz, contour.voiced().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PunctuationTarget {
    Question,
    Statement,
}

impl std::str::FromStr for PunctuationTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "question" => Ok(Self::Question),
            "statement" => Ok(Self::Statement),
            other => Err(Error::Config(format!("unknown punctuation target {other:?}"))),
        }
    }
}

/// Overwrites the voiced frames of the last two words with a linear ramp from
/// `mu` to `mu ± 2σ` (rise for questions, fall for statements).
pub fn repunctuate_heuristic(
    contour: &F0Contour,
    align: &Alignment,
    target: PunctuationTarget,
    stats: &SpeakerStats,
) -> Result<F0Contour> {
    let n = align.words.len();
    if n < 2 {
        return Err(Error::Alignment(format!("repunctuation needs two words, got {n}")));
    }
    let words = word_voiced_frames(contour, align);
    let frames: Vec<usize> = words[n - 2..].concat();
    let sign = match target {
        PunctuationTarget::Question => 1.0,
        PunctuationTarget::Statement => -1.0,
    };
    let end = stats.mu + sign * TEMPLATE_SIGMAS * stats.sigma;
    let mut hz = contour.hz().to_vec();
    imprint(&mut hz, &frames, &[stats.mu, end]);
    F0Contour::new(hz, contour.voiced().to_vec())
}
