//! Turning user edits (drawn segments and locked regions) into a model
//! constraint track.

use serde::{Deserialize, Serialize};

use prosody_core::codec::{QuantGrid, UNVOICED_BIN};
use prosody_core::model::ConstraintTrack;
use prosody_core::pitch::F0Contour;
use prosody_core::{Error, Result};

/// Half-open frame range `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRange {
    pub start_frame: usize,
    pub end_frame: usize,
}

/// User-specified F0 over `[start_frame, end_frame)`, one value per frame.
/// Values at frames the project analysed as unvoiced are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub hz: Vec<f64>,
}

/// The edit part of a generate request; also the CLI constraints file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSpec {
    pub constraints: Vec<ConstraintSegment>,
    pub keep_regions: Vec<FrameRange>,
}

fn check_range(kind: &str, i: usize, start: usize, end: usize, frames: usize) -> Result<()> {
    if start >= end || end > frames {
        return Err(Error::OutOfRange(format!(
            "{kind} {i}: frames [{start}, {end}) not a non-empty range within [0, {frames})"
        )));
    }
    Ok(())
}

impl EditSpec {
    /// Checks ranges, segment lengths and values, and that explicit
    /// segments do not overlap each other.
    pub fn validate(&self, frames: usize) -> Result<()> {
        for (i, r) in self.keep_regions.iter().enumerate() {
            check_range("keep region", i, r.start_frame, r.end_frame, frames)?;
        }
        let mut spans = Vec::new();
        for (i, c) in self.constraints.iter().enumerate() {
            check_range("constraint", i, c.start_frame, c.end_frame, frames)?;
            if c.hz.len() != c.end_frame - c.start_frame {
                return Err(Error::Shape(format!(
                    "constraint {i}: {} values for {} frames",
                    c.hz.len(),
                    c.end_frame - c.start_frame
                )));
            }
            if let Some(v) = c.hz.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("constraint {i} value {v}")));
            }
            spans.push((c.start_frame, c.end_frame, i));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::OutOfRange(format!(
                    "constraints {} and {} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(())
    }

    /// Constraint track for a project with voicing `voiced`: locked regions
    /// take the `working` contour's classes, explicit segments override
    /// them, and unvoiced frames are constrained to class 0.
    pub fn to_track(&self, voiced: &[bool], working: &F0Contour, grid: &QuantGrid) -> Result<ConstraintTrack> {
        let frames = voiced.len();
        if working.len() != frames {
            return Err(Error::Shape(format!(
                "working contour has {} frames, project has {frames}",
                working.len()
            )));
        }
        self.validate(frames)?;
        let mut track = ConstraintTrack::empty(frames);
        let mut set = |t: usize, hz: f64| -> Result<()> {
            track.mask[t] = true;
            track.bins[t] = if !voiced[t] {
                UNVOICED_BIN
            } else if hz > 0.0 {
                grid.bin_of_hz(hz)
            } else {
                return Err(Error::OutOfRange(format!("voiced frame {t} constrained to {hz} Hz")));
            };
            Ok(())
        };
        for r in &self.keep_regions {
            for t in r.start_frame..r.end_frame {
                set(t, working.hz()[t])?;
            }
        }
        for c in &self.constraints {
            for (k, &hz) in c.hz.iter().enumerate() {
                set(c.start_frame + k, hz)?;
            }
        }
        Ok(track)
    }
}
