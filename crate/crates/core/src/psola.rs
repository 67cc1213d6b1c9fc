//! Time-domain pitch-synchronous overlap-add (TD-PSOLA) pitch shifting.
//!
//! Analysis marks sit on the peaks of the waveform low-passed just above the
//! local F0; synthesis re-spaces two-period Hann grains around those marks to
//! the target period and normalises by the summed window envelope. Unvoiced
//! spans are copied through untouched. Durations never change.

use serde::{Deserialize, Serialize};

use crate::audio::{design_lowpass, filter_zero_phase, AudioBuffer, FrameGrid, LowpassDesign};
use crate::error::{Error, Result};
use crate::pitch::F0Contour;

/// Spacing of unvoiced marks, in seconds.
pub const UNVOICED_MARK_SECONDS: f64 = 0.010;
/// Envelope floor used when normalising the overlap-add.
pub const ENVELOPE_FLOOR: f64 = 1e-3;
/// Low-pass cutoff used for mark placement, as a multiple of the region's
/// lowest F0.
const MARK_LOWPASS_RATIO: f64 = 1.5;
/// Allowed deviation of mark spacing from the local period.
const PERIOD_TOLERANCE: f64 = 0.25;

/// Maximal run of equally voiced frames, as a sample span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
    pub voiced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitchMarks {
    /// Strictly increasing sample indices.
    pub marks: Vec<usize>,
    pub voiced: Vec<bool>,
    pub regions: Vec<Region>,
    /// The contour the marks were placed from.
    pub analysis: F0Contour,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisPlan {
    /// Strictly increasing target positions.
    pub target: Vec<usize>,
    pub voiced: Vec<bool>,
    /// Index into the analysis marks for each target mark.
    pub source: Vec<usize>,
}

/// Splits `contour` into voicing runs over `samples` samples; the last run
/// absorbs any trailing partial frame.
pub fn voicing_regions(contour: &F0Contour, grid: &FrameGrid, samples: usize) -> Vec<Region> {
    let mut regions: Vec<Region> = Vec::new();
    for t in 0..contour.len() {
        let v = contour.is_voiced(t);
        let (s, e) = (t * grid.hop, (t + 1) * grid.hop);
        match regions.last_mut() {
            Some(r) if r.voiced == v => r.end = e,
            _ => regions.push(Region { start: s, end: e, voiced: v }),
        }
    }
    if let Some(r) = regions.last_mut() {
        r.end = r.end.max(samples);
    }
    regions
}

fn check_cover(audio: &AudioBuffer, contour: &F0Contour) -> Result<FrameGrid> {
    let grid = audio.grid();
    if contour.len() != grid.frame_count {
        return Err(Error::Shape(format!(
            "contour has {} frames, audio has {}",
            contour.len(),
            grid.frame_count
        )));
    }
    Ok(grid)
}

fn frame_hz(contour: &F0Contour, grid: &FrameGrid, sample: usize) -> f64 {
    let t = grid.frame_of_sample(sample).min(contour.len() - 1);
    contour.hz()[t]
}

fn argmax_in(x: &[f64], lo: usize, hi: usize) -> usize {
    (lo..hi).fold(lo, |best, i| if x[i] > x[best] { i } else { best })
}

/// Places analysis marks: peaks of the low-passed waveform one local period
/// (±25%) apart inside voiced runs, every 10 ms inside unvoiced runs.
pub fn detect_pitch_marks(audio: &AudioBuffer, contour: &F0Contour) -> Result<PitchMarks> {
    let grid = check_cover(audio, contour)?;
    let sr = audio.sample_rate as f64;
    let regions = voicing_regions(contour, &grid, audio.len());
    let mut marks = Vec::new();
    let mut voiced = Vec::new();
    let unvoiced_step = (UNVOICED_MARK_SECONDS * sr).round() as usize;
    for r in &regions {
        if !r.voiced {
            for m in (r.start..r.end).step_by(unvoiced_step) {
                marks.push(m);
                voiced.push(false);
            }
            continue;
        }
        let first = r.start / grid.hop;
        let last = (r.end / grid.hop).min(contour.len());
        let min_f0 = contour.hz()[first..last].iter().copied().fold(f64::INFINITY, f64::min);
        let design = LowpassDesign {
            cutoff_hz: (MARK_LOWPASS_RATIO * min_f0).min(0.45 * sr),
            transition_hz: 0.5 * min_f0,
            attenuation_db: 40.0,
        };
        let taps = design_lowpass(design, audio.sample_rate);
        // Filter with margin so the region edges see real neighbours.
        let pad = taps.len() / 2;
        let lo = r.start.saturating_sub(pad);
        let hi = (r.end + pad).min(audio.len());
        let smooth = filter_zero_phase(&audio.samples[lo..hi], &taps);
        let x = &smooth[r.start - lo..r.end - lo];
        let period = |at: usize| sr / frame_hz(contour, &grid, at);
        let p0 = period(r.start).round() as usize;
        let mut m = argmax_in(x, 0, p0.clamp(1, x.len()));
        loop {
            if marks.last().is_some_and(|&prev| prev >= r.start + m) {
                break;
            }
            marks.push(r.start + m);
            voiced.push(true);
            let p = period(r.start + m);
            let lo = m + ((1.0 - PERIOD_TOLERANCE) * p).round().max(1.0) as usize;
            let hi = (m + ((1.0 + PERIOD_TOLERANCE) * p).round() as usize + 1).min(x.len());
            if lo >= hi {
                break;
            }
            let peak = argmax_in(x, lo, hi);
            m = align_to_previous(&audio.samples[r.start..r.end], m, peak, p);
        }
    }
    Ok(PitchMarks {
        marks,
        voiced,
        regions,
        analysis: contour.clone(),
        sample_rate: audio.sample_rate,
    })
}

/// Moves `cand` by a few samples so the waveform around it best matches the
/// waveform around `prev` (normalised cross-correlation over one period).
/// Low-pass peaks alone drift in phase when the period is not a whole number
/// of samples; this keeps successive marks on the same point of the cycle.
fn align_to_previous(x: &[f64], prev: usize, cand: usize, period: f64) -> usize {
    let half = (period / 2.0).round() as isize;
    let reach = ((period * 0.1).round() as isize).max(2);
    let at = |i: isize| -> Option<f64> { (i >= 0 && (i as usize) < x.len()).then(|| x[i as usize]) };
    let mut best = (f64::NEG_INFINITY, cand);
    for d in -reach..=reach {
        let c = cand as isize + d;
        if c <= prev as isize {
            continue;
        }
        let (mut xy, mut yy) = (0.0, 0.0);
        for k in -half..=half {
            if let (Some(a), Some(b)) = (at(prev as isize + k), at(c + k)) {
                xy += a * b;
                yy += b * b;
            }
        }
        let score = if yy > 0.0 { xy / yy.sqrt() } else { f64::NEG_INFINITY };
        if score > best.0 {
            best = (score, c as usize);
        }
    }
    best.1
}

/// Indices of the marks inside `r`.
fn marks_in(marks: &PitchMarks, r: &Region) -> std::ops::Range<usize> {
    let a = marks.marks.partition_point(|&m| m < r.start);
    let b = marks.marks.partition_point(|&m| m < r.end);
    a..b
}

/// Local analysis period around position `pos` from the spacing of the
/// surrounding marks `ms` (falls back to `fallback` for a lone mark).
fn local_spacing(ms: &[usize], pos: f64, fallback: f64) -> f64 {
    if ms.len() < 2 {
        return fallback;
    }
    let i = ms.partition_point(|&m| (m as f64) <= pos);
    let i = i.clamp(1, ms.len() - 1);
    (ms[i] - ms[i - 1]) as f64
}

fn nearest(ms: &[usize], pos: usize) -> usize {
    let i = ms.partition_point(|&m| m < pos);
    if i == 0 {
        0
    } else if i == ms.len() || pos - ms[i - 1] <= ms[i] - pos {
        i - 1
    } else {
        i
    }
}

/// Lays target marks through each voiced run, stepping by the local analysis
/// mark spacing scaled by `analysis_hz / target_hz` (i.e. the target period
/// measured in the analysis' own period units), starting at the run's first
/// analysis mark. Each target mark takes its grain from the nearest analysis
/// mark in the same run. Unvoiced marks are copied.
pub fn plan_marks(marks: &PitchMarks, target: &F0Contour, sample_rate: u32) -> Result<SynthesisPlan> {
    if sample_rate != marks.sample_rate {
        return Err(Error::Config(format!(
            "plan at {sample_rate} Hz for marks at {} Hz",
            marks.sample_rate
        )));
    }
    if target.len() != marks.analysis.len() {
        return Err(Error::Shape(format!(
            "target has {} frames, analysis {}",
            target.len(),
            marks.analysis.len()
        )));
    }
    if let Some(t) = (0..target.len()).find(|&t| target.is_voiced(t) != marks.analysis.is_voiced(t)) {
        return Err(Error::VuvMismatch { frame: t });
    }
    let grid = FrameGrid::with_frames(target.len(), sample_rate);
    let sr = sample_rate as f64;
    let mut plan = SynthesisPlan {
        target: Vec::new(),
        voiced: Vec::new(),
        source: Vec::new(),
    };
    for r in &marks.regions {
        let range = marks_in(marks, r);
        if !r.voiced || range.is_empty() {
            for i in range {
                plan.target.push(marks.marks[i]);
                plan.voiced.push(marks.voiced[i]);
                plan.source.push(i);
            }
            continue;
        }
        let ms = &marks.marks[range.clone()];
        let step_at = |pos: f64| {
            let s = (pos.max(0.0) as usize).min(r.end - 1);
            let ha = frame_hz(&marks.analysis, &grid, s);
            let ht = frame_hz(target, &grid, s);
            local_spacing(ms, pos, sr / ha) * ha / ht
        };
        let last = *ms.last().expect("nonempty") as f64;
        let mut pos = ms[0] as f64;
        while pos < r.end as f64 {
            // Past the last analysis mark by more than half a step there is
            // no grain near enough to use.
            if pos > last + 0.5 * step_at(last) {
                break;
            }
            let p = pos.round() as usize;
            pos += step_at(pos);
            if plan.target.last().is_some_and(|&q| q >= p) {
                continue;
            }
            plan.target.push(p);
            plan.voiced.push(true);
            plan.source.push(range.start + nearest(ms, p));
        }
    }
    Ok(plan)
}

/// Half-width of the grain around analysis mark `i`: the mean distance to
/// its voiced neighbours in the same run.
fn grain_half_width(marks: &PitchMarks, i: usize) -> usize {
    let m = &marks.marks;
    let same = |j: usize| {
        marks.voiced[j] && marks.regions.iter().any(|r| r.start <= m[i] && m[i] < r.end && r.start <= m[j] && m[j] < r.end)
    };
    let prev = (i > 0 && same(i - 1)).then(|| m[i] - m[i - 1]);
    let next = (i + 1 < m.len() && same(i + 1)).then(|| m[i + 1] - m[i]);
    let p = match (prev, next) {
        (Some(a), Some(b)) => (a + b) as f64 / 2.0,
        (Some(a), None) | (None, Some(a)) => a as f64,
        (None, None) => {
            let grid = FrameGrid::with_frames(marks.analysis.len(), marks.sample_rate);
            marks.sample_rate as f64 / frame_hz(&marks.analysis, &grid, m[i])
        }
    };
    p.round().max(1.0) as usize
}

/// Overlap-adds two-period Hann grains at the target marks within voiced
/// runs and copies unvoiced runs verbatim.
pub fn synthesize(audio: &AudioBuffer, marks: &PitchMarks, plan: &SynthesisPlan) -> Result<AudioBuffer> {
    if plan.source.iter().any(|&s| s >= marks.marks.len()) {
        return Err(Error::OutOfRange("plan refers to a missing analysis mark".into()));
    }
    let n = audio.len();
    let x = &audio.samples;
    let mut acc = vec![0.0; n];
    let mut env = vec![0.0; n];
    for ((&t, &s), &v) in plan.target.iter().zip(&plan.source).zip(&plan.voiced) {
        if !v {
            continue;
        }
        let src = marks.marks[s];
        let p = grain_half_width(marks, s) as isize;
        for tau in -p + 1..p {
            let (si, ti) = (src as isize + tau, t as isize + tau);
            if si < 0 || ti < 0 || si >= n as isize || ti >= n as isize {
                continue;
            }
            let w = 0.5 * (1.0 + (std::f64::consts::PI * tau as f64 / p as f64).cos());
            acc[ti as usize] += w * x[si as usize];
            env[ti as usize] += w;
        }
    }
    let mut out = x.clone();
    for r in marks.regions.iter().filter(|r| r.voiced) {
        if marks_in(marks, r).is_empty() {
            continue;
        }
        for i in r.start..r.end.min(n) {
            out[i] = (acc[i] / env[i].max(ENVELOPE_FLOOR)).clamp(-1.0, 1.0);
        }
    }
    AudioBuffer::new(out, audio.sample_rate)
}

/// Detect, plan and synthesise in one call.
pub fn shift_to_contour(audio: &AudioBuffer, analysis: &F0Contour, target: &F0Contour) -> Result<AudioBuffer> {
    let marks = detect_pitch_marks(audio, analysis)?;
    let plan = plan_marks(&marks, target, audio.sample_rate)?;
    synthesize(audio, &marks, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn constant(frames: usize, hz: f64) -> F0Contour {
        F0Contour::new(vec![hz; frames], vec![true; frames]).unwrap()
    }

    #[test]
    fn pulse_train_marks_are_one_period_apart() {
        let a = synth::pulse_train(1.0, 0.5, |_| 200.0);
        let marks = detect_pitch_marks(&a, &constant(100, 200.0)).unwrap();
        let gaps: Vec<usize> = marks.marks.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.len() > 150);
        for g in &gaps[5..gaps.len() - 5] {
            assert!((76..=84).contains(g), "gap {g}");
        }
    }

    #[test]
    fn unvoiced_marks_every_ten_ms() {
        let a = synth::silence(0.5);
        let marks = detect_pitch_marks(&a, &F0Contour::unvoiced(50)).unwrap();
        assert_eq!(marks.marks, (0..50).map(|k| k * 160).collect::<Vec<_>>());
        assert!(marks.voiced.iter().all(|v| !v));
        let plan = plan_marks(&marks, &F0Contour::unvoiced(50), 16_000).unwrap();
        assert_eq!(plan.target, marks.marks);
        let out = synthesize(&a, &marks, &plan).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn identity_plan_reuses_analysis_marks() {
        let a = synth::vowel(0.6, 0.5, |_| 200.0);
        let c = constant(60, 200.0);
        let marks = detect_pitch_marks(&a, &c).unwrap();
        let plan = plan_marks(&marks, &c, 16_000).unwrap();
        for (&t, &s) in plan.target.iter().zip(&plan.source) {
            assert!((t as f64 - marks.marks[s] as f64).abs() <= 40.0);
        }
        let out = synthesize(&a, &marks, &plan).unwrap();
        let err: f64 = out.samples.iter().zip(&a.samples).map(|(x, y)| (x - y).powi(2)).sum();
        let sig: f64 = a.samples.iter().map(|x| x * x).sum();
        assert!(10.0 * (sig / err.max(1e-300)).log10() > 20.0);
    }

    #[test]
    fn octave_up_doubles_mark_density() {
        let a = synth::vowel(0.5, 0.5, |_| 150.0);
        let c = constant(50, 150.0);
        let marks = detect_pitch_marks(&a, &c).unwrap();
        let plan = plan_marks(&marks, &constant(50, 300.0), 16_000).unwrap();
        let ratio = plan.target.len() as f64 / marks.marks.len() as f64;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        for w in plan.source.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn voicing_mismatch_is_rejected() {
        let a = synth::vowel(0.3, 0.5, |_| 200.0);
        let c = constant(30, 200.0);
        let marks = detect_pitch_marks(&a, &c).unwrap();
        let mut v = vec![true; 30];
        v[4] = false;
        let bad = F0Contour::new(vec![200.0; 30], v).unwrap();
        assert!(matches!(plan_marks(&marks, &bad, 16_000), Err(Error::VuvMismatch { frame: 4 })));
    }
}
