//! Objective metrics (log2 pitch RMSE, per-frame NLL, V/UV precision and
//! recall), the low-pass listening stimulus, and a corpus-level evaluation
//! run that writes a per-utterance CSV and an aggregate JSON report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{lowpass_render, AudioBuffer};
use crate::baselines::{
    monotone, replace_words, repunctuate_heuristic, swap_words, PunctuationTarget, WordContourBank,
};
use crate::codec::{quantize, QuantGrid, QuantizedF0, N_CLASSES};
use crate::corpus::{corpus_stats, CorpusManifest, LoadedUtterance};
use crate::error::{Error, Result};
use crate::features::assemble_features;
use crate::model::{ConstraintTrack, ContextBundle, Mode, Model};
use crate::neural::RngStream;
use crate::pitch::{F0Contour, SpeakerStats};

/// Hz added to the contour maximum to get the stimulus cutoff.
pub const STIMULUS_MARGIN_HZ: f64 = 10.0;

/// A metric value with the number of frames behind it. `degenerate` is set
/// when no frame qualified and the value is the declared fallback of 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub frames: usize,
    pub degenerate: bool,
}

impl Metric {
    fn from_sum(sum: f64, frames: usize) -> Self {
        if frames == 0 {
            Metric {
                value: 0.0,
                frames: 0,
                degenerate: true,
            }
        } else {
            Metric {
                value: sum / frames as f64,
                frames,
                degenerate: false,
            }
        }
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} frames")));
    }
    Ok(())
}

/// Root mean square of `log2(hyp) − log2(ref)` over frames voiced in both.
pub fn rmse(reference: &F0Contour, hypothesis: &F0Contour) -> Result<Metric> {
    check_len("rmse", reference.len(), hypothesis.len())?;
    let (mut sum, mut n) = (0.0, 0);
    for t in 0..reference.len() {
        if let (Some(r), Some(h)) = (reference.voiced_hz(t), hypothesis.voiced_hz(t)) {
            let d = h.log2() - r.log2();
            sum += d * d;
            n += 1;
        }
    }
    let mut m = Metric::from_sum(sum, n);
    m.value = m.value.sqrt();
    Ok(m)
}

/// Mean over voiced frames of `−log softmax(post_logits[t])[reference[t]]`.
pub fn nll(post_logits: ArrayView2<f64>, reference: &QuantizedF0, voiced: &[bool]) -> Result<Metric> {
    check_len("nll logits", post_logits.nrows(), reference.len())?;
    check_len("nll voicing", voiced.len(), reference.len())?;
    if post_logits.ncols() != N_CLASSES {
        return Err(Error::Shape(format!("nll: {} classes, expected {N_CLASSES}", post_logits.ncols())));
    }
    let (mut sum, mut n) = (0.0, 0);
    for (t, row) in post_logits.rows().into_iter().enumerate() {
        if !voiced[t] {
            continue;
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        sum += lse - row[reference.bins[t] as usize];
        n += 1;
    }
    Ok(Metric::from_sum(sum, n))
}

/// `(precision, recall)` with voiced as the positive class; an empty
/// denominator yields 1.0.
pub fn vuv_prf(reference: &[bool], hypothesis: &[bool]) -> Result<(f64, f64)> {
    check_len("vuv", reference.len(), hypothesis.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&r, &h) in reference.iter().zip(hypothesis) {
        match (r, h) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fn_)))
}

/// Cutoff of the listening stimulus: highest voiced F0 plus 10 Hz.
pub fn stimulus_cutoff(contour: &F0Contour) -> Result<f64> {
    (0..contour.len())
        .filter_map(|t| contour.voiced_hz(t))
        .reduce(f64::max)
        .map(|m| m + STIMULUS_MARGIN_HZ)
        .ok_or(Error::NoVoicedFrames)
}

/// Zero-phase low-pass of `audio` just above the contour's maximum F0, so
/// listeners hear intonation without segmental content.
pub fn make_lowpass_stimulus(audio: &AudioBuffer, contour: &F0Contour) -> Result<AudioBuffer> {
    lowpass_render(audio, stimulus_cutoff(contour)?)
}

/// A source of hypothesis contours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// The reference itself.
    Identity,
    /// Speaker mean at every voiced frame.
    Monotone,
    /// Word contours exchanged under a random permutation.
    Swap,
    /// Words replaced from a contour bank; the corpus itself when no bank is given.
    Replace {
        #[serde(default)]
        bank: Option<PathBuf>,
    },
    /// Template ramp over the last two words.
    Repunct { target: PunctuationTarget },
    /// Free-running generation from a checkpoint, no constraints or context.
    Model {
        checkpoint: PathBuf,
        #[serde(default = "one")]
        temperature: f64,
    },
    /// Precomputed contours `<dir>/<utterance id>.json`.
    Contours { dir: PathBuf },
}

fn one() -> f64 {
    1.0
}

impl SystemSpec {
    pub fn label(&self) -> String {
        match self {
            SystemSpec::Identity => "identity".into(),
            SystemSpec::Monotone => "monotone".into(),
            SystemSpec::Swap => "swap".into(),
            SystemSpec::Replace { .. } => "replace".into(),
            SystemSpec::Repunct { target } => match target {
                PunctuationTarget::Question => "repunct_question".into(),
                PunctuationTarget::Statement => "repunct_statement".into(),
            },
            SystemSpec::Model { checkpoint, .. } => format!(
                "model:{}",
                checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint")
            ),
            SystemSpec::Contours { dir } => format!("contours:{}", dir.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub systems: Vec<SystemSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl EvalConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Metrics of one system on one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub utterance: String,
    pub system: String,
    pub frames: usize,
    pub voiced_frames: usize,
    pub mutual_voiced_frames: usize,
    pub rmse_log2: f64,
    pub nll: Option<f64>,
    pub vuv_precision: f64,
    pub vuv_recall: f64,
    /// Set when a metric fell back to its degenerate value.
    pub warning: bool,
}

/// Column order of the per-utterance CSV.
pub const CSV_COLUMNS: [&str; 10] = [
    "utterance",
    "system",
    "frames",
    "voiced_frames",
    "mutual_voiced_frames",
    "rmse_log2",
    "nll",
    "vuv_precision",
    "vuv_recall",
    "warning",
];

/// Frame-weighted aggregate of one system. RMSE pools squared errors over
/// mutually voiced frames (the frame-weighted mean is taken before the root);
/// NLL is weighted by voiced frames, V/UV scores by total frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemAggregate {
    pub system: String,
    pub utterances: usize,
    pub frames: usize,
    pub voiced_frames: usize,
    pub mutual_voiced_frames: usize,
    pub rmse_log2: f64,
    pub nll: Option<f64>,
    pub vuv_precision: f64,
    pub vuv_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub utterance: String,
    /// Empty when the utterance itself could not be loaded.
    pub system: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `<checkpoint stem>@<sha256 prefix>` for every model system.
    pub model_ids: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub aggregate: Vec<SystemAggregate>,
    pub per_utterance: Vec<UtteranceResult>,
    pub exclusions: Vec<Exclusion>,
    /// True when anything was excluded.
    pub partial: bool,
}

/// System state shared across utterances (loaded checkpoints and banks).
enum Prepared {
    Identity,
    Monotone,
    Swap,
    Replace(WordContourBank),
    Repunct(PunctuationTarget),
    Model { model: Box<Model>, temperature: f64 },
    Contours(PathBuf),
}

fn prepare_system(
    spec: &SystemSpec,
    manifest: &CorpusManifest,
    utts: &[LoadedUtterance],
) -> Result<(Prepared, Option<String>)> {
    Ok(match spec {
        SystemSpec::Identity => (Prepared::Identity, None),
        SystemSpec::Monotone => (Prepared::Monotone, None),
        SystemSpec::Swap => (Prepared::Swap, None),
        SystemSpec::Replace { bank } => {
            let bank = match bank {
                Some(p) => WordContourBank::load(manifest.resolve(p))?,
                None => {
                    let mut b = WordContourBank::new();
                    for u in utts {
                        b.add_utterance(&u.speaker, &u.reference, &u.alignment)?;
                    }
                    b
                }
            };
            (Prepared::Replace(bank), None)
        }
        SystemSpec::Repunct { target } => (Prepared::Repunct(*target), None),
        SystemSpec::Model {
            checkpoint,
            temperature,
        } => {
            let path = manifest.resolve(checkpoint);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let model = Model::from_bytes(&bytes)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            let id = format!("{stem}@{}", &hex_digest(&bytes)[..16]);
            (
                Prepared::Model {
                    model: Box::new(model),
                    temperature: *temperature,
                },
                Some(id),
            )
        }
        SystemSpec::Contours { dir } => (Prepared::Contours(manifest.resolve(dir)), None),
    })
}

/// Hypothesis contour and, for model systems, the teacher-forced NLL.
fn run_system(
    sys: &Prepared,
    u: &LoadedUtterance,
    stats: &SpeakerStats,
    rng: &mut RngStream,
) -> Result<(F0Contour, Option<Metric>)> {
    let r = &u.reference;
    Ok(match sys {
        Prepared::Identity => (r.clone(), None),
        Prepared::Monotone => (monotone(r, stats), None),
        Prepared::Swap => (swap_words(r, &u.alignment, rng)?, None),
        Prepared::Replace(bank) => (replace_words(r, &u.alignment, bank, &u.speaker, rng)?, None),
        Prepared::Repunct(target) => (repunctuate_heuristic(r, &u.alignment, *target, stats)?, None),
        Prepared::Model { model, temperature } => {
            let grid = QuantGrid::from_stats(stats)?;
            let feats = assemble_features(&u.alignment, &u.embeddings, r.voiced(), &u.audio.grid())?;
            let cons = ConstraintTrack::empty(r.len());
            let ctx = ContextBundle::absent();
            let (_, contour) = model.generate(&feats, &ctx, &cons, r.voiced(), &grid, rng, *temperature)?;
            let teacher = quantize(r, &grid);
            let out = model.forward(&feats, &ctx, Some(&teacher), &cons, rng, Mode::teacher())?;
            let m = nll(out.post_logits.view(), &teacher, r.voiced())?;
            (contour, Some(m))
        }
        Prepared::Contours(dir) => {
            let p = dir.join(format!("{}.json", u.id));
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            (serde_json::from_str(&text)?, None)
        }
    })
}

fn score(u: &LoadedUtterance, label: &str, hyp: &F0Contour, nll: Option<Metric>) -> Result<UtteranceResult> {
    let r = &u.reference;
    let e = rmse(r, hyp)?;
    let (p, rc) = vuv_prf(r.voiced(), hyp.voiced())?;
    Ok(UtteranceResult {
        utterance: u.id.clone(),
        system: label.to_string(),
        frames: r.len(),
        voiced_frames: r.voiced_count(),
        mutual_voiced_frames: e.frames,
        rmse_log2: e.value,
        nll: nll.map(|m| m.value),
        vuv_precision: p,
        vuv_recall: rc,
        warning: e.degenerate || nll.is_some_and(|m| m.degenerate),
    })
}

fn aggregate(label: &str, rows: &[&UtteranceResult]) -> SystemAggregate {
    let sum = |f: &dyn Fn(&UtteranceResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>();
    let frames: usize = rows.iter().map(|r| r.frames).sum();
    let voiced: usize = rows.iter().map(|r| r.voiced_frames).sum();
    let mutual: usize = rows.iter().map(|r| r.mutual_voiced_frames).sum();
    let ratio = |num: f64, den: usize, empty: f64| if den == 0 { empty } else { num / den as f64 };
    let mse = sum(&|r| r.rmse_log2 * r.rmse_log2 * r.mutual_voiced_frames as f64);
    let nll = rows
        .iter()
        .all(|r| r.nll.is_some())
        .then(|| ratio(sum(&|r| r.nll.unwrap_or(0.0) * r.voiced_frames as f64), voiced, 0.0))
        .filter(|_| !rows.is_empty());
    SystemAggregate {
        system: label.to_string(),
        utterances: rows.len(),
        frames,
        voiced_frames: voiced,
        mutual_voiced_frames: mutual,
        rmse_log2: ratio(mse, mutual, 0.0).sqrt(),
        nll,
        vuv_precision: ratio(sum(&|r| r.vuv_precision * r.frames as f64), frames, 1.0),
        vuv_recall: ratio(sum(&|r| r.vuv_recall * r.frames as f64), frames, 1.0),
    }
}

/// Evaluates every system on every loadable utterance. Utterances that fail
/// to load, and (utterance, system) pairs that fail to run, are listed under
/// `exclusions` instead of aborting. Utterances run in parallel; each pair
/// draws from its own random stream, so results do not depend on scheduling.
pub fn evaluate_corpus(manifest: &CorpusManifest, config: &EvalConfig) -> Result<EvalReport> {
    let mut exclusions = Vec::new();
    let mut utts = Vec::new();
    let loaded: Vec<_> = manifest
        .utterances
        .par_iter()
        .map(|e| {
            let missing = manifest.missing_files(e);
            if !missing.is_empty() {
                let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
                return Err(format!("missing files: {}", list.join(", ")));
            }
            manifest.load_entry(e).map_err(|err| err.to_string())
        })
        .collect();
    for (e, r) in manifest.utterances.iter().zip(loaded) {
        match r {
            Ok(u) => utts.push(u),
            Err(reason) => exclusions.push(Exclusion {
                utterance: e.id.clone(),
                system: None,
                reason,
            }),
        }
    }
    let stats: BTreeMap<String, SpeakerStats> = if utts.is_empty() {
        BTreeMap::new()
    } else {
        corpus_stats(&utts)?
    };
    let mut model_ids = Vec::new();
    let mut systems = Vec::new();
    for spec in &config.systems {
        let (sys, id) = prepare_system(spec, manifest, &utts)?;
        model_ids.extend(id);
        systems.push((spec.label(), sys));
    }
    let root = RngStream::new(config.seed);
    let results: Vec<Vec<std::result::Result<UtteranceResult, Exclusion>>> = utts
        .par_iter()
        .enumerate()
        .map(|(ui, u)| {
            systems
                .iter()
                .enumerate()
                .map(|(si, (label, sys))| {
                    let mut rng = root.fork((ui as u64) << 16 | si as u64);
                    let stats = &stats[&u.speaker];
                    run_system(sys, u, stats, &mut rng)
                        .and_then(|(hyp, nll)| score(u, label, &hyp, nll))
                        .map_err(|err| Exclusion {
                            utterance: u.id.clone(),
                            system: Some(label.clone()),
                            reason: err.to_string(),
                        })
                })
                .collect()
        })
        .collect();
    let mut per_utterance = Vec::new();
    for row in results.into_iter().flatten() {
        match row {
            Ok(r) => per_utterance.push(r),
            Err(x) => exclusions.push(x),
        }
    }
    let aggregate = systems
        .iter()
        .map(|(label, _)| {
            let rows: Vec<&UtteranceResult> = per_utterance.iter().filter(|r| &r.system == label).collect();
            aggregate(label, &rows)
        })
        .collect();
    Ok(EvalReport {
        provenance: Provenance {
            model_ids,
            seed: config.seed,
            config_hash: config.hash(),
        },
        aggregate,
        per_utterance,
        partial: !exclusions.is_empty(),
        exclusions,
    })
}

/// Per-utterance CSV with [`CSV_COLUMNS`] as the header. A missing NLL is an
/// empty cell.
pub fn write_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::format("csv", format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in &report.per_utterance {
        w.write_record([
            r.utterance.clone(),
            r.system.clone(),
            r.frames.to_string(),
            r.voiced_frames.to_string(),
            r.mutual_voiced_frames.to_string(),
            format!("{:.9}", r.rmse_log2),
            r.nll.map(|v| format!("{v:.9}")).unwrap_or_default(),
            format!("{:.6}", r.vuv_precision),
            format!("{:.6}", r.vuv_recall),
            r.warning.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs [`evaluate_corpus`] and writes `per_utterance.csv` and `report.json`
/// into `out_dir`.
pub fn eval_run(manifest: &CorpusManifest, config: &EvalConfig, out_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = evaluate_corpus(manifest, config)?;
    write_csv(&report, out.join("per_utterance.csv"))?;
    let json = serde_json::to_string_pretty(&report)?;
    let p = out.join("report.json");
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn contour(hz: &[f64], voiced: &[bool]) -> F0Contour {
        F0Contour::new(hz.to_vec(), voiced.to_vec()).unwrap()
    }

    #[test]
    fn rmse_identity_octave_and_degenerate() {
        let c = contour(&[100.0, 150.0, 0.0, 220.0], &[true, true, false, true]);
        assert_eq!(rmse(&c, &c).unwrap().value, 0.0);
        let up = c.map_voiced(|_, h| 2.0 * h).unwrap();
        assert!((rmse(&c, &up).unwrap().value - 1.0).abs() < 1e-12);
        let none = F0Contour::unvoiced(4);
        let m = rmse(&c, &none).unwrap();
        assert!(m.degenerate && m.value == 0.0);
        assert!(rmse(&c, &F0Contour::unvoiced(3)).is_err());
    }

    #[test]
    fn nll_uniform_and_saturated() {
        let q = QuantizedF0::new(vec![0, 5, 100]).unwrap();
        let v = q.voiced_mask();
        let uniform = Array2::zeros((3, N_CLASSES));
        let m = nll(uniform.view(), &q, &v).unwrap();
        assert!((m.value - (N_CLASSES as f64).ln()).abs() < 1e-12);
        assert_eq!(m.frames, 2);
        let mut sat = Array2::zeros((3, N_CLASSES));
        sat[[1, 5]] = 200.0;
        sat[[2, 100]] = 200.0;
        assert!(nll(sat.view(), &q, &v).unwrap().value < 1e-12);
        let m = nll(uniform.view(), &q, &[false; 3]).unwrap();
        assert!(m.degenerate && m.value == 0.0);
    }

    #[test]
    fn vuv_confusion_arithmetic() {
        let r = [true, true, false, false];
        assert_eq!(vuv_prf(&r, &r).unwrap(), (1.0, 1.0));
        assert_eq!(vuv_prf(&r, &[true; 4]).unwrap(), (0.5, 1.0));
        assert_eq!(vuv_prf(&[false; 3], &[false; 3]).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn stimulus_cutoff_is_ten_above_max() {
        let c = contour(&[180.0, 250.0, 900.0], &[true, true, false]);
        assert_eq!(stimulus_cutoff(&c).unwrap(), 260.0);
        assert!(matches!(stimulus_cutoff(&F0Contour::unvoiced(3)), Err(Error::NoVoicedFrames)));
    }

    #[test]
    fn system_specs_parse_from_json() {
        let cfg: EvalConfig = serde_json::from_str(
            r#"{"systems": [{"kind": "identity"}, {"kind": "repunct", "target": "question"},
                {"kind": "model", "checkpoint": "m.ckpt"}], "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(cfg.systems.len(), 3);
        assert_eq!(cfg.systems[1].label(), "repunct_question");
        assert!(matches!(cfg.systems[2], SystemSpec::Model { temperature, .. } if temperature == 1.0));
        assert!(serde_json::from_str::<EvalConfig>(r#"{"systems": [], "x": 1}"#).is_err());
    }
}
