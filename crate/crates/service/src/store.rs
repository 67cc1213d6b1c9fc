//! On-disk project store. Each project lives in its own directory:
//!
//! ```text
//! <root>/<id>/manifest.json        project metadata and rendition list
//!            audio.wav             input audio at the canonical rate
//!            alignment.json
//!            embeddings.bin        EMBT word embeddings
//!            renditions/<rid>.json contour of a rendition
//!            renditions/<rid>.wav  audio of a rendition (when synthesised)
//! ```
//!
//! Rendition files are written before the manifest that lists them, and the
//! manifest is replaced by rename, so a crash never leaves a manifest that
//! points at missing files. Nothing is cached in memory except loaded model
//! checkpoints; every request reads the project back from disk.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use prosody_core::audio::{load_audio, write_wav, AudioBuffer, CANONICAL_RATE, HOP_SECONDS};
use prosody_core::codec::QuantGrid;
use prosody_core::evaluation::make_lowpass_stimulus;
use prosody_core::features::{assemble_features, Alignment, WordEmbeddingTable};
use prosody_core::model::{ContextBundle, Direction, Model};
use prosody_core::neural::RngStream;
use prosody_core::pitch::{analyze, speaker_stats, F0Contour, SpeakerStats, VoicingThresholds};
use prosody_core::psola::shift_to_contour;

use crate::editing::{ConstraintSegment, EditSpec, FrameRange};
use crate::error::ServiceError;

type Result<T> = std::result::Result<T, ServiceError>;

/// Suffix of checkpoint files in the models directory.
pub const CHECKPOINT_EXT: &str = "ckpt";
pub const ANALYSIS_RENDITION: &str = "r0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenditionKind {
    /// The analysed input; its audio is the input itself.
    Analysis,
    Generated,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rendition {
    pub id: String,
    pub kind: RenditionKind,
    pub has_audio: bool,
    /// Rendition this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub id: String,
    pub model_id: String,
    pub sample_rate: u32,
    pub frame_count: usize,
    pub stats: SpeakerStats,
    pub renditions: Vec<Rendition>,
}

impl ProjectManifest {
    pub fn grid(&self) -> std::result::Result<QuantGrid, prosody_core::Error> {
        QuantGrid::from_stats(&self.stats)
    }

    pub fn rendition(&self, rid: &str) -> Option<&Rendition> {
        self.renditions.iter().find(|r| r.id == rid)
    }

    /// Latest rendition carrying a contour that came out of the generator,
    /// else the analysis.
    pub fn working_rendition(&self) -> &str {
        self.renditions
            .iter()
            .rev()
            .find(|r| r.kind == RenditionKind::Generated)
            .map(|r| r.id.as_str())
            .unwrap_or(ANALYSIS_RENDITION)
    }
}

/// Inputs of a new project.
pub struct NewProject<'a> {
    pub wav: &'a [u8],
    pub alignment: &'a [u8],
    pub embeddings: &'a [u8],
    pub model_id: &'a str,
    /// Speaker statistics for the quantisation grid; computed from the
    /// project's own analysis when absent.
    pub stats: Option<SpeakerStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub constraints: Vec<ConstraintSegment>,
    #[serde(default)]
    pub keep_regions: Vec<FrameRange>,
    /// Overrides the checkpoint's generation order.
    #[serde(default)]
    pub direction: Option<Direction>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Contour that locked regions are read from; defaults to the latest
    /// generated rendition, else the analysis.
    #[serde(default)]
    pub base_rendition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeRequest {
    #[serde(default)]
    pub rendition: Option<String>,
    #[serde(default)]
    pub contour: Option<F0Contour>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDoc {
    pub hz: f64,
    pub voiced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalDoc {
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDoc {
    pub sample_rate: u32,
    pub hop_seconds: f64,
    pub frame_count: usize,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDoc {
    pub id: String,
    pub frames: Vec<FrameDoc>,
    pub words: Vec<IntervalDoc>,
    pub phones: Vec<IntervalDoc>,
    pub grid: GridDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub rendition: String,
    pub contour: F0Contour,
}

pub struct ProjectStore {
    root: PathBuf,
    models_dir: PathBuf,
    thresholds: VoicingThresholds,
    locks: Mutex<HashMap<String, Arc<RwLock<()>>>>,
    models: Mutex<HashMap<String, Arc<Model>>>,
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Internal(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| ServiceError::Internal(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
}

/// Ids are generated here and model ids come from clients; both become path
/// components, so only a conservative character set is allowed.
fn safe_component(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>, models_dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            models_dir: models_dir.into(),
            thresholds: VoicingThresholds::default(),
            locks: Mutex::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_thresholds(mut self, thresholds: VoicingThresholds) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        let dir = self.root.join(id);
        if !safe_component(id) || !dir.join("manifest.json").is_file() {
            return Err(ServiceError::NotFound(format!("project {id}")));
        }
        Ok(dir)
    }

    /// Lock serialising mutations of one project.
    fn lock(&self, id: &str) -> Arc<RwLock<()>> {
        self.locks.lock().unwrap().entry(id.to_string()).or_default().clone()
    }

    pub fn manifest(&self, id: &str) -> Result<ProjectManifest> {
        from_json(&self.dir(id)?.join("manifest.json"))
    }

    fn save_manifest(dir: &Path, m: &ProjectManifest) -> Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        write(&tmp, &to_json(m)?)?;
        let dst = dir.join("manifest.json");
        std::fs::rename(&tmp, &dst).map_err(|e| io_err(&dst, e))
    }

    fn model(&self, model_id: &str) -> Result<Arc<Model>> {
        if let Some(m) = self.models.lock().unwrap().get(model_id) {
            return Ok(m.clone());
        }
        let path = self.models_dir.join(format!("{model_id}.{CHECKPOINT_EXT}"));
        if !safe_component(model_id) || !path.is_file() {
            return Err(ServiceError::Conflict(format!("model checkpoint {model_id} is not available")));
        }
        let model = Model::load(&path).map_err(|e| ServiceError::Conflict(format!("model {model_id}: {e}")))?;
        let model = Arc::new(model);
        self.models.lock().unwrap().insert(model_id.to_string(), model.clone());
        Ok(model)
    }

    pub fn create_project(&self, p: NewProject<'_>) -> Result<String> {
        if !safe_component(p.model_id) {
            return Err(ServiceError::invalid("model", format!("invalid model id {:?}", p.model_id)));
        }
        let audio = load_audio(p.wav, CANONICAL_RATE).map_err(|e| ServiceError::invalid("audio_io", e))?;
        let text = std::str::from_utf8(p.alignment).map_err(|e| ServiceError::invalid("alignment", e))?;
        let align = Alignment::from_json(text).map_err(|e| ServiceError::invalid("alignment", e))?;
        align.check_duration(audio.duration()).map_err(|e| ServiceError::invalid("alignment", e))?;
        let emb = WordEmbeddingTable::from_bytes(p.embeddings).map_err(|e| ServiceError::invalid("embeddings", e))?;
        if emb.vectors.len() < align.words.len() {
            return Err(ServiceError::invalid(
                "embeddings",
                format!("{} vectors for {} words", emb.vectors.len(), align.words.len()),
            ));
        }
        let analysis = analyze(&audio, self.thresholds).map_err(|e| ServiceError::invalid("pitch_analysis", e))?;
        let stats = match p.stats {
            Some(s) => s,
            None => speaker_stats([&analysis]).map_err(|e| ServiceError::invalid("pitch_analysis", e))?,
        };
        QuantGrid::from_stats(&stats).map_err(|e| ServiceError::invalid("stats", e))?;

        let id = uuid::Uuid::new_v4().simple().to_string();
        let staging = self.root.join(format!(".staging-{id}"));
        let rdir = staging.join("renditions");
        std::fs::create_dir_all(&rdir).map_err(|e| io_err(&rdir, e))?;
        let wav = write_wav(&audio);
        write(&staging.join("audio.wav"), &wav)?;
        write(&staging.join("alignment.json"), align.to_json().as_bytes())?;
        write(&staging.join("embeddings.bin"), &emb.to_bytes())?;
        write(&rdir.join(format!("{ANALYSIS_RENDITION}.json")), &to_json(&analysis)?)?;
        write(&rdir.join(format!("{ANALYSIS_RENDITION}.wav")), &wav)?;
        let manifest = ProjectManifest {
            id: id.clone(),
            model_id: p.model_id.to_string(),
            sample_rate: audio.sample_rate,
            frame_count: analysis.len(),
            stats,
            renditions: vec![Rendition {
                id: ANALYSIS_RENDITION.into(),
                kind: RenditionKind::Analysis,
                has_audio: true,
                source: None,
                seed: None,
            }],
        };
        Self::save_manifest(&staging, &manifest)?;
        let dst = self.root.join(&id);
        std::fs::rename(&staging, &dst).map_err(|e| io_err(&dst, e))?;
        Ok(id)
    }

    fn contour(&self, dir: &Path, rid: &str) -> Result<F0Contour> {
        from_json(&dir.join("renditions").join(format!("{rid}.json")))
    }

    fn audio(&self, dir: &Path) -> Result<AudioBuffer> {
        load_audio(&read(&dir.join("audio.wav"))?, CANONICAL_RATE)
            .map_err(|e| ServiceError::Internal(format!("stored audio: {e}")))
    }

    fn alignment(&self, dir: &Path) -> Result<Alignment> {
        let text = String::from_utf8(read(&dir.join("alignment.json"))?)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Alignment::from_json(&text).map_err(|e| ServiceError::Internal(e.to_string()))
    }

    pub fn analysis(&self, id: &str) -> Result<AnalysisDoc> {
        let lock = self.lock(id);
        let _g = lock.read().unwrap();
        let dir = self.dir(id)?;
        let m = self.manifest(id)?;
        let c = self.contour(&dir, ANALYSIS_RENDITION)?;
        let align = self.alignment(&dir)?;
        let grid = prosody_core::audio::FrameGrid::with_frames(m.frame_count, m.sample_rate);
        let frames_of = |start: f64, end: f64| {
            let f = |s: f64| ((s / HOP_SECONDS).round() as usize).min(m.frame_count);
            (f(start), f(end))
        };
        let words = (0..align.words.len())
            .map(|w| {
                let r = align.word_frames(w, &grid);
                IntervalDoc {
                    label: align.words[w].text.clone(),
                    start_frame: r.start,
                    end_frame: r.end,
                }
            })
            .collect();
        let phones = align
            .phones
            .iter()
            .map(|p| {
                let (start_frame, end_frame) = frames_of(p.start, p.end);
                IntervalDoc {
                    label: p.sym.clone(),
                    start_frame,
                    end_frame,
                }
            })
            .collect();
        Ok(AnalysisDoc {
            id: m.id.clone(),
            frames: (0..c.len())
                .map(|t| FrameDoc {
                    hz: c.hz()[t],
                    voiced: c.is_voiced(t),
                })
                .collect(),
            words,
            phones,
            grid: GridDoc {
                sample_rate: m.sample_rate,
                hop_seconds: HOP_SECONDS,
                frame_count: m.frame_count,
                mu: m.stats.mu,
                sigma: m.stats.sigma,
            },
        })
    }

    pub fn renditions(&self, id: &str) -> Result<Vec<Rendition>> {
        let lock = self.lock(id);
        let _g = lock.read().unwrap();
        Ok(self.manifest(id)?.renditions)
    }

    pub fn rendition_contour(&self, id: &str, rid: &str) -> Result<F0Contour> {
        let lock = self.lock(id);
        let _g = lock.read().unwrap();
        let dir = self.dir(id)?;
        if self.manifest(id)?.rendition(rid).is_none() {
            return Err(ServiceError::NotFound(format!("rendition {rid}")));
        }
        self.contour(&dir, rid)
    }

    /// Appends a rendition: files first, then the manifest.
    fn append(
        &self,
        dir: &Path,
        mut m: ProjectManifest,
        mut r: Rendition,
        contour: &F0Contour,
        audio: Option<&[u8]>,
    ) -> Result<String> {
        r.id = format!("r{}", m.renditions.len());
        let rdir = dir.join("renditions");
        write(&rdir.join(format!("{}.json", r.id)), &to_json(contour)?)?;
        if let Some(wav) = audio {
            write(&rdir.join(format!("{}.wav", r.id)), wav)?;
        }
        let rid = r.id.clone();
        m.renditions.push(r);
        Self::save_manifest(dir, &m)?;
        Ok(rid)
    }

    pub fn generate(&self, id: &str, req: &GenerateRequest) -> Result<GenerateResponse> {
        let lock = self.lock(id);
        let _g = lock.write().unwrap();
        let dir = self.dir(id)?;
        let m = self.manifest(id)?;
        let model = self.model(&m.model_id)?;
        let base = req.base_rendition.clone().unwrap_or_else(|| m.working_rendition().to_string());
        if m.rendition(&base).is_none() {
            return Err(ServiceError::invalid("request", format!("unknown base rendition {base}")));
        }
        let analysis = self.contour(&dir, ANALYSIS_RENDITION)?;
        let working = self.contour(&dir, &base)?;
        let grid = m.grid().map_err(|e| ServiceError::Internal(e.to_string()))?;
        let voiced = analysis.voiced();
        let edits = EditSpec {
            constraints: req.constraints.clone(),
            keep_regions: req.keep_regions.clone(),
        };
        let track = edits
            .to_track(voiced, &working, &grid)
            .map_err(|e| ServiceError::invalid("request", e))?;
        let temperature = req.temperature.unwrap_or(1.0);
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ServiceError::invalid("request", format!("temperature {temperature}")));
        }
        let emb = WordEmbeddingTable::from_bytes(&read(&dir.join("embeddings.bin"))?)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let grid_frames = prosody_core::audio::FrameGrid::with_frames(m.frame_count, m.sample_rate);
        let feats = assemble_features(&self.alignment(&dir)?, &emb, voiced, &grid_frames)
            .map_err(|e| ServiceError::invalid("features", e))?;
        if feats.width() != model.config().feature_width() {
            return Err(ServiceError::Conflict(format!(
                "model {} expects {}-wide features, project has {}",
                m.model_id,
                model.config().feature_width(),
                feats.width()
            )));
        }
        let model = match req.direction {
            Some(d) if d != model.config().direction => Arc::new(model.with_direction(d)),
            _ => model,
        };
        let mut rng = RngStream::new(req.seed);
        let (_, contour) = model
            .generate(&feats, &ContextBundle::absent(), &track, voiced, &grid, &mut rng, temperature)
            .map_err(|e| ServiceError::invalid("prosody_model", e))?;
        let r = Rendition {
            id: String::new(),
            kind: RenditionKind::Generated,
            has_audio: false,
            source: Some(base),
            seed: Some(req.seed),
        };
        let rendition = self.append(&dir, m, r, &contour, None)?;
        Ok(GenerateResponse { rendition, contour })
    }

    pub fn synthesize(&self, id: &str, req: &SynthesizeRequest) -> Result<String> {
        let lock = self.lock(id);
        let _g = lock.write().unwrap();
        let dir = self.dir(id)?;
        let m = self.manifest(id)?;
        let (target, source) = match (&req.rendition, &req.contour) {
            (Some(rid), None) => {
                if m.rendition(rid).is_none() {
                    return Err(ServiceError::NotFound(format!("rendition {rid}")));
                }
                (self.contour(&dir, rid)?, Some(rid.clone()))
            }
            (None, Some(c)) => (c.clone(), None),
            _ => {
                return Err(ServiceError::invalid(
                    "request",
                    "give exactly one of `rendition` or `contour`",
                ))
            }
        };
        let analysis = self.contour(&dir, ANALYSIS_RENDITION)?;
        if target.len() != analysis.len() {
            return Err(ServiceError::invalid(
                "psola_vocoder",
                format!("contour has {} frames, project has {}", target.len(), analysis.len()),
            ));
        }
        let audio = self.audio(&dir)?;
        let out = shift_to_contour(&audio, &analysis, &target).map_err(|e| ServiceError::invalid("psola_vocoder", e))?;
        let r = Rendition {
            id: String::new(),
            kind: RenditionKind::Synthesized,
            has_audio: true,
            source,
            seed: None,
        };
        self.append(&dir, m, r, &target, Some(&write_wav(&out)))
    }

    /// WAV bytes of a rendition, optionally as the low-pass listening stimulus.
    pub fn audio_bytes(&self, id: &str, rid: &str, lowpass: bool) -> Result<Vec<u8>> {
        let lock = self.lock(id);
        let _g = lock.read().unwrap();
        let dir = self.dir(id)?;
        let m = self.manifest(id)?;
        match m.rendition(rid) {
            Some(r) if r.has_audio => {}
            _ => return Err(ServiceError::NotFound(format!("audio for rendition {rid}"))),
        }
        let wav = read(&dir.join("renditions").join(format!("{rid}.wav")))?;
        if !lowpass {
            return Ok(wav);
        }
        let audio = load_audio(&wav, CANONICAL_RATE).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let contour = self.contour(&dir, rid)?;
        let out = make_lowpass_stimulus(&audio, &contour).map_err(|e| ServiceError::invalid("evaluation", e))?;
        Ok(write_wav(&out))
    }
}
