//! Corpus manifests: per-utterance audio, alignment, word embeddings and an
//! optional reference contour, plus a small synthetic corpus generator used
//! by tests, examples and the toy training runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{load_audio_file, write_wav_file, AudioBuffer, CANONICAL_RATE};
use crate::codec::{quantize, QuantGrid};
use crate::error::{Error, Result};
use crate::features::{
    assemble_features, load_alignment, Alignment, Phone, Punctuation, Word, WordEmbeddingTable,
    DEFAULT_EMBEDDING_DIM,
};
use crate::model::Utterance;
use crate::neural::RngStream;
use crate::pitch::{analyze, speaker_stats, F0Contour, SpeakerStats, VoicingThresholds};
use crate::synth;

pub const DEFAULT_SPEAKER: &str = "default";

fn default_speaker() -> String {
    DEFAULT_SPEAKER.to_string()
}

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default = "default_speaker")]
    pub speaker: String,
    pub audio: PathBuf,
    pub alignment: PathBuf,
    pub embeddings: PathBuf,
    /// Contour JSON; when absent the audio is analysed on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub utterances: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against (not serialised).
    #[serde(skip)]
    pub root: PathBuf,
}

/// An utterance with every artifact loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub id: String,
    pub speaker: String,
    pub audio: AudioBuffer,
    pub alignment: Alignment,
    pub embeddings: WordEmbeddingTable,
    pub reference: F0Contour,
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, utterances: Vec<ManifestEntry>) -> Self {
        Self {
            utterances,
            root: root.into(),
        }
    }

    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: CorpusManifest = serde_json::from_str(text)?;
        m.root = root.into();
        let mut seen = std::collections::HashSet::new();
        for e in &m.utterances {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::format("manifest", format!("duplicate utterance id {:?}", e.id)));
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Files named by `entry` that do not exist.
    pub fn missing_files(&self, entry: &ManifestEntry) -> Vec<PathBuf> {
        [Some(&entry.audio), Some(&entry.alignment), Some(&entry.embeddings), entry.reference.as_ref()]
            .into_iter()
            .flatten()
            .map(|p| self.resolve(p))
            .filter(|p| !p.exists())
            .collect()
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<LoadedUtterance> {
        let audio = load_audio_file(self.resolve(&entry.audio), CANONICAL_RATE)?;
        let alignment = load_alignment(self.resolve(&entry.alignment), Some(audio.duration()))?;
        let embeddings = WordEmbeddingTable::load(self.resolve(&entry.embeddings))?;
        if embeddings.vectors.len() < alignment.words.len() {
            return Err(Error::MissingEmbedding(embeddings.vectors.len()));
        }
        let reference = match &entry.reference {
            Some(p) => {
                let p = self.resolve(p);
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                serde_json::from_str::<F0Contour>(&text)?
            }
            None => analyze(&audio, VoicingThresholds::default())?,
        };
        if reference.len() != audio.grid().frame_count {
            return Err(Error::Shape(format!(
                "utterance {}: reference has {} frames, audio has {}",
                entry.id,
                reference.len(),
                audio.grid().frame_count
            )));
        }
        Ok(LoadedUtterance {
            id: entry.id.clone(),
            speaker: entry.speaker.clone(),
            audio,
            alignment,
            embeddings,
            reference,
        })
    }

    /// Loads every utterance, failing on the first error.
    pub fn load_all(&self) -> Result<Vec<LoadedUtterance>> {
        self.utterances.iter().map(|e| self.load_entry(e)).collect()
    }
}

/// Speaker statistics from the reference contours, keyed by speaker.
pub fn corpus_stats(utts: &[LoadedUtterance]) -> Result<BTreeMap<String, SpeakerStats>> {
    let mut by_speaker: BTreeMap<String, Vec<&F0Contour>> = BTreeMap::new();
    for u in utts {
        by_speaker.entry(u.speaker.clone()).or_default().push(&u.reference);
    }
    by_speaker
        .into_iter()
        .map(|(s, cs)| Ok((s, speaker_stats(cs)?)))
        .collect()
}

/// Model-ready utterances: features from alignment + embeddings + reference
/// voicing, targets quantised on each speaker's grid.
pub fn training_set(
    utts: &[LoadedUtterance],
    stats: &BTreeMap<String, SpeakerStats>,
) -> Result<Vec<Utterance>> {
    utts.iter()
        .map(|u| {
            let s = stats
                .get(&u.speaker)
                .ok_or_else(|| Error::Config(format!("no statistics for speaker {}", u.speaker)))?;
            let grid = QuantGrid::from_stats(s)?;
            let feats = assemble_features(&u.alignment, &u.embeddings, u.reference.voiced(), &u.audio.grid())?;
            Ok(Utterance {
                id: u.id.clone(),
                feats,
                target: quantize(&u.reference, &grid),
            })
        })
        .collect()
}

/// Voiced phones used to dress up the synthetic words.
const TOY_PHONES: [&str; 8] = ["AA", "IY", "UW", "EH", "M", "N", "L", "OW"];
const TOY_VOCAB: [&str; 8] = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCorpusSpec {
    pub utterances: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            utterances: 20,
            seconds: 0.8,
            seed: 0,
        }
    }
}

/// Synthetic utterance: leading/trailing silence around two or three voiced
/// words separated by short pauses, each word a vowel with a gliding F0.
/// Returns the audio and its alignment.
fn toy_utterance(spec: &ToyCorpusSpec, rng: &mut RngStream) -> (AudioBuffer, Alignment, Vec<usize>) {
    let lead = 0.1;
    let tail = 0.1;
    let n_words = 2 + rng.below(2);
    let pause = 0.05;
    let span = spec.seconds - lead - tail - pause * (n_words - 1) as f64;
    let word_len = span / n_words as f64;
    let base = 120.0 + 80.0 * rng.uniform();
    let question = rng.bernoulli(0.3);
    let mut words = Vec::new();
    let mut phones = vec![Phone {
        sym: "sil".into(),
        start: 0.0,
        end: lead,
        word: None,
    }];
    let mut vocab_ids = Vec::new();
    let mut segs = Vec::new();
    let mut t = lead;
    for w in 0..n_words {
        let (start, end) = (t, t + word_len);
        let last = w + 1 == n_words;
        // each word glides from a start to an end pitch; a final question rises
        let f_start = base * (1.0 + 0.15 * (rng.uniform() - 0.5));
        let f_end = if last && question {
            f_start * 1.35
        } else {
            f_start * (0.85 + 0.1 * rng.uniform())
        };
        segs.push((start, end, f_start, f_end));
        let vid = rng.below(TOY_VOCAB.len());
        vocab_ids.push(vid);
        words.push(Word {
            text: TOY_VOCAB[vid].into(),
            start,
            end,
            punct: Punctuation {
                period: last && !question,
                question: last && question,
                comma: !last && rng.bernoulli(0.3),
                quote: false,
            },
        });
        let n_ph = 2 + rng.below(2);
        for k in 0..n_ph {
            phones.push(Phone {
                sym: TOY_PHONES[rng.below(TOY_PHONES.len())].into(),
                start: start + word_len * k as f64 / n_ph as f64,
                end: start + word_len * (k + 1) as f64 / n_ph as f64,
                word: Some(w),
            });
        }
        if !last {
            phones.push(Phone {
                sym: "sp".into(),
                start: end,
                end: end + pause,
                word: None,
            });
        }
        t = end + pause;
    }
    phones.push(Phone {
        sym: "sil".into(),
        start: spec.seconds - tail,
        end: spec.seconds,
        word: None,
    });
    let audio = synth::vowel(spec.seconds, 0.5, |time| {
        segs.iter()
            .find(|(s, e, _, _)| (*s..*e).contains(&time))
            .map(|&(s, e, a, b)| a * (b / a).powf((time - s) / (e - s)))
            .unwrap_or(0.0)
    });
    (audio, Alignment { words, phones }, vocab_ids)
}

/// Writes a synthetic corpus (WAV, alignment JSON, EMBT embeddings and the
/// analysed reference contour per utterance) plus `manifest.json` into `dir`.
/// Word embeddings come from a fixed random vocabulary, so repeated words
/// share vectors.
pub fn write_toy_corpus(dir: impl AsRef<Path>, spec: ToyCorpusSpec) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = RngStream::new(spec.seed);
    let mut vocab_rng = rng.fork(1);
    let vocab: Vec<Vec<f64>> = (0..TOY_VOCAB.len())
        .map(|_| (0..DEFAULT_EMBEDDING_DIM).map(|_| vocab_rng.uniform() * 2.0 - 1.0).collect())
        .collect();
    let mut entries = Vec::new();
    for i in 0..spec.utterances {
        let id = format!("toy{i:03}");
        let (audio, align, vocab_ids) = toy_utterance(&spec, &mut rng);
        let emb = WordEmbeddingTable::new(
            DEFAULT_EMBEDDING_DIM,
            vocab_ids.iter().map(|&v| vocab[v].clone()).collect(),
        )?;
        let reference = analyze(&audio, VoicingThresholds::default())?;
        let entry = ManifestEntry {
            id: id.clone(),
            speaker: DEFAULT_SPEAKER.into(),
            audio: format!("{id}.wav").into(),
            alignment: format!("{id}.align.json").into(),
            embeddings: format!("{id}.emb").into(),
            reference: Some(format!("{id}.f0.json").into()),
        };
        write_wav_file(&audio, dir.join(&entry.audio))?;
        write_text(&dir.join(&entry.alignment), &align.to_json())?;
        emb.save(dir.join(&entry.embeddings))?;
        write_text(&dir.join(entry.reference.as_ref().unwrap()), &serde_json::to_string(&reference)?)?;
        entries.push(entry);
    }
    let manifest = CorpusManifest::new(dir, entries);
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
