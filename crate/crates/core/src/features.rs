//! Per-frame model inputs: phoneme identity, word embedding, voicing and
//! punctuation, sampled at frame centres from a word/phone alignment.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::audio::FrameGrid;
use crate::codec::{QuantizedF0, N_CLASSES};
use crate::error::{Error, Result};

/// Closed phoneme inventory: 39 stressless ARPAbet symbols, then silence and
/// a catch-all for spoken noise.
pub const PHONEMES: [&str; 41] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH", "sil", "unk",
];
pub const SILENCE: usize = 39;
pub const UNKNOWN: usize = 40;
pub const N_PHONEMES: usize = PHONEMES.len();
pub const N_PUNCT: usize = 4;
pub const DEFAULT_EMBEDDING_DIM: usize = 32;

/// Maps an alignment symbol to its inventory index. Stress digits are
/// stripped (`AH0` → `AH`); `sp`/`sil`/empty are silence and `spn`/`unk`
/// map to the unknown slot.
pub fn phoneme_index(symbol: &str) -> Option<usize> {
    let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
    match base.to_ascii_lowercase().as_str() {
        "" | "sp" | "sil" => return Some(SILENCE),
        "spn" | "unk" => return Some(UNKNOWN),
        _ => {}
    }
    let upper = base.to_ascii_uppercase();
    PHONEMES[..SILENCE].iter().position(|p| *p == upper)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Punctuation {
    #[serde(default)]
    pub comma: bool,
    #[serde(default)]
    pub period: bool,
    #[serde(default)]
    pub question: bool,
    #[serde(default)]
    pub quote: bool,
}

impl Punctuation {
    pub fn as_array(&self) -> [f64; N_PUNCT] {
        [self.comma, self.period, self.question, self.quote].map(|b| b as u8 as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Word {
    pub text: String,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub punct: Punctuation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phone {
    pub sym: String,
    pub start: f64,
    pub end: f64,
    pub word: Option<usize>,
}

/// Word and phone intervals in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alignment {
    pub words: Vec<Word>,
    pub phones: Vec<Phone>,
}

fn check_intervals<'a>(
    kind: &str,
    spans: impl Iterator<Item = (f64, f64)> + 'a,
) -> Result<()> {
    let mut prev: Option<(usize, f64)> = None;
    for (i, (start, end)) in spans.enumerate() {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end < start {
            return Err(Error::Alignment(format!(
                "{kind} {i} has invalid interval [{start}, {end}]"
            )));
        }
        if let Some((j, prev_end)) = prev {
            if start < prev_end - 1e-9 {
                return Err(Error::Alignment(format!(
                    "{kind} {j} and {kind} {i} overlap ({prev_end} > {start})"
                )));
            }
        }
        prev = Some((i, end));
    }
    Ok(())
}

impl Alignment {
    /// Structural validation: ordered, non-overlapping intervals, known
    /// symbols, phones inside their parent words.
    pub fn validate(&self) -> Result<()> {
        check_intervals("word", self.words.iter().map(|w| (w.start, w.end)))?;
        check_intervals("phone", self.phones.iter().map(|p| (p.start, p.end)))?;
        for (i, p) in self.phones.iter().enumerate() {
            if phoneme_index(&p.sym).is_none() {
                return Err(Error::Alignment(format!("phone {i}: unknown symbol {:?}", p.sym)));
            }
            if let Some(w) = p.word {
                let word = self.words.get(w).ok_or_else(|| {
                    Error::Alignment(format!("phone {i} refers to missing word {w}"))
                })?;
                if p.start < word.start - 1e-9 || p.end > word.end + 1e-9 {
                    return Err(Error::Alignment(format!(
                        "phone {i} [{}, {}] lies outside word {w} [{}, {}]",
                        p.start, p.end, word.start, word.end
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rejects intervals that end after `duration` seconds.
    pub fn check_duration(&self, duration: f64) -> Result<()> {
        let tol = 1e-6;
        if let Some((i, w)) = self.words.iter().enumerate().find(|(_, w)| w.end > duration + tol) {
            return Err(Error::Alignment(format!(
                "word {i} ends at {} s, after the audio ({duration} s)",
                w.end
            )));
        }
        if let Some((i, p)) = self.phones.iter().enumerate().find(|(_, p)| p.end > duration + tol) {
            return Err(Error::Alignment(format!(
                "phone {i} ends at {} s, after the audio ({duration} s)",
                p.end
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Alignment = serde_json::from_str(text)?;
        a.validate()?;
        Ok(a)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("alignment serialises")
    }

    /// Index of the word active at `time`, if any.
    pub fn word_at(&self, time: f64) -> Option<usize> {
        self.words
            .iter()
            .position(|w| w.start <= time && time < w.end)
    }

    pub fn phone_at(&self, time: f64) -> Option<&Phone> {
        self.phones.iter().find(|p| p.start <= time && time < p.end)
    }

    /// Frame span `[first, last)` of word `w` on `grid` (by frame centre).
    pub fn word_frames(&self, w: usize, grid: &FrameGrid) -> Range<usize> {
        let word = &self.words[w];
        let frames: Vec<usize> = (0..grid.frame_count)
            .filter(|&t| {
                let c = grid.center_time(t);
                word.start <= c && c < word.end
            })
            .collect();
        match (frames.first(), frames.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    }
}

/// Reads and validates an alignment file; when `duration` is given, intervals
/// must end within it.
pub fn load_alignment(path: impl AsRef<Path>, duration: Option<f64>) -> Result<Alignment> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let a = Alignment::from_json(&text)?;
    if let Some(d) = duration {
        a.check_duration(d)?;
    }
    Ok(a)
}

/// One embedding vector per aligned word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

const EMBT_MAGIC: &[u8; 4] = b"EMBT";

impl WordEmbeddingTable {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding {i} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding {i}")));
            }
        }
        Ok(Self { dim, vectors })
    }

    /// Little-endian `EMBT` layout: magic, u32 word count, u32 dim, row-major f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dim * self.vectors.len());
        out.extend_from_slice(EMBT_MAGIC);
        out.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != EMBT_MAGIC {
            return Err(Error::format("embedding", "missing EMBT header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (count, dim) = (word(4), word(8));
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| Error::format("embedding", "header dimensions overflow"))?;
        if bytes.len() < expected {
            return Err(Error::format(
                "embedding",
                format!("truncated: {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::Shape(format!(
                "embedding file has {} trailing bytes",
                bytes.len() - expected
            )));
        }
        let vectors = (0..count)
            .map(|w| {
                (0..dim)
                    .map(|k| {
                        let i = 12 + 4 * (w * dim + k);
                        f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64
                    })
                    .collect()
            })
            .collect();
        Self::new(dim, vectors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Column ranges of each feature group within a [`FrameFeatures`] row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub phoneme: Range<usize>,
    pub embedding: Range<usize>,
    pub vuv: usize,
    pub punctuation: Range<usize>,
}

impl FeatureLayout {
    pub fn new(embedding_dim: usize) -> Self {
        let e = N_PHONEMES + embedding_dim;
        Self {
            phoneme: 0..N_PHONEMES,
            embedding: N_PHONEMES..e,
            vuv: e,
            punctuation: e + 1..e + 1 + N_PUNCT,
        }
    }

    pub fn width(&self) -> usize {
        self.punctuation.end
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub matrix: Array2<f64>,
    pub layout: FeatureLayout,
}

impl FrameFeatures {
    pub fn frames(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn voiced_mask(&self) -> Vec<bool> {
        self.matrix.column(self.layout.vuv).iter().map(|&v| v > 0.5).collect()
    }

    /// Rows `range`, keeping the layout.
    pub fn slice_frames(&self, range: Range<usize>) -> FrameFeatures {
        FrameFeatures {
            matrix: self.matrix.slice(s![range, ..]).to_owned(),
            layout: self.layout.clone(),
        }
    }
}

/// Samples phone and word identity at each frame centre. Frames outside every
/// word get the silence phoneme, a zero embedding and no punctuation.
pub fn assemble_features(
    align: &Alignment,
    emb: &WordEmbeddingTable,
    voiced: &[bool],
    grid: &FrameGrid,
) -> Result<FrameFeatures> {
    if voiced.len() != grid.frame_count {
        return Err(Error::Shape(format!(
            "voicing mask has {} frames, grid has {}",
            voiced.len(),
            grid.frame_count
        )));
    }
    if emb.vectors.len() < align.words.len() {
        return Err(Error::MissingEmbedding(emb.vectors.len()));
    }
    let layout = FeatureLayout::new(emb.dim);
    let mut m = Array2::zeros((grid.frame_count, layout.width()));
    for t in 0..grid.frame_count {
        let time = grid.center_time(t);
        let word = align.word_at(time);
        let phone = match word {
            Some(_) => align
                .phone_at(time)
                .and_then(|p| phoneme_index(&p.sym))
                .unwrap_or(UNKNOWN),
            None => SILENCE,
        };
        m[[t, layout.phoneme.start + phone]] = 1.0;
        if let Some(w) = word {
            for (k, &x) in emb.vectors[w].iter().enumerate() {
                m[[t, layout.embedding.start + k]] = x;
            }
            for (k, x) in align.words[w].punct.as_array().into_iter().enumerate() {
                m[[t, layout.punctuation.start + k]] = x;
            }
        }
        m[[t, layout.vuv]] = voiced[t] as u8 as f64;
    }
    Ok(FrameFeatures { matrix: m, layout })
}

/// Frame features with a one-hot of the quantised F0 appended (width F + 128).
pub fn context_features(feats: &FrameFeatures, q: &QuantizedF0) -> Result<Array2<f64>> {
    if feats.frames() != q.len() {
        return Err(Error::Shape(format!(
            "{} feature frames vs {} quantised frames",
            feats.frames(),
            q.len()
        )));
    }
    let f = feats.width();
    let mut out = Array2::zeros((q.len(), f + N_CLASSES));
    out.slice_mut(s![.., ..f]).assign(&feats.matrix);
    for (t, &b) in q.bins.iter().enumerate() {
        out[[t, f + b as usize]] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_words() -> Alignment {
        Alignment::from_json(
            r#"{
              "words": [
                {"text": "hello", "start": 0.10, "end": 0.40, "punct": {"comma": true}},
                {"text": "world", "start": 0.40, "end": 0.80, "punct": {"period": true}}
              ],
              "phones": [
                {"sym": "sil", "start": 0.0, "end": 0.10, "word": null},
                {"sym": "HH", "start": 0.10, "end": 0.20, "word": 0},
                {"sym": "AH0", "start": 0.20, "end": 0.30, "word": 0},
                {"sym": "L", "start": 0.30, "end": 0.35, "word": 0},
                {"sym": "OW1", "start": 0.35, "end": 0.40, "word": 0},
                {"sym": "W", "start": 0.40, "end": 0.50, "word": 1},
                {"sym": "ER1", "start": 0.50, "end": 0.65, "word": 1},
                {"sym": "L", "start": 0.65, "end": 0.72, "word": 1},
                {"sym": "D", "start": 0.72, "end": 0.80, "word": 1}
              ]
            }"#,
        )
        .unwrap()
    }

    fn table(dim: usize, words: usize) -> WordEmbeddingTable {
        let v = (0..words)
            .map(|w| (0..dim).map(|k| (w * dim + k) as f64 * 0.25 + 1.0).collect())
            .collect();
        WordEmbeddingTable::new(dim, v).unwrap()
    }

    #[test]
    fn inventory_has_41_slots() {
        assert_eq!(N_PHONEMES, 41);
        assert_eq!(phoneme_index("AH0"), Some(2));
        assert_eq!(phoneme_index("sp"), Some(SILENCE));
        assert_eq!(phoneme_index("spn"), Some(UNKNOWN));
        assert_eq!(phoneme_index("QQ"), None);
    }

    #[test]
    fn overlap_names_the_pair() {
        let mut a = two_words();
        a.phones[2].start = 0.15;
        let msg = a.validate().unwrap_err().to_string();
        assert!(msg.contains("phone 1") && msg.contains("phone 2"), "{msg}");
    }

    #[test]
    fn word_past_audio_end_is_a_range_error() {
        let a = two_words();
        assert!(a.check_duration(1.0).is_ok());
        assert!(matches!(a.check_duration(0.5), Err(Error::Alignment(_))));
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let mut a = two_words();
        a.phones[1].sym = "XX".into();
        assert!(a.validate().is_err());
    }

    #[test]
    fn frames_sample_their_centres() {
        let a = two_words();
        let grid = FrameGrid::with_frames(90, 16_000);
        let voiced: Vec<bool> = (0..90).map(|t| t % 3 != 0).collect();
        let f = assemble_features(&a, &table(4, 2), &voiced, &grid).unwrap();
        let l = &f.layout;
        assert_eq!(f.width(), 41 + 4 + 1 + 4);
        // frame 0 (centre 5 ms) precedes the first word
        assert_eq!(f.matrix[[0, l.phoneme.start + SILENCE]], 1.0);
        assert!(f.matrix.slice(s![0, l.embedding.clone()]).iter().all(|&x| x == 0.0));
        // frame 25 (centre 255 ms) is the AH of "hello", which precedes a comma
        assert_eq!(f.matrix[[25, l.phoneme.start + 2]], 1.0);
        assert_eq!(f.matrix[[25, l.punctuation.start]], 1.0);
        assert_eq!(f.matrix[[25, l.punctuation.start + 1]], 0.0);
        assert_eq!(f.matrix[[25, l.embedding.start]], 1.0);
        for row in f.matrix.rows() {
            let s: f64 = row.slice(s![l.phoneme.clone()]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(f.voiced_mask(), voiced);
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let grid = FrameGrid::with_frames(90, 16_000);
        let r = assemble_features(&two_words(), &table(4, 1), &vec![true; 90], &grid);
        assert!(matches!(r, Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn punctuation_edit_touches_only_that_slice() {
        let grid = FrameGrid::with_frames(90, 16_000);
        let voiced = vec![true; 90];
        let a = two_words();
        let mut b = a.clone();
        b.words[1].punct.question = true;
        let fa = assemble_features(&a, &table(4, 2), &voiced, &grid).unwrap();
        let fb = assemble_features(&b, &table(4, 2), &voiced, &grid).unwrap();
        let span = a.word_frames(1, &grid);
        for ((t, c), (x, y)) in fa.matrix.indexed_iter().zip(fb.matrix.iter()).map(|((i, a), b)| (i, (a, b))) {
            if x != y {
                assert!(span.contains(&t) && fa.layout.punctuation.contains(&c));
            }
        }
        assert_ne!(fa, fb);
    }

    #[test]
    fn embedding_round_trip() {
        let t = table(3, 5);
        assert_eq!(WordEmbeddingTable::from_bytes(&t.to_bytes()).unwrap(), t);
        let bytes = t.to_bytes();
        assert!(WordEmbeddingTable::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn context_one_hot_inverts() {
        let grid = FrameGrid::with_frames(90, 16_000);
        let f = assemble_features(&two_words(), &table(4, 2), &vec![true; 90], &grid).unwrap();
        let q = QuantizedF0::new((0..90).map(|t| (t % 128) as u8).collect()).unwrap();
        let c = context_features(&f, &q).unwrap();
        assert_eq!(c.ncols(), f.width() + 128);
        for t in 0..90 {
            let tail = c.slice(s![t, f.width()..]);
            let arg = tail.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(arg as u8, q.bins[t]);
            assert_eq!(tail.sum(), 1.0);
        }
    }
}
