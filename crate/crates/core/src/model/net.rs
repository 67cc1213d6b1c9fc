use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ConstraintTrack, Direction, Mode, ModelConfig};
use crate::codec::{dequantize, QuantGrid, QuantizedF0, UNVOICED_BIN};
use crate::error::{Error, Result};
use crate::features::FrameFeatures;
use crate::neural::{
    gru_cell_forward, matmul, matmul_acc, sample_categorical, Gradients, Graph, Padding, ParamId,
    ParameterSet, RngStream, Var,
};
use crate::pitch::F0Contour;

pub const MODEL_MAGIC: &[u8; 4] = b"PMDL";

#[derive(Debug, Clone, Copy)]
struct GruIds {
    w: ParamId,
    b: ParamId,
    u: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    fc: Vec<(ParamId, ParamId)>,
    bi: [GruIds; 2],
    uni: GruIds,
    out: (ParamId, ParamId),
    post: Vec<(ParamId, ParamId)>,
    /// Indexed `[side][layer][direction]`, flattened.
    ctx: Vec<GruIds>,
}

const SIDES: [&str; 2] = ["preceding", "following"];
const DIRS: [&str; 2] = ["fwd", "bwd"];

/// Raw context matrices (rows from `features::context_features`) and the
/// summary vector the model derives from them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextBundle {
    pub preceding: Option<Array2<f64>>,
    pub following: Option<Array2<f64>>,
    /// Final top-layer states `[preceding fwd ∥ preceding bwd ∥ following fwd ∥
    /// following bwd]`; filled by [`Model::summarize_context`].
    pub summary: Vec<f64>,
}

impl ContextBundle {
    pub fn absent() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub pre_logits: Array2<f64>,
    pub post_logits: Array2<f64>,
    pub sampled_bins: Vec<u8>,
}

/// One utterance in model time order (flipped for the reverse direction).
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub feats: Array2<f64>,
    pub voiced: Vec<bool>,
    pub cons: ConstraintTrack,
    pub teacher: Option<Vec<u8>>,
    pub ctx_pre: Option<Array2<f64>>,
    pub ctx_post: Option<Array2<f64>>,
}

impl Prepared {
    pub fn frames(&self) -> usize {
        self.feats.nrows()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
}

fn flip_rows(a: &Array2<f64>) -> Array2<f64> {
    a.slice(s![..;-1, ..]).to_owned()
}

/// Post-postnet logits with voicing enforced: unvoiced frames can only be
/// class 0, voiced frames never are.
pub(crate) fn voicing_masked(logits: ArrayView1<f64>, voiced: bool) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            if (k == UNVOICED_BIN as usize) == voiced {
                f64::NEG_INFINITY
            } else {
                l
            }
        })
        .collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParameterSet,
    ids: Ids,
}

impl Model {
    /// Freshly initialised model.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed);
        let params = Self::init_params(&cfg, &mut rng);
        let ids = Self::lookup_ids(&cfg, &params)?;
        Ok(Self { cfg, params, ids })
    }

    /// Wraps existing parameters; names and shapes must match `cfg`.
    pub fn from_parts(cfg: ModelConfig, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let template = Self::init_params(&cfg, &mut RngStream::new(0));
        if !template.same_layout(&params) {
            return Err(Error::Config("checkpoint parameters do not match the model config".into()));
        }
        let ids = Self::lookup_ids(&cfg, &params)?;
        Ok(Self { cfg, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// The same parameters generating in the other time order.
    pub fn with_direction(&self, direction: Direction) -> Self {
        let mut m = self.clone();
        m.cfg.direction = direction;
        m
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn input_width(cfg: &ModelConfig) -> usize {
        cfg.feature_width() + cfg.summary_width() + cfg.n_classes + 1
    }

    fn add_gru(p: &mut ParameterSet, name: &str, input: usize, hidden: usize, rng: &mut RngStream) {
        p.add_glorot(format!("{name}.w"), input, 3 * hidden, rng);
        p.add_zeros(format!("{name}.b"), 1, 3 * hidden);
        p.add_uniform(format!("{name}.u"), hidden, 3 * hidden, 1.0 / (hidden as f64).sqrt(), rng);
    }

    fn init_params(cfg: &ModelConfig, rng: &mut RngStream) -> ParameterSet {
        let mut p = ParameterSet::new();
        let mut width = Self::input_width(cfg);
        for (i, &d) in cfg.fc_dims.iter().enumerate() {
            p.add_glorot(format!("fc{i}.w"), width, d, rng);
            p.add_zeros(format!("fc{i}.b"), 1, d);
            width = d;
        }
        for dir in DIRS {
            Self::add_gru(&mut p, &format!("bi.{dir}"), width, cfg.bi_hidden, rng);
        }
        Self::add_gru(&mut p, "uni", 2 * cfg.bi_hidden + cfg.n_classes, cfg.uni_hidden, rng);
        p.add_glorot("out.w", cfg.uni_hidden, cfg.n_classes, rng);
        p.add_zeros("out.b", 1, cfg.n_classes);
        let pn = cfg.postnet;
        for l in 0..pn.layers {
            let c_in = if l == 0 { cfg.n_classes } else { pn.channels };
            let c_out = if l + 1 == pn.layers { cfg.n_classes } else { pn.channels };
            let limit = (6.0 / ((c_in + c_out) * pn.kernel) as f64).sqrt();
            p.add_uniform(format!("post{l}.k"), pn.kernel * c_in, c_out, limit, rng);
            p.add_zeros(format!("post{l}.b"), 1, c_out);
        }
        if cfg.use_context {
            for side in SIDES {
                for layer in 0..cfg.context_layers {
                    let input = if layer == 0 { cfg.context_width() } else { 2 * cfg.context_hidden };
                    for dir in DIRS {
                        Self::add_gru(&mut p, &format!("ctx.{side}.{layer}.{dir}"), input, cfg.context_hidden, rng);
                    }
                }
            }
        }
        p
    }

    fn lookup_ids(cfg: &ModelConfig, p: &ParameterSet) -> Result<Ids> {
        let id = |name: String| {
            p.id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let gru = |name: &str| -> Result<GruIds> {
            Ok(GruIds {
                w: id(format!("{name}.w"))?,
                b: id(format!("{name}.b"))?,
                u: id(format!("{name}.u"))?,
            })
        };
        let fc = (0..cfg.fc_dims.len())
            .map(|i| Ok((id(format!("fc{i}.w"))?, id(format!("fc{i}.b"))?)))
            .collect::<Result<_>>()?;
        let post = (0..cfg.postnet.layers)
            .map(|l| Ok((id(format!("post{l}.k"))?, id(format!("post{l}.b"))?)))
            .collect::<Result<_>>()?;
        let mut ctx = Vec::new();
        if cfg.use_context {
            for side in SIDES {
                for layer in 0..cfg.context_layers {
                    for dir in DIRS {
                        ctx.push(gru(&format!("ctx.{side}.{layer}.{dir}"))?);
                    }
                }
            }
        }
        Ok(Ids {
            fc,
            bi: [gru("bi.fwd")?, gru("bi.bwd")?],
            uni: gru("uni")?,
            out: (id("out.w".into())?, id("out.b".into())?),
            post,
            ctx,
        })
    }

    fn ctx_ids(&self, side: usize, layer: usize, dir: usize) -> GruIds {
        self.ids.ctx[(side * self.cfg.context_layers + layer) * 2 + dir]
    }

    // ---- checkpoint -------------------------------------------------------

    /// `PMDL`, u32 header length, JSON header with the config, then the
    /// `PCKP` parameter blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.cfg.clone(),
        })
        .expect("config serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::format("model checkpoint", "missing PMDL magic"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("model checkpoint", "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..end])?;
        let params = ParameterSet::from_bytes(&bytes[end..])?;
        Self::from_parts(header.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    // ---- graph construction ----------------------------------------------

    /// Runs a GRU over a time-major sequence; returns the stacked states (in
    /// time order) and the final state.
    #[allow(clippy::too_many_arguments)]
    fn gru_seq(
        &self,
        g: &mut Graph,
        x: Var,
        ids: GruIds,
        batch: usize,
        frames: usize,
        masks: Option<&[Vec<f64>]>,
        reverse: bool,
    ) -> Result<(Var, Var)> {
        let (w, b, u) = (g.param(ids.w), g.param(ids.b), g.param(ids.u));
        let hidden = self.params.value(ids.u).nrows();
        let xp = g.dense(x, w, Some(b))?;
        let mut h = g.input(Array2::zeros((batch, hidden)));
        let mut states = vec![h; frames];
        let order: Vec<usize> = if reverse {
            (0..frames).rev().collect()
        } else {
            (0..frames).collect()
        };
        for t in order {
            let xt = g.slice_rows(xp, t * batch, batch)?;
            h = g.gru_cell(xt, h, u, masks.map(|m| m[t].clone()))?;
            states[t] = h;
        }
        Ok((g.stack_rows(&states)?, h))
    }

    fn step_masks(lens: &[usize], frames: usize) -> Option<Vec<Vec<f64>>> {
        if lens.iter().all(|&l| l == frames) {
            return None;
        }
        Some(
            (0..frames)
                .map(|t| lens.iter().map(|&l| (t < l) as u8 as f64).collect())
                .collect(),
        )
    }

    /// `B × 512` summary of the items' contexts.
    fn summary_graph(&self, g: &mut Graph, items: &[&Prepared]) -> Result<Var> {
        let b = items.len();
        let hidden = self.cfg.context_hidden;
        let mut finals = Vec::new();
        for side in 0..2 {
            let ctxs: Vec<Option<&Array2<f64>>> = items
                .iter()
                .map(|it| if side == 0 { it.ctx_pre.as_ref() } else { it.ctx_post.as_ref() })
                .collect();
            let lens: Vec<usize> = ctxs.iter().map(|c| c.map_or(0, |m| m.nrows())).collect();
            let frames = lens.iter().copied().max().unwrap_or(0);
            if frames == 0 {
                finals.push(g.input(Array2::zeros((b, 2 * hidden))));
                continue;
            }
            let mut x0 = Array2::zeros((frames * b, self.cfg.context_width()));
            for (i, c) in ctxs.iter().enumerate() {
                if let Some(m) = c {
                    for t in 0..m.nrows() {
                        x0.row_mut(t * b + i).assign(&m.row(t));
                    }
                }
            }
            let masks = Self::step_masks(&lens, frames);
            let mut x = g.input(x0);
            let mut last = (x, x);
            for layer in 0..self.cfg.context_layers {
                let (f, hf) = self.gru_seq(g, x, self.ctx_ids(side, layer, 0), b, frames, masks.as_deref(), false)?;
                let (r, hb) = self.gru_seq(g, x, self.ctx_ids(side, layer, 1), b, frames, masks.as_deref(), true)?;
                x = g.concat_cols(&[f, r])?;
                last = (hf, hb);
            }
            finals.push(g.concat_cols(&[last.0, last.1])?);
        }
        g.concat_cols(&finals)
    }

    /// Everything up to the bidirectional GRU output (`T·B × 2·bi_hidden`).
    fn encode(&self, g: &mut Graph, items: &[&Prepared]) -> Result<(Var, usize)> {
        let b = items.len();
        let lens: Vec<usize> = items.iter().map(|it| it.frames()).collect();
        let frames = lens.iter().copied().max().unwrap_or(0);
        let (f, k) = (self.cfg.feature_width(), self.cfg.n_classes);
        let mut feats = Array2::zeros((frames * b, f));
        let mut cons = Array2::zeros((frames * b, k + 1));
        for (i, it) in items.iter().enumerate() {
            for t in 0..it.frames() {
                let row = t * b + i;
                feats.row_mut(row).assign(&it.feats.row(t));
                if let Some(c) = it.cons.get(t) {
                    cons[[row, c as usize]] = 1.0;
                    cons[[row, k]] = 1.0;
                }
            }
        }
        let mut parts = vec![g.input(feats)];
        if self.cfg.use_context {
            let s = self.summary_graph(g, items)?;
            parts.push(g.tile_rows(s, frames));
        }
        parts.push(g.input(cons));
        let mut h = g.concat_cols(&parts)?;
        for &(w, bias) in &self.ids.fc {
            let (w, bias) = (g.param(w), g.param(bias));
            let d = g.dense(h, w, Some(bias))?;
            h = g.relu(d);
        }
        let masks = Self::step_masks(&lens, frames);
        let (fwd, _) = self.gru_seq(g, h, self.ids.bi[0], b, frames, None, false)?;
        let (bwd, _) = self.gru_seq(g, h, self.ids.bi[1], b, frames, masks.as_deref(), true)?;
        Ok((g.concat_cols(&[fwd, bwd])?, frames))
    }

    /// Autoregressive GRU, output layer and postnet given fixed AR inputs.
    fn decode(&self, g: &mut Graph, bi: Var, ar: &[Vec<Option<u8>>], frames: usize) -> Result<(Var, Var)> {
        let b = ar.len();
        let mut onehot = Array2::zeros((frames * b, self.cfg.n_classes));
        for (i, seq) in ar.iter().enumerate() {
            for (t, v) in seq.iter().enumerate() {
                if let Some(k) = v {
                    onehot[[t * b + i, *k as usize]] = 1.0;
                }
            }
        }
        let oh = g.input(onehot);
        let x = g.concat_cols(&[bi, oh])?;
        let (hs, _) = self.gru_seq(g, x, self.ids.uni, b, frames, None, false)?;
        let (w, bias) = (g.param(self.ids.out.0), g.param(self.ids.out.1));
        let pre = g.dense(hs, w, Some(bias))?;
        let mut y = pre;
        let layers = self.ids.post.len();
        for (l, &(k, kb)) in self.ids.post.iter().enumerate() {
            let (k, kb) = (g.param(k), g.param(kb));
            y = g.conv1d(y, k, Some(kb), b, Padding::Causal)?;
            if l + 1 < layers {
                y = g.tanh(y);
            }
        }
        let post = g.add(pre, y)?;
        Ok((pre, post))
    }

    /// Teacher-forced training loss for a prepared batch with fixed AR
    /// inputs, and its gradients.
    pub(crate) fn batch_loss(&self, items: &[Prepared], ar: &[Vec<Option<u8>>]) -> Result<(f64, Gradients)> {
        let refs: Vec<&Prepared> = items.iter().collect();
        let b = items.len();
        let mut g = Graph::new(&self.params);
        let (bi, frames) = self.encode(&mut g, &refs)?;
        let (pre, post) = self.decode(&mut g, bi, ar, frames)?;
        let mut targets = vec![0usize; frames * b];
        let mut weights = vec![0.0; frames * b];
        for (i, it) in items.iter().enumerate() {
            let teacher = it
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Config("training needs a teacher contour".into()))?;
            for (t, &c) in teacher.iter().enumerate() {
                targets[t * b + i] = c as usize;
                weights[t * b + i] = 1.0;
            }
        }
        let lp = g.softmax_xent(pre, &targets, Some(&weights))?;
        let lq = g.softmax_xent(post, &targets, Some(&weights))?;
        let loss = g.add(lp, lq)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss is {value}")));
        }
        Ok((value, g.backward(loss)))
    }

    /// Teacher-forced logits for a prepared batch (for diagnostics/tests).
    pub(crate) fn batch_logits(&self, items: &[Prepared], ar: &[Vec<Option<u8>>]) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let refs: Vec<&Prepared> = items.iter().collect();
        let b = items.len();
        let mut g = Graph::new(&self.params);
        let (bi, frames) = self.encode(&mut g, &refs)?;
        let (pre, post) = self.decode(&mut g, bi, ar, frames)?;
        let pick = |v: &Array2<f64>, i: usize, len: usize| {
            let rows: Vec<usize> = (0..len).map(|t| t * b + i).collect();
            v.select(Axis(0), &rows)
        };
        Ok(items
            .iter()
            .enumerate()
            .map(|(i, it)| (pick(g.value(pre), i, it.frames()), pick(g.value(post), i, it.frames())))
            .collect())
    }

    // ---- incremental engine ----------------------------------------------

    /// Frame-by-frame evaluation for one utterance. After each frame,
    /// `policy(t, post_logits_t)` returns the class emitted at `t` and the
    /// autoregressive input for `t + 1`.
    pub(crate) fn run_incremental(
        &self,
        item: &Prepared,
        mut policy: impl FnMut(usize, ArrayView1<f64>) -> Result<(u8, Option<u8>)>,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<u8>, Vec<Option<u8>>)> {
        let frames = item.frames();
        let k = self.cfg.n_classes;
        let nb = 2 * self.cfg.bi_hidden;
        let bi_out = {
            let mut g = Graph::new(&self.params);
            let (bi, _) = self.encode(&mut g, &[item])?;
            g.value(bi).clone()
        };
        let p = &self.params;
        let (wu, bu, uu) = (p.value(self.ids.uni.w), p.value(self.ids.uni.b), p.value(self.ids.uni.u));
        let (wo, bo) = (p.value(self.ids.out.0), p.value(self.ids.out.1));
        let xp_base = matmul(bi_out.view(), wu.slice(s![..nb, ..])) + bu;
        let pn = self.cfg.postnet;
        let mut ins: Vec<Array2<f64>> = (0..pn.layers)
            .map(|l| Array2::zeros((frames, if l == 0 { k } else { pn.channels })))
            .collect();
        let mut pre = Array2::zeros((frames, k));
        let mut post = Array2::zeros((frames, k));
        let mut h = Array2::zeros((1, self.cfg.uni_hidden));
        let mut chosen = Vec::with_capacity(frames);
        let mut ar = Vec::with_capacity(frames);
        let mut prev: Option<u8> = None;
        for t in 0..frames {
            ar.push(prev);
            let mut xp = xp_base.slice(s![t..t + 1, ..]).to_owned();
            if let Some(c) = prev {
                xp += &wu.row(nb + c as usize);
            }
            h = gru_cell_forward(xp.view(), h.view(), uu.view()).0;
            let logits = matmul(h.view(), wo.view()) + bo;
            pre.row_mut(t).assign(&logits.row(0));
            ins[0].row_mut(t).assign(&logits.row(0));
            for (l, &(kid, bid)) in self.ids.post.iter().enumerate() {
                let kernel = p.value(kid);
                let c_in = ins[l].ncols();
                let mut y = p.value(bid).clone();
                for kk in 0..pn.kernel {
                    let src = t as isize + kk as isize - (pn.kernel as isize - 1);
                    if src < 0 {
                        continue;
                    }
                    let src = src as usize;
                    matmul_acc(
                        ins[l].slice(s![src..src + 1, ..]),
                        kernel.slice(s![kk * c_in..(kk + 1) * c_in, ..]),
                        y.view_mut(),
                    );
                }
                if l + 1 < pn.layers {
                    ins[l + 1].row_mut(t).assign(&y.row(0).mapv(f64::tanh));
                } else {
                    post.row_mut(t).assign(&(&logits.row(0) + &y.row(0)));
                }
            }
            let (c, next) = policy(t, post.row(t))?;
            chosen.push(c);
            prev = next;
        }
        Ok((pre, post, chosen, ar))
    }

    // ---- public API -------------------------------------------------------

    /// Normalises one utterance into model time order.
    pub(crate) fn prepare(
        &self,
        feats: ArrayView2<f64>,
        voiced: &[bool],
        ctx: &ContextBundle,
        teacher: Option<&[u8]>,
        cons: &ConstraintTrack,
    ) -> Result<Prepared> {
        let frames = feats.nrows();
        if frames == 0 {
            return Err(Error::Shape("utterance has no frames".into()));
        }
        if feats.ncols() != self.cfg.feature_width() {
            return Err(Error::Shape(format!(
                "feature width {} but the model expects {}",
                feats.ncols(),
                self.cfg.feature_width()
            )));
        }
        if voiced.len() != frames || teacher.is_some_and(|q| q.len() != frames) {
            return Err(Error::Shape("voicing/teacher length differs from features".into()));
        }
        cons.validate(voiced)?;
        for c in [&ctx.preceding, &ctx.following].into_iter().flatten() {
            if c.ncols() != self.cfg.context_width() {
                return Err(Error::Shape(format!(
                    "context width {} but the model expects {}",
                    c.ncols(),
                    self.cfg.context_width()
                )));
            }
        }
        let keep = |c: &Option<Array2<f64>>| {
            c.as_ref().filter(|m| m.nrows() > 0 && self.cfg.use_context).cloned()
        };
        let mut p = Prepared {
            feats: feats.to_owned(),
            voiced: voiced.to_vec(),
            cons: cons.clone(),
            teacher: teacher.map(|q| q.to_vec()),
            ctx_pre: keep(&ctx.preceding),
            ctx_post: keep(&ctx.following),
        };
        if self.cfg.direction == Direction::Reverse {
            p.feats = flip_rows(&p.feats);
            p.voiced.reverse();
            p.cons = p.cons.reversed();
            if let Some(q) = &mut p.teacher {
                q.reverse();
            }
            let pre = p.ctx_post.take().map(|m| flip_rows(&m));
            let post = p.ctx_pre.take().map(|m| flip_rows(&m));
            p.ctx_pre = pre;
            p.ctx_post = post;
        }
        Ok(p)
    }

    fn restore_order(&self, mut out: ModelOutput, ar: &mut Vec<Option<u8>>) -> ModelOutput {
        if self.cfg.direction == Direction::Reverse {
            out.pre_logits = flip_rows(&out.pre_logits);
            out.post_logits = flip_rows(&out.post_logits);
            out.sampled_bins.reverse();
            ar.reverse();
        }
        out
    }

    /// Summarises preceding/following context matrices (forward roles).
    pub fn summarize_context(
        &self,
        preceding: Option<Array2<f64>>,
        following: Option<Array2<f64>>,
    ) -> Result<ContextBundle> {
        let mut bundle = ContextBundle {
            preceding,
            following,
            summary: Vec::new(),
        };
        if !self.cfg.use_context {
            return Ok(bundle);
        }
        for c in [&bundle.preceding, &bundle.following].into_iter().flatten() {
            if c.ncols() != self.cfg.context_width() {
                return Err(Error::Shape(format!(
                    "context width {} but the model expects {}",
                    c.ncols(),
                    self.cfg.context_width()
                )));
            }
        }
        let item = Prepared {
            feats: Array2::zeros((0, 0)),
            voiced: Vec::new(),
            cons: ConstraintTrack::empty(0),
            teacher: None,
            ctx_pre: bundle.preceding.clone().filter(|m| m.nrows() > 0),
            ctx_post: bundle.following.clone().filter(|m| m.nrows() > 0),
        };
        let mut g = Graph::new(&self.params);
        let s = self.summary_graph(&mut g, &[&item])?;
        bundle.summary = g.value(s).row(0).to_vec();
        Ok(bundle)
    }

    /// One pass over an utterance. Train modes need `teacher`; the returned
    /// `sampled_bins` are the voicing-masked argmax (train) or samples (infer),
    /// always equal to the constraint at constrained frames.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        feats: &FrameFeatures,
        ctx: &ContextBundle,
        teacher: Option<&QuantizedF0>,
        constraints: &ConstraintTrack,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<ModelOutput> {
        self.forward_instrumented(feats, ctx, teacher, constraints, rng, mode)
            .map(|(o, _)| o)
    }

    /// As [`Model::forward`], also returning the autoregressive input fed at
    /// every frame (`None` = zero vector), in utterance order.
    pub fn forward_instrumented(
        &self,
        feats: &FrameFeatures,
        ctx: &ContextBundle,
        teacher: Option<&QuantizedF0>,
        constraints: &ConstraintTrack,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<(ModelOutput, Vec<Option<u8>>)> {
        if mode.needs_teacher() && teacher.is_none() {
            return Err(Error::Config("training modes need a teacher contour".into()));
        }
        let voiced = feats.voiced_mask();
        let item = self.prepare(
            feats.matrix.view(),
            &voiced,
            ctx,
            teacher.map(|q| q.bins.as_slice()),
            constraints,
        )?;
        let (out, mut ar) = self.run_mode(&item, rng, mode)?;
        let out = self.restore_order(out, &mut ar);
        Ok((out, ar))
    }

    pub(crate) fn run_mode(
        &self,
        item: &Prepared,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<(ModelOutput, Vec<Option<u8>>)> {
        let teacher = item.teacher.clone().unwrap_or_default();
        let (pre, post, bins, ar) = self.run_incremental(item, |t, logits| {
            let masked = voicing_masked(logits, item.voiced[t]);
            if let Some(c) = item.cons.get(t) {
                return Ok((c, Some(c)));
            }
            match mode {
                Mode::Infer { temperature } => {
                    let c = sample_categorical(&masked, rng, temperature)? as u8;
                    Ok((c, Some(c)))
                }
                Mode::TrainDataDropout { p } => {
                    let c = argmax(&masked) as u8;
                    let next = if p > 0.0 && rng.bernoulli(p) { None } else { Some(teacher[t]) };
                    Ok((c, next))
                }
                Mode::TrainScheduledSampling { p } => {
                    let c = sample_categorical(&masked, rng, 1.0)? as u8;
                    let next = if p > 0.0 && rng.bernoulli(p) { Some(c) } else { Some(teacher[t]) };
                    Ok((c, next))
                }
            }
        })?;
        Ok((
            ModelOutput {
                pre_logits: pre,
                post_logits: post,
                sampled_bins: bins,
            },
            ar,
        ))
    }

    /// Training loss (`xent(pre) + xent(post)` per frame) of one utterance
    /// under pure teacher forcing, with gradients for every parameter. The
    /// AR input at each frame is the previous frame's constraint if any,
    /// else its reference class. Context is encoded inside the graph, so
    /// context-summariser weights receive gradients too.
    pub fn teacher_forced_loss(
        &self,
        feats: &FrameFeatures,
        ctx: &ContextBundle,
        teacher: &QuantizedF0,
        constraints: &ConstraintTrack,
    ) -> Result<(f64, Gradients)> {
        let item = self.prepare(feats.matrix.view(), &feats.voiced_mask(), ctx, Some(&teacher.bins), constraints)?;
        let q = item.teacher.as_ref().expect("teacher given");
        let ar = (0..item.frames())
            .map(|t| (t > 0).then(|| item.cons.get(t - 1).unwrap_or(q[t - 1])))
            .collect();
        self.batch_loss(&[item], &[ar])
    }

    /// Free-running generation; returns the model output and the dequantised
    /// contour, whose voicing equals `voiced`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        feats: &FrameFeatures,
        ctx: &ContextBundle,
        constraints: &ConstraintTrack,
        voiced: &[bool],
        grid: &QuantGrid,
        rng: &mut RngStream,
        temperature: f64,
    ) -> Result<(ModelOutput, F0Contour)> {
        let item = self.prepare(feats.matrix.view(), voiced, ctx, None, constraints)?;
        let (out, mut ar) = self.run_mode(&item, rng, Mode::Infer { temperature })?;
        let out = self.restore_order(out, &mut ar);
        let contour = dequantize(&QuantizedF0::new(out.sampled_bins.clone())?, grid)?;
        Ok((out, contour))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureLayout;
    use crate::model::{ExposureStrategy, PostnetConfig};

    fn tiny(direction: Direction) -> ModelConfig {
        ModelConfig {
            embedding_dim: 4,
            fc_dims: [6, 5],
            bi_hidden: 3,
            uni_hidden: 7,
            postnet: PostnetConfig {
                layers: 3,
                kernel: 3,
                channels: 4,
            },
            direction,
            context_hidden: 3,
            context_layers: 2,
            exposure: ExposureStrategy::ScheduledSampling,
            ..ModelConfig::cdar()
        }
    }

    /// Random features with a voiced middle section and a matching teacher.
    fn utterance(cfg: &ModelConfig, frames: usize, seed: u64) -> (FrameFeatures, QuantizedF0) {
        let layout = FeatureLayout::new(cfg.embedding_dim);
        let mut rng = RngStream::new(seed);
        let mut m = Array2::from_shape_fn((frames, layout.width()), |_| rng.uniform() - 0.5);
        let mut bins = Vec::new();
        for t in 0..frames {
            let voiced = t >= frames / 4 && t < frames - frames / 5;
            m[[t, layout.vuv]] = voiced as u8 as f64;
            bins.push(if voiced { 1 + rng.below(127) as u8 } else { 0 });
        }
        (FrameFeatures { matrix: m, layout }, QuantizedF0::new(bins).unwrap())
    }

    fn context(cfg: &ModelConfig, frames: usize, seed: u64) -> Array2<f64> {
        let (f, q) = utterance(cfg, frames, seed);
        crate::features::context_features(&f, &q).unwrap()
    }

    fn teacher_ar(item: &Prepared) -> Vec<Option<u8>> {
        let q = item.teacher.as_ref().unwrap();
        (0..q.len()).map(|t| (t > 0).then(|| q[t - 1])).collect()
    }

    #[test]
    fn incremental_engine_matches_graph() {
        for dir in [Direction::Forward, Direction::Reverse] {
            let cfg = tiny(dir);
            let model = Model::new(cfg.clone(), 3).unwrap();
            let mut items = Vec::new();
            for (i, frames) in [9usize, 6].into_iter().enumerate() {
                let (f, q) = utterance(&cfg, frames, 10 + i as u64);
                let ctx = ContextBundle {
                    preceding: Some(context(&cfg, 4 + i, 20 + i as u64)),
                    following: (i == 0).then(|| context(&cfg, 3, 30)),
                    summary: Vec::new(),
                };
                let mut mask = vec![false; frames];
                mask[2] = true;
                let cons = ConstraintTrack::from_mask(mask, &q).unwrap();
                items.push(model.prepare(f.matrix.view(), &f.voiced_mask(), &ctx, Some(&q.bins), &cons).unwrap());
            }
            let ars: Vec<_> = items.iter().map(teacher_ar).collect();
            let batched = model.batch_logits(&items, &ars).unwrap();
            for (item, (pre_g, post_g)) in items.iter().zip(&batched) {
                let q = item.teacher.clone().unwrap();
                let (pre, post, _, ar) = model
                    .run_incremental(item, |t, _| Ok((q[t], Some(q[t]))))
                    .unwrap();
                assert_eq!(ar, teacher_ar(item));
                let err = (&pre - pre_g).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                let err2 = (&post - post_g).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(err < 1e-10 && err2 < 1e-10, "{dir:?}: {err} {err2}");
            }
        }
    }

    #[test]
    fn composed_training_graph_gradient() {
        let cfg = tiny(Direction::Reverse);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let (f, q) = utterance(&cfg, 6, 1);
        let ctx = ContextBundle {
            preceding: Some(context(&cfg, 3, 2)),
            following: Some(context(&cfg, 2, 3)),
            summary: Vec::new(),
        };
        let item = model
            .prepare(f.matrix.view(), &f.voiced_mask(), &ctx, Some(&q.bins), &ConstraintTrack::empty(6))
            .unwrap();
        let ar = vec![teacher_ar(&item)];
        let items = vec![item];
        let (_, grads) = model.batch_loss(&items, &ar).unwrap();
        let h = 1e-5;
        let mut rng = RngStream::new(8);
        for id in model.params.ids() {
            let n = model.params.value(id).len();
            for _ in 0..2 {
                let idx = rng.below(n);
                let cols = model.params.value(id).ncols();
                let (r, c) = (idx / cols, idx % cols);
                let mut plus = model.clone();
                plus.params.value_mut(id)[[r, c]] += h;
                let mut minus = model.clone();
                minus.params.value_mut(id)[[r, c]] -= h;
                let numeric = (plus.batch_loss(&items, &ar).unwrap().0 - minus.batch_loss(&items, &ar).unwrap().0) / (2.0 * h);
                let analytic = grads.params().find(|(i, _)| *i == id).map_or(0.0, |(_, g)| g[[r, c]]);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(err < 1e-3, "{} [{r},{c}]: {analytic} vs {numeric}", model.params.name(id));
            }
        }
    }

    #[test]
    fn reverse_equals_forward_on_flipped_input() {
        let rev = Model::new(tiny(Direction::Reverse), 4).unwrap();
        let fwd = Model::from_parts(tiny(Direction::Forward), rev.params.clone()).unwrap();
        let cfg = rev.config().clone();
        let (f, q) = utterance(&cfg, 10, 6);
        let pre_ctx = context(&cfg, 4, 7);
        let post_ctx = context(&cfg, 5, 8);
        let mut mask = vec![false; 10];
        mask[4] = true;
        mask[5] = true;
        let cons = ConstraintTrack::from_mask(mask, &q).unwrap();
        let ctx = ContextBundle {
            preceding: Some(pre_ctx.clone()),
            following: Some(post_ctx.clone()),
            summary: Vec::new(),
        };
        let a = rev
            .forward(&f, &ctx, Some(&q), &cons, &mut RngStream::new(1), Mode::teacher())
            .unwrap();
        let flipped = FrameFeatures {
            matrix: flip_rows(&f.matrix),
            layout: f.layout.clone(),
        };
        let mut qb = q.bins.clone();
        qb.reverse();
        let ctx_f = ContextBundle {
            preceding: Some(flip_rows(&post_ctx)),
            following: Some(flip_rows(&pre_ctx)),
            summary: Vec::new(),
        };
        let b = fwd
            .forward(
                &flipped,
                &ctx_f,
                Some(&QuantizedF0::new(qb).unwrap()),
                &cons.reversed(),
                &mut RngStream::new(1),
                Mode::teacher(),
            )
            .unwrap();
        assert!((flip_rows(&b.post_logits) - &a.post_logits).iter().all(|d| d.abs() < 1e-12));
        let mut bins = b.sampled_bins.clone();
        bins.reverse();
        assert_eq!(bins, a.sampled_bins);
    }

    #[test]
    fn full_dropout_feeds_only_constraints() {
        for dir in [Direction::Forward, Direction::Reverse] {
            let model = Model::new(tiny(dir), 2).unwrap();
            let cfg = model.config().clone();
            let (f, q) = utterance(&cfg, 20, 3);
            let mut mask = vec![false; 20];
            for t in [3, 4, 10, 19] {
                mask[t] = true;
            }
            let cons = ConstraintTrack::from_mask(mask, &q).unwrap();
            let (out, ar) = model
                .forward_instrumented(
                    &f,
                    &ContextBundle::absent(),
                    Some(&q),
                    &cons,
                    &mut RngStream::new(0),
                    Mode::TrainDataDropout { p: 1.0 },
                )
                .unwrap();
            // In model time order the predecessor of frame t is t-1 (forward)
            // or t+1 (reverse).
            for t in 0..20 {
                let pred = match dir {
                    Direction::Forward => (t as usize).checked_sub(1),
                    Direction::Reverse => (t + 1 < 20).then_some(t + 1),
                };
                let expect = pred.and_then(|p| cons.get(p));
                assert_eq!(ar[t], expect, "{dir:?} frame {t}");
            }
            for t in 0..20 {
                if let Some(c) = cons.get(t) {
                    assert_eq!(out.sampled_bins[t], c);
                }
            }
        }
    }

    #[test]
    fn generation_obeys_constraints_and_voicing() {
        let model = Model::new(tiny(Direction::Reverse), 9).unwrap();
        let cfg = model.config().clone();
        let (f, q) = utterance(&cfg, 30, 4);
        let grid = QuantGrid::new(7.5, 0.3).unwrap();
        let voiced = f.voiced_mask();
        let mut rng = RngStream::new(12);
        for trial in 0..10 {
            let mask: Vec<bool> = (0..30).map(|_| rng.bernoulli(0.3)).collect();
            let cons = ConstraintTrack::from_mask(mask, &q).unwrap();
            let (out, contour) = model
                .generate(&f, &ContextBundle::absent(), &cons, &voiced, &grid, &mut RngStream::new(trial), 1.0)
                .unwrap();
            for t in 0..30 {
                assert_eq!(out.sampled_bins[t] != 0, voiced[t]);
                assert_eq!(contour.is_voiced(t), voiced[t]);
                if let Some(c) = cons.get(t) {
                    assert_eq!(out.sampled_bins[t], c);
                }
            }
        }
        let full = ConstraintTrack::full(&q);
        let (out, _) = model
            .generate(&f, &ContextBundle::absent(), &full, &voiced, &grid, &mut RngStream::new(0), 1.0)
            .unwrap();
        assert_eq!(out.sampled_bins, q.bins);
    }

    #[test]
    fn mismatched_constraint_voicing_is_rejected() {
        let model = Model::new(tiny(Direction::Forward), 1).unwrap();
        let (f, q) = utterance(model.config(), 10, 1);
        let mut cons = ConstraintTrack::empty(10);
        cons.mask[0] = true;
        cons.bins[0] = 50; // frame 0 is unvoiced
        let grid = QuantGrid::new(7.5, 0.3).unwrap();
        let err = model
            .generate(&f, &ContextBundle::absent(), &cons, &f.voiced_mask(), &grid, &mut RngStream::new(0), 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::VuvMismatch { frame: 0 }));
        let _ = q;
    }

    #[test]
    fn same_seed_same_samples() {
        let model = Model::new(tiny(Direction::Reverse), 9).unwrap();
        let (f, _) = utterance(model.config(), 25, 4);
        let grid = QuantGrid::new(7.5, 0.3).unwrap();
        let run = |seed| {
            model
                .generate(&f, &ContextBundle::absent(), &ConstraintTrack::empty(25), &f.voiced_mask(), &grid, &mut RngStream::new(seed), 1.0)
                .unwrap()
                .0
                .sampled_bins
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let model = Model::new(tiny(Direction::Reverse), 6).unwrap();
        let bytes = model.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config(), model.config());
        let (f, q) = utterance(model.config(), 8, 2);
        let run = |m: &Model| {
            m.forward(&f, &ContextBundle::absent(), Some(&q), &ConstraintTrack::empty(8), &mut RngStream::new(0), Mode::teacher())
                .unwrap()
        };
        assert_eq!(run(&model), run(&back));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn summary_is_zero_without_context_and_512_wide_with_it() {
        let model = Model::new(ModelConfig::cdar(), 0).unwrap();
        let none = model.summarize_context(None, None).unwrap();
        assert_eq!(none.summary, vec![0.0; 512]);
        let cfg = model.config().clone();
        let some = model.summarize_context(Some(context(&cfg, 5, 1)), None).unwrap();
        assert_eq!(some.summary.len(), 512);
        assert!(some.summary[..256].iter().any(|v| *v != 0.0));
        assert!(some.summary[256..].iter().all(|v| *v == 0.0));
    }
}
