//! Define-by-run computation graph over 2-D `f64` arrays with reverse-mode
//! differentiation.
//!
//! Every operation evaluates eagerly and records itself on the tape; calling
//! [`Graph::backward`] walks the tape in reverse. Sequences are laid out
//! time-major: row `t·batch + b` holds frame `t` of batch element `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::params::{ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output frame t is centred on input frame t.
    Same,
    /// Output frame t sees input frames t-width+1 ..= t only.
    Causal,
}

impl Padding {
    pub(crate) fn offset(self, width: usize) -> usize {
        match self {
            Padding::Same => width / 2,
            Padding::Causal => width - 1,
        }
    }
}

struct GruCache {
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    /// U_n h, needed for the reset-gate gradient.
    hn: Array2<f64>,
}

enum Op {
    Input,
    Param(ParamId),
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    StackRows(Vec<Var>),
    TileRows { x: Var, times: usize },
    GruCell { xp: Var, h: Var, u: Var, mask: Option<Vec<f64>>, cache: GruCache },
    Conv1d { x: Var, k: Var, b: Option<Var>, batch: usize, padding: Padding },
    SoftmaxXent { logits: Var, grad: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the root.
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, one per parameter node (a parameter used by
    /// several nodes appears several times).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_ref().map(|g| (p, g)))
    }
}

pub struct Graph<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest row (or inner) count handled by the hand-written kernels; the
/// packed GEMM only pays off beyond it.
const SMALL: usize = 8;

/// `c += a · b`.
///
/// Recurrent steps multiply a handful of rows by a large weight matrix, where
/// the packing overhead of a general GEMM dominates; those shapes (and thin
/// outer products) use contiguous axpy/dot loops instead.
pub(crate) fn matmul_acc(a: ArrayView2<f64>, b: ArrayView2<f64>, mut c: ArrayViewMut2<f64>) {
    let (m, k) = a.dim();
    let small = m <= SMALL || k <= SMALL;
    if small && c.is_standard_layout() {
        if let Some(bs) = b.as_slice() {
            // c.row(i) += a[i, kk] · b.row(kk)
            let n = b.ncols();
            let cs = c.as_slice_mut().expect("checked");
            for i in 0..m {
                let ci = &mut cs[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = a[[i, kk]];
                    if aik == 0.0 {
                        continue;
                    }
                    let bk = &bs[kk * n..(kk + 1) * n];
                    for (cv, bv) in ci.iter_mut().zip(bk) {
                        *cv += aik * bv;
                    }
                }
            }
            return;
        }
        let bt = b.t();
        if m <= SMALL && a.is_standard_layout() && bt.is_standard_layout() {
            // c[i, j] += a.row(i) · bᵀ.row(j)
            let n = b.ncols();
            let (as_, bts) = (a.as_slice().expect("checked"), bt.as_slice().expect("checked"));
            let cs = c.as_slice_mut().expect("checked");
            for i in 0..m {
                let ai = &as_[i * k..(i + 1) * k];
                for j in 0..n {
                    let bj = &bts[j * k..(j + 1) * k];
                    cs[i * n + j] += ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            return;
        }
    }
    general_mat_mul(1.0, &a, &b, 1.0, &mut c);
}

/// `a · b` as a new array.
pub(crate) fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    matmul_acc(a, b, c.view_mut());
    c
}

/// Reset-after GRU cell on pre-computed input projections `xp = xW + b`
/// (columns ordered z | r | n).
pub(crate) fn gru_cell_forward(
    xp: ArrayView2<f64>,
    h: ArrayView2<f64>,
    u: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let hsz = h.ncols();
    let hu = matmul(h, u);
    let rows = h.nrows();
    let mut z = Array2::zeros((rows, hsz));
    let mut r = Array2::zeros((rows, hsz));
    let mut n = Array2::zeros((rows, hsz));
    let mut out = Array2::zeros((rows, hsz));
    let hn = hu.slice(s![.., 2 * hsz..]).to_owned();
    for i in 0..rows {
        for j in 0..hsz {
            let zz = sigmoid(xp[[i, j]] + hu[[i, j]]);
            let rr = sigmoid(xp[[i, hsz + j]] + hu[[i, hsz + j]]);
            let nn = (xp[[i, 2 * hsz + j]] + rr * hn[[i, j]]).tanh();
            z[[i, j]] = zz;
            r[[i, j]] = rr;
            n[[i, j]] = nn;
            out[[i, j]] = (1.0 - zz) * nn + zz * h[[i, j]];
        }
    }
    (out, z, r, n, hn)
}

/// Causal/same 1-D convolution over a time-major batch. Kernel rows are
/// `k·c_in + c`.
pub(crate) fn conv1d_forward(
    x: ArrayView2<f64>,
    k: ArrayView2<f64>,
    bias: Option<ArrayView2<f64>>,
    batch: usize,
    padding: Padding,
) -> Array2<f64> {
    let c_in = x.ncols();
    let width = k.nrows() / c_in;
    let frames = x.nrows() / batch;
    let off = padding.offset(width);
    let mut y = Array2::zeros((x.nrows(), k.ncols()));
    for kk in 0..width {
        let shift = kk as isize - off as isize;
        let (t0, t1) = shifted_range(frames, shift);
        if t0 >= t1 {
            continue;
        }
        let src = ((t0 as isize + shift) as usize * batch)..((t1 as isize + shift) as usize * batch);
        let kernel = k.slice(s![kk * c_in..(kk + 1) * c_in, ..]);
        let mut dst = y.slice_mut(s![t0 * batch..t1 * batch, ..]);
        matmul_acc(x.slice(s![src, ..]), kernel, dst.view_mut());
    }
    if let Some(b) = bias {
        y += &b;
    }
    y
}

/// Output frames `[t0, t1)` whose input frame `t + shift` lies in `[0, frames)`.
fn shifted_range(frames: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (frames as isize - shift.max(0)).max(0) as usize;
    (t0.min(frames), t1)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match self.nodes[v.0].op {
            Op::Param(p) => self.params.value(p),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Array2::zeros((0, 0)), Op::Param(id))
    }

    /// `x·W + b`, with `b` a `1×O` row.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ((n, i), (wi, o)) = (self.shape(x), self.shape(w));
        if i != wi {
            return Err(Error::Shape(format!("dense: input {n}×{i} vs weight {wi}×{o}")));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, o) {
                return Err(Error::Shape(format!("dense: bias {:?}, expected 1×{o}", self.shape(b))));
            }
        }
        let mut y = matmul(self.value(x).view(), self.value(w).view());
        if let Some(b) = b {
            y += self.value(b);
        }
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.shape(x).0 {
            return Err(Error::Shape("slice_rows out of bounds".into()));
        }
        let y = self.value(x).slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(y, Op::SliceRows { x, start }))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::Shape("stack_rows: column counts differ".into()));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("cols checked");
        Ok(self.push(y, Op::StackRows(parts.to_vec())))
    }

    /// Repeats a `B×C` block `times` times down the rows (broadcast of a
    /// per-sequence vector to every frame of a time-major batch).
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let views: Vec<ArrayView2<f64>> = (0..times).map(|_| v.view()).collect();
        let y = if times == 0 {
            Array2::zeros((0, v.ncols()))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("same shape")
        };
        self.push(y, Op::TileRows { x, times })
    }

    /// One reset-after GRU step given input projections `xp` (`B×3H`),
    /// previous state `h` (`B×H`) and recurrent weights `u` (`H×3H`).
    /// Rows whose `mask` entry is 0 keep their previous state.
    pub fn gru_cell(&mut self, xp: Var, h: Var, u: Var, mask: Option<Vec<f64>>) -> Result<Var> {
        let (b, hsz) = self.shape(h);
        if self.shape(u) != (hsz, 3 * hsz) || self.shape(xp) != (b, 3 * hsz) {
            return Err(Error::Shape(format!(
                "gru_cell: xp {:?}, h {:?}, u {:?}",
                self.shape(xp),
                self.shape(h),
                self.shape(u)
            )));
        }
        if mask.as_ref().is_some_and(|m| m.len() != b) {
            return Err(Error::Shape("gru_cell: mask length".into()));
        }
        let (mut out, z, r, n, hn) =
            gru_cell_forward(self.value(xp).view(), self.value(h).view(), self.value(u).view());
        if let Some(m) = &mask {
            let hv = self.value(h);
            for (i, &mi) in m.iter().enumerate() {
                if mi == 0.0 {
                    out.row_mut(i).assign(&hv.row(i));
                }
            }
        }
        let cache = GruCache { z, r, n, hn };
        Ok(self.push(out, Op::GruCell { xp, h, u, mask, cache }))
    }

    /// Convenience: `gru_cell(x·W + b, h, U)`.
    pub fn gru_step(&mut self, x: Var, h: Var, w: Var, b: Var, u: Var) -> Result<Var> {
        let xp = self.dense(x, w, Some(b))?;
        self.gru_cell(xp, h, u, None)
    }

    /// Convolution along time of a time-major batch `x` (`T·batch × C_in`)
    /// with kernel `k` (`width·C_in × C_out`) and optional `1×C_out` bias.
    pub fn conv1d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        batch: usize,
        padding: Padding,
    ) -> Result<Var> {
        let ((rows, c_in), (kr, c_out)) = (self.shape(x), self.shape(k));
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!("conv1d: {rows} rows not divisible by batch {batch}")));
        }
        if c_in == 0 || kr % c_in != 0 {
            return Err(Error::Shape(format!("conv1d: kernel {kr} rows vs {c_in} channels")));
        }
        if (kr / c_in) % 2 == 0 {
            return Err(Error::Shape(format!("conv1d: even kernel width {}", kr / c_in)));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, c_out) {
                return Err(Error::Shape("conv1d: bias shape".into()));
            }
        }
        let y = conv1d_forward(
            self.value(x).view(),
            self.value(k).view(),
            b.map(|b| self.value(b).view()),
            batch,
            padding,
        );
        Ok(self.push(y, Op::Conv1d { x, k, b, batch, padding }))
    }

    /// Mean cross-entropy over rows with non-zero `weights` (all rows when
    /// `None`); returns a `1×1` node. Rows are weighted, so fractional
    /// weights are allowed.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::Shape("softmax_xent: target/weight length".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::OutOfRange(format!("target class {t} with {k} classes")));
        }
        let ones = vec![1.0; n];
        let w = weights.unwrap_or(&ones);
        let denom: f64 = w.iter().sum();
        let x = self.value(logits);
        let mut grad = Array2::zeros((n, k));
        let mut loss = 0.0;
        if denom > 0.0 {
            for i in 0..n {
                if w[i] == 0.0 {
                    continue;
                }
                let row = x.row(i);
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                loss += w[i] * (lse - row[targets[i]]);
                for j in 0..k {
                    grad[[i, j]] = w[i] * (row[j] - lse).exp() / denom;
                }
                grad[[i, targets[i]]] -= w[i] / denom;
            }
            loss /= denom;
        }
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::SoftmaxXent { logits, grad }))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.shape(root)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        fn acc_with(grads: &mut [Option<Array2<f64>>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Array2<f64>)) {
            let slot = grads[v.0].get_or_insert_with(|| Array2::zeros(shape));
            f(slot);
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    acc_with(&mut grads, *w, wv.dim(), |gw| {
                        matmul_acc(xv.t(), g.view(), gw.view_mut())
                    });
                    acc_with(&mut grads, *x, xv.dim(), |gx| {
                        matmul_acc(g.view(), wv.t(), gx.view_mut())
                    });
                    if let Some(b) = b {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let len = g.nrows();
                    let shape = self.shape(*x);
                    acc_with(&mut grads, *x, shape, |gx| {
                        let mut view = gx.slice_mut(s![*start..start + len, ..]);
                        view += &g;
                    });
                }
                Op::StackRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::TileRows { x, times } => {
                    let shape = self.shape(*x);
                    let mut gx = Array2::zeros(shape);
                    for k in 0..*times {
                        gx += &g.slice(s![k * shape.0..(k + 1) * shape.0, ..]);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::GruCell { xp, h, u, mask, cache } => {
                    let (hv, uv) = (self.value(*h), self.value(*u));
                    let (rows, hsz) = hv.dim();
                    let mut dxp = Array2::zeros((rows, 3 * hsz));
                    let mut dhu = Array2::zeros((rows, 3 * hsz));
                    let mut dh = Array2::zeros((rows, hsz));
                    for i in 0..rows {
                        let m = mask.as_ref().map_or(1.0, |m| m[i]);
                        for j in 0..hsz {
                            let go = g[[i, j]];
                            dh[[i, j]] = (1.0 - m) * go;
                            let d = m * go;
                            let (z, r, n, hn) = (
                                cache.z[[i, j]],
                                cache.r[[i, j]],
                                cache.n[[i, j]],
                                cache.hn[[i, j]],
                            );
                            dh[[i, j]] += d * z;
                            let dn = d * (1.0 - z);
                            let dz = d * (hv[[i, j]] - n);
                            let dan = dn * (1.0 - n * n);
                            let dr = dan * hn;
                            let daz = dz * z * (1.0 - z);
                            let dar = dr * r * (1.0 - r);
                            dxp[[i, j]] = daz;
                            dxp[[i, hsz + j]] = dar;
                            dxp[[i, 2 * hsz + j]] = dan;
                            dhu[[i, j]] = daz;
                            dhu[[i, hsz + j]] = dar;
                            dhu[[i, 2 * hsz + j]] = dan * r;
                        }
                    }
                    acc_with(&mut grads, *u, uv.dim(), |gu| matmul_acc(hv.t(), dhu.view(), gu.view_mut()));
                    matmul_acc(dhu.view(), uv.t(), dh.view_mut());
                    acc(&mut grads, *h, dh);
                    acc(&mut grads, *xp, dxp);
                }
                Op::Conv1d { x, k, b, batch, padding } => {
                    let (xv, kv) = (self.value(*x), self.value(*k));
                    let c_in = xv.ncols();
                    let width = kv.nrows() / c_in;
                    let frames = xv.nrows() / batch;
                    let off = padding.offset(width);
                    let mut gx = Array2::zeros(xv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    for kk in 0..width {
                        let shift = kk as isize - off as isize;
                        let (t0, t1) = shifted_range(frames, shift);
                        if t0 >= t1 {
                            continue;
                        }
                        let src = ((t0 as isize + shift) as usize * batch)
                            ..((t1 as isize + shift) as usize * batch);
                        let gy = g.slice(s![t0 * batch..t1 * batch, ..]);
                        let kernel = kv.slice(s![kk * c_in..(kk + 1) * c_in, ..]);
                        let mut gxs = gx.slice_mut(s![src.clone(), ..]);
                        matmul_acc(gy, kernel.t(), gxs.view_mut());
                        let mut gks = gk.slice_mut(s![kk * c_in..(kk + 1) * c_in, ..]);
                        matmul_acc(xv.slice(s![src, ..]).t(), gy, gks.view_mut());
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *k, gk);
                    if let Some(b) = b {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::SoftmaxXent { logits, grad } => {
                    acc(&mut grads, *logits, grad * g[[0, 0]]);
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }
}
