use std::path::Path;

use ndarray::Array2;

use super::graph::Gradients;
use super::rng::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array2<f64>,
    grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable arrays in insertion order, with gradient accumulators and
/// Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<Entry>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let shape = value.dim();
        self.entries.push(Entry {
            name,
            value,
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut RngStream) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, rows, cols, limit, rng)
    }

    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut RngStream,
    ) -> ParamId {
        let v = Array2::from_shape_fn((rows, cols), |_| (2.0 * rng.uniform() - 1.0) * limit);
        self.add(name, v)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].grad
    }

    /// Adam step counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Adds a backward pass's parameter gradients to the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.entries[id.0].grad += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Bias-corrected Adam update followed by zeroing the gradients. Refuses
    /// to touch any parameter if a gradient is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Diverged(format!(
                "non-finite gradient in {} at step {}",
                e.name,
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            ndarray::Zip::from(&mut e.value)
                .and(&mut e.m)
                .and(&mut e.v)
                .and(&e.grad)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                });
            e.grad.fill(0.0);
        }
        Ok(())
    }

    /// `PCKP` checkpoint: magic, u32 count, then per entry u32 name length,
    /// name bytes, u32 rank, u32 dims, f64 data. The Adam state follows in the
    /// same layout (`adam.m/<name>`, `adam.v/<name>`, and a rank-0 `adam.step`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PCKP_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            write_entry(&mut out, &e.name, &[e.value.nrows(), e.value.ncols()], e.value.iter());
        }
        let count = 2 * self.entries.len() + 1;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for e in &self.entries {
            write_entry(&mut out, &format!("adam.m/{}", e.name), &[e.m.nrows(), e.m.ncols()], e.m.iter());
        }
        for e in &self.entries {
            write_entry(&mut out, &format!("adam.v/{}", e.name), &[e.v.nrows(), e.v.ncols()], e.v.iter());
        }
        write_entry(&mut out, "adam.step", &[], [self.step as f64].iter());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PCKP_MAGIC {
            return Err(Error::format("checkpoint", "missing PCKP magic"));
        }
        let count = r.u32()? as usize;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let (name, dims, data) = r.entry()?;
            let (rows, cols) = as_matrix(&name, &dims)?;
            let value = Array2::from_shape_vec((rows, cols), data).expect("sized by dims");
            if set.id(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate entry {name}")));
            }
            set.add(name, value);
        }
        if r.pos == bytes.len() {
            return Ok(set);
        }
        let state = r.u32()? as usize;
        for _ in 0..state {
            let (name, dims, data) = r.entry()?;
            if name == "adam.step" {
                set.step = data.first().copied().unwrap_or(0.0) as u64;
                continue;
            }
            let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m/") {
                (0, p)
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                (1, p)
            } else {
                return Err(Error::format("checkpoint", format!("unknown state entry {name}")));
            };
            let id = set
                .id(pname)
                .ok_or_else(|| Error::format("checkpoint", format!("state for unknown {pname}")))?;
            let shape = as_matrix(&name, &dims)?;
            if shape != set.entries[id.0].value.dim() {
                return Err(Error::format("checkpoint", format!("{name} shape mismatch")));
            }
            let arr = Array2::from_shape_vec(shape, data).expect("sized by dims");
            if slot == 0 {
                set.entries[id.0].m = arr;
            } else {
                set.entries[id.0].v = arr;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim())
    }
}

const PCKP_MAGIC: &[u8; 4] = b"PCKP";

fn write_entry<'a>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = &'a f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn as_matrix(name: &str, dims: &[usize]) -> Result<(usize, usize)> {
    match *dims {
        [] => Ok((1, 1)),
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::format("checkpoint", format!("{name}: rank {} unsupported", dims.len()))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::format("checkpoint", format!("{name}: rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut rng = RngStream::new(1);
        let mut p = ParameterSet::new();
        p.add_glorot("w", 3, 4, &mut rng);
        p.add_zeros("b", 1, 4);
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = sample();
        let before = p.clone();
        let g = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.0) * 0.3 + j as f64 * 0.01 - 0.015);
        p.entries[0].grad.assign(&g);
        p.adam_step(&AdamConfig::default()).unwrap();
        for ((a, b), gg) in p.value(ParamId(0)).iter().zip(before.value(ParamId(0))).zip(&g) {
            let expected = -1e-3 * gg.signum();
            assert!((a - b - expected).abs() < 1e-7, "{} vs {expected}", a - b);
        }
        // zero gradient leaves b untouched
        assert_eq!(p.value(ParamId(1)), before.value(ParamId(1)));
        assert!(p.grad(ParamId(0)).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts_without_updating() {
        let mut p = sample();
        let before = p.clone();
        p.entries[1].grad[[0, 2]] = f64::NAN;
        let err = p.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('b'));
        assert_eq!(p.value(ParamId(0)), before.value(ParamId(0)));
    }

    #[test]
    fn checkpoint_round_trip_includes_optimizer_state() {
        let mut p = sample();
        p.entries[0].grad.fill(0.5);
        p.adam_step(&AdamConfig::default()).unwrap();
        let bytes = p.to_bytes();
        let q = ParameterSet::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.step(), 1);
        assert_eq!(q.to_bytes(), bytes);
        assert!(ParameterSet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
