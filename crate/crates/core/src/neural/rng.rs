use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded ChaCha8 stream. ChaCha is counter-based, so [`RngStream::fork`]
/// derives independent, reproducible sub-streams by stream id without
/// consuming draws from the parent.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `id` under the same seed.
    pub fn fork(&self, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id.wrapping_add(1));
        Self { seed: self.seed, rng }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
        v
    }
}

/// Draws a class from `softmax(logits / temperature)` by inverting the CDF at
/// one uniform draw. `-inf` logits are never drawn.
pub fn sample_categorical(logits: &[f64], rng: &mut RngStream, temperature: f64) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::OutOfRange(format!("temperature {temperature}")));
    }
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFinite("sampling logits".into()));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return Err(Error::OutOfRange("every class is masked".into()));
    }
    let weights: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = k;
            if u < acc {
                return Ok(k);
            }
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_logit_always_wins() {
        let mut logits = vec![0.0; 10];
        logits[5] = 1e4;
        let mut rng = RngStream::new(9);
        for _ in 0..200 {
            assert_eq!(sample_categorical(&logits, &mut rng, 1.0).unwrap(), 5);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let logits = [0.3, -1.0, 2.0, 0.0];
        let mut a = RngStream::new(4);
        let mut b = RngStream::new(4);
        for _ in 0..100 {
            assert_eq!(
                sample_categorical(&logits, &mut a, 0.7).unwrap(),
                sample_categorical(&logits, &mut b, 0.7).unwrap()
            );
        }
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut a = RngStream::new(4);
        let b = RngStream::new(4);
        a.uniform();
        assert_eq!(a.fork(3).uniform(), b.fork(3).uniform());
        assert_ne!(b.fork(3).uniform(), b.fork(4).uniform());
    }

    #[test]
    fn masked_classes_never_drawn() {
        let logits = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0];
        let mut rng = RngStream::new(1);
        for _ in 0..500 {
            let k = sample_categorical(&logits, &mut rng, 1.0).unwrap();
            assert!(k == 1 || k == 3);
        }
    }

    #[test]
    fn bad_temperature_rejected() {
        let mut rng = RngStream::new(1);
        assert!(sample_categorical(&[0.0, 1.0], &mut rng, 0.0).is_err());
        assert!(sample_categorical(&[0.0, 1.0], &mut rng, -1.0).is_err());
    }
}
