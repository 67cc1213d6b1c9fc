use super::Posteriorgram;
use crate::error::{Error, Result};

/// Posteriors are floored here before taking logs so a path always exists:
/// an improbable observation is preferred over a forbidden transition.
pub const OBSERVATION_FLOOR: f64 = 1e-30;

/// Unnormalised transition weight for a jump of `distance` bins: 1 at zero,
/// decreasing linearly to 0 at `max_jump` bins.
pub fn transition_weight(distance: usize, max_jump: f64) -> f64 {
    (1.0 - distance as f64 / max_jump).max(0.0)
}

/// Row-normalised log transition matrix, `-inf` where the weight is zero.
pub fn log_transitions(bins: usize, max_jump: f64) -> Vec<Vec<f64>> {
    (0..bins)
        .map(|i| {
            let w: Vec<f64> = (0..bins)
                .map(|j| transition_weight(i.abs_diff(j), max_jump))
                .collect();
            let norm: f64 = w.iter().sum();
            w.into_iter()
                .map(|v| if v > 0.0 { (v / norm).ln() } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect()
}

/// Most probable bin path under the posteriors and the triangular transition
/// model. Ties resolve towards the lower bin index.
pub fn viterbi_decode(post: &Posteriorgram) -> Result<Vec<usize>> {
    let (frames, bins) = (post.frames(), post.bins());
    if frames == 0 {
        return Err(Error::Shape("empty posteriorgram".into()));
    }
    let max_jump = post.max_jump_bins();
    let reach = (max_jump.ceil() as usize).min(bins);
    let log_a = log_transitions(bins, max_jump);
    let obs = |t: usize, b: usize| post.values()[[t, b]].max(OBSERVATION_FLOOR).ln();

    let mut score: Vec<f64> = (0..bins).map(|b| obs(0, b)).collect();
    let mut back = vec![vec![0u32; bins]; frames];
    let mut next = vec![0.0; bins];
    for t in 1..frames {
        for j in 0..bins {
            let lo = j.saturating_sub(reach);
            let hi = (j + reach).min(bins - 1);
            let mut best = f64::NEG_INFINITY;
            let mut arg = lo;
            for i in lo..=hi {
                let s = score[i] + log_a[i][j];
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + obs(t, j);
            back[t][j] = arg as u32;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    for b in 1..bins {
        if score[b] > score[last] {
            last = b;
        }
    }
    let mut path = vec![0usize; frames];
    path[frames - 1] = last;
    for t in (1..frames).rev() {
        path[t - 1] = back[t][path[t]] as usize;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over every path, scoring with the same objective.
    fn brute_force(post: &Posteriorgram) -> Vec<usize> {
        let (frames, bins) = (post.frames(), post.bins());
        let log_a = log_transitions(bins, post.max_jump_bins());
        let mut best = (f64::NEG_INFINITY, vec![0; frames]);
        let mut path = vec![0usize; frames];
        loop {
            let mut s = post.values()[[0, path[0]]].max(OBSERVATION_FLOOR).ln();
            for t in 1..frames {
                s += log_a[path[t - 1]][path[t]];
                s += post.values()[[t, path[t]]].max(OBSERVATION_FLOOR).ln();
            }
            if s > best.0 {
                best = (s, path.clone());
            }
            // odometer increment, last frame fastest
            let mut k = frames;
            loop {
                if k == 0 {
                    return best.1;
                }
                k -= 1;
                path[k] += 1;
                if path[k] < bins {
                    break;
                }
                path[k] = 0;
            }
        }
    }

    fn random_post(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> Posteriorgram {
        let v = Array2::from_shape_fn((frames, bins), |_| rng.random_range(0.001..1.0f64).powi(3));
        Posteriorgram::new(v).unwrap()
    }

    #[test]
    fn single_frame_is_argmax() {
        let v = Array2::from_shape_vec((1, 5), vec![0.1, 0.3, 0.05, 0.5, 0.05]).unwrap();
        assert_eq!(viterbi_decode(&Posteriorgram::new(v).unwrap()).unwrap(), vec![3]);
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let frames = rng.random_range(1..=5);
            let bins = rng.random_range(2..=15);
            let post = random_post(&mut rng, frames, bins);
            assert_eq!(viterbi_decode(&post).unwrap(), brute_force(&post));
        }
    }

    #[test]
    fn never_jumps_past_the_limit() {
        let mut v = Array2::from_elem((2, 15), 0.01 / 14.0);
        v[[0, 0]] = 0.99;
        v[[1, 14]] = 0.99;
        let post = Posteriorgram::new(v).unwrap();
        let path = viterbi_decode(&post).unwrap();
        assert!(path[0].abs_diff(path[1]) < 12);
        assert_eq!(path, brute_force(&post));

        // exact unit masses: every path is improbable, the decoder still stays feasible
        let mut v = Array2::zeros((2, 15));
        v[[0, 0]] = 1.0;
        v[[1, 14]] = 1.0;
        let post = Posteriorgram::new(v).unwrap();
        let path = viterbi_decode(&post).unwrap();
        assert!(path[0].abs_diff(path[1]) < 12);
        assert_eq!(path, brute_force(&post));
    }

    #[test]
    fn transition_rows_are_stochastic() {
        for row in log_transitions(30, 12.0) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|v| v.is_finite()).count() <= 23, true);
        }
    }

    #[test]
    fn empty_is_an_error() {
        let post = Posteriorgram::new(Array2::zeros((0, 4))).unwrap();
        assert!(viterbi_decode(&post).is_err());
    }
}
