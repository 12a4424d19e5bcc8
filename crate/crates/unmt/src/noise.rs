//! The corruption process applied to auto-encoder inputs: word dropout
//! followed by a bounded local shuffle.
//!
//! Reconstructing a sentence from its corrupted version is only non-trivial
//! if the corruption actually destroys information; without it the
//! auto-encoder degenerates into a copy machine. The shuffle draws
//! `q_i = i + U(0, α)` and reorders tokens by the argsort of `q`: with
//! `α = k + 1` no token can move more than `k` positions, because
//! `q_j < q_i` requires `j < i + α`, i.e. displacement is bounded by the
//! jitter amplitude. `α < 1` cannot reorder anything (the integer ramp
//! dominates the jitter), so `k = 0` is the identity shuffle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    /// Probability of dropping each word independently.
    pub p_wd: f64,
    /// Maximum shuffle displacement.
    pub k: usize,
    /// Permutation temperature; `k + 1` unless explicitly overridden.
    pub alpha: f64,
}

impl NoiseConfig {
    pub fn new(p_wd: f64, k: usize) -> NoiseConfig {
        NoiseConfig {
            p_wd,
            k,
            alpha: (k + 1) as f64,
        }
    }

    /// The defaults the corruption was tuned to: p_wd = 0.1, k = 3.
    pub fn standard() -> NoiseConfig {
        NoiseConfig::new(0.1, 3)
    }

    /// No corruption at all (the "C(x) = x" ablation).
    pub fn disabled() -> NoiseConfig {
        NoiseConfig::new(0.0, 0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.p_wd) {
            return Err(format!("noise.p_wd must be in [0,1), got {}", self.p_wd));
        }
        if self.alpha < 0.0 {
            return Err(format!("noise.alpha must be nonnegative, got {}", self.alpha));
        }
        Ok(())
    }
}

/// Argsort of `q_i = i + U(0, α)`, ties broken by original index.
///
/// Returns `σ` as the order in which input positions are emitted:
/// `output[j] = input[σ[j]]`.
pub fn sample_permutation(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if alpha <= 0.0 {
        return (0..n).collect();
    }
    let q: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(0.0..alpha)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| q[a].partial_cmp(&q[b]).expect("q values are finite"));
    order
}

/// Drop each token independently with probability `p_wd`; if everything
/// would be dropped, keep one uniformly chosen token instead.
pub fn drop_words(tokens: &[u32], p_wd: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let kept: Vec<u32> = tokens
        .iter()
        .copied()
        .filter(|_| !rng.gen_bool(p_wd))
        .collect();
    if kept.is_empty() && !tokens.is_empty() {
        vec![tokens[rng.gen_range(0..tokens.len())]]
    } else {
        kept
    }
}

/// The full corruption: dropout first, then the bounded shuffle of the
/// survivors. SOS/EOS are not part of the input here; the encoder attaches
/// control tokens after corruption.
pub fn corrupt(tokens: &[u32], cfg: &NoiseConfig, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let kept = drop_words(tokens, cfg.p_wd, rng);
    let order = sample_permutation(kept.len(), cfg.alpha, rng);
    order.into_iter().map(|i| kept[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn alpha_below_one_is_identity() {
        let mut rng = stream(1, "noise.test");
        for n in [0usize, 1, 2, 7, 30] {
            let p = sample_permutation(n, 0.5, &mut rng);
            assert_eq!(p, (0..n).collect::<Vec<_>>(), "n={n}");
        }
    }

    #[test]
    fn degenerate_lengths_are_identity() {
        let mut rng = stream(2, "noise.test");
        assert_eq!(sample_permutation(0, 4.0, &mut rng), Vec::<usize>::new());
        assert_eq!(sample_permutation(1, 4.0, &mut rng), vec![0]);
    }

    #[test]
    fn displacement_bounded_by_k() {
        let mut rng = stream(3, "noise.test");
        for _ in 0..2000 {
            let p = sample_permutation(12, 4.0, &mut rng);
            for (j, &i) in p.iter().enumerate() {
                let d = (j as isize - i as isize).abs();
                assert!(d <= 3, "displacement {d} exceeds k=3 in {p:?}");
            }
        }
    }

    #[test]
    fn zero_dropout_is_identity() {
        let mut rng = stream(4, "noise.test");
        let toks = vec![5, 6, 7, 8];
        assert_eq!(drop_words(&toks, 0.0, &mut rng), toks);
    }

    #[test]
    fn dropout_never_empties() {
        let mut rng = stream(5, "noise.test");
        for _ in 0..200 {
            let out = drop_words(&[9], 0.9, &mut rng);
            assert_eq!(out.len(), 1);
            assert_eq!(out[0], 9);
        }
        for _ in 0..200 {
            let out = drop_words(&[4, 5, 6], 0.9, &mut rng);
            assert!(!out.is_empty());
        }
    }

    #[test]
    fn corrupt_disabled_is_identity() {
        let mut rng = stream(6, "noise.test");
        let toks = vec![10, 11, 12, 13, 14];
        assert_eq!(corrupt(&toks, &NoiseConfig::disabled(), &mut rng), toks);
    }

    #[test]
    fn corrupt_output_is_submultiset_of_input() {
        let mut rng = stream(7, "noise.test");
        let cfg = NoiseConfig::standard();
        let toks = vec![4, 4, 5, 6, 7, 7, 7, 8];
        for _ in 0..500 {
            let out = corrupt(&toks, &cfg, &mut rng);
            assert!(!out.is_empty());
            let mut pool = toks.clone();
            for t in &out {
                let pos = pool.iter().position(|x| x == t).expect("token invented by corrupt");
                pool.swap_remove(pos);
            }
        }
    }

    #[test]
    fn corruption_is_deterministic_under_seed() {
        let cfg = NoiseConfig::standard();
        let toks: Vec<u32> = (4..24).collect();
        let a = corrupt(&toks, &cfg, &mut stream(8, "noise.42"));
        let b = corrupt(&toks, &cfg, &mut stream(8, "noise.42"));
        let c = corrupt(&toks, &cfg, &mut stream(8, "noise.43"));
        assert_eq!(a, b);
        assert_ne!(a, c); // overwhelmingly likely for 20 tokens
    }
}
