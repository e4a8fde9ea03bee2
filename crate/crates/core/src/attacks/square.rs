//! Score-based black-box random search with square-shaped updates (L-inf).
//!
//! The attack never sees the network: it is handed a [`ScoreOracle`] that
//! maps one image to its class scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Black-box access to a classifier's scores for a single `H x W x C` image.
pub trait ScoreOracle {
    fn scores(&mut self, image: &Tensor<f32>) -> Result<Vec<f32>>;
}

impl<F> ScoreOracle for F
where
    F: FnMut(&Tensor<f32>) -> Result<Vec<f32>>,
{
    fn scores(&mut self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        self(image)
    }
}

/// Wraps an oracle and counts every query made through it.
pub struct QueryCounter<O> {
    inner: O,
    pub queries: usize,
}

impl<O: ScoreOracle> QueryCounter<O> {
    pub fn new(inner: O) -> Self {
        QueryCounter { inner, queries: 0 }
    }
}

impl<O: ScoreOracle> ScoreOracle for QueryCounter<O> {
    fn scores(&mut self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        self.queries += 1;
        self.inner.scores(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareParams {
    pub eps: f32,
    pub budget: usize,
    pub p_init: f64,
    pub seed: u64,
}

/// Fractions of the budget after which the square area fraction halves.
pub const P_HALVING_FRACTIONS: [f64; 4] = [0.02, 0.1, 0.25, 0.5];

/// Fraction of the image covered by the square at iteration `it` of `budget`.
pub fn p_schedule(p_init: f64, it: usize, budget: usize) -> f64 {
    let frac = it as f64 / budget.max(1) as f64;
    let halvings = P_HALVING_FRACTIONS.iter().filter(|&&f| frac >= f).count();
    p_init / f64::powi(2.0, halvings as i32)
}

/// Square side for area fraction `p`: `ceil(sqrt(p * H * W))`, kept within [1, min(H, W) - 1].
pub fn square_side(p: f64, h: usize, w: usize) -> usize {
    let s = (p * (h * w) as f64).sqrt().ceil() as usize;
    s.clamp(1, h.min(w).saturating_sub(1).max(1))
}

/// `score[label] - max_{j != label} score[j]`; negative once misclassified.
pub fn margin(scores: &[f32], label: usize) -> f64 {
    let other = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    scores[label] as f64 - other as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SquareOutcome {
    /// Final (best) attacked image.
    pub adversarial: Tensor<f32>,
    /// Margin of every accepted iterate, starting with the initialisation.
    pub accepted_margins: Vec<f64>,
    pub queries: usize,
    pub final_scores: Vec<f32>,
}

/// Untargeted Square attack on one `H x W x C` image.
pub fn square_attack(
    oracle: &mut impl ScoreOracle,
    x: &Tensor<f32>,
    label: usize,
    p: &SquareParams,
) -> Result<SquareOutcome> {
    if p.budget < 1 {
        return Err(Error::invalid("query budget must be at least 1"));
    }
    let (h, w, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid(format!("square attack expects H x W x C, got {s:?}"))),
    };
    let eps = p.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let idx = |y: usize, xx: usize, ch: usize| (y * w + xx) * c + ch;

    // vertical stripes: one random sign per column and channel
    let mut delta = vec![0.0f32; x.len()];
    for xx in 0..w {
        for ch in 0..c {
            let s = if rng.gen_bool(0.5) { eps } else { -eps };
            for y in 0..h {
                delta[idx(y, xx, ch)] = s;
            }
        }
    }
    let apply = |delta: &[f32]| -> Tensor<f32> {
        let data = x.data().iter().zip(delta).map(|(&v, &d)| (v + d).clamp(0.0, 1.0)).collect();
        Tensor::new(x.shape(), data).unwrap()
    };
    let mut best = apply(&delta);
    let mut scores = oracle.scores(&best)?;
    let mut best_margin = margin(&scores, label);
    let mut queries = 1;
    let mut accepted = vec![best_margin];

    while queries < p.budget && best_margin >= 0.0 {
        let side = square_side(p_schedule(p.p_init, queries, p.budget), h, w);
        let r = rng.gen_range(0..=h - side);
        let col = rng.gen_range(0..=w - side);
        let mut proposal = delta.clone();
        // resample until the clamped window actually changes
        for _ in 0..10 {
            for ch in 0..c {
                let s = if rng.gen_bool(0.5) { eps } else { -eps };
                for y in r..r + side {
                    for xx in col..col + side {
                        proposal[idx(y, xx, ch)] = s;
                    }
                }
            }
            let changed = (r..r + side).any(|y| {
                (col..col + side).any(|xx| {
                    (0..c).any(|ch| {
                        let i = idx(y, xx, ch);
                        let v = x.data()[i];
                        ((v + proposal[i]).clamp(0.0, 1.0) - best.data()[i]).abs() > 1e-7
                    })
                })
            });
            if changed {
                break;
            }
        }
        let cand = apply(&proposal);
        let s = oracle.scores(&cand)?;
        queries += 1;
        let m = margin(&s, label);
        if m < best_margin {
            best_margin = m;
            best = cand;
            delta = proposal;
            scores = s;
            accepted.push(m);
        }
    }
    Ok(SquareOutcome { adversarial: best, accepted_margins: accepted, queries, final_scores: scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_fixed_fractions() {
        assert_eq!(p_schedule(0.8, 0, 1000), 0.8);
        assert_eq!(p_schedule(0.8, 19, 1000), 0.8);
        assert_eq!(p_schedule(0.8, 20, 1000), 0.4);
        assert_eq!(p_schedule(0.8, 100, 1000), 0.2);
        assert_eq!(p_schedule(0.8, 250, 1000), 0.1);
        assert_eq!(p_schedule(0.8, 999, 1000), 0.05);
        assert_eq!(square_side(0.8, 28, 28), 26);
        assert_eq!(square_side(0.001, 28, 28), 1);
        assert_eq!(square_side(1.0, 28, 28), 27);
    }

    #[test]
    fn margin_sign() {
        assert_eq!(margin(&[2.0, 1.0, 0.5], 0), 1.0);
        assert_eq!(margin(&[2.0, 1.0, 0.5], 2), -1.5);
    }

    #[test]
    fn zero_budget_rejected() {
        let x = Tensor::<f32>::zeros(&[4, 4, 1]);
        let mut oracle = |_: &Tensor<f32>| Ok(vec![1.0f32, 0.0]);
        let p = SquareParams { eps: 0.1, budget: 0, p_init: 0.8, seed: 0 };
        assert!(square_attack(&mut oracle, &x, 0, &p).is_err());
    }

    #[test]
    fn respects_budget_ball_and_monotone_margins() {
        // scores favour class 0 by the mean brightness; never flips, so the
        // attack exhausts its budget
        let x = Tensor::new(&[6, 6, 1], (0..36).map(|i| (i as f32) / 36.0).collect()).unwrap();
        let mut counter = QueryCounter::new(|img: &Tensor<f32>| {
            let m = img.data().iter().sum::<f32>() / 36.0;
            Ok(vec![10.0 + m, m * m])
        });
        let p = SquareParams { eps: 0.05, budget: 200, p_init: 0.8, seed: 3 };
        let out = square_attack(&mut counter, &x, 0, &p).unwrap();
        assert_eq!(out.queries, 200);
        assert_eq!(counter.queries, 200);
        assert!(out.accepted_margins.windows(2).all(|w| w[1] < w[0]));
        for (a, b) in out.adversarial.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 0.05 + 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
    }
}
