//! Compressed-sensing reconstruction: LASSO over DCT coefficients from a
//! random subset of pixels, solved by monotone FISTA.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dct::{for_each_block, Dct2};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dictionary {
    /// One orthonormal 2-D DCT over the whole channel.
    Whole,
    /// Independent 8x8 DCTs; sides must be multiples of 8.
    Block8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsConfig {
    pub k_over_n: f64,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub dictionary: Dictionary,
}

impl Default for CsConfig {
    fn default() -> Self {
        CsConfig { k_over_n: 0.5, lambda: 0.01, max_iters: 200, tol: 1e-6, seed: 0, dictionary: Dictionary::Whole }
    }
}

impl CsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_over_n > 0.0 && self.k_over_n <= 1.0) {
            return Err(Error::Config(format!("k/n = {} outside (0, 1]", self.k_over_n)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda = {} must be finite and non-negative", self.lambda)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol = {} must be non-negative", self.tol)));
        }
        Ok(())
    }
}

/// `sign(v) * max(|v| - t, 0)` elementwise, in place.
pub fn soft_threshold(v: &mut [f64], t: f64) {
    for x in v {
        *x = x.signum() * (x.abs() - t).max(0.0);
    }
}

/// The synthesis operator `D` and its adjoint for one channel.
enum Synthesis {
    Whole(Dct2),
    Block8 { h: usize, w: usize },
}

impl Synthesis {
    fn new(dict: Dictionary, h: usize, w: usize) -> Result<Self> {
        match dict {
            Dictionary::Whole => Ok(Synthesis::Whole(Dct2::new(h, w))),
            Dictionary::Block8 if h % 8 == 0 && w % 8 == 0 => Ok(Synthesis::Block8 { h, w }),
            Dictionary::Block8 => Err(Error::invalid(format!("block dictionary needs sides divisible by 8, got {h}x{w}"))),
        }
    }

    /// Image from coefficients.
    fn synth(&self, chi: &[f64]) -> Vec<f64> {
        match self {
            Synthesis::Whole(d) => d.inverse(chi),
            Synthesis::Block8 { h, w } => {
                let mut out = chi.to_vec();
                for_each_block(&mut out, *h, *w, |b| *b = super::dct::idct2_block(b));
                out
            }
        }
    }

    /// Coefficients from image (adjoint = inverse for orthonormal D).
    fn analyse(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Synthesis::Whole(d) => d.forward(x),
            Synthesis::Block8 { h, w } => {
                let mut out = x.to_vec();
                for_each_block(&mut out, *h, *w, |b| *b = super::dct::dct2_block(b));
                out
            }
        }
    }
}

/// One channel's LASSO problem `½‖b − S D χ‖² + λ‖χ‖₁`.
pub struct CsProblem {
    synthesis: Synthesis,
    /// Sampled pixel indices (the rows kept by `S`).
    pub mask: Vec<usize>,
    /// `b = S x'`.
    pub b: Vec<f64>,
    pub n: usize,
    pub lambda: f64,
}

impl CsProblem {
    pub fn new(channel: &[f64], h: usize, w: usize, mask: Vec<usize>, lambda: f64, dict: Dictionary) -> Result<Self> {
        let b = mask.iter().map(|&i| channel[i]).collect();
        Ok(CsProblem { synthesis: Synthesis::new(dict, h, w)?, mask, b, n: h * w, lambda })
    }

    fn residual(&self, chi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let img = self.synthesis.synth(chi);
        let r = self.mask.iter().zip(&self.b).map(|(&i, &b)| img[i] - b).collect();
        (img, r)
    }

    pub fn objective(&self, chi: &[f64]) -> f64 {
        let (_, r) = self.residual(chi);
        0.5 * r.iter().map(|v| v * v).sum::<f64>() + self.lambda * chi.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Gradient `Dᵀ Sᵀ (S D χ − b)` of the smooth part.
    fn gradient(&self, chi: &[f64]) -> Vec<f64> {
        let (_, r) = self.residual(chi);
        let mut full = vec![0.0; self.n];
        for (&i, v) in self.mask.iter().zip(r) {
            full[i] = v;
        }
        self.synthesis.analyse(&full)
    }

    pub fn synthesize(&self, chi: &[f64]) -> Vec<f64> {
        self.synthesis.synth(chi)
    }

    /// Monotone FISTA with step 1 (the smooth part's Lipschitz constant is
    /// at most 1 since `S` selects rows and `D` is orthonormal). Starts from
    /// `χ = 0`; returns the solution and the objective after each iteration,
    /// preceded by the initial value.
    pub fn solve(&self, max_iters: usize, tol: f64) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; self.n];
        let mut fx = self.objective(&x);
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut log = vec![fx];
        for _ in 0..max_iters {
            let g = self.gradient(&y);
            let mut z: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b).collect();
            soft_threshold(&mut z, self.lambda);
            let fz = self.objective(&z);
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let prev = x.clone();
            let f_prev = fx;
            if fz <= fx {
                x = z.clone();
                fx = fz;
            }
            y = (0..self.n)
                .map(|i| x[i] + (t / t_next) * (z[i] - x[i]) + ((t - 1.0) / t_next) * (x[i] - prev[i]))
                .collect();
            t = t_next;
            log.push(fx);
            let denom = f_prev.abs().max(f64::MIN_POSITIVE);
            if (f_prev - fz).abs() / denom < tol {
                break;
            }
        }
        (x, log)
    }
}

/// Per-channel solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct CsOutcome {
    pub image: Tensor<f32>,
    pub objective_logs: Vec<Vec<f64>>,
}

/// Number of pixels kept per channel: `⌊k/n · n⌋`.
pub fn sample_count(k_over_n: f64, n: usize) -> usize {
    (k_over_n * n as f64 + 1e-9).floor() as usize
}

/// Reconstruct `x'` (`H x W x C`, [0, 1]) from a seeded random subset of
/// its pixels; each channel is solved independently and the result clipped
/// to [0, 1].
pub fn cs_reconstruct(x: &Tensor<f32>, cfg: &CsConfig) -> Result<CsOutcome> {
    cfg.validate()?;
    let (h, w, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid(format!("CS reconstruction expects H x W x C, got {s:?}"))),
    };
    let n = h * w;
    let m = sample_count(cfg.k_over_n, n);
    if m < 1 {
        return Err(Error::invalid(format!("k/n = {} keeps no pixels of {n}", cfg.k_over_n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![0.0f32; x.len()];
    let mut logs = Vec::with_capacity(c);
    for ch in 0..c {
        let channel: Vec<f64> = x.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let mut mask = sample(&mut rng, n, m).into_vec();
        mask.sort_unstable();
        let prob = CsProblem::new(&channel, h, w, mask, cfg.lambda, cfg.dictionary)?;
        let (chi, log) = prob.solve(cfg.max_iters, cfg.tol);
        for (i, v) in prob.synthesize(&chi).into_iter().enumerate() {
            out[i * c + ch] = v.clamp(0.0, 1.0) as f32;
        }
        logs.push(log);
    }
    Ok(CsOutcome { image: Tensor::new(x.shape(), out)?, objective_logs: logs })
}
