//! White-box L^p-ball attacks: FGSM and PGD.

use super::taxonomy::Norm;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x + step * sign(g), 0, 1)` elementwise. Zero-gradient pixels stay put.
pub fn sign_step(x: &[f32], grad: &[f32], step: f32) -> Vec<f32> {
    x.iter().zip(grad).map(|(&v, &g)| (v + step * sign(g)).clamp(0.0, 1.0)).collect()
}

/// `x + step * g / ||g||_2` (no clamping); `None` when the gradient vanishes.
pub fn l2_step(x: &[f32], grad: &[f32], step: f32) -> Option<Vec<f32>> {
    let norm = grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let scale = (step as f64 / norm) as f32;
    Some(x.iter().zip(grad).map(|(&v, &g)| v + scale * g).collect())
}

/// Project a perturbation onto the ε-ball of `norm` in place.
pub fn project_onto_ball(delta: &mut [f32], norm: Norm, eps: f32) {
    match norm {
        Norm::Linf => {
            for d in delta {
                *d = d.clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            let n = delta.iter().map(|&d| (d as f64).powi(2)).sum::<f64>().sqrt();
            if n > eps as f64 {
                let s = (eps as f64 / n) as f32;
                for d in delta.iter_mut() {
                    *d *= s;
                }
                // rounding can leave the scaled norm a hair above ε
                let n2 = delta.iter().map(|&d| (d as f64).powi(2)).sum::<f64>().sqrt();
                if n2 > eps as f64 {
                    let s = (eps as f64 / n2 * (1.0 - 1e-7)) as f32;
                    for d in delta.iter_mut() {
                        *d *= s;
                    }
                }
            }
        }
        Norm::None => {}
    }
}

/// One projected iterate: project `candidate - x` onto the ball, then back into [0, 1].
pub fn project_candidate(x: &[f32], candidate: &[f32], norm: Norm, eps: f32) -> Vec<f32> {
    let mut delta: Vec<f32> = candidate.iter().zip(x).map(|(&c, &v)| c - v).collect();
    project_onto_ball(&mut delta, norm, eps);
    x.iter().zip(&delta).map(|(&v, &d)| (v + d).clamp(0.0, 1.0)).collect()
}

fn check_labels(images: &Tensor<f32>, labels: &[usize]) -> Result<()> {
    if images.rank() != 4 || images.batch_len() != labels.len() {
        return Err(Error::invalid("attacks expect an N x H x W x C batch with one label per image"));
    }
    Ok(())
}

/// Untargeted FGSM on a batch: `x' = clamp(x + ε sign(∂L/∂x), 0, 1)`.
pub fn fgsm(victim: &Network<f32>, images: &Tensor<f32>, labels: &[usize], eps: f32) -> Result<Tensor<f32>> {
    check_labels(images, labels)?;
    if eps < 0.0 {
        return Err(Error::invalid("eps must be non-negative"));
    }
    let grad = victim.input_gradient(images, labels)?;
    Tensor::new(images.shape(), sign_step(images.data(), grad.data(), eps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdParams {
    pub norm: Norm,
    pub eps: f32,
    pub steps: usize,
    pub step_size: f32,
}

impl PgdParams {
    /// Step size `2.5 * ε / steps`.
    pub fn with_default_step(norm: Norm, eps: f32, steps: usize) -> Self {
        PgdParams { norm, eps, steps, step_size: 2.5 * eps / steps.max(1) as f32 }
    }
}

/// Untargeted PGD from the benign point on a batch. Each iteration ascends
/// the loss (sign step for L-inf, normalised gradient step for L2), projects
/// onto the ε-ball around the benign image and clamps to [0, 1]. Images
/// whose gradient vanishes skip that iteration.
pub fn pgd(victim: &Network<f32>, images: &Tensor<f32>, labels: &[usize], p: &PgdParams) -> Result<Tensor<f32>> {
    check_labels(images, labels)?;
    if p.steps == 0 {
        return Err(Error::invalid("PGD needs at least one step"));
    }
    if p.norm == Norm::None {
        return Err(Error::invalid("PGD needs an L-inf or L2 ball"));
    }
    let n = images.batch_len();
    let mut cur = images.clone();
    for _ in 0..p.steps {
        let grad = victim.input_gradient(&cur, labels)?;
        for i in 0..n {
            let x = images.item(i);
            let g = grad.item(i);
            let c = cur.item(i);
            let candidate = match p.norm {
                Norm::Linf => Some(sign_step(c, g, p.step_size)),
                _ => l2_step(c, g, p.step_size),
            };
            if let Some(cand) = candidate {
                let next = project_candidate(x, &cand, p.norm, p.eps);
                cur.item_mut(i).copy_from_slice(&next);
            }
        }
    }
    Ok(cur)
}
