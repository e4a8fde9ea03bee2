use serde::{Deserialize, Serialize};

use super::taxonomy::{AttackClass, Norm};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LINF_TOL: f64 = 1e-6;
pub const L2_TOL: f64 = 1e-5;

/// Label and bookkeeping for one attack attempt; everything but the pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub split: Split,
    pub source_id: u64,
    pub class_index: usize,
    pub label_true: usize,
    /// Victim prediction on the benign image.
    pub label_before: usize,
    /// Victim prediction on the attacked image.
    pub label_after: usize,
    pub success: bool,
    /// Target class of targeted attacks (the patch).
    pub target: Option<usize>,
    /// Gradient steps (FGSM, PGD), score queries (Square) or 0 (patch).
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialRecord {
    pub meta: RecordMeta,
    /// `H x W x C`.
    pub benign: Tensor<f32>,
    pub adversarial: Tensor<f32>,
    pub delta: Tensor<f32>,
}

/// `(δ, x')` with `x' = clamp(x + δ, 0, 1)` holding exactly in f32 and `δ`
/// the rounded difference `target - x`.
pub fn settle(benign: &[f32], target: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let delta: Vec<f32> = benign.iter().zip(target).map(|(&x, &t)| t.clamp(0.0, 1.0) - x).collect();
    let adv = benign.iter().zip(&delta).map(|(&x, &d)| (x + d).clamp(0.0, 1.0)).collect();
    (delta, adv)
}

impl AdversarialRecord {
    /// Build a record from the benign image and an attacked candidate.
    pub fn from_candidate(meta: RecordMeta, benign: Tensor<f32>, candidate: &[f32]) -> Result<Self> {
        if candidate.len() != benign.len() {
            return Err(Error::invalid("candidate and benign image sizes differ"));
        }
        let (delta, adv) = settle(benign.data(), candidate);
        let shape = benign.shape().to_vec();
        Ok(AdversarialRecord {
            meta,
            adversarial: Tensor::new(&shape, adv)?,
            delta: Tensor::new(&shape, delta)?,
            benign,
        })
    }

    /// Range, clamp and norm-ball invariants plus the success rule.
    pub fn check(&self, class: &AttackClass) -> Result<()> {
        let x = self.benign.data();
        let xa = self.adversarial.data();
        let d = self.delta.data();
        for i in 0..x.len() {
            if !(0.0..=1.0).contains(&xa[i]) {
                return Err(Error::Integrity(format!("attacked pixel {i} = {} outside [0, 1]", xa[i])));
            }
            if (x[i] + d[i]).clamp(0.0, 1.0) != xa[i] {
                return Err(Error::Integrity(format!("pixel {i}: x' != clamp(x + delta)")));
            }
        }
        match (class.norm, class.eps) {
            (Norm::Linf, Some(e)) => {
                let m = self.delta.max_abs() as f64;
                if m > e + LINF_TOL {
                    return Err(Error::Integrity(format!("L-inf norm {m} exceeds {e}")));
                }
            }
            (Norm::L2, Some(e)) => {
                let m = self.delta.l2_norm();
                if m > e + L2_TOL {
                    return Err(Error::Integrity(format!("L2 norm {m} exceeds {e}")));
                }
            }
            _ => {}
        }
        if self.meta.success {
            let ok = if class.algorithm.is_untargeted() {
                self.meta.label_before == self.meta.label_true && self.meta.label_after != self.meta.label_true
            } else {
                Some(self.meta.label_after) == self.meta.target
            };
            if !ok {
                return Err(Error::Integrity("record marked successful but labels disagree".into()));
            }
        }
        Ok(())
    }
}
