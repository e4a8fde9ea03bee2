//! Attack classes and the versioned class-index tables.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fgsm,
    Pgd,
    Square,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
    None,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Fgsm => "fgsm",
            Algorithm::Pgd => "pgd",
            Algorithm::Square => "square",
            Algorithm::Patch => "patch",
        }
    }

    /// Untargeted attacks succeed by moving the victim off the true label.
    pub fn is_untargeted(&self) -> bool {
        !matches!(self, Algorithm::Patch)
    }
}

impl Norm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
            Norm::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackClass {
    pub algorithm: Algorithm,
    pub norm: Norm,
    pub eps: Option<f64>,
    pub class_index: usize,
}

impl AttackClass {
    /// Bounded-attack family key, e.g. `pgd-linf`; `None` for the patch.
    pub fn family(&self) -> Option<String> {
        self.eps.map(|_| format!("{}-{}", self.algorithm.as_str(), self.norm.as_str()))
    }
}

impl fmt::Display for AttackClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.eps {
            Some(e) => write!(f, "{}-{}-{}", self.algorithm.as_str(), self.norm.as_str(), e),
            None => write!(f, "{}", self.algorithm.as_str()),
        }
    }
}

/// ε grids for the bounded attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsGrids {
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
    /// Extra PGD-L2 values appended by the expanded taxonomy.
    pub l2_extra: Vec<f64>,
}

impl EpsGrids {
    pub fn desk() -> Self {
        EpsGrids {
            linf: vec![0.02, 0.05, 0.1, 0.2],
            l2: vec![0.5, 1.0, 1.5, 2.0],
            l2_extra: vec![0.25, 0.3, 0.35, 0.4],
        }
    }

    pub fn paper_imagenette() -> Self {
        EpsGrids {
            linf: vec![1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
            l2: vec![0.25, 0.5, 1.0, 2.0],
            l2_extra: vec![0.1, 0.2, 0.3, 0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    /// 1 = base (17 classes), 2 = expanded (21 classes).
    pub version: u32,
    pub classes: Vec<AttackClass>,
}

impl Taxonomy {
    /// FGSM-L∞, PGD-L∞, PGD-L2, Square-L∞ over their grids, then the patch.
    pub fn base(grids: &EpsGrids) -> Self {
        let mut classes = Vec::new();
        let mut push = |algorithm, norm, eps: Option<f64>| {
            let class_index = classes.len();
            classes.push(AttackClass { algorithm, norm, eps, class_index });
        };
        for &e in &grids.linf {
            push(Algorithm::Fgsm, Norm::Linf, Some(e));
        }
        for &e in &grids.linf {
            push(Algorithm::Pgd, Norm::Linf, Some(e));
        }
        for &e in &grids.l2 {
            push(Algorithm::Pgd, Norm::L2, Some(e));
        }
        for &e in &grids.linf {
            push(Algorithm::Square, Norm::Linf, Some(e));
        }
        push(Algorithm::Patch, Norm::None, None);
        Taxonomy { version: 1, classes }
    }

    /// Base taxonomy with the extra PGD-L2 values appended; existing indices
    /// are unchanged.
    pub fn expanded(grids: &EpsGrids) -> Self {
        let mut t = Self::base(grids);
        for &e in &grids.l2_extra {
            let class_index = t.classes.len();
            t.classes.push(AttackClass { algorithm: Algorithm::Pgd, norm: Norm::L2, eps: Some(e), class_index });
        }
        t.version = 2;
        t
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, index: usize) -> Result<&AttackClass> {
        self.classes
            .get(index)
            .ok_or_else(|| Error::invalid(format!("class index {index} outside taxonomy of {}", self.len())))
    }

    /// Class indices of each bounded family, sorted by increasing ε.
    pub fn families(&self) -> Vec<(String, Vec<usize>)> {
        let mut fams: Vec<(String, Vec<usize>)> = Vec::new();
        for c in &self.classes {
            if let Some(key) = c.family() {
                match fams.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(c.class_index),
                    None => fams.push((key, vec![c.class_index])),
                }
            }
        }
        for (_, idx) in &mut fams {
            idx.sort_by(|&a, &b| self.classes[a].eps.partial_cmp(&self.classes[b].eps).unwrap());
        }
        fams
    }
}
