//! Running every attack class over a dataset and keeping the successes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gradient::{fgsm, pgd, PgdParams};
use super::patch::{patch_apply, PatchConfig, TrainedPatch};
use super::record::{AdversarialRecord, RecordMeta};
use super::square::{square_attack, QueryCounter, SquareParams};
use super::taxonomy::{Algorithm, AttackClass, EpsGrids, Taxonomy};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::victim::{argmax, predict};

/// Images per gradient-attack work item.
const GRADIENT_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub grids: EpsGrids,
    pub pgd_steps: usize,
    pub square_budget: usize,
    pub square_p_init: f64,
    pub patch: PatchConfig,
}

impl AttackConfig {
    pub fn desk() -> Self {
        AttackConfig {
            grids: EpsGrids::desk(),
            pgd_steps: 100,
            square_budget: 2000,
            square_p_init: 0.8,
            patch: PatchConfig::default(),
        }
    }

    pub fn paper_imagenette() -> Self {
        AttackConfig {
            grids: EpsGrids::paper_imagenette(),
            pgd_steps: 250,
            square_budget: 10_000,
            ..Self::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoolSummary {
    pub taxonomy_version: u32,
    pub seed: u64,
    /// Images whose clean prediction was correct.
    pub eligible: usize,
    /// Per class: images attacked.
    pub attempted: Vec<usize>,
    /// Per class: successful records kept.
    pub counts: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    /// Successful records, grouped by class index then dataset order.
    pub records: Vec<AdversarialRecord>,
    pub summary: PoolSummary,
}

/// Per-record seed for `(class, source image)`.
pub fn item_seed(pool_seed: u64, class_index: usize, source_id: u64) -> u64 {
    derive_seed(pool_seed, &[class_index as u64, source_id])
}

/// Attack every eligible image with every class of `taxonomy` and keep the
/// successes. An image is eligible when the victim classifies it correctly;
/// the patch class additionally skips images whose true label is the patch
/// target.
pub fn generate_pool(
    victim: &Network<f32>,
    data: &LabeledDataset,
    taxonomy: &Taxonomy,
    cfg: &AttackConfig,
    patch: Option<&TrainedPatch>,
    seed: u64,
) -> Result<Pool> {
    let all: Vec<usize> = (0..taxonomy.len()).collect();
    generate_classes(victim, data, taxonomy, &all, cfg, patch, seed)
}

/// [`generate_pool`] restricted to the class indices in `only`. Records of a
/// class do not depend on which other classes run, so pools can be extended
/// class by class. Counts of classes not in `only` are zero and raise no
/// warning.
pub fn generate_classes(
    victim: &Network<f32>,
    data: &LabeledDataset,
    taxonomy: &Taxonomy,
    only: &[usize],
    cfg: &AttackConfig,
    patch: Option<&TrainedPatch>,
    seed: u64,
) -> Result<Pool> {
    let clean = predict(victim, &data.images)?;
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| clean[i] == data.labels[i]).collect();

    let mut work: Vec<(&AttackClass, Vec<usize>)> = Vec::new();
    let mut attempted = vec![0; taxonomy.len()];
    let mut selected = Vec::with_capacity(only.len());
    for &k in only {
        selected.push(taxonomy.class(k)?);
    }
    for class in selected.iter().copied() {
        let idx: Vec<usize> = match class.algorithm {
            Algorithm::Patch => {
                let p = patch.ok_or_else(|| Error::invalid("taxonomy has a patch class but no trained patch was given"))?;
                eligible.iter().copied().filter(|&i| data.labels[i] != p.target).collect()
            }
            _ => eligible.clone(),
        };
        attempted[class.class_index] = idx.len();
        let chunk = match class.algorithm {
            Algorithm::Fgsm | Algorithm::Pgd => GRADIENT_CHUNK,
            _ => 1,
        };
        work.extend(idx.chunks(chunk).map(|c| (class, c.to_vec())));
    }

    let results: Vec<Vec<AdversarialRecord>> = work
        .par_iter()
        .map(|(class, idx)| attack_chunk(victim, data, class, idx, &clean, cfg, patch, seed))
        .collect::<Result<_>>()?;

    let records: Vec<AdversarialRecord> = results.into_iter().flatten().filter(|r| r.meta.success).collect();
    let mut counts = vec![0; taxonomy.len()];
    for r in &records {
        counts[r.meta.class_index] += 1;
    }
    let warnings = selected
        .iter()
        .filter(|c| counts[c.class_index] == 0)
        .map(|c| format!("class {} ({c}) has no successful attacks", c.class_index))
        .collect();
    Ok(Pool {
        records,
        summary: PoolSummary {
            taxonomy_version: taxonomy.version,
            seed,
            eligible: eligible.len(),
            attempted,
            counts,
            warnings,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn attack_chunk(
    victim: &Network<f32>,
    data: &LabeledDataset,
    class: &AttackClass,
    idx: &[usize],
    clean: &[usize],
    cfg: &AttackConfig,
    patch: Option<&TrainedPatch>,
    pool_seed: u64,
) -> Result<Vec<AdversarialRecord>> {
    let images = data.images.select(idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let seeds: Vec<u64> = idx.iter().map(|&i| item_seed(pool_seed, class.class_index, data.ids[i])).collect();
    let eps = class.eps.unwrap_or(0.0) as f32;
    let (candidates, iterations): (Tensor<f32>, Vec<usize>) = match class.algorithm {
        Algorithm::Fgsm => (fgsm(victim, &images, &labels, eps)?, vec![1; idx.len()]),
        Algorithm::Pgd => {
            let p = PgdParams::with_default_step(class.norm, eps, cfg.pgd_steps);
            (pgd(victim, &images, &labels, &p)?, vec![cfg.pgd_steps; idx.len()])
        }
        Algorithm::Square => {
            let mut out = images.clone();
            let mut iters = Vec::with_capacity(idx.len());
            for (b, &s) in seeds.iter().enumerate() {
                let x = images.item_tensor(b);
                let x_shape = x.shape().to_vec();
                let mut oracle = QueryCounter::new(|img: &Tensor<f32>| {
                    let mut batch_shape = vec![1];
                    batch_shape.extend_from_slice(&x_shape);
                    let logits = victim.forward(&img.clone().reshape(&batch_shape)?)?;
                    Ok(logits.into_data())
                });
                let p = SquareParams { eps, budget: cfg.square_budget, p_init: cfg.square_p_init, seed: s };
                let o = square_attack(&mut oracle, &x, labels[b], &p)?;
                out.item_mut(b).copy_from_slice(o.adversarial.data());
                iters.push(oracle.queries);
            }
            (out, iters)
        }
        Algorithm::Patch => {
            let p = patch.ok_or_else(|| Error::invalid("patch class without a trained patch"))?;
            let mut out = images.clone();
            for (b, &s) in seeds.iter().enumerate() {
                let (y, _) = patch_apply(&images.item_tensor(b), &p.patch, s)?;
                out.item_mut(b).copy_from_slice(y.data());
            }
            (out, vec![0; idx.len()])
        }
    };

    let mut records = Vec::with_capacity(idx.len());
    for (b, &i) in idx.iter().enumerate() {
        let meta = RecordMeta {
            split: data.split,
            source_id: data.ids[i],
            class_index: class.class_index,
            label_true: data.labels[i],
            label_before: clean[i],
            label_after: 0,
            success: false,
            target: patch.filter(|_| class.algorithm == Algorithm::Patch).map(|p| p.target),
            iterations: iterations[b],
            seed: seeds[b],
        };
        records.push(AdversarialRecord::from_candidate(meta, images.item_tensor(b), candidates.item(b))?);
    }
    // label the settled images, not the raw candidates
    let settled: Vec<&Tensor<f32>> = records.iter().map(|r| &r.adversarial).collect();
    if !settled.is_empty() {
        let batch = Tensor::stack(&settled)?;
        let logits = victim.forward(&batch)?;
        for (r, row) in records.iter_mut().zip(logits.data().chunks(victim.classes())) {
            let after = argmax(row);
            r.meta.label_after = after;
            r.meta.success = match r.meta.target {
                Some(t) => after == t,
                None => r.meta.label_before == r.meta.label_true && after != r.meta.label_true,
            };
        }
    }
    Ok(records)
}

/// Successful records per class index.
pub fn class_counts(records: &[AdversarialRecord]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.meta.class_index).or_insert(0) += 1;
    }
    m
}
