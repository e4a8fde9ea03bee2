use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::fingerprints::Fingerprint;
use crate::tensor::Tensor;

/// Fingerprints labelled with their attack class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionDataset {
    /// `N x H x W x C`.
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub source_ids: Vec<u64>,
    pub split: Split,
    pub taxonomy_version: u32,
    pub classes: usize,
    pub method: String,
}

impl AttributionDataset {
    pub fn from_fingerprints(
        fps: &[&Fingerprint],
        split: Split,
        taxonomy_version: u32,
        classes: usize,
        method: &str,
        image_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let (h, w, c) = image_shape;
        let mut data = Vec::with_capacity(fps.len() * h * w * c);
        for f in fps {
            if f.delta_hat.shape() != [h, w, c] {
                return Err(Error::invalid(format!("fingerprint shape {:?} != {h}x{w}x{c}", f.delta_hat.shape())));
            }
            if f.class_index >= classes {
                return Err(Error::invalid(format!("label {} outside {classes} classes", f.class_index)));
            }
            data.extend_from_slice(f.delta_hat.data());
        }
        Ok(AttributionDataset {
            inputs: Tensor::new(&[fps.len(), h, w, c], data)?,
            labels: fps.iter().map(|f| f.class_index).collect(),
            source_ids: fps.iter().map(|f| f.source_id).collect(),
            split,
            taxonomy_version,
            classes,
            method: method.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.inputs.shape();
        (s[1], s[2], s[3])
    }

    pub fn unique_sources(&self) -> BTreeSet<u64> {
        self.source_ids.iter().copied().collect()
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Source images drawn from the train split; `None` takes all.
    pub n_unique_train: Option<usize>,
    pub n_unique_test: Option<usize>,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_unique_train: None, n_unique_test: None, val_frac: 0.10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: AttributionDataset,
    pub val: AttributionDataset,
    pub test: AttributionDataset,
}

/// Source-image ids assigned to each split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitSources {
    pub train: BTreeSet<u64>,
    pub val: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

fn sample_sources(available: &BTreeSet<u64>, n: Option<usize>, rng: &mut ChaCha8Rng, which: &str) -> Result<Vec<u64>> {
    let available: Vec<u64> = available.iter().copied().collect();
    let n = n.unwrap_or(available.len());
    if n > available.len() {
        return Err(Error::Config(format!(
            "{n} unique {which} source images requested but only {} are available",
            available.len()
        )));
    }
    let mut picked: Vec<u64> = available.choose_multiple(rng, n).copied().collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Draw `n_unique` source images from each split's available ids; `val_frac`
/// of the drawn train sources (by source id, not by sample) become the
/// validation set.
pub fn choose_sources(train_available: &BTreeSet<u64>, test_available: &BTreeSet<u64>, cfg: &SplitConfig) -> Result<SplitSources> {
    if !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Config(format!("val_frac {} outside [0, 1)", cfg.val_frac)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_ids = sample_sources(train_available, cfg.n_unique_train, &mut rng, "train")?;
    let test: BTreeSet<u64> = sample_sources(test_available, cfg.n_unique_test, &mut rng, "test")?.into_iter().collect();
    train_ids.shuffle(&mut rng);
    let n_val = (cfg.val_frac * train_ids.len() as f64).round() as usize;
    let s = SplitSources {
        val: train_ids[..n_val].iter().copied().collect(),
        train: train_ids[n_val..].iter().copied().collect(),
        test,
    };
    if !s.train.is_disjoint(&s.test) || !s.val.is_disjoint(&s.test) {
        return Err(Error::Integrity("train and test pools share source ids".into()));
    }
    Ok(s)
}

/// Gather every fingerprint of the chosen sources into the three datasets.
pub fn assemble(
    train_pool: &[Fingerprint],
    test_pool: &[Fingerprint],
    sources: &SplitSources,
    taxonomy_version: u32,
    classes: usize,
) -> Result<Splits> {
    let first = train_pool.first().or(test_pool.first()).ok_or_else(|| Error::invalid("empty fingerprint pools"))?;
    let method = first.method.name();
    let shape = match first.delta_hat.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid(format!("fingerprints must be H x W x C, got {s:?}"))),
    };
    let pick = |pool: &[Fingerprint], ids: &BTreeSet<u64>, split: Split| {
        let fps: Vec<&Fingerprint> = pool.iter().filter(|f| ids.contains(&f.source_id)).collect();
        AttributionDataset::from_fingerprints(&fps, split, taxonomy_version, classes, &method, shape)
    };
    Ok(Splits {
        train: pick(train_pool, &sources.train, Split::Train)?,
        val: pick(train_pool, &sources.val, Split::Val)?,
        test: pick(test_pool, &sources.test, Split::Test)?,
    })
}

/// [`choose_sources`] over the ids present in each pool, then [`assemble`].
pub fn build_splits(
    train_pool: &[Fingerprint],
    test_pool: &[Fingerprint],
    taxonomy_version: u32,
    classes: usize,
    cfg: &SplitConfig,
) -> Result<Splits> {
    let ids = |pool: &[Fingerprint]| pool.iter().map(|f| f.source_id).collect::<BTreeSet<u64>>();
    let sources = choose_sources(&ids(train_pool), &ids(test_pool), cfg)?;
    assemble(train_pool, test_pool, &sources, taxonomy_version, classes)
}
