//! Pools and fingerprint sets on disk.
//!
//! A pool split directory holds `records.json` (one [`RecordMeta`] per
//! record, in pool order) and `benign.afpt`, `adversarial.afpt`,
//! `delta.afpt`, each `N x H x W x C`. A fingerprint split is one
//! `N x H x W x C` blob plus `{split}.json` with the per-row ids and labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob;
use crate::attacks::{AdversarialRecord, RecordMeta, Taxonomy};
use crate::error::{Error, Result};
use crate::fingerprints::{Fingerprint, Method};
use crate::io::{read_file, write_file};
use crate::tensor::Tensor;

pub const POOL_PARTS: [&str; 3] = ["benign", "adversarial", "delta"];

/// Write `records` under `dir`; returns the written file names.
pub fn save_records(dir: &Path, records: &[AdversarialRecord]) -> Result<Vec<String>> {
    let metas: Vec<&RecordMeta> = records.iter().map(|r| &r.meta).collect();
    write_file(&dir.join("records.json"), &serde_json::to_vec(&metas)?)?;
    let mut names = vec!["records.json".to_string()];
    if records.is_empty() {
        return Ok(names);
    }
    for part in POOL_PARTS {
        let items: Vec<&Tensor<f32>> = records
            .iter()
            .map(|r| match part {
                "benign" => &r.benign,
                "adversarial" => &r.adversarial,
                _ => &r.delta,
            })
            .collect();
        let name = format!("{part}.afpt");
        blob::save(&dir.join(&name), &Tensor::stack(&items)?)?;
        names.push(name);
    }
    Ok(names)
}

pub fn load_metas(dir: &Path) -> Result<Vec<RecordMeta>> {
    let p = dir.join("records.json");
    serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::format(&p, e.to_string()))
}

/// Records stored under `dir`. Every record is checked against its class
/// in `taxonomy`; a violation is an integrity error. A missing `delta.afpt`
/// is tolerated when `need_delta` is false and then leaves `x' - x` in its
/// place.
pub fn load_records(dir: &Path, taxonomy: &Taxonomy, need_delta: bool) -> Result<Vec<AdversarialRecord>> {
    let metas = load_metas(dir)?;
    if metas.is_empty() {
        return Ok(Vec::new());
    }
    let load = |part: &str| -> Result<Tensor<f32>> {
        let t = blob::load(&dir.join(format!("{part}.afpt")))?;
        if t.rank() != 4 || t.shape()[0] != metas.len() {
            return Err(Error::Integrity(format!(
                "{}/{part}.afpt has shape {:?} for {} records",
                dir.display(),
                t.shape(),
                metas.len()
            )));
        }
        Ok(t)
    };
    let benign = load("benign")?;
    let adversarial = load("adversarial")?;
    let delta_path = dir.join("delta.afpt");
    let delta = if delta_path.exists() {
        Some(load("delta")?)
    } else if need_delta {
        return Err(Error::Config(format!("pool {} has no stored perturbations (delta.afpt)", dir.display())));
    } else {
        None
    };
    let mut out = Vec::with_capacity(metas.len());
    for (i, meta) in metas.into_iter().enumerate() {
        let b = benign.item_tensor(i);
        let a = adversarial.item_tensor(i);
        let d = match &delta {
            Some(d) => d.item_tensor(i),
            None => a.zip_map(&b, |x, y| x - y)?,
        };
        let r = AdversarialRecord { meta, benign: b, adversarial: a, delta: d };
        if delta.is_some() {
            r.check(taxonomy.class(r.meta.class_index)?)?;
        }
        out.push(r);
    }
    Ok(out)
}

/// Row metadata of a stored fingerprint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintIndex {
    pub method: Method,
    pub source_ids: Vec<u64>,
    pub class_indices: Vec<usize>,
}

pub fn save_fingerprints(dir: &Path, split: &str, fps: &[Fingerprint]) -> Result<Vec<String>> {
    let first = fps.first().ok_or_else(|| Error::invalid("no fingerprints to save"))?;
    let index = FingerprintIndex {
        method: first.method,
        source_ids: fps.iter().map(|f| f.source_id).collect(),
        class_indices: fps.iter().map(|f| f.class_index).collect(),
    };
    let items: Vec<&Tensor<f32>> = fps.iter().map(|f| &f.delta_hat).collect();
    let blob_name = format!("{split}.afpt");
    let index_name = format!("{split}.json");
    blob::save(&dir.join(&blob_name), &Tensor::stack(&items)?)?;
    write_file(&dir.join(&index_name), &serde_json::to_vec(&index)?)?;
    Ok(vec![blob_name, index_name])
}

pub fn load_fingerprints(dir: &Path, split: &str) -> Result<Vec<Fingerprint>> {
    let index_path = dir.join(format!("{split}.json"));
    let index: FingerprintIndex =
        serde_json::from_slice(&read_file(&index_path)?).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let t = blob::load(&dir.join(format!("{split}.afpt")))?;
    let n = index.source_ids.len();
    if t.rank() != 4 || t.shape()[0] != n || index.class_indices.len() != n {
        return Err(Error::Integrity(format!("{} does not match its index", dir.join(split).display())));
    }
    Ok((0..n)
        .map(|i| Fingerprint {
            delta_hat: t.item_tensor(i),
            method: index.method,
            source_id: index.source_ids[i],
            class_index: index.class_indices[i],
        })
        .collect())
}
