//! Image-quality and victim-label analyses of an attack pool.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{AdversarialRecord, Algorithm, Norm, Taxonomy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.check_same_shape(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    Ok(s / a.len().max(1) as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

fn ssim_from_stats(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Single-channel SSIM over `h x w` planes. Averages the SSIM map over every
/// window position that fits inside the image; planes smaller than the
/// window use global (unweighted) statistics instead.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return ssim_from_stats(ma, mb, va, vb, cov);
    }
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let g = win[dy * SSIM_WINDOW + dx];
                    let i = (y + dy) * w + x + dx;
                    ma += g * a[i];
                    mb += g * b[i];
                    saa += g * a[i] * a[i];
                    sbb += g * b[i] * b[i];
                    sab += g * a[i] * b[i];
                }
            }
            total += ssim_from_stats(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        }
    }
    total / (oh * ow) as f64
}

/// SSIM of two `H x W x C` images in [0, 1], averaged over channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, c) = match a.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid(format!("SSIM expects H x W x C images, got {s:?}"))),
    };
    let plane = |t: &Tensor<f32>, ch: usize| -> Vec<f64> { t.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect() };
    Ok((0..c).map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), h, w)).sum::<f64>() / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityPoint {
    pub source_id: u64,
    pub class_index: usize,
    pub mse: f64,
    pub ssim: f64,
}

/// MSE and SSIM between benign and attacked image for every record.
pub fn quality_scatter(records: &[AdversarialRecord]) -> Result<Vec<QualityPoint>> {
    records
        .par_iter()
        .map(|r| {
            Ok(QualityPoint {
                source_id: r.meta.source_id,
                class_index: r.meta.class_index,
                mse: mse(&r.benign, &r.adversarial)?,
                ssim: ssim(&r.benign, &r.adversarial)?,
            })
        })
        .collect()
}

pub fn quality_csv(points: &[QualityPoint]) -> String {
    let mut s = String::from("class_index,mse,ssim\n");
    for p in points {
        s.push_str(&format!("{},{:.9e},{:.9}\n", p.class_index, p.mse, p.ssim));
    }
    s
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("Spearman needs two equal-length samples of at least 2 values"));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

/// Counts of victim output labels per (true label, attack class) cell.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub labels: usize,
    /// `(label_true, class_index) -> counts over label_after`.
    pub cells: BTreeMap<(usize, usize), Vec<usize>>,
}

/// Shannon entropy in nats of a count vector (`0 log 0 = 0`).
pub fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            // written so a certain outcome gives +0, not -0
            p * (1.0 / p).ln()
        })
        .sum()
}

/// Histogram of the victim labels recorded on untargeted records; patch
/// records are skipped.
pub fn label_distribution(records: &[AdversarialRecord], taxonomy: &Taxonomy, labels: usize) -> Result<LabelHistogram> {
    let mut h = LabelHistogram { labels, cells: BTreeMap::new() };
    for r in records {
        let class = taxonomy.class(r.meta.class_index)?;
        if !class.algorithm.is_untargeted() {
            continue;
        }
        if r.meta.label_after >= labels || r.meta.label_true >= labels {
            return Err(Error::invalid(format!("victim label outside {labels} classes")));
        }
        h.cells.entry((r.meta.label_true, r.meta.class_index)).or_insert_with(|| vec![0; labels])[r.meta.label_after] += 1;
    }
    Ok(h)
}

impl LabelHistogram {
    /// Long format: one row per (true label, class, victim label) with the
    /// cell's entropy repeated on each row.
    pub fn to_csv(&self, taxonomy: &Taxonomy) -> String {
        let mut s = String::from("label_true,class_index,attack,label_after,count,cell_entropy_nats\n");
        for (&(t, k), counts) in &self.cells {
            let e = entropy(counts);
            let name = taxonomy.classes.get(k).map(|c| c.to_string()).unwrap_or_default();
            for (l, &c) in counts.iter().enumerate() {
                s.push_str(&format!("{t},{k},{name},{l},{c},{e:.6}\n"));
            }
        }
        s
    }

    /// Most frequent victim label (lowest on ties) per true label, pooled
    /// over every class of one family.
    pub fn top_label_by_truth(&self, taxonomy: &Taxonomy, algorithm: Algorithm, norm: Norm) -> BTreeMap<usize, usize> {
        let mut pooled: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&(t, k), counts) in &self.cells {
            let c = &taxonomy.classes[k];
            if c.algorithm == algorithm && c.norm == norm {
                let acc = pooled.entry(t).or_insert_with(|| vec![0; self.labels]);
                for (a, b) in acc.iter_mut().zip(counts) {
                    *a += b;
                }
            }
        }
        pooled
            .into_iter()
            .filter(|(_, c)| c.iter().any(|&v| v > 0))
            .map(|(t, c)| (t, crate::victim::argmax(&c.iter().map(|&v| v as f64).collect::<Vec<_>>())))
            .collect()
    }
}

/// Agreement of the top flipped label between PGD-L∞ and Square-L∞ over true
/// labels present in both: `(agreeing, compared)`.
pub fn top1_agreement(h: &LabelHistogram, taxonomy: &Taxonomy) -> (usize, usize) {
    let pgd = h.top_label_by_truth(taxonomy, Algorithm::Pgd, Norm::Linf);
    let sq = h.top_label_by_truth(taxonomy, Algorithm::Square, Norm::Linf);
    let shared: Vec<usize> = pgd.keys().filter(|k| sq.contains_key(k)).copied().collect();
    (shared.iter().filter(|k| pgd[k] == sq[k]).count(), shared.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_basics() {
        let z = Tensor::<f32>::zeros(&[3, 3, 1]);
        let o = Tensor::full(&[3, 3, 1], 1.0f32);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(mse(&o, &o).unwrap(), 0.0);
        assert!(mse(&z, &Tensor::zeros(&[3, 3, 2])).is_err());
    }

    #[test]
    fn ssim_constant_images_follow_luminance_term() {
        for (a, b) in [(0.2f32, 0.7f32), (0.5, 0.5), (0.0, 1.0)] {
            let x = Tensor::full(&[16, 16, 1], a);
            let y = Tensor::full(&[16, 16, 1], b);
            let (a, b) = (a as f64, b as f64);
            let want = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
            assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
            // small images take the global-statistics branch; same closed form
            let xs = Tensor::full(&[5, 5, 1], a as f32);
            let ys = Tensor::full(&[5, 5, 1], b as f32);
            assert!((ssim(&xs, &ys).unwrap() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn window_sums_to_one() {
        assert!((gaussian_window().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 5.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0, 5, 0]), 0.0);
        assert!((entropy(&[1, 1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(entropy(&[0, 0]), 0.0);
    }
}
