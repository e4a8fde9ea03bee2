//! Labeled image datasets: IDX ingestion and the procedural glyph generator.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Bit set on source ids of test-split images so ids never collide across splits.
pub const TEST_ID_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Stable id for an image at `index` within a file of this split.
    pub fn source_id(&self, index: usize) -> u64 {
        match self {
            Split::Test => TEST_ID_BIT | index as u64,
            _ => index as u64,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `N x H x W x C`, values in [0, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, ids: Vec<u64>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid("dataset images must be N x H x W x C"));
        }
        let n = images.batch_len();
        if labels.len() != n || ids.len() != n {
            return Err(Error::invalid(format!(
                "{n} images but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        let unique: HashSet<u64> = ids.iter().copied().collect();
        if unique.len() != n {
            return Err(Error::invalid("source ids are not unique within the split"));
        }
        Ok(LabeledDataset { images, labels, ids, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            split: self.split,
        }
    }

    pub fn first(&self, n: usize) -> LabeledDataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Images: magic 0x803, N, rows, cols, u8 pixels. Labels: magic 0x801, N, u8 labels.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images_path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(images_path, "image dims overflow"))?;
    if img.len() != 16 + need {
        return Err(Error::format(
            images_path,
            format!("expected {} data bytes, found {}", need, img.len().saturating_sub(16)),
        ));
    }
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels_path, format!("bad label magic {lmagic:#010x}")));
    }
    let ln = be_u32(&lab, 4, labels_path)? as usize;
    if ln != n {
        return Err(Error::format(labels_path, format!("{ln} labels for {n} images")));
    }
    if lab.len() != 8 + n {
        return Err(Error::format(labels_path, format!("expected {n} label bytes, found {}", lab.len().saturating_sub(8))));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&l| l as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::format(labels_path, format!("label {bad} outside [0, 10)")));
    }
    let pixels = img[16..].iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(&[n, rows, cols, 1], pixels)?;
    let ids = (0..n).map(|i| split.source_id(i)).collect();
    LabeledDataset::new(images, labels, ids, split)
}

/// Write a single-channel dataset as an IDX image/label file pair.
pub fn save_idx_dataset(data: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w, c) = data.image_shape();
    if c != 1 {
        return Err(Error::invalid("IDX export supports single-channel images only"));
    }
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    write_file(images_path, &img)?;
    write_file(labels_path, &lab)
}

pub const SYNTH_SIDE: usize = 28;
pub const SYNTH_CLASSES: usize = 10;

/// Signed distance (negative inside) of glyph `class` at point `(x, y)`
/// relative to its centre, with half-size `s` and stroke half-width `t`.
fn glyph_distance(class: usize, x: f64, y: f64, s: f64, t: f64) -> f64 {
    let bar = |x: f64, y: f64, hx: f64, hy: f64| {
        let dx = x.abs() - hx;
        let dy = y.abs() - hy;
        dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
    };
    let r = x.hypot(y);
    match class {
        0 => (r - s).abs() - t,
        1 => bar(x, y, 0.75 * s, 0.75 * s),
        2 => {
            // upright triangle
            let k = 3f64.sqrt();
            let (px, py) = (x.abs(), -y + 0.3 * s);
            let e1 = (k * px + py) / 2.0 - 0.6 * s;
            e1.max(-py - 0.6 * s)
        }
        3 => bar(x, y, s, t).min(bar(x, y, t, s)),
        4 => {
            let (u, v) = ((x + y) / 2f64.sqrt(), (x - y) / 2f64.sqrt());
            bar(u, v, s, t).min(bar(u, v, t, s))
        }
        5 => bar(x, y - 0.5 * s, s, t).min(bar(x, y + 0.5 * s, s, t)),
        6 => bar(x, y, t, s),
        7 => (x.abs() + y.abs() - s).abs() / 2f64.sqrt() - t,
        8 => bar(x + 0.5 * s, y, t, s).min(bar(x, y - s + t, 0.5 * s + t, t)),
        _ => r - 0.55 * s,
    }
}

fn render_glyph(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = SYNTH_SIDE as f64;
    let cx = n / 2.0 + rng.gen_range(-3.0..3.0);
    let cy = n / 2.0 + rng.gen_range(-3.0..3.0);
    let s = rng.gen_range(6.5..9.5);
    let t = rng.gen_range(1.0..1.8);
    let rot: f64 = rng.gen_range(-0.25..0.25);
    let (sin, cos) = rot.sin_cos();
    let base = rng.gen_range(0.25..0.55);
    let gx = rng.gen_range(-0.006..0.006);
    let gy = rng.gen_range(-0.006..0.006);
    let contrast = rng.gen_range(0.3..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -0.6 };
    let noise = Normal::new(0.0, rng.gen_range(0.01..0.04)).unwrap();
    let mut img = Vec::with_capacity(SYNTH_SIDE * SYNTH_SIDE);
    for py in 0..SYNTH_SIDE {
        for px in 0..SYNTH_SIDE {
            let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            let (x, y) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let coverage = (0.5 - glyph_distance(class, x, y, s, t)).clamp(0.0, 1.0);
            let bg = base + gx * (px as f64 - n / 2.0) + gy * (py as f64 - n / 2.0);
            let v = bg + contrast * coverage + noise.sample(rng);
            img.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    img
}

/// Ten procedurally drawn glyph classes at 28x28x1 over a shaded, noisy
/// background. Class of image `i` is `i % 10`; every image is seeded
/// independently from `(seed, split, i)`.
pub fn synth_dataset(n_per_class: usize, seed: u64, split: Split) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let n = n_per_class * SYNTH_CLASSES;
    let mut pixels = Vec::with_capacity(n * SYNTH_SIDE * SYNTH_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTH_CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split as u64, i as u64]));
        pixels.extend(render_glyph(class, &mut rng));
        labels.push(class);
    }
    let images = Tensor::new(&[n, SYNTH_SIDE, SYNTH_SIDE, 1], pixels)?;
    let ids = (0..n).map(|i| split.source_id(i)).collect();
    LabeledDataset::new(images, labels, ids, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_sized() {
        let a = synth_dataset(3, 42, Split::Train).unwrap();
        let b = synth_dataset(3, 42, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(a.images.shape(), &[30, 28, 28, 1]);
        assert!(a.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let c = synth_dataset(3, 43, Split::Train).unwrap();
        assert_ne!(a.images, c.images);
        assert_eq!(synth_dataset(100, 1, Split::Test).unwrap().len(), 1000);
    }

    #[test]
    fn split_ids_are_disjoint() {
        let tr = synth_dataset(2, 1, Split::Train).unwrap();
        let te = synth_dataset(2, 1, Split::Test).unwrap();
        let a: HashSet<_> = tr.ids.iter().collect();
        assert!(te.ids.iter().all(|i| !a.contains(i)));
    }

    #[test]
    fn glyphs_cover_some_pixels() {
        for class in 0..SYNTH_CLASSES {
            let inside = (0..28)
                .flat_map(|y| (0..28).map(move |x| (x as f64 - 14.0, y as f64 - 14.0)))
                .filter(|&(x, y)| glyph_distance(class, x, y, 8.0, 1.4) < 0.0)
                .count();
            assert!(inside > 15 && inside < 500, "class {class} covers {inside}");
        }
    }
}
