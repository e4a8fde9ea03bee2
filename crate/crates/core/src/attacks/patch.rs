//! Universal targeted patch trained over random locations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, AdamConfig, AdamState, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Patch side as a fraction of `min(H, W)`, rounded up.
    pub side_fraction: f64,
    /// `None` picks the class the victim already leans toward most; see
    /// [`default_target`].
    pub target: Option<usize>,
    pub iters: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { side_fraction: 0.3, target: None, iters: 1000, lr: 0.05, batch_size: 32 }
    }
}

impl PatchConfig {
    pub fn side(&self, h: usize, w: usize) -> usize {
        (self.side_fraction * h.min(w) as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPatch {
    /// `side x side x C`, values in [0, 1].
    pub patch: Tensor<f32>,
    pub target: usize,
    /// Batch mean target log-probability before each update.
    pub objective_log: Vec<f64>,
}

/// Class with the highest mean clean log-probability over images of the
/// other classes.
pub fn default_target(victim: &Network<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<usize> {
    let k = victim.classes();
    let p = softmax(&victim.forward_chunked(images, 256)?);
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for (row, &y) in p.chunks(k).zip(labels) {
        for j in (0..k).filter(|&j| j != y) {
            sum[j] += row[j].max(1e-300).ln();
            n[j] += 1;
        }
    }
    let means: Vec<f64> = sum.iter().zip(&n).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NEG_INFINITY }).collect();
    Ok(crate::victim::argmax(&means))
}

/// Top-left corner for a `side x side` patch in an `h x w` image.
pub fn patch_location(h: usize, w: usize, side: usize, location_seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(location_seed);
    (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side))
}

/// Copy of the `H x W x C` image `x` with `patch` pasted at `(row, col)`.
pub fn paste(x: &[f32], shape: (usize, usize, usize), patch: &Tensor<f32>, at: (usize, usize)) -> Result<Vec<f32>> {
    let (h, w, c) = shape;
    let (ph, pw, pc) = match patch.shape() {
        [a, b, d] => (*a, *b, *d),
        s => return Err(Error::invalid(format!("patch must be side x side x C, got {s:?}"))),
    };
    if pc != c || at.0 + ph > h || at.1 + pw > w {
        return Err(Error::invalid(format!("patch {ph}x{pw}x{pc} does not fit {h}x{w}x{c} at {at:?}")));
    }
    let mut out = x.to_vec();
    for y in 0..ph {
        let dst = ((at.0 + y) * w + at.1) * c;
        out[dst..dst + pw * c].copy_from_slice(&patch.data()[y * pw * c..(y + 1) * pw * c]);
    }
    Ok(out)
}

fn image_shape(images: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match images.shape() {
        [_, h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::invalid(format!("expected N x H x W x C images, got {s:?}"))),
    }
}

/// Mean target log-probability with the patch pasted at the locations
/// drawn from `seed` (one per image).
pub fn patch_objective(victim: &Network<f32>, images: &Tensor<f32>, patch: &Tensor<f32>, target: usize, seed: u64) -> Result<f64> {
    let (batch, _) = pasted_batch(images, patch, &(0..images.batch_len()).collect::<Vec<_>>(), seed)?;
    let logits = victim.forward_chunked(&batch, 256)?;
    let k = victim.classes();
    let p = softmax(&logits);
    let n = batch.batch_len();
    Ok(p.chunks(k).map(|row| row[target].max(1e-300).ln()).sum::<f64>() / n as f64)
}

fn pasted_batch(images: &Tensor<f32>, patch: &Tensor<f32>, idx: &[usize], seed: u64) -> Result<(Tensor<f32>, Vec<(usize, usize)>)> {
    let (h, w, c) = image_shape(images)?;
    let side = patch.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(idx.len() * h * w * c);
    let mut locs = Vec::with_capacity(idx.len());
    for &i in idx {
        let at = (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side));
        data.extend(paste(images.item(i), (h, w, c), patch, at)?);
        locs.push(at);
    }
    Ok((Tensor::new(&[idx.len(), h, w, c], data)?, locs))
}

/// Train one patch that pushes the victim toward the target class wherever it is
/// pasted. `iters = 0` returns the seeded uniform initialisation.
pub fn patch_attack_train(
    victim: &Network<f32>,
    train_images: &Tensor<f32>,
    train_labels: &[usize],
    cfg: &PatchConfig,
    seed: u64,
) -> Result<TrainedPatch> {
    let (h, w, c) = image_shape(train_images)?;
    if train_labels.len() != train_images.batch_len() {
        return Err(Error::invalid("one label per patch training image required"));
    }
    let target = match cfg.target {
        Some(t) => t,
        None => default_target(victim, train_images, train_labels)?,
    };
    let side = cfg.side(h, w);
    if side == 0 || side >= h.min(w) {
        return Err(Error::invalid(format!("patch side {side} must be in [1, {})", h.min(w))));
    }
    if target >= victim.classes() {
        return Err(Error::invalid(format!("patch target {target} outside {} classes", victim.classes())));
    }
    if train_images.batch_len() == 0 && cfg.iters > 0 {
        return Err(Error::invalid("patch training needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patch = Tensor::new(&[side, side, c], (0..side * side * c).map(|_| rng.gen::<f32>()).collect())?;
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::<f32>::new(patch.len());
    let mut log = Vec::with_capacity(cfg.iters);
    let n = train_images.batch_len();
    for _ in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch_size.min(n).max(1)).map(|_| rng.gen_range(0..n)).collect();
        let (batch, locs) = pasted_batch(train_images, &patch, &idx, rng.gen())?;
        let targets = vec![target; idx.len()];
        let (logits, tape) = victim.forward_with_tape(&batch)?;
        // mean cross-entropy toward the target is the negated objective
        let (loss, dlogits) = softmax_cross_entropy(&logits, &targets, 1.0 / idx.len() as f32)?;
        log.push(-loss);
        let g = Tensor::new(batch.shape(), victim.backward(&tape, &dlogits, false, true).1.unwrap())?;
        let mut grad = vec![0.0f32; patch.len()];
        for (b, &(r0, c0)) in locs.iter().enumerate() {
            let gi = g.item(b);
            for y in 0..side {
                let src = ((r0 + y) * w + c0) * c;
                for (d, s) in grad[y * side * c..(y + 1) * side * c].iter_mut().zip(&gi[src..src + side * c]) {
                    *d += s;
                }
            }
        }
        adam.step(patch.data_mut(), &grad, &adam_cfg)?;
        for v in patch.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(TrainedPatch { patch, target, objective_log: log })
}

/// Paste a trained patch at the location drawn from `location_seed`.
/// Returns the attacked image and the chosen corner.
pub fn patch_apply(x: &Tensor<f32>, patch: &Tensor<f32>, location_seed: u64) -> Result<(Tensor<f32>, (usize, usize))> {
    let (h, w, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::invalid(format!("expected H x W x C image, got {s:?}"))),
    };
    let side = patch.shape()[0];
    if side > h || side > w {
        return Err(Error::invalid(format!("patch side {side} larger than {h}x{w} image")));
    }
    let at = patch_location(h, w, side, location_seed);
    Ok((Tensor::new(x.shape(), paste(x.data(), (h, w, c), patch, at)?)?, at))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn side_rounds_up() {
        assert_eq!(PatchConfig::default().side(28, 28), 9);
        assert_eq!(PatchConfig::default().side(10, 20), 3);
    }

    #[test]
    fn paste_touches_only_the_footprint() {
        let x = Tensor::new(&[5, 6, 2], (0..60).map(|i| i as f32 / 60.0).collect()).unwrap();
        let patch = Tensor::full(&[2, 2, 2], 1.0f32);
        let (y, (r, c)) = patch_apply(&x, &patch, 7).unwrap();
        let (y2, at2) = patch_apply(&x, &patch, 7).unwrap();
        assert_eq!((r, c), at2);
        assert_eq!(y, y2);
        for row in 0..5 {
            for col in 0..6 {
                for ch in 0..2 {
                    let i = (row * 6 + col) * 2 + ch;
                    let inside = (r..r + 2).contains(&row) && (c..c + 2).contains(&col);
                    if inside {
                        assert_eq!(y.data()[i], 1.0);
                    } else {
                        assert_eq!(y.data()[i], x.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_paste_leaves_image_unchanged() {
        let x = Tensor::new(&[4, 4, 1], (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        let region = Tensor::new(&[2, 2, 1], vec![0.0, 1.0 / 16.0, 4.0 / 16.0, 5.0 / 16.0]).unwrap();
        let y = paste(x.data(), (4, 4, 1), &region, (0, 0)).unwrap();
        assert_eq!(y, x.data());
    }

    #[test]
    fn oversized_patch_rejected() {
        let x = Tensor::<f32>::zeros(&[3, 3, 1]);
        assert!(patch_apply(&x, &Tensor::zeros(&[4, 4, 1]), 0).is_err());
    }
}
