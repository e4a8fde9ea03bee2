//! Central-difference verification of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::Network;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of the mean loss at `coords`, compared against
/// `analytic`. Coordinates whose ±h perturbation flips a ReLU or max-pool
/// decision are non-differentiable there and are reported as `None`.
pub fn compare_gradient<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    analytic: &[T],
    coords: &[usize],
    h: f64,
) -> Result<Vec<Option<f64>>> {
    let base = net.activation_pattern(batch)?;
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + lit(h);
        let plus = probe.loss(batch, labels)?;
        let plus_pat = probe.activation_pattern(batch)?;
        probe.params_mut()[i] = orig - lit(h);
        let minus = probe.loss(batch, labels)?;
        let minus_pat = probe.activation_pattern(batch)?;
        probe.params_mut()[i] = orig;
        if plus_pat != base || minus_pat != base {
            out.push(None);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        out.push(Some(relative_error(analytic[i].to_f64().unwrap(), numeric)));
    }
    Ok(out)
}

/// Maximum relative error between the analytic gradient and central
/// differences over `n_coords` randomly sampled differentiable coordinates.
pub fn finite_diff_check<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if n_coords == 0 {
        return Err(Error::invalid("n_coords must be at least 1"));
    }
    let (_, analytic) = net.loss_and_param_gradients(batch, labels)?;
    let total = net.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, total, total).into_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for chunk in order.chunks(n_coords) {
        for e in compare_gradient(net, batch, labels, &analytic, chunk, h)?.into_iter().flatten() {
            worst = worst.max(e);
            checked += 1;
            if checked == n_coords {
                return Ok(worst);
            }
        }
    }
    if checked == 0 {
        return Err(Error::invalid("no differentiable coordinate found"));
    }
    Ok(worst)
}
