//! The undefended classifier every attack targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ModelCheckpoint, Network, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            epochs: 5,
            adam: AdamConfig { lr: 2e-3, batch_size: 64, ..AdamConfig::default() },
            seed: 0,
        }
    }
}

/// One row of the victim training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,step,loss,val_accuracy\n");
    for r in log {
        let acc = r.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{:.6},{}\n", r.epoch, r.step, r.loss, acc));
    }
    s
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels and logits for every item in `images`.
pub fn predict_with_logits<T: Scalar>(net: &Network<T>, images: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
    let logits = net.forward_chunked(images, 256)?;
    let c = net.classes();
    let preds = logits.data().chunks(c).map(argmax).collect();
    Ok((preds, logits))
}

pub fn predict<T: Scalar>(net: &Network<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(predict_with_logits(net, images)?.0)
}

/// One pass of shuffled minibatch Adam over `(images, labels)`. Calls
/// `on_step(step, loss)` after each update; returns the mean batch loss.
pub fn run_epoch(
    net: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    cfg: &AdamConfig,
    images: &Tensor<f32>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(&Network<f32>, f64) -> Result<bool>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let x = images.select(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = net.loss_and_param_gradients(&x, &y)?;
        adam.step(net.params_mut(), &grads, cfg)?;
        if !net.params().iter().all(|p| p.is_finite()) {
            return Err(Error::invalid("training diverged: non-finite parameters"));
        }
        total += loss;
        batches += 1;
        if !on_step(net, loss)? {
            break;
        }
    }
    Ok(total / batches.max(1) as f64)
}

/// Train the victim from scratch. `val`, when given, is scored after every epoch.
pub fn train_victim(
    train: &LabeledDataset,
    val: Option<&LabeledDataset>,
    cfg: &VictimConfig,
) -> Result<(ModelCheckpoint, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    cfg.adam.validate()?;
    let (h, w, c) = train.image_shape();
    let classes = train.labels.iter().max().unwrap() + 1;
    let spec = NetworkSpec::victim(h, w, c, classes.max(10));
    let mut net = Network::<f32>::init(spec, cfg.seed)?;
    let mut adam = AdamState::new(net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let loss = run_epoch(&mut net, &mut adam, &cfg.adam, &train.images, &train.labels, &mut rng, |_, _| {
            step += 1;
            Ok(true)
        })?;
        let val_accuracy = match val {
            Some(v) => Some(evaluate_victim(&net, v)?.accuracy),
            None => None,
        };
        log::info!("victim epoch {epoch}: loss {loss:.4} val {val_accuracy:?}");
        log.push(EpochLog { epoch, step, loss, val_accuracy });
    }
    Ok((ModelCheckpoint::from_network(&net, adam, cfg.seed), log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimEval {
    pub accuracy: f64,
    /// `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

pub fn evaluate_victim<T: Scalar>(net: &Network<T>, data: &LabeledDataset) -> Result<VictimEval> {
    let preds = predict(net, &data.images.cast::<T>())?;
    Ok(score_predictions(&preds, &data.labels, net.classes()))
}

pub fn score_predictions(preds: &[usize], labels: &[usize], classes: usize) -> VictimEval {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    VictimEval {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        predictions: preds.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn constant_predictions_score_class_frequency() {
        let labels = [0, 1, 1, 2, 1];
        let ev = score_predictions(&[1; 5], &labels, 3);
        assert!((ev.accuracy - 0.6).abs() < 1e-12);
        assert_eq!(ev.per_class, vec![Some(0.0), Some(1.0), Some(0.0)]);
        let perfect = score_predictions(&labels, &labels, 4);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.per_class[3], None);
    }
}
