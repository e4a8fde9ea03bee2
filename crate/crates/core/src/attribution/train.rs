use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::AttributionDataset;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ModelCheckpoint, Network, NetworkSpec};
use crate::victim::{predict, run_epoch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    pub max_epochs: usize,
    pub val_every_steps: usize,
    /// Validations without a new best before stopping; `None` runs all
    /// epochs. The best-validation weights are returned either way (the
    /// final ones when there is no validation set).
    pub patience: Option<usize>,
    pub adam: AdamConfig,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        TrainProtocol {
            max_epochs: 50,
            val_every_steps: 400,
            patience: Some(4),
            adam: AdamConfig::default(),
            replicates: 4,
            seed: 0,
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.max_epochs == 0 || self.val_every_steps == 0 || self.replicates == 0 || self.patience == Some(0) {
            return Err(Error::Config("max_epochs, val_every_steps, patience and replicates must be positive".into()));
        }
        Ok(())
    }
}

/// One validation checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    /// This row set a new best validation accuracy.
    pub best: bool,
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,step,train_loss,val_accuracy,best\n");
    for r in rows {
        let acc = r.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{:.6},{},{}\n", r.epoch, r.step, r.train_loss, acc, r.best));
    }
    s
}

pub fn accuracy(net: &Network<f32>, data: &AttributionDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(net, &data.inputs)?;
    Ok(preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAttributor {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<HistoryRow>,
    pub best_val_accuracy: Option<f64>,
}

/// Train the residual attributor with minibatch Adam. Validation runs every
/// `val_every_steps` updates and additionally at the end of any epoch shorter
/// than that; the best-validation weights are returned.
pub fn train_attributor(train: &AttributionDataset, val: &AttributionDataset, protocol: &TrainProtocol) -> Result<TrainedAttributor> {
    protocol.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty attribution training set"));
    }
    if protocol.patience.is_some() && val.is_empty() {
        return Err(Error::Config("early stopping needs a non-empty validation set".into()));
    }
    if val.classes != train.classes || (!val.is_empty() && val.image_shape() != train.image_shape()) {
        return Err(Error::invalid("train and validation sets disagree on classes or shape"));
    }
    let (h, w, c) = train.image_shape();
    let spec = NetworkSpec::attributor(h, w, c, train.classes);
    let mut net = Network::<f32>::init(spec, protocol.seed)?;
    let mut adam = AdamState::new(net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed ^ 0xA77);
    let steps_per_epoch = train.len().div_ceil(protocol.adam.batch_size);
    let epoch_end_validation = steps_per_epoch < protocol.val_every_steps;

    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut loss_sum = 0.0;
    let mut loss_n = 0;
    let mut stop = false;

    // returns false once patience is exhausted
    let mut checkpoint = |net: &Network<f32>, epoch: usize, step: usize, loss_sum: &mut f64, loss_n: &mut usize| -> Result<bool> {
        let val_accuracy = if val.is_empty() { None } else { Some(accuracy(net, val)?) };
        let is_best = match (val_accuracy, &best) {
            (Some(a), Some((b, _))) => a > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_best {
            best = Some((val_accuracy.unwrap(), net.params().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(HistoryRow {
            epoch,
            step,
            train_loss: *loss_sum / (*loss_n).max(1) as f64,
            val_accuracy,
            best: is_best,
        });
        *loss_sum = 0.0;
        *loss_n = 0;
        Ok(protocol.patience.map_or(true, |p| since_best < p))
    };

    for epoch in 1..=protocol.max_epochs {
        let mut validated_at = 0;
        run_epoch(&mut net, &mut adam, &protocol.adam, &train.inputs, &train.labels, &mut rng, |net, loss| {
            step += 1;
            loss_sum += loss;
            loss_n += 1;
            if step % protocol.val_every_steps == 0 {
                validated_at = step;
                if !checkpoint(net, epoch, step, &mut loss_sum, &mut loss_n)? {
                    stop = true;
                    return Ok(false);
                }
            }
            Ok(true)
        })?;
        if stop {
            break;
        }
        if epoch_end_validation && validated_at != step && !checkpoint(&net, epoch, step, &mut loss_sum, &mut loss_n)? {
            break;
        }
        log::debug!("attributor epoch {epoch} step {step}");
    }

    let best_val_accuracy = best.as_ref().map(|(a, _)| *a);
    if let Some((_, params)) = best {
        net.params_mut().copy_from_slice(&params);
    }
    Ok(TrainedAttributor {
        checkpoint: ModelCheckpoint::from_network(&net, adam, protocol.seed),
        history,
        best_val_accuracy,
    })
}
