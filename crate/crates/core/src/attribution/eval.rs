use serde::{Deserialize, Serialize};

use super::dataset::AttributionDataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::victim::predict_with_logits;

/// Predicted class (argmax, lowest index on ties) and logits per sample.
pub fn predict(model: &Network<f32>, data: &AttributionDataset) -> Result<(Vec<usize>, Vec<Vec<f32>>)> {
    if model.classes() != data.classes {
        return Err(Error::invalid(format!("model has {} classes, dataset {}", model.classes(), data.classes)));
    }
    let (h, w, c) = model.spec().input;
    if !data.is_empty() && data.image_shape() != (h, w, c) {
        return Err(Error::invalid(format!("model expects {h}x{w}x{c} inputs, dataset has {:?}", data.image_shape())));
    }
    if data.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let (preds, logits) = predict_with_logits(model, &data.inputs)?;
    Ok((preds, logits.data().chunks(data.classes).map(<[f32]>::to_vec).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub replicate: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions; each present row sums to 1.
    pub confusion: Vec<Vec<f64>>,
    /// Test samples per true class.
    pub support: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(replicate: usize, preds: &[usize], labels: &[usize], classes: usize) -> Self {
        let mut counts = vec![vec![0usize; classes]; classes];
        for (&p, &y) in preds.iter().zip(labels) {
            counts[y][p] += 1;
        }
        let support: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        let confusion = counts
            .iter()
            .zip(&support)
            .map(|(row, &n)| row.iter().map(|&v| if n > 0 { v as f64 / n as f64 } else { 0.0 }).collect())
            .collect();
        let per_class = (0..classes).map(|k| (support[k] > 0).then(|| counts[k][k] as f64 / support[k] as f64)).collect();
        let correct: usize = (0..classes).map(|k| counts[k][k]).sum();
        EvalReport {
            replicate,
            accuracy: correct as f64 / labels.len().max(1) as f64,
            per_class,
            confusion,
            support,
        }
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true\\pred");
        for j in 0..k {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class_index,support,accuracy\n");
        for (k, (a, n)) in self.per_class.iter().zip(&self.support).enumerate() {
            s.push_str(&format!("{k},{n},{}\n", a.map(|a| format!("{a:.6}")).unwrap_or_default()));
        }
        s
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub taxonomy_version: u32,
    pub classes: usize,
    pub test_samples: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Per-class accuracy averaged over replicates.
    pub mean_per_class: Vec<Option<f64>>,
    pub replicates: Vec<EvalReport>,
}

/// Evaluate every replicate on `test` and aggregate.
pub fn evaluate(models: &[Network<f32>], test: &AttributionDataset) -> Result<EvalSummary> {
    if models.is_empty() {
        return Err(Error::invalid("evaluation needs at least one replicate"));
    }
    let reports = models
        .iter()
        .enumerate()
        .map(|(r, m)| Ok(EvalReport::from_predictions(r, &predict(m, test)?.0, &test.labels, test.classes)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&test.method, test.taxonomy_version, test.len(), reports))
}

pub fn summarize(method: &str, taxonomy_version: u32, test_samples: usize, replicates: Vec<EvalReport>) -> EvalSummary {
    let accs: Vec<f64> = replicates.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let classes = replicates.first().map_or(0, |r| r.per_class.len());
    let mean_per_class = (0..classes)
        .map(|k| {
            let v: Vec<f64> = replicates.iter().filter_map(|r| r.per_class[k]).collect();
            (!v.is_empty()).then(|| mean_std(&v).0)
        })
        .collect();
    EvalSummary {
        method: method.to_string(),
        taxonomy_version,
        classes,
        test_samples,
        mean_accuracy,
        std_accuracy,
        mean_per_class,
        replicates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_give_identity() {
        let labels = [0, 1, 2, 2, 1];
        let r = EvalReport::from_predictions(0, &labels, &labels, 4);
        assert_eq!(r.accuracy, 1.0);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(r.confusion[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(r.confusion[3].iter().all(|&v| v == 0.0));
        assert_eq!(r.per_class[3], None);
    }

    #[test]
    fn rows_are_normalised() {
        let r = EvalReport::from_predictions(0, &[0, 1, 1, 2, 0, 0, 2], &[0, 0, 1, 1, 2, 2, 2], 3);
        for row in &r.confusion {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((r.confusion[2][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.accuracy - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_replicate_has_zero_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn csv_shapes() {
        let r = EvalReport::from_predictions(0, &[0, 1], &[0, 0], 2);
        let csv = r.confusion_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0.500000,0.500000"));
        assert_eq!(r.per_class_csv().lines().nth(2).unwrap(), "1,0,");
    }
}
