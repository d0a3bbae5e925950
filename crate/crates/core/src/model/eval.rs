use serde::{Deserialize, Serialize};

use super::train::{example_loss, forward};
use super::{Dataset, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_macro: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Indexed by class; classes excluded from the macro average read as 0.
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// Classes that appear in the labels or the predictions.
    pub classes_scored: Vec<usize>,
}

/// Confusion-matrix scores for a label/prediction pairing.
///
/// A class that never appears in either sequence is excluded from the macro
/// average; a class with an empty precision or recall denominator scores 0
/// on that measure.
pub fn classification_scores(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> (f64, Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision: Vec<f64> = (0..num_classes).map(|c| ratio(tp[c], tp[c] + fp[c])).collect();
    let recall: Vec<f64> = (0..num_classes).map(|c| ratio(tp[c], tp[c] + fn_[c])).collect();
    let scored: Vec<usize> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .collect();
    let f1 = |c: usize| {
        let (p, r) = (precision[c], recall[c]);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|&c| f1(c)).sum::<f64>() / scored.len() as f64
    };
    (macro_f1, precision, recall, scored)
}

pub fn predict(params: &ModelParams, x: &[f64]) -> usize {
    let acts = forward(params, x);
    let out = acts.last().expect("output");
    if out.len() == 1 {
        // single linear output: round to the nearest class index
        return out[0].round().max(0.0) as usize;
    }
    out.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Macro-F1 and mean loss over a test split.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<EvalReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Structure("test split is empty".into()));
    }
    if data.dims() != params.arch.inputs() {
        return Err(ModelError::Structure(format!(
            "dataset has {} features, model expects {}",
            data.dims(),
            params.arch.inputs()
        )));
    }
    let num_classes = data.num_classes.max(params.arch.outputs());
    let predictions: Vec<usize> = data
        .features
        .iter()
        .map(|x| predict(params, x).min(num_classes - 1))
        .collect();
    let (f1_macro, per_class_precision, per_class_recall, classes_scored) =
        classification_scores(&data.labels, &predictions, num_classes);
    let correct = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    let loss = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| example_loss(params, x, y))
        .sum::<f64>()
        / data.len() as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite {
            layer: params.layers.len() - 1,
        });
    }
    Ok(EvalReport {
        f1_macro,
        loss,
        accuracy: correct as f64 / data.len() as f64,
        per_class_precision,
        per_class_recall,
        classes_scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_confusion_matrix() {
        let (f1, p, r, scored) = classification_scores(&[1, 1, 0, 0], &[1, 0, 0, 0], 2);
        assert_eq!(p[1], 1.0);
        assert_eq!(r[1], 0.5);
        let f1_class1: f64 = 2.0 * p[1] * r[1] / (p[1] + r[1]);
        assert!((f1_class1 - 2.0 / 3.0).abs() < 1e-15);
        // class 0: precision 2/3, recall 1 → F1 0.8
        assert!((f1 - (f1_class1 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(scored, vec![0, 1]);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [0, 2, 1, 2, 0];
        let (f1, _, _, _) = classification_scores(&labels, &labels, 3);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 never appears anywhere
        let (f1, _, _, scored) = classification_scores(&[0, 1], &[0, 1], 3);
        assert_eq!(scored, vec![0, 1]);
        assert_eq!(f1, 1.0);
    }
}
