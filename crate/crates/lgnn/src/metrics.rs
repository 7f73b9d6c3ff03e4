//! Classification metrics over a node subset: accuracy, micro-averaged and
//! macro-averaged F-score.

use serde::Serialize;

use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f: f64,
    pub macro_f: f64,
}

/// Argmax over a probability row; ties resolve to the lowest index.
pub fn argmax_row<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted class per node from a probability matrix.
pub fn predictions<F: Real>(probs: &Matrix<F>) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax_row(probs.row(i))).collect()
}

/// Evaluate predictions against labels on the given node subset.
///
/// Micro-F pools true/false positives across classes; with single-label
/// predictions it coincides with accuracy. Macro-F averages per-class F1,
/// treating a class with no support and no predictions as F1 = 0 only when
/// it actually appears in the subset; absent classes are skipped.
pub fn evaluate(predictions: &[usize], labels: &[usize], subset: &[usize], num_classes: usize) -> Metrics {
    assert!(!subset.is_empty(), "cannot evaluate on an empty subset");
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0usize;
    for &v in subset {
        let p = predictions[v];
        let y = labels[v];
        if p == y {
            tp[y] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let n = subset.len() as f64;
    let accuracy = correct as f64 / n;

    let tp_sum: usize = tp.iter().sum();
    let fp_sum: usize = fp.iter().sum();
    let fn_sum: usize = fn_.iter().sum();
    let micro_f = f1(tp_sum as f64, fp_sum as f64, fn_sum as f64);

    let mut macro_sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        macro_sum += f1(tp[c] as f64, fp[c] as f64, fn_[c] as f64);
        present += 1;
    }
    let macro_f = if present > 0 {
        macro_sum / present as f64
    } else {
        0.0
    };

    Metrics {
        accuracy,
        micro_f,
        macro_f,
    }
}

fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_row(&[0.5f64, 0.5, 0.0]), 0);
        assert_eq!(argmax_row(&[0.1f64, 0.2, 0.7]), 2);
    }

    #[test]
    fn perfect_predictions() {
        let preds = vec![0, 1, 2, 1];
        let labels = vec![0, 1, 2, 1];
        let m = evaluate(&preds, &labels, &[0, 1, 2, 3], 3);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.micro_f, 1.0);
        assert_eq!(m.macro_f, 1.0);
    }

    #[test]
    fn micro_f_equals_accuracy_for_single_label() {
        let preds = vec![0, 1, 1, 2, 0, 2, 1];
        let labels = vec![0, 1, 2, 2, 1, 0, 1];
        let subset: Vec<usize> = (0..7).collect();
        let m = evaluate(&preds, &labels, &subset, 3);
        assert!((m.micro_f - m.accuracy).abs() < 1e-12);
        assert!((m.accuracy - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f_hand_example() {
        // class 0: tp=1 fp=1 fn=0 -> f1 = 2/3
        // class 1: tp=1 fp=0 fn=1 -> f1 = 2/3
        let preds = vec![0, 0, 1];
        let labels = vec![0, 1, 1];
        let m = evaluate(&preds, &labels, &[0, 1, 2], 2);
        assert!((m.macro_f - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn subset_restricts_evaluation() {
        let preds = vec![0, 1, 0];
        let labels = vec![0, 0, 0];
        let m = evaluate(&preds, &labels, &[0, 2], 2);
        assert_eq!(m.accuracy, 1.0);
    }
}
