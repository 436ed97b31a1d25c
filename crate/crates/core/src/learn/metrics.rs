use crate::error::{Error, Result};

/// Accuracy and macro-F1 with the confusion matrix behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub f1: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_fold: Vec<f64>,
}

impl EvalResult {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }
}

pub(crate) fn confusion(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Validation(format!("class index {} outside {n_classes} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean F1 over the classes that occur in the truth.
pub(crate) fn macro_f1(m: &[Vec<u64>]) -> f64 {
    let n = m.len();
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..n {
        let support: u64 = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        classes += 1;
        let tp = m[c][c] as f64;
        let predicted: u64 = (0..n).map(|t| m[t][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = tp / support as f64;
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / classes as f64
}

pub fn metrics(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<EvalResult> {
    let m = confusion(predictions, truths, n_classes)?;
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / truths.len() as f64;
    Ok(EvalResult {
        accuracy,
        f1: macro_f1(&m),
        confusion: m,
        per_fold: vec![accuracy],
    })
}
