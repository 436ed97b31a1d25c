//! Probabilistic classification, probability-level fusion, metrics and
//! cross-validation.

mod classifier;
mod cv;
mod fusion;
mod metrics;

pub use classifier::{
    train, Classifier, ExternalProbabilities, Learner, LogisticConfig, LogisticModel, LogisticRegression,
};
pub use cv::{
    derive_seed, evaluate_cv, kfold_eval, loso_split, predict_cv, stratified_kfold, CvPredictions, Fold, Protocol,
};
pub use fusion::{fuse, fuse_cv, fusion_sweep, fusion_sweep_cv, FusionConfig, FUSION_GRID, MIDDLE_WEIGHTS};
pub use metrics::{metrics, EvalResult};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Probabilities over the active label set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("empty class distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation(format!("probability {p} is not a finite non-negative number")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ClassDistribution { probs })
    }

    /// Divides by the total mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Validation(format!("cannot normalise weights with total {sum}")));
        }
        ClassDistribution::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
