use super::{evaluate_cv, ClassDistribution, CvPredictions, EvalResult};
use crate::error::{Error, Result};

/// Fusion weights of the 3D prediction that are reported.
pub const FUSION_GRID: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];
/// Weights searched for the fused result.
pub const MIDDLE_WEIGHTS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Weight of the 3D prediction.
    pub a: f64,
}

impl FusionConfig {
    pub fn new(a: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::OutOfRange(format!("fusion weight {a} outside [0, 1]")));
        }
        Ok(FusionConfig { a })
    }
}

/// `(1 − a)·p1 + a·p2`.
pub fn fuse(p1: &ClassDistribution, p2: &ClassDistribution, a: f64) -> Result<ClassDistribution> {
    FusionConfig::new(a)?;
    if p1.len() != p2.len() {
        return Err(Error::DimensionMismatch {
            expected: p1.len(),
            got: p2.len(),
        });
    }
    if a == 0.0 {
        return Ok(p1.clone());
    }
    if a == 1.0 {
        return Ok(p2.clone());
    }
    let mixed: Vec<f64> = p1
        .probs()
        .iter()
        .zip(p2.probs())
        .map(|(x, y)| (1.0 - a) * x + a * y)
        .collect();
    let s: f64 = mixed.iter().sum();
    ClassDistribution::new(mixed.into_iter().map(|v| v / s).collect())
}

/// Fuses matching cross-validated predictions sample by sample.
pub fn fuse_cv(p1: &[CvPredictions], p2: &[CvPredictions], a: f64) -> Result<Vec<CvPredictions>> {
    if p1.len() != p2.len() {
        return Err(Error::DimensionMismatch {
            expected: p1.len(),
            got: p2.len(),
        });
    }
    p1.iter()
        .zip(p2)
        .map(|(r1, r2)| {
            if r1.folds != r2.folds {
                return Err(Error::Validation("fused predictions come from different folds".into()));
            }
            Ok(CvPredictions {
                folds: r1.folds.clone(),
                proba: r1
                    .proba
                    .iter()
                    .zip(&r2.proba)
                    .map(|(x, y)| fuse(x, y, a))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Best-accuracy fusion weight over `weights` for single-pass predictions;
/// ties go to the smaller weight.
pub fn fusion_sweep(
    p1: &[ClassDistribution],
    p2: &[ClassDistribution],
    truths: &[usize],
    n_classes: usize,
    weights: &[f64],
) -> Result<(f64, EvalResult)> {
    if p1.len() != p2.len() || p1.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: p1.len().min(p2.len()),
        });
    }
    let whole = |p: &[ClassDistribution]| CvPredictions {
        folds: vec![super::Fold {
            name: "all".into(),
            train: vec![],
            test: (0..p.len()).collect(),
        }],
        proba: p.to_vec(),
    };
    fusion_sweep_cv(&[whole(p1)], &[whole(p2)], truths, n_classes, weights)
}

/// Best-accuracy fusion weight for cross-validated predictions.
pub fn fusion_sweep_cv(
    p1: &[CvPredictions],
    p2: &[CvPredictions],
    truths: &[usize],
    n_classes: usize,
    weights: &[f64],
) -> Result<(f64, EvalResult)> {
    let mut best: Option<(f64, EvalResult)> = None;
    for &a in weights {
        let r = evaluate_cv(&fuse_cv(p1, p2, a)?, truths, n_classes)?;
        if best.as_ref().is_none_or(|(_, b)| r.accuracy > b.accuracy) {
            best = Some((a, r));
        }
    }
    best.ok_or_else(|| Error::Config("empty fusion weight grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(p: &[f64]) -> ClassDistribution {
        ClassDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn example_mix() {
        let f = fuse(&d(&[0.6, 0.4]), &d(&[0.2, 0.8]), 0.4).unwrap();
        assert!((f.probs()[0] - 0.44).abs() < 1e-12 && (f.probs()[1] - 0.56).abs() < 1e-12);
        assert_eq!(f.argmax(), 1);
        assert!(fuse(&d(&[1.0]), &d(&[0.5, 0.5]), 0.5).is_err());
        assert!(fuse(&d(&[1.0]), &d(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn identical_predictions_pick_smallest_weight() {
        let p = vec![d(&[0.7, 0.3]), d(&[0.4, 0.6])];
        let (a, r) = fusion_sweep(&p, &p, &[0, 0], 2, &MIDDLE_WEIGHTS).unwrap();
        assert_eq!(a, 0.1);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn perfect_second_view_wins_at_half() {
        let truths = [0, 1, 0, 1, 1, 0];
        let p1: Vec<_> = truths.iter().map(|&t| if t == 0 { d(&[0.2, 0.8]) } else { d(&[0.8, 0.2]) }).collect();
        let p2: Vec<_> = truths.iter().map(|&t| if t == 0 { d(&[0.9, 0.1]) } else { d(&[0.1, 0.9]) }).collect();
        let (a, r) = fusion_sweep(&p1, &p2, &truths, 2, &MIDDLE_WEIGHTS).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(r.accuracy, 1.0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn stays_on_simplex(p in simplex(4), q in simplex(4), a in 0.0f64..=1.0) {
            let (p, q) = (d(&p), d(&q));
            let f = fuse(&p, &q, a).unwrap();
            prop_assert!((f.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(f.probs().iter().all(|v| *v >= 0.0));
            prop_assert_eq!(fuse(&p, &q, 0.0).unwrap(), p.clone());
            prop_assert_eq!(fuse(&p, &q, 1.0).unwrap().argmax(), q.argmax());
        }
    }
}
