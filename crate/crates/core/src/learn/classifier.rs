use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClassDistribution;
use crate::error::{Error, Result};
use crate::feature::FeatureVector;

/// A trained model emitting class probabilities.
pub trait Classifier: Send + Sync {
    fn n_classes(&self) -> usize;

    /// Expected feature length.
    fn dim(&self) -> usize;

    fn predict_proba(&self, x: &[f64]) -> Result<ClassDistribution>;

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }
}

/// Something that fits a [`Classifier`] to labelled rows.
pub trait Learner: Sync {
    type Model: Classifier;

    /// `labels[i] < n_classes`. Deterministic given `seed`.
    fn fit(&self, rows: &[&[f64]], labels: &[usize], n_classes: usize, seed: u64) -> Result<Self::Model>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    /// L2 penalty on the weights, not the bias.
    pub l2: f64,
    pub max_iter: usize,
    /// Stops when the gradient norm falls below this.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-2,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression on z-scored features, fitted by full-batch
/// gradient descent with backtracking.
///
/// Features are also divided by `√dim`, so the penalty means the same for
/// short and long vectors. Because the weights start at zero, every iterate
/// lies in the span of the training rows; the optimiser therefore works on
/// the `n × n` Gram matrix instead of the `dim`-wide weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogisticRegression {
    pub config: LogisticConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `n_classes × dim`, applied to standardised input.
    weights: DMatrix<f64>,
    bias: Vec<f64>,
    /// Gradient-descent iterations used.
    pub iterations: usize,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn check_rows(rows: &[&[f64]]) -> Result<usize> {
    let dim = rows.first().map(|r| r.len()).ok_or_else(|| Error::Validation("no training rows".into()))?;
    if dim == 0 {
        return Err(Error::Validation("empty feature vectors".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    Ok(dim)
}

impl Learner for LogisticRegression {
    type Model = LogisticModel;

    fn fit(&self, rows: &[&[f64]], labels: &[usize], n_classes: usize, seed: u64) -> Result<LogisticModel> {
        let dim = check_rows(rows)?;
        let n = rows.len();
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Validation(format!("label {l} outside {n_classes} classes")));
        }
        let mut present = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(Error::Validation("training set holds a single class".into()));
        }
        let cfg = self.config;

        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let root_dim = (dim as f64).sqrt();
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                root_dim * if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        let xs = DMatrix::from_fn(n, dim, |i, j| (rows[i][j] - mean[j]) / scale[j]);
        let gram = &xs * xs.transpose();

        // weights = a · xs, a is n_classes × n
        let mut a = DMatrix::<f64>::zeros(n_classes, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bias: Vec<f64> = (0..n_classes).map(|_| rng.random_range(-1e-3..1e-3)).collect();

        let objective = |a: &DMatrix<f64>, bias: &[f64]| -> (f64, DMatrix<f64>) {
            // logits n × C
            let mut logits = &gram * a.transpose();
            let mut loss = 0.0;
            for i in 0..n {
                let mut z: Vec<f64> = (0..n_classes).map(|c| logits[(i, c)] + bias[c]).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - z[labels[i]];
                softmax_in_place(&mut z);
                for c in 0..n_classes {
                    logits[(i, c)] = z[c];
                }
            }
            let wk = a * &gram;
            let reg = 0.5 * cfg.l2 * (0..n_classes).map(|c| wk.row(c).dot(&a.row(c))).sum::<f64>();
            (loss / n as f64 + reg, logits)
        };

        let (mut f, mut probs) = objective(&a, &bias);
        let mut step = 1.0;
        let mut iterations = 0;
        for it in 0..cfg.max_iter {
            iterations = it + 1;
            // gradient w.r.t. the weights is ga · xs; w.r.t. the bias, gb
            let mut ga = DMatrix::<f64>::zeros(n_classes, n);
            let mut gb = vec![0.0; n_classes];
            for i in 0..n {
                for c in 0..n_classes {
                    let r = (probs[(i, c)] - if labels[i] == c { 1.0 } else { 0.0 }) / n as f64;
                    ga[(c, i)] = r + cfg.l2 * a[(c, i)];
                    gb[c] += r;
                }
            }
            let gk = &ga * &gram;
            let gnorm2 = (0..n_classes).map(|c| gk.row(c).dot(&ga.row(c))).sum::<f64>()
                + gb.iter().map(|g| g * g).sum::<f64>();
            if gnorm2.sqrt() < cfg.tol {
                break;
            }
            let mut accepted = false;
            for _ in 0..60 {
                let a_new = &a - &ga * step;
                let b_new: Vec<f64> = bias.iter().zip(&gb).map(|(b, g)| b - step * g).collect();
                let (f_new, p_new) = objective(&a_new, &b_new);
                if f_new <= f - 1e-4 * step * gnorm2 {
                    a = a_new;
                    bias = b_new;
                    f = f_new;
                    probs = p_new;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            step *= 2.0;
        }
        let weights = &a * &xs;
        Ok(LogisticModel {
            mean,
            scale,
            weights,
            bias,
            iterations,
        })
    }
}

impl Classifier for LogisticModel {
    fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<ClassDistribution> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        let xs: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let mut z: Vec<f64> = (0..self.n_classes())
            .map(|c| self.weights.row(c).iter().zip(&xs).map(|(w, v)| w * v).sum::<f64>() + self.bias[c])
            .collect();
        softmax_in_place(&mut z);
        // renormalise away rounding so the simplex check holds
        let s: f64 = z.iter().sum();
        ClassDistribution::new(z.into_iter().map(|p| p / s).collect())
    }
}

/// Fits the default logistic regression to feature vectors.
pub fn train(features: &[FeatureVector], labels: &[usize], n_classes: usize, seed: u64) -> Result<LogisticModel> {
    let rows: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    LogisticRegression::default().fit(&rows, labels, n_classes, seed)
}

/// Per-sample class probabilities produced elsewhere, keyed by sample id.
/// File form: header `sample_id,p_class0,p_class1,...`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalProbabilities {
    n_classes: usize,
    by_id: BTreeMap<String, ClassDistribution>,
}

impl ExternalProbabilities {
    pub fn new(n_classes: usize) -> Self {
        ExternalProbabilities {
            n_classes,
            by_id: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, p: ClassDistribution) -> Result<()> {
        if p.len() != self.n_classes {
            return Err(Error::DimensionMismatch {
                expected: self.n_classes,
                got: p.len(),
            });
        }
        self.by_id.insert(id.into(), p);
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, id: &str) -> Result<&ClassDistribution> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no external probabilities for sample '{id}'")))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty probability file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"sample_id") || cols.len() < 3 {
            return Err(Error::parse(origin, 1, "header must be sample_id,p_class0,p_class1,..."));
        }
        let mut out = ExternalProbabilities::new(cols.len() - 1);
        for (i, line) in lines {
            let mut f = line.split(',').map(str::trim);
            let id = f.next().unwrap_or_default().to_string();
            let p = f
                .map(|s| s.parse::<f64>().map_err(|_| Error::parse(origin, i + 1, format!("'{s}' is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            let dist = ClassDistribution::new(p).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
            out.insert(id, dist).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("sample_id");
        for c in 0..self.n_classes {
            s.push_str(&format!(",p_class{c}"));
        }
        s.push('\n');
        for (id, p) in &self.by_id {
            s.push_str(id);
            for v in p.probs() {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n_per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            let center = if c == 0 { [-2.0, 0.0] } else { [2.0, 1.0] };
            for _ in 0..n_per {
                x.push(vec![center[0] + noise.sample(&mut rng), center[1] + noise.sample(&mut rng)]);
                y.push(c);
            }
        }
        (x, y)
    }

    fn fit(x: &[Vec<f64>], y: &[usize]) -> LogisticModel {
        let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        LogisticRegression::default().fit(&rows, y, 2, 1).unwrap()
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(20, 3);
        let m = fit(&x, &y);
        let correct = x.iter().zip(&y).filter(|(r, l)| m.predict(r).unwrap() == **l).count();
        assert!(correct as f64 / 40.0 >= 0.95);
        assert!(m.predict_proba(&[-2.0, 0.0]).unwrap().probs()[0] >= 0.9);
        let p = m.predict_proba(&[0.0, 0.0]).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(m.predict_proba(&[0.0]).is_err());
    }

    #[test]
    fn duplicated_training_set_predicts_the_same() {
        let (x, y) = blobs(10, 4);
        let m1 = fit(&x, &y);
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).cloned().collect();
        let m2 = fit(&x2, &y2);
        for q in [[-1.0, 0.5], [0.3, 0.3], [2.5, 1.0], [0.0, -3.0]] {
            let (a, b) = (m1.predict_proba(&q).unwrap(), m2.predict_proba(&q).unwrap());
            assert_eq!(a.argmax(), b.argmax());
            for (u, v) in a.probs().iter().zip(b.probs()) {
                assert!((u - v).abs() < 1e-6, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = blobs(10, 5);
        assert_eq!(fit(&x, &y), fit(&x, &y));
    }

    #[test]
    fn single_class_rejected() {
        let rows: Vec<&[f64]> = vec![&[1.0], &[2.0]];
        assert!(LogisticRegression::default().fit(&rows, &[0, 0], 2, 0).is_err());
        let ragged: Vec<&[f64]> = vec![&[1.0], &[2.0, 3.0]];
        assert!(LogisticRegression::default().fit(&ragged, &[0, 1], 2, 0).is_err());
    }

    #[test]
    fn constant_feature_and_zero_input() {
        let x = vec![vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0], vec![0.0, 4.0]];
        let m = fit(&x, &[0, 0, 1, 1]);
        let p = m.predict_proba(&[0.0, 0.0]).unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn external_file_round_trip() {
        let text = "sample_id,p_class0,p_class1\ns1/a,0.25,0.75\ns2/b,1.0,0.0\n";
        let e = ExternalProbabilities::parse(text, "probs.csv").unwrap();
        assert_eq!(e.get("s1/a").unwrap().probs(), &[0.25, 0.75]);
        assert!(e.get("s3/c").is_err());
        assert_eq!(ExternalProbabilities::parse(&e.to_text(), "x").unwrap(), e);
        assert!(ExternalProbabilities::parse("sample_id,p_class0,p_class1\na,0.5,0.6\n", "x").is_err());
    }
}
