use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{confusion, macro_f1};
use super::{ClassDistribution, EvalResult, Learner};
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};

/// One train/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Loso,
    KFold { k: usize, repeats: usize },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Loso
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Loso => f.write_str("loso"),
            Protocol::KFold { k, .. } => write!(f, "{k}fold"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `loso`, `kfold` (10 folds, 10 repeats) or `kfold:K:R`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "loso" {
            return Ok(Protocol::Loso);
        }
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.parse::<usize>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| Error::Config(format!("bad protocol '{s}'")))
        };
        match parts.as_slice() {
            ["kfold"] => Ok(Protocol::KFold { k: 10, repeats: 10 }),
            ["kfold", k, r] => Ok(Protocol::KFold { k: num(k)?, repeats: num(r)? }),
            _ => Err(Error::Config(format!("unknown protocol '{s}' (loso, kfold or kfold:K:R)"))),
        }
    }
}

impl Protocol {
    /// One fold list per repeat.
    pub fn splits(&self, records: &[SampleRecord], labels: &[usize], seed: u64) -> Result<Vec<Vec<Fold>>> {
        match *self {
            Protocol::Loso => Ok(vec![loso_split(records)?]),
            Protocol::KFold { k, repeats } => (0..repeats)
                .map(|r| stratified_kfold(labels, k, derive_seed(seed, r as u64)))
                .collect(),
        }
    }
}

/// splitmix64 of `seed` advanced `index + 1` times.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One fold per subject, in subject-id order.
pub fn loso_split(records: &[SampleRecord]) -> Result<Vec<Fold>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_subject.entry(r.subject_id.as_str()).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::Validation(format!(
            "leave-one-subject-out needs two subjects, found {}",
            by_subject.len()
        )));
    }
    Ok(by_subject
        .into_iter()
        .map(|(s, test)| Fold {
            name: s.to_string(),
            train: (0..records.len()).filter(|i| records[*i].subject_id != s).collect(),
            test,
        })
        .collect())
}

/// `k` folds with class proportions preserved and sizes within one. Each
/// class is shuffled, the classes are laid end to end, and sample `i` of
/// that order goes to fold `i mod k`.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(Error::Validation(format!("cannot make {k} folds from {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut tests = vec![Vec::new(); k];
    let mut slot = 0;
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        for i in idx {
            tests[slot % k].push(i);
            slot += 1;
        }
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(f, mut test)| {
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold {
                name: format!("fold{f}"),
                train,
                test,
            }
        })
        .collect())
}

/// Out-of-fold predictions of one pass over a fold list.
#[derive(Debug, Clone, PartialEq)]
pub struct CvPredictions {
    pub folds: Vec<Fold>,
    /// Indexed by sample.
    pub proba: Vec<ClassDistribution>,
}

/// Trains on each fold's train part and predicts its test part. Folds run in
/// parallel; fold `f` trains with seed `derive_seed(seed, f)`.
pub fn predict_cv<L: Learner>(
    learner: &L,
    rows: &[&[f64]],
    labels: &[usize],
    n_classes: usize,
    folds: &[Fold],
    seed: u64,
) -> Result<CvPredictions> {
    let n = rows.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let parts: Vec<Vec<(usize, ClassDistribution)>> = folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let tr: Vec<&[f64]> = fold.train.iter().map(|&i| rows[i]).collect();
            let tl: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
            let model = learner.fit(&tr, &tl, n_classes, derive_seed(seed, f as u64))?;
            fold.test
                .iter()
                .map(|&i| Ok((i, crate::learn::Classifier::predict_proba(&model, rows[i])?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut proba: Vec<Option<ClassDistribution>> = vec![None; n];
    for (i, p) in parts.into_iter().flatten() {
        if proba[i].replace(p).is_some() {
            return Err(Error::Validation(format!("sample {i} is tested in two folds")));
        }
    }
    let proba = proba
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Validation(format!("sample {i} is in no test fold"))))
        .collect::<Result<_>>()?;
    Ok(CvPredictions {
        folds: folds.to_vec(),
        proba,
    })
}

/// Scores repeated passes: confusion matrices are summed, accuracy and F1
/// are means over passes, and `per_fold` lists every fold of every pass.
pub fn evaluate_cv(passes: &[CvPredictions], truths: &[usize], n_classes: usize) -> Result<EvalResult> {
    if passes.is_empty() {
        return Err(Error::Validation("no cross-validation passes".into()));
    }
    let mut total = vec![vec![0u64; n_classes]; n_classes];
    let (mut acc, mut f1) = (0.0, 0.0);
    let mut per_fold = Vec::new();
    for pass in passes {
        if pass.proba.len() != truths.len() {
            return Err(Error::DimensionMismatch {
                expected: truths.len(),
                got: pass.proba.len(),
            });
        }
        let preds: Vec<usize> = pass.proba.iter().map(ClassDistribution::argmax).collect();
        let m = confusion(&preds, truths, n_classes)?;
        let correct: u64 = (0..n_classes).map(|c| m[c][c]).sum();
        acc += correct as f64 / truths.len() as f64;
        f1 += macro_f1(&m);
        for (t, row) in total.iter_mut().zip(&m) {
            for (a, b) in t.iter_mut().zip(row) {
                *a += b;
            }
        }
        for fold in &pass.folds {
            if fold.test.is_empty() {
                continue;
            }
            let hits = fold.test.iter().filter(|&&i| preds[i] == truths[i]).count();
            per_fold.push(hits as f64 / fold.test.len() as f64);
        }
    }
    let k = passes.len() as f64;
    Ok(EvalResult {
        accuracy: acc / k,
        f1: f1 / k,
        confusion: total,
        per_fold,
    })
}

/// Repeated stratified k-fold evaluation with per-repeat derived seeds.
pub fn kfold_eval<L: Learner>(
    learner: &L,
    rows: &[&[f64]],
    labels: &[usize],
    n_classes: usize,
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<EvalResult> {
    let passes = (0..repeats)
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            predict_cv(learner, rows, labels, n_classes, &stratified_kfold(labels, k, s)?, s)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_cv(&passes, labels, n_classes)
}
