//! On-disk dataset tree and the batch commands behind the CLI.
//!
//! A dataset tree is `<root>/index.csv` plus, per sample,
//! `<root>/<subject>/<sample>/{frames/frame_%04d.pgm, clouds/frame_%04d.ply,
//! landmarks2d.csv, landmarks3d.csv}`. Preprocessing writes another tree of
//! the same shape under `<work>/preprocessed/<fingerprint>/`; features go to
//! `<work>/features/<kind>/<fingerprint>/<subject>/<sample>.csv`. Outputs
//! carry the fingerprint of the configuration that made them, so a changed
//! parameter never reuses a stale file.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector2};
use rayon::prelude::*;

use crate::config::{LabelMode, RunConfig, SweepTarget};
use crate::curvature::{assemble_sequence_feature, sequence_histograms};
use crate::dataset::{
    coder_reliability, load_index, parse_aus, pooled_reliability, save_index, LabelRules, NonObjectiveLabel,
    ObjectiveLabel, SampleData, SampleRecord, LANDMARK_COUNT,
};
use crate::error::{Error, Result};
use crate::feature::{fingerprint, FeatureKind, FeatureVector};
use crate::io::{
    format_landmarks2d, format_landmarks3d, parse_index_list, read_cloud_dir, read_landmarks2d, read_landmarks3d,
    read_volume_dir, write_cloud_dir, write_text, write_volume_dir,
};
use crate::lbptop::{lbp_top_histogram, mean_difference_weights};
use crate::learn::{
    derive_seed, evaluate_cv, fuse_cv, fusion_sweep_cv, predict_cv, ClassDistribution, CvPredictions, EvalResult,
    ExternalProbabilities, Fold, Learner, LogisticRegression, MIDDLE_WEIGHTS,
};
use crate::preprocess2d::{canonical_eyes, crop_face, estimate_alignment, warp_volume};
use crate::preprocess3d::preprocess_sequence;
use crate::synth::{make_dataset, SynthSpec};
use crate::volume::FrameVolume;

/// Landmark subset shipped with the crate: brows, eye corners, lower nose
/// and outer lip.
pub const DEFAULT_SUBSET: &str = include_str!("../data/landmarks32.txt");

/// Inner eye corners and nasal spine in the 49-point markup.
pub const LEFT_INNER_EYE: usize = 22;
pub const RIGHT_INNER_EYE: usize = 25;
pub const NASAL_SPINE: usize = 16;

/// More failed samples than this fraction makes a run a partial failure.
pub const FAILURE_LIMIT: f64 = 0.10;

pub const RESULTS_HEADER: &str = "radius,features,protocol,accuracy,f1";
pub const MANIFEST_HEADER: &str = "sample,status,fingerprint,detail";

/// Quotes a CSV field when it needs it.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

pub fn sample_dir(root: &Path, record: &SampleRecord) -> PathBuf {
    root.join(&record.subject_id).join(&record.sample_id)
}

fn read_video(dir: &Path) -> Result<FrameVolume> {
    read_volume_dir(&dir.join("frames"))
}

pub fn read_sample(dir: &Path, frame_rate: f64) -> Result<SampleData> {
    let data = SampleData {
        video: read_video(dir)?,
        clouds: read_cloud_dir(&dir.join("clouds"))?,
        landmarks2d: read_landmarks2d(&dir.join("landmarks2d.csv"))?,
        landmarks3d: read_landmarks3d(&dir.join("landmarks3d.csv"))?,
        frame_rate,
    };
    data.validate()?;
    Ok(data)
}

pub fn write_sample(dir: &Path, data: &SampleData) -> Result<()> {
    write_volume_dir(&dir.join("frames"), &data.video)?;
    write_cloud_dir(&dir.join("clouds"), &data.clouds)?;
    write_text(&dir.join("landmarks2d.csv"), &format_landmarks2d(&data.landmarks2d))?;
    write_text(&dir.join("landmarks3d.csv"), &format_landmarks3d(&data.landmarks3d))
}

pub fn write_dataset(root: &Path, records: &[SampleRecord], samples: &[SampleData]) -> Result<()> {
    if records.len() != samples.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            got: samples.len(),
        });
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    records
        .par_iter()
        .zip(samples)
        .try_for_each(|(r, s)| write_sample(&sample_dir(root, r), s))?;
    save_index(&root.join("index.csv"), records)
}

/// Per-sample outcome of a batch command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub total: usize,
    /// `(subject/sample, reason)`.
    pub failures: Vec<(String, String)>,
}

impl RunSummary {
    pub fn succeeded(&self) -> usize {
        self.total - self.failures.len()
    }

    pub fn is_partial_failure(&self) -> bool {
        self.failures.len() as f64 > FAILURE_LIMIT * self.total as f64
    }

    fn collect(records: &[SampleRecord], outcomes: &[Result<()>]) -> Self {
        RunSummary {
            total: records.len(),
            failures: records
                .iter()
                .zip(outcomes)
                .filter_map(|(r, o)| o.as_ref().err().map(|e| (r.key(), e.to_string())))
                .collect(),
        }
    }
}

fn manifest_text(records: &[SampleRecord], outcomes: &[Result<()>], fp: &str) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for (r, o) in records.iter().zip(outcomes) {
        let (status, detail) = match o {
            Ok(()) => ("ok", String::new()),
            Err(e) => ("failed", e.to_string()),
        };
        s.push_str(&format!("{},{status},{fp},{}\n", csv_field(&r.key()), csv_field(&detail)));
    }
    s
}

fn warn_failures(stage: &str, summary: &RunSummary) {
    for (key, why) in &summary.failures {
        log::warn!("{stage}: skipped {key}: {why}");
    }
}

/// Aligns and crops the video, moves the 2D landmarks with it, and cleans
/// and registers the cloud sequence. The onset frame fixes the alignment.
pub fn preprocess_sample(record: &SampleRecord, data: &SampleData, cfg: &RunConfig) -> Result<SampleData> {
    let t = data.video.frames();
    if data.landmarks2d.len() != t || data.landmarks3d.len() != t {
        return Err(Error::Validation("2D and 3D landmarks are required for every frame".into()));
    }
    if record.offset >= t {
        return Err(Error::Validation(format!(
            "offset frame {} beyond the {t}-frame clip",
            record.offset
        )));
    }
    let key = &data.landmarks2d[record.onset];
    let (w, h) = (data.video.width(), data.video.height());
    let (cl, cr) = canonical_eyes(w, h, cfg.align_left_eye, cfg.align_right_eye);
    let align = estimate_alignment(key[LEFT_INNER_EYE], key[RIGHT_INNER_EYE], cl, cr)?;
    let warped = warp_volume(&data.video, &align);
    let moved: Vec<Vec<Point2<f64>>> = data
        .landmarks2d
        .iter()
        .map(|f| f.iter().map(|p| align.apply(p)).collect())
        .collect();
    let key = &moved[record.onset];
    let (video, rect) = crop_face(
        &warped,
        [key[LEFT_INNER_EYE], key[RIGHT_INNER_EYE]],
        key[NASAL_SPINE],
        &cfg.crop,
    )?;
    let shift = Vector2::new(rect.x0 as f64, rect.y0 as f64);
    let landmarks2d = moved
        .into_iter()
        .map(|f| f.into_iter().map(|p| p - shift).collect())
        .collect();
    let reg = preprocess_sequence(&data.clouds, &data.landmarks3d, &cfg.cloud)?;
    Ok(SampleData {
        video,
        clouds: reg.clouds,
        landmarks2d,
        landmarks3d: reg.landmarks,
        frame_rate: data.frame_rate,
    })
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} '{}' is not a directory", path.display())))
    }
}

fn require_file(path: &Option<PathBuf>, what: &str) -> Result<()> {
    match path {
        Some(p) if !p.is_file() => Err(Error::Config(format!("{what} '{}' does not exist", p.display()))),
        _ => Ok(()),
    }
}

/// Preprocesses every indexed sample of `dataset.root` into
/// [`RunConfig::preprocessed_dir`]. Failed samples are left out of the output
/// index and listed in `manifest.csv`.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<RunSummary> {
    require_dir(&cfg.dataset_root, "dataset.root")?;
    let records = load_index(&cfg.dataset_root.join("index.csv"))?;
    let out = cfg.preprocessed_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let outcomes: Vec<Result<()>> = records
        .par_iter()
        .map(|r| {
            let raw = read_sample(&sample_dir(&cfg.dataset_root, r), cfg.frame_rate)?;
            let done = preprocess_sample(r, &raw, cfg)?;
            write_sample(&sample_dir(&out, r), &done)
        })
        .collect();
    let kept: Vec<SampleRecord> = records
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| o.is_ok())
        .map(|(r, _)| r.clone())
        .collect();
    save_index(&out.join("index.csv"), &kept)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    write_text(
        &out.join("manifest.csv"),
        &manifest_text(&records, &outcomes, &cfg.preprocess_fingerprint()),
    )?;
    let summary = RunSummary::collect(&records, &outcomes);
    warn_failures("preprocess", &summary);
    Ok(summary)
}

/// Runs [`cmd_preprocess`] unless its output for this configuration exists.
pub fn ensure_preprocessed(cfg: &RunConfig) -> Result<Option<RunSummary>> {
    if cfg.preprocessed_dir().join("manifest.csv").is_file() {
        return Ok(None);
    }
    cmd_preprocess(cfg).map(Some)
}

/// Landmark subset indices from `curvature.subset` or the shipped list.
pub fn landmark_subset(cfg: &RunConfig) -> Result<Vec<usize>> {
    let subset = match &cfg.subset {
        Some(p) => parse_index_list(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => parse_index_list(DEFAULT_SUBSET)?,
    };
    if subset.is_empty() {
        return Err(Error::Config("landmark subset is empty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&j| j >= LANDMARK_COUNT) {
        return Err(Error::Config(format!(
            "landmark subset index {bad} outside the {LANDMARK_COUNT}-point markup"
        )));
    }
    Ok(subset)
}

pub fn feature_path(cfg: &RunConfig, kind: FeatureKind, record: &SampleRecord) -> PathBuf {
    cfg.features_dir(kind)
        .join(&record.subject_id)
        .join(format!("{}.csv", record.sample_id))
}

/// A feature file is reusable when it parses and carries the fingerprint of
/// the current configuration.
fn cached(cfg: &RunConfig, kind: FeatureKind, record: &SampleRecord) -> bool {
    FeatureVector::load_csv(&feature_path(cfg, kind, record))
        .map(|f| f.descriptor.kind == kind && f.descriptor.fingerprint == cfg.feature_fingerprint(kind))
        .unwrap_or(false)
}

/// Motion weights of the subset landmarks over onset..=offset of the raw
/// clip. The raw frames are used because the face crop is narrower than the
/// brows.
pub fn landmark_weights(cfg: &RunConfig, record: &SampleRecord, subset: &[usize]) -> Result<Vec<f64>> {
    let dir = sample_dir(&cfg.dataset_root, record);
    let video = read_video(&dir)?;
    let lm = read_landmarks2d(&dir.join("landmarks2d.csv"))?;
    let onset = lm
        .get(record.onset)
        .ok_or_else(|| Error::Validation(format!("no 2D landmarks at onset frame {}", record.onset)))?;
    if onset.len() != LANDMARK_COUNT {
        return Err(Error::Validation(format!(
            "onset frame has {} 2D landmarks, expected {LANDMARK_COUNT}",
            onset.len()
        )));
    }
    let points: Vec<Point2<f64>> = subset.iter().map(|&j| onset[j]).collect();
    mean_difference_weights(&video.window(record.onset, record.offset)?, &points, cfg.weight_radius_px)
}

/// Computes the requested kinds for one preprocessed sample.
pub fn extract_sample(
    cfg: &RunConfig,
    record: &SampleRecord,
    sample: &SampleData,
    kinds: &[FeatureKind],
    subset: &[usize],
) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::with_capacity(kinds.len());
    let mut histograms = None;
    let mut weights = None;
    for &kind in kinds {
        let values = if kind == FeatureKind::Lbp2d {
            let window = sample.video.window(record.onset, record.offset)?;
            lbp_top_histogram(&window, &cfg.lbp)?.values
        } else {
            if histograms.is_none() {
                histograms = Some(sequence_histograms(sample, record, &cfg.curvature, cfg.frames, subset)?);
                weights = Some(landmark_weights(cfg, record, subset)?);
            }
            assemble_sequence_feature(
                histograms.as_ref().expect("computed above"),
                weights.as_ref().expect("computed above"),
                kind,
            )?
        };
        out.push(FeatureVector::new(kind, cfg.feature_fingerprint(kind), values)?);
    }
    Ok(out)
}

/// Writes one feature file per preprocessed sample and kind, reusing files
/// whose fingerprint matches.
pub fn cmd_extract(cfg: &RunConfig, kinds: &[FeatureKind]) -> Result<RunSummary> {
    let pre = cfg.preprocessed_dir();
    let index = pre.join("index.csv");
    if !index.is_file() {
        return Err(Error::Config(format!(
            "no preprocessed tree at '{}'; run preprocess first",
            pre.display()
        )));
    }
    let records = load_index(&index)?;
    let subset = landmark_subset(cfg)?;
    let outcomes: Vec<Result<()>> = records
        .par_iter()
        .map(|r| {
            let todo: Vec<FeatureKind> = kinds.iter().copied().filter(|&k| !cached(cfg, k, r)).collect();
            if todo.is_empty() {
                return Ok(());
            }
            let sample = read_sample(&sample_dir(&pre, r), cfg.frame_rate)?;
            // 2D and 3D fail independently of each other
            let (two, three): (Vec<FeatureKind>, Vec<FeatureKind>) = todo.iter().partition(|k| !k.is_3d());
            let mut first_err = None;
            for group in [two, three] {
                if group.is_empty() {
                    continue;
                }
                match extract_sample(cfg, r, &sample, &group, &subset) {
                    Ok(features) => {
                        for f in features {
                            let path = feature_path(cfg, f.kind(), r);
                            if let Some(parent) = path.parent() {
                                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                            }
                            f.save_csv(&path)?;
                        }
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            first_err.map_or(Ok(()), Err)
        })
        .collect();
    for &kind in kinds {
        write_text(
            &cfg.features_dir(kind).join("manifest.csv"),
            &manifest_text(&records, &outcomes, &cfg.feature_fingerprint(kind)),
        )?;
    }
    let summary = RunSummary::collect(&records, &outcomes);
    warn_failures("extract", &summary);
    Ok(summary)
}

/// Kinds the evaluation reads.
pub fn needed_kinds(cfg: &RunConfig) -> Vec<FeatureKind> {
    let mut kinds = cfg.eval_features.clone();
    if let Some(k3) = cfg.fuse_with {
        kinds.push(FeatureKind::Lbp2d);
        kinds.push(k3);
    }
    if let SweepTarget::Kind(k) = cfg.sweep_target {
        kinds.push(k);
    }
    let mut seen = Vec::new();
    for k in kinds {
        if !seen.contains(&k) {
            seen.push(k);
        }
    }
    seen
}

/// Records kept for evaluation with their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub records: Vec<SampleRecord>,
    pub labels: Vec<usize>,
    /// Class names in index order.
    pub classes: Vec<String>,
}

/// Relabels from the configured rule files when given, drops the excluded
/// objective classes, and numbers the remaining classes in label order.
pub fn labeled_set(records: Vec<SampleRecord>, cfg: &RunConfig) -> Result<LabeledSet> {
    let objective = cfg.objective_rules.as_deref().map(LabelRules::<ObjectiveLabel>::load).transpose()?;
    let nonobjective = cfg
        .nonobjective_rules
        .as_deref()
        .map(LabelRules::<NonObjectiveLabel>::load)
        .transpose()?;
    let excluded = cfg.label_filter.excluded(cfg.label_mode);
    let mut kept = Vec::new();
    for mut r in records {
        if let Some(t) = &objective {
            r.objective_label = t.classify(&r.aus);
        }
        if let Some(t) = &nonobjective {
            r.nonobjective_label = t.classify(&r.aus);
        }
        if !excluded.contains(&r.objective_label) {
            kept.push(r);
        }
    }
    // (sort key, name) per record; the key is the label's declaration order
    let named: Vec<(usize, String)> = kept
        .iter()
        .map(|r| match cfg.label_mode {
            LabelMode::Objective => (r.objective_label as usize, r.objective_label.to_string()),
            LabelMode::NonObjective => (r.nonobjective_label as usize, r.nonobjective_label.to_string()),
        })
        .collect();
    let classes: BTreeMap<usize, String> = named.iter().cloned().collect();
    if classes.len() < 2 {
        return Err(Error::Validation(format!(
            "{} samples leave {} class(es); at least 2 are needed",
            kept.len(),
            classes.len()
        )));
    }
    let index: BTreeMap<usize, usize> = classes.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    Ok(LabeledSet {
        labels: named.iter().map(|(k, _)| index[k]).collect(),
        classes: classes.into_values().collect(),
        records: kept,
    })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub radius: String,
    pub features: String,
    pub protocol: String,
    pub result: EvalResult,
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            csv_field(&self.radius),
            csv_field(&self.features),
            csv_field(&self.protocol),
            self.result.accuracy,
            self.result.f1
        )
    }
}

pub fn format_results(rows: &[EvalRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

fn radius_label(cfg: &RunConfig, kind: FeatureKind) -> String {
    match kind {
        FeatureKind::Lbp2d => {
            let (x, y, t) = cfg.lbp.radii;
            format!("{x} {y} {t}")
        }
        _ => format!("{}", cfg.curvature.neighborhood_radius),
    }
}

/// Cross-validated predictions per split pass, from a learner or from an
/// external probability table.
fn passes<L: Learner>(
    learner: &L,
    source: Source<'_>,
    set: &LabeledSet,
    splits: &[Vec<Fold>],
    seed: u64,
) -> Result<Vec<CvPredictions>> {
    let n_classes = set.classes.len();
    splits
        .iter()
        .enumerate()
        .map(|(r, folds)| match &source {
            Source::Rows(rows) => predict_cv(learner, rows, &set.labels, n_classes, folds, derive_seed(seed, r as u64)),
            Source::External(ext) => {
                if ext.n_classes() != n_classes {
                    return Err(Error::DimensionMismatch {
                        expected: n_classes,
                        got: ext.n_classes(),
                    });
                }
                Ok(CvPredictions {
                    folds: folds.clone(),
                    proba: set
                        .records
                        .iter()
                        .map(|rec| ext.get(&rec.key()).cloned())
                        .collect::<Result<Vec<ClassDistribution>>>()?,
                })
            }
        })
        .collect()
}

enum Source<'a> {
    Rows(Vec<&'a [f64]>),
    External(ExternalProbabilities),
}

fn load_features(cfg: &RunConfig, kind: FeatureKind, records: &[SampleRecord]) -> Result<Vec<Vec<f64>>> {
    let want = cfg.feature_fingerprint(kind);
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| {
            let path = feature_path(cfg, kind, r);
            let f = FeatureVector::load_csv(&path).map_err(|e| {
                Error::Validation(format!("missing {kind} features for {}: {e}", r.key()))
            })?;
            if f.descriptor.fingerprint != want || f.kind() != kind {
                return Err(Error::Validation(format!(
                    "stale {kind} features for {} (fingerprint {}, expected {want})",
                    r.key(),
                    f.descriptor.fingerprint
                )));
            }
            Ok(f.values)
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = rows.iter().find(|v| v.len() != rows[0].len()) {
        return Err(Error::DimensionMismatch {
            expected: rows[0].len(),
            got: bad.len(),
        });
    }
    Ok(rows)
}

/// Scores every requested kind and, when enabled, the 2D+3D fusion.
pub fn evaluate_with<L: Learner>(cfg: &RunConfig, learner: &L) -> Result<Vec<EvalRow>> {
    let index = cfg.preprocessed_dir().join("index.csv");
    let set = labeled_set(load_index(&index)?, cfg)?;
    let n_classes = set.classes.len();
    let splits = cfg.protocol.splits(&set.records, &set.labels, cfg.seed)?;
    let protocol = cfg.protocol.to_string();

    let kinds = needed_kinds(cfg);
    let mut features = BTreeMap::new();
    for &k in &kinds {
        let external = if k == FeatureKind::Lbp2d { &cfg.external_2d } else { &cfg.external_3d };
        if external.is_none() {
            features.insert(k.tag(), load_features(cfg, k, &set.records)?);
        }
    }
    let source = |k: FeatureKind| -> Result<Source<'_>> {
        let external = if k == FeatureKind::Lbp2d { &cfg.external_2d } else { &cfg.external_3d };
        match external {
            Some(p) => Ok(Source::External(ExternalProbabilities::load(p)?)),
            None => Ok(Source::Rows(features[k.tag()].iter().map(Vec::as_slice).collect())),
        }
    };

    let mut predictions: BTreeMap<&str, Vec<CvPredictions>> = BTreeMap::new();
    for &k in &kinds {
        predictions.insert(k.tag(), passes(learner, source(k)?, &set, &splits, cfg.seed)?);
    }
    let mut rows = Vec::new();
    for &k in &cfg.eval_features {
        rows.push(EvalRow {
            radius: radius_label(cfg, k),
            features: k.tag().to_string(),
            protocol: protocol.clone(),
            result: evaluate_cv(&predictions[k.tag()], &set.labels, n_classes)?,
        });
    }
    if let Some(k3) = cfg.fuse_with {
        let (p2, p3) = (&predictions[FeatureKind::Lbp2d.tag()], &predictions[k3.tag()]);
        let (a, result) = if cfg.fusion_sweep {
            fusion_sweep_cv(p2, p3, &set.labels, n_classes, &MIDDLE_WEIGHTS)?
        } else {
            (cfg.fusion_a, evaluate_cv(&fuse_cv(p2, p3, cfg.fusion_a)?, &set.labels, n_classes)?)
        };
        rows.push(EvalRow {
            radius: format!("{} / {}", radius_label(cfg, FeatureKind::Lbp2d), radius_label(cfg, k3)),
            features: format!("2d+{} a={a}", k3.tag()),
            protocol,
            result,
        });
    }
    Ok(rows)
}

fn check_inputs(cfg: &RunConfig) -> Result<()> {
    require_file(&cfg.subset, "curvature.subset")?;
    require_file(&cfg.objective_rules, "labels.objective_rules")?;
    require_file(&cfg.nonobjective_rules, "labels.nonobjective_rules")?;
    require_file(&cfg.external_2d, "eval.external_2d")?;
    require_file(&cfg.external_3d, "eval.external_3d")
}

/// Evaluates with the configured logistic regression and writes
/// `<work>/results.csv` next to the configuration that produced it.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    check_inputs(cfg)?;
    let rows = evaluate_with(cfg, &LogisticRegression { config: cfg.classifier })?;
    write_text(&cfg.work_dir.join("results.csv"), &format_results(&rows))?;
    write_text(&cfg.work_dir.join("results.config"), &cfg.to_text())?;
    Ok(rows)
}

/// Preprocesses, extracts and evaluates, reusing outputs that exist.
pub fn run_all<L: Learner>(cfg: &RunConfig, learner: &L) -> Result<(Vec<EvalRow>, RunSummary)> {
    check_inputs(cfg)?;
    let mut summary = ensure_preprocessed(cfg)?.unwrap_or_default();
    let ex = cmd_extract(cfg, &needed_kinds(cfg))?;
    summary.total = summary.total.max(ex.total);
    summary.failures.extend(ex.failures);
    Ok((evaluate_with(cfg, learner)?, summary))
}

/// Parameter grid: one `key=v1 | v2 | ...` line per swept key. Points are
/// the cartesian product with the first key varying slowest; a grid without
/// keys has no points.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: expected key=v1 | v2", i + 1)))?;
            let k = k.trim().to_string();
            let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(Error::Config(format!("grid line {}: empty value for '{k}'", i + 1)));
            }
            // reject unknown keys and malformed values up front
            for val in &values {
                RunConfig::default()
                    .set(&k, val)
                    .map_err(|e| Error::Config(format!("grid line {}: {e}", i + 1)))?;
            }
            if axes.iter().any(|(a, _)| *a == k) {
                return Err(Error::Config(format!("grid line {}: '{k}' repeated", i + 1)));
            }
            axes.push((k, values));
        }
        Ok(Grid { axes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        if self.axes.is_empty() {
            return vec![];
        }
        let mut points = vec![vec![]];
        for (k, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p: Vec<(String, String)>| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((k.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn header(&self) -> String {
        let mut cols: Vec<String> = self.axes.iter().map(|(k, _)| csv_field(k)).collect();
        cols.push(RESULTS_HEADER.into());
        cols.push("status".into());
        cols.join(",")
    }
}

/// Completed grid rows keyed by the fingerprint of their configuration.
/// Lines are `<id>\t<row>`; a torn last line is cut off on open.
struct Ledger {
    file: File,
    rows: BTreeMap<String, String>,
}

impl Ledger {
    fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.try_lock().map_err(|_| {
            Error::Config(format!("ledger '{}' is held by another sweep", path.display()))
        })?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            file.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
        }
        let rows = text[..complete]
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(id, row)| (id.to_string(), row.to_string()))
            .collect();
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(Ledger { file, rows })
    }

    fn append(&mut self, id: &str, row: &str, path: &Path) -> Result<()> {
        self.file
            .write_all(format!("{id}\t{row}\n").as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(path, e))?;
        self.rows.insert(id.to_string(), row.to_string());
        Ok(())
    }
}

/// Outcome of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Rows in grid order, without the header.
    pub rows: Vec<String>,
    /// Rows reused from the ledger.
    pub resumed: usize,
    pub failed: usize,
}

fn sweep_point<L: Learner>(cfg: &RunConfig, learner: &L) -> Result<(EvalRow, RunSummary)> {
    let (rows, summary) = run_all(cfg, learner)?;
    let wanted = match cfg.sweep_target {
        SweepTarget::Kind(k) => k.tag().to_string(),
        SweepTarget::Fusion => format!("2d+{}", cfg.fuse_with.map(|k| k.tag()).unwrap_or_default()),
    };
    let row = rows
        .into_iter()
        .find(|r| r.features == wanted || r.features.starts_with(&format!("{wanted} ")))
        .ok_or_else(|| Error::Config(format!("sweep.target {wanted} is not evaluated; add it to eval.features")))?;
    Ok((row, summary))
}

/// Evaluates every grid point over `base`, one row per point. Completed
/// points are recorded in `<work>/sweep.ledger` and skipped on rerun;
/// `<work>/sweep.csv` is rewritten after each point.
pub fn cmd_sweep<L: Learner>(base: &RunConfig, grid: &Grid, learner: &L) -> Result<SweepOutcome> {
    fs::create_dir_all(&base.work_dir).map_err(|e| Error::io(&base.work_dir, e))?;
    let ledger_path = base.work_dir.join("sweep.ledger");
    let csv_path = base.work_dir.join("sweep.csv");
    let mut ledger = Ledger::open(&ledger_path)?;
    let points = grid.points();
    let mut ids = Vec::with_capacity(points.len());
    let (mut resumed, mut failed) = (0, 0);

    let write_csv = |ledger: &Ledger, ids: &[String]| -> Result<()> {
        let mut s = format!("{}\n", grid.header());
        for id in ids {
            s.push_str(&ledger.rows[id]);
            s.push('\n');
        }
        let tmp = csv_path.with_extension("csv.tmp");
        write_text(&tmp, &s)?;
        fs::rename(&tmp, &csv_path).map_err(|e| Error::io(&csv_path, e))
    };
    write_csv(&ledger, &ids)?;

    for point in &points {
        let mut cfg = base.clone();
        let mut prefix: Vec<String> = Vec::new();
        let mut bad = None;
        for (k, v) in point {
            prefix.push(csv_field(v));
            if let Err(e) = cfg.set(k, v) {
                bad = Some(e);
            }
        }
        let id = fingerprint(&cfg.to_text());
        if ledger.rows.contains_key(&id) {
            resumed += 1;
        } else {
            let outcome = match bad {
                Some(e) => Err(e),
                None => cfg.validate().and_then(|_| sweep_point(&cfg, learner)),
            };
            let tail = match outcome {
                Ok((row, summary)) => {
                    let status = if summary.failures.is_empty() {
                        "ok".to_string()
                    } else {
                        format!("ok ({} of {} samples skipped)", summary.failures.len(), summary.total)
                    };
                    format!("{},{}", row.to_csv(), csv_field(&status))
                }
                Err(e) => {
                    log::warn!("sweep point {}: {e}", prefix.join(" "));
                    failed += 1;
                    format!(",,,,,{}", csv_field(&format!("error: {e}")))
                }
            };
            let mut cols = prefix.clone();
            cols.push(tail);
            ledger.append(&id, &cols.join(","), &ledger_path)?;
        }
        ids.push(id);
        write_csv(&ledger, &ids)?;
    }
    Ok(SweepOutcome {
        rows: ids.iter().map(|id| ledger.rows[id].clone()).collect(),
        resumed,
        failed,
    })
}

/// Writes a synthetic dataset tree.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<usize> {
    let (records, samples) = make_dataset(spec)?;
    write_dataset(out, &records, &samples)?;
    Ok(records.len())
}

/// Inter-coder reliability of `sample,coder1,coder2` rows (AU lists such as
/// `4+7`). Returns `sample,reliability` rows and a final `pooled` row;
/// samples where neither coder scored an AU are `undefined`.
pub fn cmd_reliability(text: &str, origin: &str) -> Result<String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "sample,coder1,coder2" => {}
        _ => return Err(Error::parse(origin, 1, "expected header 'sample,coder1,coder2'")),
    }
    let mut pairs = Vec::new();
    let mut out = String::from("sample,reliability\n");
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::parse(origin, i + 1, format!("expected 3 columns, found {}", cols.len())));
        }
        let a = parse_aus(cols[1]).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        let b = parse_aus(cols[2]).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        let r = match coder_reliability(&a, &b) {
            Ok(r) => format!("{r:.6}"),
            Err(_) => "undefined".into(),
        };
        out.push_str(&format!("{},{r}\n", cols[0].trim()));
        pairs.push((a, b));
    }
    let pooled = pooled_reliability(pairs.iter().map(|(a, b)| (a, b)))?;
    out.push_str(&format!("pooled,{pooled:.6}\n"));
    Ok(out)
}
