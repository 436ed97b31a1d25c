//! Run configuration: a flat `key=value` text file with dotted keys.
//!
//! Every key has a default, so a file lists only what it changes. Blank
//! lines and `#` comments are ignored. [`RunConfig::to_text`] writes every
//! key and parses back to an equal value.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::curvature::{CurvatureConfig, FrameSelection};
use crate::dataset::ObjectiveLabel;
use crate::error::{Error, Result};
use crate::feature::{fingerprint, FeatureKind};
use crate::lbptop::LbpTopConfig;
use crate::learn::{LogisticConfig, Protocol};
use crate::preprocess2d::CropParams;
use crate::preprocess3d::Preprocess3dConfig;
use crate::synth::{SignalMode, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMode {
    #[default]
    Objective,
    NonObjective,
}

/// Which samples to leave out, by their objective label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LabelFilter {
    /// Sadness in non-objective mode, nothing otherwise.
    #[default]
    Auto,
    Exclude(Vec<ObjectiveLabel>),
}

impl LabelFilter {
    pub fn excluded(&self, mode: LabelMode) -> Vec<ObjectiveLabel> {
        match (self, mode) {
            (LabelFilter::Auto, LabelMode::NonObjective) => vec![ObjectiveLabel::Sadness],
            (LabelFilter::Auto, LabelMode::Objective) => vec![],
            (LabelFilter::Exclude(v), _) => v.clone(),
        }
    }
}

/// A single feature kind, or the fusion of 2D with `fusion.with`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepTarget {
    Kind(FeatureKind),
    Fusion,
}

impl fmt::Display for SweepTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepTarget::Kind(k) => f.write_str(k.tag()),
            SweepTarget::Fusion => f.write_str("fusion"),
        }
    }
}

impl FromStr for SweepTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fusion" => Ok(SweepTarget::Fusion),
            t => Ok(SweepTarget::Kind(t.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub frame_rate: f64,
    pub work_dir: PathBuf,
    pub label_mode: LabelMode,
    pub objective_rules: Option<PathBuf>,
    pub nonobjective_rules: Option<PathBuf>,
    pub label_filter: LabelFilter,
    /// Canonical inner eye corners as fractions of the frame size.
    pub align_left_eye: (f64, f64),
    pub align_right_eye: (f64, f64),
    pub crop: CropParams,
    pub cloud: Preprocess3dConfig,
    pub lbp: LbpTopConfig,
    pub weight_radius_px: usize,
    pub curvature: CurvatureConfig,
    pub frames: FrameSelection,
    /// Landmark subset file; the built-in 32-point list when absent.
    pub subset: Option<PathBuf>,
    pub protocol: Protocol,
    pub classifier: LogisticConfig,
    /// Kinds scored on their own.
    pub eval_features: Vec<FeatureKind>,
    /// 3D kind fused with the 2D feature; none disables fusion.
    pub fuse_with: Option<FeatureKind>,
    pub fusion_a: f64,
    /// Search the fusion weight instead of using `fusion_a`.
    pub fusion_sweep: bool,
    /// Result reported per grid point by a sweep.
    pub sweep_target: SweepTarget,
    pub external_2d: Option<PathBuf>,
    pub external_3d: Option<PathBuf>,
    pub synth: SynthSpec,
    pub seed: u64,
    /// 0 lets the thread pool decide.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::from("data"),
            frame_rate: 30.0,
            work_dir: PathBuf::from("work"),
            label_mode: LabelMode::Objective,
            objective_rules: None,
            nonobjective_rules: None,
            label_filter: LabelFilter::Auto,
            align_left_eye: (0.3, 0.35),
            align_right_eye: (0.7, 0.35),
            crop: CropParams::default(),
            cloud: Preprocess3dConfig::default(),
            lbp: LbpTopConfig::default(),
            weight_radius_px: 5,
            curvature: CurvatureConfig::default(),
            frames: FrameSelection::OnsetApex,
            subset: None,
            protocol: Protocol::Loso,
            classifier: LogisticConfig::default(),
            eval_features: vec![FeatureKind::Lbp2d, FeatureKind::SiHk],
            fuse_with: Some(FeatureKind::SiHk),
            fusion_a: 0.3,
            fusion_sweep: true,
            sweep_target: SweepTarget::Kind(FeatureKind::Lbp2d),
            external_2d: None,
            external_3d: None,
            synth: SynthSpec::default(),
            seed: 1,
            workers: 0,
        }
    }
}

fn bad(key: &str, value: &str, expect: &str) -> Error {
    Error::Config(format!("{key}={value}: expected {expect}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, expect: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| bad(key, v, expect))
}

fn list<T: std::str::FromStr>(key: &str, v: &str, n: usize, expect: &str) -> Result<Vec<T>> {
    let out = v
        .split(',')
        .map(|s| num::<T>(key, s, expect))
        .collect::<Result<Vec<T>>>()?;
    if out.len() != n {
        return Err(bad(key, v, &format!("{n} comma-separated values")));
    }
    Ok(out)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_protocol(p: Protocol) -> String {
    match p {
        Protocol::Loso => "loso".into(),
        Protocol::KFold { k, repeats } => format!("kfold:{k}:{repeats}"),
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (rx, ry, rt) = self.lbp.radii;
        let (px, py, pt) = self.lbp.neighbors;
        let v = &self.curvature.viewpoint;
        let s = &self.synth;
        vec![
            ("dataset.root", self.dataset_root.display().to_string()),
            ("dataset.frame_rate", format!("{:?}", self.frame_rate)),
            ("work.dir", self.work_dir.display().to_string()),
            (
                "labels.mode",
                match self.label_mode {
                    LabelMode::Objective => "objective".into(),
                    LabelMode::NonObjective => "nonobjective".into(),
                },
            ),
            ("labels.objective_rules", show_path(&self.objective_rules)),
            ("labels.nonobjective_rules", show_path(&self.nonobjective_rules)),
            (
                "labels.exclude",
                match &self.label_filter {
                    LabelFilter::Auto => "auto".into(),
                    LabelFilter::Exclude(v) => v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
                },
            ),
            ("align.left_eye", format!("{:?},{:?}", self.align_left_eye.0, self.align_left_eye.1)),
            ("align.right_eye", format!("{:?},{:?}", self.align_right_eye.0, self.align_right_eye.1)),
            ("crop.width_factor", format!("{:?}", self.crop.width_factor)),
            ("crop.height_factor", format!("{:?}", self.crop.height_factor)),
            ("crop.top_factor", format!("{:?}", self.crop.top_factor)),
            ("cloud.denoise_k", self.cloud.denoise.k.to_string()),
            ("cloud.denoise_sigma", format!("{:?}", self.cloud.denoise.sigma_mult)),
            ("cloud.nose_slab", format!("{:?}", self.cloud.nose.slab)),
            ("cloud.nose_support_radius", format!("{:?}", self.cloud.nose.support_radius)),
            ("cloud.nose_min_support", self.cloud.nose.min_support.to_string()),
            ("cloud.tip_is_min_z", self.cloud.nose.tip_is_min_z.to_string()),
            ("cloud.crop_radius", format!("{:?}", self.cloud.crop_radius)),
            ("cloud.icp_max_iter", self.cloud.icp.max_iter.to_string()),
            ("cloud.icp_tol", format!("{:?}", self.cloud.icp.tol)),
            ("lbp.radii", format!("{rx},{ry},{rt}")),
            ("lbp.neighbors", format!("{px},{py},{pt}")),
            ("lbp.blocks", format!("{},{}", self.lbp.blocks.0, self.lbp.blocks.1)),
            ("lbp.overlap", self.lbp.overlap.to_string()),
            ("weights.radius_px", self.weight_radius_px.to_string()),
            ("curvature.neighborhood_radius", format!("{:?}", self.curvature.neighborhood_radius)),
            ("curvature.zero_eps", format!("{:?}", self.curvature.zero_eps)),
            ("curvature.region_radius", format!("{:?}", self.curvature.landmark_region_radius)),
            ("curvature.viewpoint", format!("{:?},{:?},{:?}", v.x, v.y, v.z)),
            ("curvature.frames", self.frames.to_string()),
            ("curvature.subset", show_path(&self.subset)),
            ("eval.protocol", show_protocol(self.protocol)),
            ("eval.l2", format!("{:?}", self.classifier.l2)),
            ("eval.max_iter", self.classifier.max_iter.to_string()),
            ("eval.tol", format!("{:?}", self.classifier.tol)),
            (
                "eval.features",
                self.eval_features.iter().map(|k| k.tag()).collect::<Vec<_>>().join(","),
            ),
            ("eval.external_2d", show_path(&self.external_2d)),
            ("eval.external_3d", show_path(&self.external_3d)),
            ("fusion.with", self.fuse_with.map(|k| k.tag().to_string()).unwrap_or_else(|| "none".into())),
            ("fusion.a", format!("{:?}", self.fusion_a)),
            ("fusion.sweep", self.fusion_sweep.to_string()),
            ("sweep.target", self.sweep_target.to_string()),
            ("synth.subjects", s.n_subjects.to_string()),
            ("synth.samples", s.samples_per_subject.to_string()),
            ("synth.classes", s.classes.to_string()),
            ("synth.signal", s.signal.to_string()),
            ("synth.frames", s.frames.to_string()),
            ("synth.frame_rate", format!("{:?}", s.frame_rate)),
            ("synth.width", s.width.to_string()),
            ("synth.height", s.height.to_string()),
            ("synth.points", s.cloud_points.to_string()),
            ("synth.noise_3d", format!("{:?}", s.noise_3d)),
            ("synth.noise_2d", format!("{:?}", s.noise_2d)),
            ("synth.amplitude_3d", format!("{:?}", s.amplitude_3d)),
            ("synth.amplitude_2d", format!("{:?}", s.amplitude_2d)),
            ("synth.head_motion", format!("{:?}", s.head_motion)),
            ("synth.outliers", format!("{:?}", s.outlier_fraction)),
            ("synth.seed", s.seed.to_string()),
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f64_ = |e: &str| num::<f64>(key, v, e);
        let usize_ = || num::<usize>(key, v, "a non-negative integer");
        let pair = || -> Result<(f64, f64)> {
            let l = list::<f64>(key, v, 2, "numbers")?;
            Ok((l[0], l[1]))
        };
        match key {
            "dataset.root" => self.dataset_root = PathBuf::from(v),
            "dataset.frame_rate" => self.frame_rate = f64_("frames per second")?,
            "work.dir" => self.work_dir = PathBuf::from(v),
            "labels.mode" => {
                self.label_mode = match v {
                    "objective" => LabelMode::Objective,
                    "nonobjective" => LabelMode::NonObjective,
                    _ => return Err(bad(key, v, "objective or nonobjective")),
                }
            }
            "labels.objective_rules" => self.objective_rules = opt_path(v),
            "labels.nonobjective_rules" => self.nonobjective_rules = opt_path(v),
            "labels.exclude" => {
                self.label_filter = if v == "auto" {
                    LabelFilter::Auto
                } else if v.is_empty() {
                    LabelFilter::Exclude(vec![])
                } else {
                    LabelFilter::Exclude(v.split(',').map(|s| s.parse()).collect::<Result<_>>()?)
                }
            }
            "align.left_eye" => self.align_left_eye = pair()?,
            "align.right_eye" => self.align_right_eye = pair()?,
            "crop.width_factor" => self.crop.width_factor = f64_("a number")?,
            "crop.height_factor" => self.crop.height_factor = f64_("a number")?,
            "crop.top_factor" => self.crop.top_factor = f64_("a number")?,
            "cloud.denoise_k" => self.cloud.denoise.k = usize_()?,
            "cloud.denoise_sigma" => self.cloud.denoise.sigma_mult = f64_("a number")?,
            "cloud.nose_slab" => self.cloud.nose.slab = f64_("meters")?,
            "cloud.nose_support_radius" => self.cloud.nose.support_radius = f64_("meters")?,
            "cloud.nose_min_support" => self.cloud.nose.min_support = usize_()?,
            "cloud.tip_is_min_z" => self.cloud.nose.tip_is_min_z = boolean(key, v)?,
            "cloud.crop_radius" => self.cloud.crop_radius = f64_("meters")?,
            "cloud.icp_max_iter" => self.cloud.icp.max_iter = usize_()?,
            "cloud.icp_tol" => self.cloud.icp.tol = f64_("meters")?,
            "lbp.radii" => {
                let l = list::<usize>(key, v, 3, "integers")?;
                self.lbp.radii = (l[0], l[1], l[2]);
            }
            "lbp.neighbors" => {
                let l = list::<usize>(key, v, 3, "integers")?;
                self.lbp.neighbors = (l[0], l[1], l[2]);
            }
            "lbp.blocks" => {
                let l = list::<usize>(key, v, 2, "integers")?;
                self.lbp.blocks = (l[0], l[1]);
            }
            "lbp.overlap" => self.lbp.overlap = usize_()?,
            "weights.radius_px" => self.weight_radius_px = usize_()?,
            "curvature.neighborhood_radius" => self.curvature.neighborhood_radius = f64_("meters")?,
            "curvature.zero_eps" => self.curvature.zero_eps = f64_("1/m")?,
            "curvature.region_radius" => self.curvature.landmark_region_radius = f64_("meters")?,
            "curvature.viewpoint" => {
                let l = list::<f64>(key, v, 3, "numbers")?;
                self.curvature.viewpoint = Point3::new(l[0], l[1], l[2]);
            }
            "curvature.frames" => self.frames = v.parse()?,
            "curvature.subset" => self.subset = opt_path(v),
            "eval.protocol" => self.protocol = v.parse()?,
            "eval.l2" => self.classifier.l2 = f64_("a number")?,
            "eval.max_iter" => self.classifier.max_iter = usize_()?,
            "eval.tol" => self.classifier.tol = f64_("a number")?,
            "eval.features" => {
                self.eval_features = if v.is_empty() {
                    vec![]
                } else {
                    v.split(',').map(|s| s.parse()).collect::<Result<_>>()?
                }
            }
            "eval.external_2d" => self.external_2d = opt_path(v),
            "eval.external_3d" => self.external_3d = opt_path(v),
            "fusion.with" => {
                self.fuse_with = if v == "none" || v.is_empty() { None } else { Some(v.parse()?) }
            }
            "fusion.a" => self.fusion_a = f64_("a number in [0, 1]")?,
            "fusion.sweep" => self.fusion_sweep = boolean(key, v)?,
            "sweep.target" => self.sweep_target = v.parse()?,
            "synth.subjects" => self.synth.n_subjects = usize_()?,
            "synth.samples" => self.synth.samples_per_subject = usize_()?,
            "synth.classes" => self.synth.classes = usize_()?,
            "synth.signal" => self.synth.signal = v.parse::<SignalMode>()?,
            "synth.frames" => self.synth.frames = usize_()?,
            "synth.frame_rate" => self.synth.frame_rate = f64_("frames per second")?,
            "synth.width" => self.synth.width = usize_()?,
            "synth.height" => self.synth.height = usize_()?,
            "synth.points" => self.synth.cloud_points = usize_()?,
            "synth.noise_3d" => self.synth.noise_3d = f64_("meters")?,
            "synth.noise_2d" => self.synth.noise_2d = f64_("gray levels")?,
            "synth.amplitude_3d" => self.synth.amplitude_3d = f64_("meters")?,
            "synth.amplitude_2d" => self.synth.amplitude_2d = f64_("gray levels")?,
            "synth.head_motion" => self.synth.head_motion = f64_("a number")?,
            "synth.outliers" => self.synth.outlier_fraction = f64_("a fraction")?,
            "synth.seed" => self.synth.seed = num(key, v, "an integer")?,
            "seed" => self.seed = num(key, v, "an integer")?,
            "workers" => self.workers = usize_()?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by each `key=value` line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.lbp.validate()?;
        self.curvature.validate()?;
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("dataset.frame_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fusion_a) {
            return Err(Error::Config("fusion.a must lie in [0, 1]".into()));
        }
        if self.weight_radius_px == 0 {
            return Err(Error::Config("weights.radius_px must be positive".into()));
        }
        if !(self.cloud.crop_radius > 0.0) || self.cloud.denoise.k == 0 {
            return Err(Error::Config("cloud.crop_radius and cloud.denoise_k must be positive".into()));
        }
        if !(self.classifier.l2 >= 0.0) {
            return Err(Error::Config("eval.l2 must be non-negative".into()));
        }
        if self.sweep_target == SweepTarget::Fusion && self.fuse_with.is_none() {
            return Err(Error::Config("sweep.target=fusion needs fusion.with".into()));
        }
        if self.fuse_with == Some(FeatureKind::Lbp2d) {
            return Err(Error::Config("fusion.with names the 3D kind fused with the 2D feature".into()));
        }
        Ok(())
    }

    fn canonical(&self, prefixes: &[&str]) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Identifies the preprocessed tree.
    pub fn preprocess_fingerprint(&self) -> String {
        fingerprint(&self.canonical(&["dataset.", "align.", "crop.", "cloud."]))
    }

    /// Identifies one kind of extracted feature, including its inputs.
    pub fn feature_fingerprint(&self, kind: FeatureKind) -> String {
        let own = match kind {
            FeatureKind::Lbp2d => self.canonical(&["lbp."]),
            _ => self.canonical(&["weights.", "curvature."]),
        };
        fingerprint(&format!("{};{};{}", self.preprocess_fingerprint(), kind.tag(), own))
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.work_dir.join("preprocessed").join(self.preprocess_fingerprint())
    }

    pub fn features_dir(&self, kind: FeatureKind) -> PathBuf {
        self.work_dir
            .join("features")
            .join(kind.tag())
            .join(self.feature_fingerprint(kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::parse("# comment\nlbp.radii=2,2,3\n\nlabels.mode=nonobjective\nfusion.with=none\n").unwrap();
        assert_eq!(c.lbp.radii, (2, 2, 3));
        assert_eq!(c.label_mode, LabelMode::NonObjective);
        assert_eq!(c.fuse_with, None);
        assert_eq!(c.label_filter.excluded(c.label_mode), vec![ObjectiveLabel::Sadness]);
        assert!(RunConfig::parse("lbp.radii=1,2").is_err());
        assert!(RunConfig::parse("nonsense=1").is_err());
        assert!(RunConfig::parse("just text").is_err());
        assert!(RunConfig::parse("fusion.a=1.5").is_err());
    }

    #[test]
    fn radius_changes_only_its_fingerprint() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("lbp.radii", "2,2,4").unwrap();
        assert_ne!(a.feature_fingerprint(FeatureKind::Lbp2d), b.feature_fingerprint(FeatureKind::Lbp2d));
        assert_eq!(a.feature_fingerprint(FeatureKind::Si), b.feature_fingerprint(FeatureKind::Si));
        assert_eq!(a.preprocess_fingerprint(), b.preprocess_fingerprint());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn edited_configs_round_trip(r in 1usize..5, eps in 0.01f64..5.0, radius in 0.005f64..0.05, a in 0.0f64..=1.0, seed in any::<u64>()) {
                let mut c = RunConfig::default();
                c.lbp.radii = (r, r, r);
                c.curvature.zero_eps = eps;
                c.curvature.neighborhood_radius = radius;
                c.fusion_a = a;
                c.seed = seed;
                c.protocol = Protocol::KFold { k: 10, repeats: 3 };
                c.label_filter = LabelFilter::Exclude(vec![ObjectiveLabel::Others]);
                prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
            }
        }
    }
}
