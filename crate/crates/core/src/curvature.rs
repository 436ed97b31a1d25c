//! Principal curvatures on point clouds, HK surface typing, the shape index,
//! and landmark-local curvature histograms.
//!
//! Curvatures are estimated per point by fitting a bivariate cubic height
//! field to the neighbourhood, expressed in a local frame whose normal is the
//! smallest principal axis of the neighbourhood covariance. The normal is
//! oriented toward a viewpoint (the sensor, at the origin by default), and a
//! surface bending toward that normal has positive curvature. A face seen by
//! the sensor is therefore negatively curved on its convex parts: the nose
//! tip has shape index near 1 (cap).

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Point3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::cloud::{PointCloudFrame, SpatialGrid};
use crate::dataset::{SampleData, SampleRecord};
use crate::error::{Error, Result};
use crate::feature::{fingerprint, FeatureKind, FeatureVector};

/// Minimum neighbourhood size for a cubic fit.
pub const MIN_FIT_NEIGHBORS: usize = 10;
/// Minimum region size for a landmark-local histogram.
pub const MIN_REGION_POINTS: usize = 10;
/// Bins of both local histograms.
pub const LOCAL_BINS: usize = 9;

/// Extremal normal curvatures at a point, in 1/m. `p_min <= p_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalCurvatures {
    pub p_min: f64,
    pub p_max: f64,
}

impl PrincipalCurvatures {
    /// Orders the pair.
    pub fn new(a: f64, b: f64) -> Self {
        if a <= b {
            PrincipalCurvatures { p_min: a, p_max: b }
        } else {
            PrincipalCurvatures { p_min: b, p_max: a }
        }
    }

    /// Same surface seen from the other side.
    pub fn flipped(self) -> Self {
        PrincipalCurvatures::new(-self.p_max, -self.p_min)
    }
}

/// Gaussian and mean curvature `(K, H)`.
pub fn gaussian_mean_curvature(pc: PrincipalCurvatures) -> (f64, f64) {
    (pc.p_min * pc.p_max, (pc.p_min + pc.p_max) / 2.0)
}

/// Local surface type from the signs of `K` and `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceType {
    Peak,
    Ridge,
    SaddleRidge,
    Flat,
    MinimalSurface,
    Pit,
    Valley,
    SaddleValley,
    /// `K > 0, H = 0`, which no surface can realise.
    Undefined,
}

impl SurfaceType {
    /// Histogram bin order.
    pub const ALL: [SurfaceType; 9] = [
        SurfaceType::Peak,
        SurfaceType::Ridge,
        SurfaceType::SaddleRidge,
        SurfaceType::Flat,
        SurfaceType::MinimalSurface,
        SurfaceType::Pit,
        SurfaceType::Valley,
        SurfaceType::SaddleValley,
        SurfaceType::Undefined,
    ];

    pub fn bin(self) -> usize {
        SurfaceType::ALL.iter().position(|t| *t == self).unwrap()
    }
}

impl fmt::Display for SurfaceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn sign(x: f64, eps: f64) -> i8 {
    if x > eps {
        1
    } else if x < -eps {
        -1
    } else {
        0
    }
}

/// Classifies by the signs of `K` and `H`; magnitudes up to `zero_eps` count
/// as zero.
pub fn hk_classify(k: f64, h: f64, zero_eps: f64) -> SurfaceType {
    use SurfaceType::*;
    match (sign(k, zero_eps), sign(h, zero_eps)) {
        (1, 1) => Peak,
        (0, 1) => Ridge,
        (-1, 1) => SaddleRidge,
        (1, 0) => Undefined,
        (0, 0) => Flat,
        (-1, 0) => MinimalSurface,
        (1, -1) => Pit,
        (0, -1) => Valley,
        (-1, -1) => SaddleValley,
        _ => unreachable!(),
    }
}

/// Shape index in `[0, 1]`: `1/2 − atan((p_max + p_min) / (p_max − p_min)) / π`.
/// Umbilic points map to 0 (positive), 1 (negative) or 1/2 (flat).
pub fn shape_index(pc: PrincipalCurvatures) -> f64 {
    let sum = pc.p_max + pc.p_min;
    let diff = (pc.p_max - pc.p_min).max(0.0);
    // atan2 with a non-negative second argument equals atan(sum/diff) and
    // yields ±π/2 or 0 at umbilics.
    0.5 - sum.atan2(diff) / std::f64::consts::PI
}

/// Names of the nine shape-index bins, concave to convex.
pub const SI_BIN_NAMES: [&str; 9] = [
    "Cup",
    "Trough",
    "Rut Saddle",
    "Rut",
    "Saddle",
    "Saddle Ridge",
    "Ridge",
    "Dome",
    "Cap",
];

/// Nearest of the nine centres `k/8`; exact midpoints go toward 1/2.
pub fn quantize_si(si: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&si) {
        return Err(Error::OutOfRange(format!("shape index {si} outside [0, 1]")));
    }
    let x = si * 8.0;
    let lo = x.floor();
    let frac = x - lo;
    let bin = if frac > 0.5 {
        lo + 1.0
    } else if frac < 0.5 {
        lo
    } else if lo < 4.0 {
        lo + 1.0
    } else {
        lo
    };
    Ok(bin as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureConfig {
    /// Neighbourhood radius of the cubic fit, meters.
    pub neighborhood_radius: f64,
    /// `|K|`, `|H|` at or below this count as zero for HK typing, 1/m.
    pub zero_eps: f64,
    /// Radius of the sphere around each landmark, meters.
    pub landmark_region_radius: f64,
    /// Normals are oriented toward this point.
    pub viewpoint: Point3<f64>,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            neighborhood_radius: 0.015,
            zero_eps: 0.5,
            landmark_region_radius: 0.01,
            viewpoint: Point3::origin(),
        }
    }
}

impl CurvatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.neighborhood_radius > 0.0) || !(self.landmark_region_radius > 0.0) {
            return Err(Error::Config("curvature radii must be positive".into()));
        }
        if !(self.zero_eps > 0.0) {
            return Err(Error::Config("zero_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Cubic-fit curvature estimator over one cloud.
pub struct CurvatureEstimator<'a> {
    grid: SpatialGrid<'a>,
    radius: f64,
    viewpoint: Point3<f64>,
}

impl<'a> CurvatureEstimator<'a> {
    pub fn new(cloud: &'a PointCloudFrame, radius: f64, viewpoint: Point3<f64>) -> Self {
        // cells of about half the fit radius keep range queries tight
        let cell = (radius / 2.0).max(1e-6);
        CurvatureEstimator {
            grid: SpatialGrid::new(&cloud.points, cell),
            radius,
            viewpoint,
        }
    }

    pub fn points(&self) -> &'a [Point3<f64>] {
        self.grid.points()
    }

    pub fn estimate_at(&self, at: &Point3<f64>) -> Result<PrincipalCurvatures> {
        let idx = self.grid.within(at, self.radius);
        if idx.len() < MIN_FIT_NEIGHBORS {
            return Err(Error::InsufficientPoints {
                needed: MIN_FIT_NEIGHBORS,
                got: idx.len(),
            });
        }
        let pts = self.grid.points();
        fit_curvatures(idx.iter().map(|&i| &pts[i]), idx.len(), at, self.radius, &self.viewpoint)
    }
}

fn fit_curvatures<'p>(
    neighbors: impl Iterator<Item = &'p Point3<f64>> + Clone,
    n: usize,
    at: &Point3<f64>,
    radius: f64,
    viewpoint: &Point3<f64>,
) -> Result<PrincipalCurvatures> {
    let centroid: Vector3<f64> = neighbors.clone().map(|p| p.coords).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in neighbors.clone() {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_small, l_mid, l_big) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(l_big > 0.0) || l_mid <= 1e-10 * l_big {
        return Err(Error::DegenerateGeometry("neighbourhood is collinear".into()));
    }
    let _ = l_small;
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    if normal.dot(&(viewpoint - at)) < 0.0 {
        normal = -normal;
    }
    let e1: Vector3<f64> = eig.eigenvectors.column(order[2]).into_owned();
    let e2 = normal.cross(&e1);

    // w = Σ c_k u^a v^b over {1, u, v, u², uv, v², u³, u²v, uv², v³};
    // u, v scaled by the radius for conditioning.
    let mut a = DMatrix::<f64>::zeros(n, 10);
    let mut b = DVector::<f64>::zeros(n);
    for (r, p) in neighbors.enumerate() {
        let d = p - at;
        let u = d.dot(&e1) / radius;
        let v = d.dot(&e2) / radius;
        let w = d.dot(&normal);
        let row = [1.0, u, v, u * u, u * v, v * v, u * u * u, u * u * v, u * v * v, v * v * v];
        for (c, val) in row.iter().enumerate() {
            a[(r, c)] = *val;
        }
        b[r] = w;
    }
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_max > 0.0) || s_min < 1e-9 * s_max {
        return Err(Error::DegenerateGeometry("rank-deficient cubic fit".into()));
    }
    let c = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::DegenerateGeometry(e.to_string()))?;
    let (h1, h2) = (radius, radius * radius);
    let fu = c[1] / h1;
    let fv = c[2] / h1;
    let fuu = 2.0 * c[3] / h2;
    let fuv = c[4] / h2;
    let fvv = 2.0 * c[5] / h2;

    Ok(weingarten_curvatures(fu, fv, fuu, fuv, fvv))
}

/// Principal curvatures of the graph `w = f(u, v)` at the origin from its
/// first and second derivatives, with the normal along +w.
pub fn weingarten_curvatures(fu: f64, fv: f64, fuu: f64, fuv: f64, fvv: f64) -> PrincipalCurvatures {
    let e = 1.0 + fu * fu;
    let f = fu * fv;
    let g = 1.0 + fv * fv;
    let s = (1.0 + fu * fu + fv * fv).sqrt();
    let l = fuu / s;
    let m = fuv / s;
    let n = fvv / s;
    let det1 = e * g - f * f;
    let k = (l * n - m * m) / det1;
    let h = (e * n - 2.0 * f * m + g * l) / (2.0 * det1);
    let disc = (h * h - k).max(0.0).sqrt();
    PrincipalCurvatures::new(h - disc, h + disc)
}

/// One-off estimate at `point` with the default sensor viewpoint.
pub fn estimate_principal_curvatures(
    cloud: &PointCloudFrame,
    point: &Point3<f64>,
    radius: f64,
) -> Result<PrincipalCurvatures> {
    if !(radius > 0.0) {
        return Err(Error::Config("curvature radius must be positive".into()));
    }
    CurvatureEstimator::new(cloud, radius, Point3::origin()).estimate_at(point)
}

/// Which local histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocalKind {
    /// Quantised shape index.
    Si,
    /// HK surface type.
    Hk,
}

/// Shape-index and HK frequencies of one landmark region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalHistograms {
    pub si: [f64; LOCAL_BINS],
    pub hk: [f64; LOCAL_BINS],
    /// Region vertices with a usable curvature estimate.
    pub vertices: usize,
}

impl LocalHistograms {
    pub fn get(&self, kind: LocalKind) -> &[f64; LOCAL_BINS] {
        match kind {
            LocalKind::Si => &self.si,
            LocalKind::Hk => &self.hk,
        }
    }
}

fn histograms_from(curvatures: &[PrincipalCurvatures], zero_eps: f64) -> LocalHistograms {
    let mut si = [0.0; LOCAL_BINS];
    let mut hk = [0.0; LOCAL_BINS];
    for pc in curvatures {
        let bin = quantize_si(shape_index(*pc)).expect("shape index lies in [0, 1]");
        si[bin] += 1.0;
        let (k, h) = gaussian_mean_curvature(*pc);
        hk[hk_classify(k, h, zero_eps).bin()] += 1.0;
    }
    let m = curvatures.len() as f64;
    for v in si.iter_mut().chain(hk.iter_mut()) {
        *v /= m;
    }
    LocalHistograms {
        si,
        hk,
        vertices: curvatures.len(),
    }
}

/// Frequencies over the cloud vertices within `region_radius` of each
/// landmark. Region vertices whose own neighbourhood cannot be fitted are
/// left out of both the counts and the normaliser.
pub fn landmark_histograms(
    cloud: &PointCloudFrame,
    landmarks: &[Point3<f64>],
    config: &CurvatureConfig,
) -> Result<Vec<LocalHistograms>> {
    config.validate()?;
    let est = CurvatureEstimator::new(cloud, config.neighborhood_radius, config.viewpoint);
    let region_grid = SpatialGrid::new(&cloud.points, config.landmark_region_radius.max(1e-6));
    let regions: Vec<Vec<usize>> = landmarks
        .iter()
        .map(|l| region_grid.within(l, config.landmark_region_radius))
        .collect();
    for (j, r) in regions.iter().enumerate() {
        if r.len() < MIN_REGION_POINTS {
            return Err(Error::Validation(format!(
                "landmark {j}: {} cloud points within {} m, need {MIN_REGION_POINTS}",
                r.len(),
                config.landmark_region_radius
            )));
        }
    }
    let mut needed: Vec<usize> = regions.iter().flatten().copied().collect();
    needed.sort_unstable();
    needed.dedup();
    let curv: HashMap<usize, PrincipalCurvatures> = needed
        .par_iter()
        .filter_map(|&i| est.estimate_at(&cloud.points[i]).ok().map(|pc| (i, pc)))
        .collect();

    regions
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let pcs: Vec<PrincipalCurvatures> = r.iter().filter_map(|i| curv.get(i).copied()).collect();
            if pcs.is_empty() {
                return Err(Error::DegenerateGeometry(format!(
                    "landmark {j}: no region vertex admits a curvature fit"
                )));
            }
            Ok(histograms_from(&pcs, config.zero_eps))
        })
        .collect()
}

/// Nine-bin frequency vector of one landmark region.
pub fn landmark_local_histogram(
    cloud: &PointCloudFrame,
    landmark: &Point3<f64>,
    region_radius: f64,
    kind: LocalKind,
    config: &CurvatureConfig,
) -> Result<[f64; LOCAL_BINS]> {
    let cfg = CurvatureConfig {
        landmark_region_radius: region_radius,
        ..*config
    };
    let h = landmark_histograms(cloud, std::slice::from_ref(landmark), &cfg)?;
    Ok(*h[0].get(kind))
}

/// Frames whose curvature histograms enter a sequence feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FrameSelection {
    #[default]
    OnsetApex,
    /// Every frame from onset to offset.
    All,
}

impl FrameSelection {
    pub fn frames(self, record: &SampleRecord) -> Vec<usize> {
        match self {
            FrameSelection::OnsetApex => vec![record.onset, record.apex],
            FrameSelection::All => (record.onset..=record.offset).collect(),
        }
    }
}

impl std::str::FromStr for FrameSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "onset_apex" | "onset+apex" => Ok(FrameSelection::OnsetApex),
            "all" => Ok(FrameSelection::All),
            other => Err(Error::Config(format!("unknown frame selection '{other}' (onset_apex or all)"))),
        }
    }
}

impl fmt::Display for FrameSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameSelection::OnsetApex => "onset_apex",
            FrameSelection::All => "all",
        })
    }
}

impl CurvatureConfig {
    pub fn canonical(&self) -> String {
        format!(
            "curvature.neighborhood_radius={:?};curvature.zero_eps={:?};curvature.region_radius={:?};curvature.viewpoint={:?},{:?},{:?}",
            self.neighborhood_radius,
            self.zero_eps,
            self.landmark_region_radius,
            self.viewpoint.x,
            self.viewpoint.y,
            self.viewpoint.z
        )
    }
}

/// Histograms of the `subset` landmarks in each selected frame, indexed
/// `[frame][landmark]`.
pub fn sequence_histograms(
    sample: &SampleData,
    record: &SampleRecord,
    config: &CurvatureConfig,
    frames: FrameSelection,
    subset: &[usize],
) -> Result<Vec<Vec<LocalHistograms>>> {
    frames
        .frames(record)
        .into_iter()
        .map(|k| {
            let cloud = sample
                .clouds
                .get(k)
                .ok_or_else(|| Error::Validation(format!("{}: no point cloud for frame {k}", record.key())))?;
            let marks = sample
                .landmarks3d
                .get(k)
                .ok_or_else(|| Error::Validation(format!("{}: no 3D landmarks for frame {k}", record.key())))?;
            let pts = subset
                .iter()
                .map(|&j| {
                    marks
                        .get(j)
                        .copied()
                        .ok_or_else(|| Error::Validation(format!("{}: landmark {j} missing in frame {k}", record.key())))
                })
                .collect::<Result<Vec<_>>>()?;
            landmark_histograms(cloud, &pts, config).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{} frame {k}: {m}", record.key())),
                other => other,
            })
        })
        .collect()
}

/// Weighted concatenation: landmark-major, then frame, then bin. The SI+HK
/// kind lays the SI vector before the HK vector.
pub fn assemble_sequence_feature(per_frame: &[Vec<LocalHistograms>], weights: &[f64], kind: FeatureKind) -> Result<Vec<f64>> {
    let n_marks = per_frame.first().map(Vec::len).unwrap_or(0);
    if weights.len() != n_marks || per_frame.iter().any(|f| f.len() != n_marks) {
        return Err(Error::DimensionMismatch {
            expected: n_marks,
            got: weights.len(),
        });
    }
    let one = |local: LocalKind| {
        let mut v = Vec::with_capacity(n_marks * per_frame.len() * LOCAL_BINS);
        for (j, w) in weights.iter().enumerate() {
            for frame in per_frame {
                v.extend(frame[j].get(local).iter().map(|h| w * h));
            }
        }
        v
    };
    match kind {
        FeatureKind::Si => Ok(one(LocalKind::Si)),
        FeatureKind::Hk => Ok(one(LocalKind::Hk)),
        FeatureKind::SiHk => {
            let mut v = one(LocalKind::Si);
            v.extend(one(LocalKind::Hk));
            Ok(v)
        }
        FeatureKind::Lbp2d => Err(Error::Config("the 2D kind is not a curvature feature".into())),
    }
}

pub fn sequence_fingerprint(config: &CurvatureConfig, frames: FrameSelection, subset: &[usize]) -> String {
    let subset: Vec<String> = subset.iter().map(usize::to_string).collect();
    fingerprint(&format!("{};frames={frames};subset={}", config.canonical(), subset.join(",")))
}

/// Weighted landmark-local curvature feature of a sample.
pub fn sequence_feature(
    sample: &SampleData,
    record: &SampleRecord,
    weights: &[f64],
    kind: FeatureKind,
    config: &CurvatureConfig,
    frames: FrameSelection,
    subset: &[usize],
) -> Result<FeatureVector> {
    if weights.len() != subset.len() {
        return Err(Error::DimensionMismatch {
            expected: subset.len(),
            got: weights.len(),
        });
    }
    let per_frame = sequence_histograms(sample, record, config, frames, subset)?;
    let values = assemble_sequence_feature(&per_frame, weights, kind)?;
    FeatureVector::new(kind, sequence_fingerprint(config, frames, subset), values)
}
