//! Synthetic surfaces with analytic curvature, and synthetic paired
//! video/point-cloud datasets whose class signal can be placed in the 3D
//! geometry, the 2D texture, or both.
//!
//! Curvature signs follow [`crate::curvature`]: normals face the origin and a
//! surface bending toward its normal is positively curved, so a sphere seen
//! from outside has curvature `-1/r`.

use nalgebra::{Matrix2, Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::cloud::{PointCloudFrame, RigidTransform};
use crate::curvature::PrincipalCurvatures;
use crate::dataset::{
    parse_aus, validate_duration, LabelRules, NonObjectiveLabel, ObjectiveLabel, SampleData, SampleRecord,
    LANDMARK_COUNT,
};
use crate::error::{Error, Result};
use crate::volume::FrameVolume;

pub const MIN_SURFACE_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceKind {
    Sphere,
    Plane,
    Cylinder,
    FaceProxy,
}

/// Gaussian relief on the face proxy. Positive amplitude moves the surface
/// toward the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    /// Offset from the ellipsoid axis, meters.
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl Bump {
    fn round(x: f64, y: f64, amplitude: f64, sigma: f64) -> Self {
        Bump {
            x,
            y,
            amplitude,
            sigma_x: sigma,
            sigma_y: sigma,
        }
    }
}

/// Front half of an ellipsoid facing the sensor, plus bumps. The depth map
/// is `z(x, y) = cz − c·√(1 − X²/a² − Y²/b²) − Σ bumps`, sampled where
/// `X²/a² + Y²/b² ≤ extent²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceProxy {
    /// Ellipsoid center.
    pub center: Point3<f64>,
    /// Semi-axes along x, y, z.
    pub semi_axes: (f64, f64, f64),
    pub extent: f64,
    pub bumps: Vec<Bump>,
}

/// Derivatives of a depth map `z(x, y)`.
#[derive(Debug, Clone, Copy, Default)]
struct Jet {
    z: f64,
    zx: f64,
    zy: f64,
    zxx: f64,
    zxy: f64,
    zyy: f64,
}

impl FaceProxy {
    fn jet(&self, x: f64, y: f64) -> Jet {
        let (a, b, c) = self.semi_axes;
        let (xx, yy) = (x - self.center.x, y - self.center.y);
        let q = (1.0 - xx * xx / (a * a) - yy * yy / (b * b)).max(1e-9);
        let sq = q.sqrt();
        let q32 = q * sq;
        let mut j = Jet {
            z: self.center.z - c * sq,
            zx: c * xx / (a * a * sq),
            zy: c * yy / (b * b * sq),
            zxx: c / (a * a * sq) + c * xx * xx / (a.powi(4) * q32),
            zxy: c * xx * yy / (a * a * b * b * q32),
            zyy: c / (b * b * sq) + c * yy * yy / (b.powi(4) * q32),
        };
        for bump in &self.bumps {
            let (dx, dy) = (xx - bump.x, yy - bump.y);
            let (sx2, sy2) = (bump.sigma_x * bump.sigma_x, bump.sigma_y * bump.sigma_y);
            let e = bump.amplitude * (-(dx * dx / (2.0 * sx2) + dy * dy / (2.0 * sy2))).exp();
            j.z -= e;
            j.zx += e * dx / sx2;
            j.zy += e * dy / sy2;
            j.zxx += e * (1.0 / sx2 - dx * dx / (sx2 * sx2));
            j.zyy += e * (1.0 / sy2 - dy * dy / (sy2 * sy2));
            j.zxy -= e * dx * dy / (sx2 * sy2);
        }
        j
    }

    pub fn depth(&self, x: f64, y: f64) -> f64 {
        self.jet(x, y).z
    }

    /// Surface point above the axis offset `(dx, dy)`.
    pub fn surface_point(&self, dx: f64, dy: f64) -> Point3<f64> {
        let (x, y) = (self.center.x + dx, self.center.y + dy);
        Point3::new(x, y, self.depth(x, y))
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (a, b, _) = self.semi_axes;
        let (xx, yy) = (x - self.center.x, y - self.center.y);
        xx * xx / (a * a) + yy * yy / (b * b) <= self.extent * self.extent
    }

    fn area_element(&self, x: f64, y: f64) -> f64 {
        let j = self.jet(x, y);
        (1.0 + j.zx * j.zx + j.zy * j.zy).sqrt()
    }

    /// Curvatures at `(x, y)` with the normal facing `viewpoint`.
    fn curvature(&self, x: f64, y: f64, viewpoint: &Point3<f64>) -> PrincipalCurvatures {
        let j = self.jet(x, y);
        let s = (1.0 + j.zx * j.zx + j.zy * j.zy).sqrt();
        // normal (zx, zy, -1)/s points toward -z
        let first = Matrix2::new(1.0 + j.zx * j.zx, j.zx * j.zy, j.zx * j.zy, 1.0 + j.zy * j.zy);
        let second = Matrix2::new(-j.zxx, -j.zxy, -j.zxy, -j.zyy) / s;
        let shape = first.try_inverse().expect("first fundamental form is positive definite") * second;
        let tr = shape.trace();
        let det = shape.determinant();
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let pc = PrincipalCurvatures::new(tr / 2.0 - disc, tr / 2.0 + disc);
        let p = Point3::new(x, y, j.z);
        let normal = Vector3::new(j.zx, j.zy, -1.0);
        if normal.dot(&(viewpoint - p)) >= 0.0 {
            pc
        } else {
            pc.flipped()
        }
    }
}

impl Default for FaceProxy {
    fn default() -> Self {
        FaceProxy {
            center: Point3::new(0.0, 0.0, 0.485),
            semi_axes: (0.075, 0.10, 0.06),
            extent: 0.9,
            bumps: vec![
                Bump {
                    x: 0.0,
                    y: 0.0,
                    amplitude: 0.025,
                    sigma_x: 0.010,
                    sigma_y: 0.018,
                },
                Bump {
                    x: -0.032,
                    y: -0.045,
                    amplitude: 0.005,
                    sigma_x: 0.014,
                    sigma_y: 0.005,
                },
                Bump {
                    x: 0.032,
                    y: -0.045,
                    amplitude: 0.005,
                    sigma_x: 0.014,
                    sigma_y: 0.005,
                },
            ],
        }
    }
}

/// Shape parameters for [`make_surface`]. Only the fields of the requested
/// kind are read.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceParams {
    pub center: Point3<f64>,
    /// Sphere or cylinder radius.
    pub radius: f64,
    /// Plane half side, or cylinder half length along y.
    pub half_extent: f64,
    pub face: FaceProxy,
}

impl SurfaceParams {
    pub fn sphere(radius: f64, center: Point3<f64>) -> Self {
        SurfaceParams {
            center,
            radius,
            half_extent: 0.0,
            face: FaceProxy::default(),
        }
    }

    /// Square in the plane `z = center.z`.
    pub fn plane(half_extent: f64, center: Point3<f64>) -> Self {
        SurfaceParams {
            center,
            radius: 0.0,
            half_extent,
            face: FaceProxy::default(),
        }
    }

    /// Cylinder with its axis along y.
    pub fn cylinder(radius: f64, half_length: f64, center: Point3<f64>) -> Self {
        SurfaceParams {
            center,
            radius,
            half_extent: half_length,
            face: FaceProxy::default(),
        }
    }

    pub fn face_proxy() -> Self {
        SurfaceParams::face(FaceProxy::default())
    }

    pub fn face(face: FaceProxy) -> Self {
        SurfaceParams {
            center: face.center,
            radius: 0.0,
            half_extent: 0.0,
            face,
        }
    }

    /// Nose tip of the face proxy: the surface point over its first bump.
    pub fn nose_tip(&self) -> Point3<f64> {
        let (dx, dy) = self.face.bumps.first().map(|b| (b.x, b.y)).unwrap_or((0.0, 0.0));
        self.face.surface_point(dx, dy)
    }

    fn validate(&self, kind: SurfaceKind) -> Result<()> {
        let ok = match kind {
            SurfaceKind::Sphere => self.radius > 0.0,
            SurfaceKind::Plane => self.half_extent > 0.0,
            SurfaceKind::Cylinder => self.radius > 0.0 && self.half_extent > 0.0,
            SurfaceKind::FaceProxy => {
                let (a, b, c) = self.face.semi_axes;
                a > 0.0
                    && b > 0.0
                    && c > 0.0
                    && self.face.extent > 0.0
                    && self.face.extent < 1.0
                    && self.face.bumps.iter().all(|b| b.sigma_x > 0.0 && b.sigma_y > 0.0)
            }
        };
        if ok && self.center.coords.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {kind:?} parameters: {self:?}")))
        }
    }
}

/// A sampled surface with the exact curvature at each clean sample.
#[derive(Debug, Clone)]
pub struct SurfaceSample {
    pub cloud: PointCloudFrame,
    pub oracle: Vec<PrincipalCurvatures>,
}

fn facing(pc: PrincipalCurvatures, p: &Point3<f64>, outward: &Vector3<f64>) -> PrincipalCurvatures {
    // `pc` holds the curvature for an outward normal
    if outward.dot(&(Point3::origin() - p)) >= 0.0 {
        pc
    } else {
        pc.flipped()
    }
}

/// Samples `n_points` uniformly by area, then adds isotropic Gaussian noise
/// of `noise_sigma` meters. Normals in the oracle face the origin.
pub fn make_surface(
    kind: SurfaceKind,
    params: &SurfaceParams,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SurfaceSample> {
    params.validate(kind)?;
    if n_points < MIN_SURFACE_POINTS {
        return Err(Error::InsufficientPoints {
            needed: MIN_SURFACE_POINTS,
            got: n_points,
        });
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = params.center;
    let mut points = Vec::with_capacity(n_points);
    let mut oracle = Vec::with_capacity(n_points);
    match kind {
        SurfaceKind::Sphere => {
            // Fibonacci lattice under a random rotation: equal-area and far
            // more regular than independent draws
            let r = params.radius;
            let spin = RigidTransform::from_axis_angle(
                Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal) + 1e-9,
                ),
                rng.random_range(0.0..std::f64::consts::TAU),
                Vector3::zeros(),
            )
            .rotation;
            let golden = std::f64::consts::PI * (1.0 + 5f64.sqrt());
            for i in 0..n_points {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n_points as f64;
                let rho = (1.0 - z * z).sqrt();
                let phi = golden * (i as f64 + 0.5);
                let d = spin * Vector3::new(rho * phi.cos(), rho * phi.sin(), z);
                let p = c + d * r;
                oracle.push(facing(PrincipalCurvatures::new(-1.0 / r, -1.0 / r), &p, &d));
                points.push(p);
            }
        }
        SurfaceKind::Plane => {
            let h = params.half_extent;
            for _ in 0..n_points {
                points.push(Point3::new(c.x + rng.random_range(-h..h), c.y + rng.random_range(-h..h), c.z));
                oracle.push(PrincipalCurvatures::new(0.0, 0.0));
            }
        }
        SurfaceKind::Cylinder => {
            let (r, h) = (params.radius, params.half_extent);
            for _ in 0..n_points {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let outward = Vector3::new(theta.cos(), 0.0, theta.sin());
                let p = c + outward * r + Vector3::new(0.0, rng.random_range(-h..h), 0.0);
                oracle.push(facing(PrincipalCurvatures::new(-1.0 / r, 0.0), &p, &outward));
                points.push(p);
            }
        }
        SurfaceKind::FaceProxy => {
            let face = &params.face;
            let (a, b, _) = face.semi_axes;
            let (ea, eb) = (a * face.extent, b * face.extent);
            let mut s_max: f64 = 1.0;
            for i in 0..=100 {
                for k in 0..=100 {
                    let x = c.x - ea + 2.0 * ea * i as f64 / 100.0;
                    let y = c.y - eb + 2.0 * eb * k as f64 / 100.0;
                    if face.inside(x, y) {
                        s_max = s_max.max(face.area_element(x, y));
                    }
                }
            }
            s_max *= 1.1;
            while points.len() < n_points {
                let x = c.x + rng.random_range(-ea..ea);
                let y = c.y + rng.random_range(-eb..eb);
                if !face.inside(x, y) || rng.random::<f64>() * s_max > face.area_element(x, y) {
                    continue;
                }
                points.push(Point3::new(x, y, face.depth(x, y)));
                oracle.push(face.curvature(x, y, &Point3::origin()));
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for p in &mut points {
            *p += Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(SurfaceSample {
        cloud: PointCloudFrame::new(points)?,
        oracle,
    })
}

/// Where the class signal lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalMode {
    ThreeD,
    TwoD,
    Both,
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "3d" => Ok(SignalMode::ThreeD),
            "2d" => Ok(SignalMode::TwoD),
            "both" => Ok(SignalMode::Both),
            other => Err(Error::Config(format!("unknown signal mode '{other}' (3d, 2d or both)"))),
        }
    }
}

impl std::fmt::Display for SignalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignalMode::ThreeD => "3d",
            SignalMode::TwoD => "2d",
            SignalMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    /// Number of classes, 2..=5; sample `k` of a subject has class `k % classes`.
    pub classes: usize,
    pub signal: SignalMode,
    pub frames: usize,
    pub frame_rate: f64,
    pub width: usize,
    pub height: usize,
    pub cloud_points: usize,
    /// Per-point depth noise, meters.
    pub noise_3d: f64,
    /// Per-pixel noise, gray levels.
    pub noise_2d: f64,
    /// Peak class deformation, meters.
    pub amplitude_3d: f64,
    /// Peak class texture contrast, gray levels.
    pub amplitude_2d: f64,
    /// Per-frame head motion scale: radians of rotation and meters of
    /// translation are both drawn with this standard deviation times 0.01.
    pub head_motion: f64,
    /// Fraction of each cloud added as off-surface speckle.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 6,
            samples_per_subject: 6,
            classes: 3,
            signal: SignalMode::ThreeD,
            frames: 10,
            frame_rate: 30.0,
            width: 128,
            height: 128,
            cloud_points: 3000,
            noise_3d: 0.0002,
            noise_2d: 2.0,
            amplitude_3d: 0.004,
            amplitude_2d: 30.0,
            head_motion: 0.5,
            outlier_fraction: 0.005,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return bad("needs at least one subject and one sample per subject");
        }
        if !(2..=CLASS_FAMILIES.len()).contains(&self.classes) {
            return bad("classes must be within 2..=5");
        }
        if self.frames < 4 {
            return bad("at least 4 frames");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame rate must be positive");
        }
        if self.width < 64 || self.height < 64 {
            return bad("frames must be at least 64x64");
        }
        if self.cloud_points < 500 {
            return bad("at least 500 cloud points");
        }
        for (name, v) in [
            ("noise_3d", self.noise_3d),
            ("noise_2d", self.noise_2d),
            ("amplitude_3d", self.amplitude_3d),
            ("amplitude_2d", self.amplitude_2d),
            ("head_motion", self.head_motion),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 0.5)");
        }
        Ok(())
    }
}

/// Signal of one class: relief on the face and a texture patch in the video.
#[derive(Debug, Clone, Copy)]
struct ClassFamily {
    aus: &'static str,
    /// Bump sites as offsets from the face axis; the sign scales the
    /// amplitude (negative pushes away from the sensor).
    sites: [(f64, f64, f64); 2],
    /// Carrier orientation of the texture patch, radians.
    orientation: f64,
}

const CLASS_FAMILIES: [ClassFamily; 5] = [
    ClassFamily {
        aus: "6+12",
        sites: [(-0.025, 0.045, 1.0), (0.025, 0.045, 1.0)],
        orientation: 0.0,
    },
    ClassFamily {
        aus: "1+2",
        sites: [(-0.033, -0.047, 1.0), (0.033, -0.047, 1.0)],
        orientation: std::f64::consts::FRAC_PI_2,
    },
    ClassFamily {
        aus: "4+7",
        sites: [(0.0, -0.036, -1.0), (0.0, -0.036, -1.0)],
        orientation: std::f64::consts::FRAC_PI_4,
    },
    ClassFamily {
        aus: "17+24",
        sites: [(-0.014, 0.014, 1.0), (0.014, 0.014, 1.0)],
        orientation: 3.0 * std::f64::consts::FRAC_PI_4,
    },
    ClassFamily {
        aus: "4+9",
        sites: [(0.0, 0.062, -1.0), (0.0, 0.062, -1.0)],
        orientation: std::f64::consts::FRAC_PI_8,
    },
];

const DEFORMATION_SIGMA: f64 = 0.010;

/// 49 landmarks as offsets from the face axis, meters: brows 0-9, nose
/// 10-18, eyes 19-30, outer lip 31-42, inner lip 43-48.
pub fn landmark_template() -> Vec<Point2<f64>> {
    let mut l = Vec::with_capacity(LANDMARK_COUNT);
    let brow_x = [0.052, 0.043, 0.033, 0.023, 0.013];
    let brow_y = [-0.040, -0.045, -0.047, -0.045, -0.040];
    for i in 0..5 {
        l.push(Point2::new(-brow_x[i], brow_y[i]));
    }
    for i in (0..5).rev() {
        l.push(Point2::new(brow_x[i], brow_y[i]));
    }
    for y in [-0.030, -0.020, -0.010, 0.0] {
        l.push(Point2::new(0.0, y));
    }
    for (x, y) in [(-0.014, 0.016), (-0.007, 0.017), (0.0, 0.018), (0.007, 0.017), (0.014, 0.016)] {
        l.push(Point2::new(x, y));
    }
    let eye = [(-0.045, -0.025), (-0.038, -0.029), (-0.027, -0.029), (-0.020, -0.025), (-0.027, -0.022), (-0.038, -0.022)];
    for (x, y) in eye {
        l.push(Point2::new(x, y));
    }
    for (x, y) in [(0.020, -0.025), (0.027, -0.029), (0.038, -0.029), (0.045, -0.025), (0.038, -0.022), (0.027, -0.022)] {
        l.push(Point2::new(x, y));
    }
    for k in 0..12 {
        let th = std::f64::consts::PI - k as f64 * std::f64::consts::PI / 6.0;
        l.push(Point2::new(0.025 * th.cos(), 0.045 - 0.010 * th.sin()));
    }
    for k in 0..6 {
        let th = std::f64::consts::PI - k as f64 * std::f64::consts::PI / 3.0;
        l.push(Point2::new(0.015 * th.cos(), 0.045 - 0.004 * th.sin()));
    }
    debug_assert_eq!(l.len(), LANDMARK_COUNT);
    l
}

/// Pinhole camera shared by the synthetic video and clouds.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn for_frame(width: usize, height: usize) -> Self {
        Camera {
            focal: 2.2 * width.min(height) as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn project(&self, p: &Point3<f64>) -> Point2<f64> {
        Point2::new(self.cx + self.focal * p.x / p.z, self.cy + self.focal * p.y / p.z)
    }
}

/// Deterministic per-sample stream.
fn sample_rng(seed: u64, subject: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 32) | sample as u64);
    rng
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// Expression intensity per frame: 0 up to onset, 1 at apex, back down to
/// 0.3 at offset.
fn intensity(t: usize, onset: usize, apex: usize, offset: usize) -> f64 {
    if t <= onset {
        0.0
    } else if t <= apex {
        (t - onset) as f64 / (apex - onset) as f64
    } else if t <= offset {
        1.0 - 0.7 * (t - apex) as f64 / (offset - apex).max(1) as f64
    } else {
        0.3
    }
}

struct Generated {
    record: SampleRecord,
    data: SampleData,
}

fn generate_sample(spec: &SynthSpec, subject: usize, sample: usize, rules: &LabelRules<ObjectiveLabel>, nrules: &LabelRules<NonObjectiveLabel>) -> Result<Generated> {
    let class = sample % spec.classes;
    let family = CLASS_FAMILIES[class];
    let mut subj_rng = sample_rng(spec.seed, subject, usize::MAX >> 32);
    let mut rng = sample_rng(spec.seed, subject, sample);

    // subject identity: face shape and background texture
    let base = FaceProxy::default();
    let scale = |r: &mut ChaCha8Rng| 1.0 + r.random_range(-0.06..0.06);
    let (a, b, c) = base.semi_axes;
    let (sa, sb, sc) = (scale(&mut subj_rng), scale(&mut subj_rng), scale(&mut subj_rng));
    let mut face = FaceProxy {
        semi_axes: (a * sa, b * sb, c * sc),
        ..base.clone()
    };
    face.bumps[0].amplitude *= scale(&mut subj_rng);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                subj_rng.random_range(0.02..0.12),
                subj_rng.random_range(0.0..std::f64::consts::TAU),
                subj_rng.random_range(0.0..std::f64::consts::TAU),
                subj_rng.random_range(4.0..10.0),
            )
        })
        .collect();
    let template: Vec<Point2<f64>> = landmark_template()
        .into_iter()
        .map(|p| Point2::new(p.x * sa, p.y * sb))
        .collect();

    let t_total = spec.frames;
    let (onset, apex, offset) = (1, t_total / 2, t_total - 1);
    let amp = rng.random_range(0.7..1.3);
    let with_3d = spec.signal != SignalMode::TwoD;
    let with_2d = spec.signal != SignalMode::ThreeD;
    let cam = Camera::for_frame(spec.width, spec.height);
    let n_out = (spec.cloud_points as f64 * spec.outlier_fraction).round() as usize;
    let n_surf = spec.cloud_points - n_out;
    let motion = spec.head_motion * 0.01;
    let pivot = face.center;

    let mut clouds = Vec::with_capacity(t_total);
    let mut lm3 = Vec::with_capacity(t_total);
    let mut lm2 = Vec::with_capacity(t_total);
    let mut frames = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let level = intensity(t, onset, apex, offset);
        let mut f = face.clone();
        if with_3d && level > 0.0 {
            let sites = if family.sites[0] == family.sites[1] { &family.sites[..1] } else { &family.sites[..] };
            for &(x, y, sgn) in sites {
                f.bumps.push(Bump::round(x * sa, y * sb, sgn * spec.amplitude_3d * amp * level, DEFORMATION_SIGMA));
            }
        }
        let head = if t == 0 {
            RigidTransform::identity()
        } else {
            let axis = Vector3::new(gauss(&mut rng, 1.0), gauss(&mut rng, 1.0), gauss(&mut rng, 1.0));
            let shift = Vector3::new(gauss(&mut rng, motion), gauss(&mut rng, motion), gauss(&mut rng, motion));
            let rot = RigidTransform::from_axis_angle(axis, gauss(&mut rng, motion), Vector3::zeros()).rotation;
            // rotate about the face center, then shift
            RigidTransform {
                rotation: rot,
                translation: pivot.coords - rot * pivot.coords + shift,
            }
        };
        let surf = make_surface(SurfaceKind::FaceProxy, &SurfaceParams::face(f.clone()), n_surf, spec.noise_3d, rng.random())?;
        let mut pts: Vec<Point3<f64>> = surf.cloud.points;
        for _ in 0..n_out {
            let base = pts[rng.random_range(0..n_surf)];
            let off = Vector3::new(gauss(&mut rng, 1.0), gauss(&mut rng, 1.0), gauss(&mut rng, 1.0)).normalize()
                * rng.random_range(0.01..0.03);
            pts.push(base + off);
        }
        let pts: Vec<Point3<f64>> = pts.iter().map(|p| head.apply(p)).collect();
        clouds.push(PointCloudFrame::new(pts)?);
        let l3: Vec<Point3<f64>> = template.iter().map(|p| head.apply(&f.surface_point(p.x, p.y))).collect();
        lm2.push(l3.iter().map(|p| cam.project(p)).collect::<Vec<_>>());
        lm3.push(l3);

        // video frame: subject texture, face disc, optional class patch, noise
        let site = family.sites[0];
        let site_px = cam.project(&head.apply(&f.surface_point(site.0 * sa, site.1 * sb)));
        let face_px = cam.project(&head.apply(&f.surface_point(0.0, 0.0)));
        let (fa, fb) = (cam.focal * face.semi_axes.0 / face.center.z, cam.focal * face.semi_axes.1 / face.center.z);
        let phase = 2.0 * std::f64::consts::PI * level * 0.75;
        let (co, si) = (family.orientation.cos(), family.orientation.sin());
        let mut img = Vec::with_capacity(spec.width * spec.height);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (xf, yf) = (x as f64, y as f64);
                let mut g = 90.0;
                for &(freq, dir, ph, amp_w) in &waves {
                    g += amp_w * (freq * (xf * dir.cos() + yf * dir.sin()) + ph).sin();
                }
                let (u, v) = ((xf - face_px.x) / fa, (yf - face_px.y) / fb);
                if u * u + v * v <= 1.0 {
                    g += 50.0 * (1.0 - u * u - v * v).sqrt();
                }
                if with_2d && level > 0.0 {
                    let (dx, dy) = (xf - site_px.x, yf - site_px.y);
                    let env = (-(dx * dx + dy * dy) / (2.0 * 6.0 * 6.0)).exp();
                    let carrier = (2.0 * std::f64::consts::PI * (dx * co + dy * si) / 6.0 + phase).cos();
                    g += spec.amplitude_2d * amp * level * env * carrier;
                }
                if spec.noise_2d > 0.0 {
                    g += gauss(&mut rng, spec.noise_2d);
                }
                img.push(g.round().clamp(0.0, 255.0) as u8);
            }
        }
        frames.push(img);
    }
    let aus = parse_aus(family.aus)?;
    let record = SampleRecord {
        subject_id: format!("s{:02}", subject + 1),
        sample_id: format!("m{:02}", sample + 1),
        onset,
        apex,
        offset,
        objective_label: rules.classify(&aus),
        nonobjective_label: nrules.classify(&aus),
        aus,
    };
    debug_assert!(validate_duration(&record, spec.frame_rate));
    let data = SampleData {
        video: FrameVolume::from_frames(spec.height, spec.width, frames)?,
        clouds,
        landmarks2d: lm2,
        landmarks3d: lm3,
        frame_rate: spec.frame_rate,
    };
    Ok(Generated { record, data })
}

/// Builds the dataset; identical specs give identical output.
pub fn make_dataset(spec: &SynthSpec) -> Result<(Vec<SampleRecord>, Vec<SampleData>)> {
    spec.validate()?;
    let rules = LabelRules::<ObjectiveLabel>::default();
    let nrules = LabelRules::<NonObjectiveLabel>::default();
    let jobs: Vec<(usize, usize)> = (0..spec.n_subjects)
        .flat_map(|s| (0..spec.samples_per_subject).map(move |k| (s, k)))
        .collect();
    let out: Vec<Generated> = jobs
        .par_iter()
        .map(|&(s, k)| generate_sample(spec, s, k, &rules, &nrules))
        .collect::<Result<_>>()?;
    for g in &out {
        if !validate_duration(&g.record, spec.frame_rate) {
            return Err(Error::Config(format!(
                "{} frames at {} fps exceed the micro-expression duration limits",
                spec.frames, spec.frame_rate
            )));
        }
    }
    Ok(out.into_iter().map(|g| (g.record, g.data)).unzip())
}
