//! Point-cloud cleaning, nose-tip localisation, face cropping and rigid
//! registration of a cloud sequence onto its first frame.

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::cloud::{PointCloudFrame, RigidTransform, SpatialGrid, MIN_GEOMETRY_POINTS};
use crate::error::{Error, Result};

/// Statistical outlier removal parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub k: usize,
    pub sigma_mult: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig { k: 8, sigma_mult: 2.0 }
    }
}

/// Drops points whose mean distance to their `k` nearest neighbours exceeds
/// `μ + sigma_mult·σ` of that statistic over the cloud. Order is preserved.
pub fn denoise(frame: &PointCloudFrame, config: &DenoiseConfig) -> Result<PointCloudFrame> {
    frame.require(config.k + 1)?;
    let grid = SpatialGrid::auto(&frame.points);
    let mean_d: Vec<f64> = (0..frame.len())
        .into_par_iter()
        .map(|i| {
            let nn = grid.k_nearest(&frame.points[i], config.k, Some(i));
            nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64
        })
        .collect();
    let n = mean_d.len() as f64;
    let mu = mean_d.iter().sum::<f64>() / n;
    let sigma = (mean_d.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mu + config.sigma_mult * sigma;
    let keep: Vec<usize> = (0..frame.len()).filter(|&i| mean_d[i] <= limit).collect();
    Ok(frame.select(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoseTipConfig {
    /// Depth of the extremal slab, meters.
    pub slab: f64,
    /// Neighbourhood radius for the speckle test, meters.
    pub support_radius: f64,
    /// Minimum neighbours within `support_radius` for a point to count.
    pub min_support: usize,
    /// The tip is the minimum-z point when the sensor looks along +z.
    pub tip_is_min_z: bool,
}

impl Default for NoseTipConfig {
    fn default() -> Self {
        NoseTipConfig {
            slab: 0.002,
            support_radius: 0.005,
            min_support: 5,
            tip_is_min_z: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoseTip {
    pub point: Point3<f64>,
    /// Set when no clear extremum exists (flat cloud, or every point failed
    /// the speckle test).
    pub degenerate: bool,
}

/// Robust depth extremum: among points with enough close neighbours, take
/// the slab nearest the sensor and return the actual point closest to the
/// slab centroid.
pub fn find_nose_tip(frame: &PointCloudFrame, config: &NoseTipConfig) -> Result<NoseTip> {
    if frame.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let grid = SpatialGrid::auto(&frame.points);
    let mut supported: Vec<usize> = (0..frame.len())
        .into_par_iter()
        .filter(|&i| grid.within(&frame.points[i], config.support_radius).len() > config.min_support)
        .collect();
    let mut degenerate = false;
    if supported.is_empty() {
        supported = (0..frame.len()).collect();
        degenerate = true;
    }
    let depth = |i: usize| {
        let z = frame.points[i].z;
        if config.tip_is_min_z {
            z
        } else {
            -z
        }
    };
    let extreme = supported.iter().map(|&i| depth(i)).fold(f64::INFINITY, f64::min);
    let slab: Vec<usize> = supported
        .iter()
        .copied()
        .filter(|&i| depth(i) - extreme <= config.slab)
        .collect();
    if slab.len() * 2 > supported.len() && supported.len() > 1 {
        degenerate = true;
    }
    let centroid: Vector3<f64> =
        slab.iter().map(|&i| frame.points[i].coords).sum::<Vector3<f64>>() / slab.len() as f64;
    let best = slab
        .iter()
        .copied()
        .min_by(|&a, &b| {
            (frame.points[a].coords - centroid)
                .norm_squared()
                .total_cmp(&(frame.points[b].coords - centroid).norm_squared())
                .then(a.cmp(&b))
        })
        .unwrap();
    Ok(NoseTip {
        point: frame.points[best],
        degenerate,
    })
}

/// Points within `radius` of `center` (inclusive), order preserved.
pub fn spherical_crop(frame: &PointCloudFrame, center: &Point3<f64>, radius: f64) -> PointCloudFrame {
    let r2 = radius * radius;
    let keep: Vec<usize> = (0..frame.len())
        .filter(|&i| (frame.points[i] - center).norm_squared() <= r2)
        .collect();
    frame.select(&keep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop when the mean closest-point distance changes by less than this,
    /// meters.
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iter: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps `moving` onto `fixed`.
    pub transform: RigidTransform,
    /// Mean closest-point distance after alignment, meters.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// RMS closest-point distance before each update, then after the last.
    /// Non-increasing.
    pub rms_history: Vec<f64>,
}

struct Matching {
    targets: Vec<Point3<f64>>,
    mean: f64,
    rms: f64,
}

fn match_points(grid: &SpatialGrid<'_>, moved: &[Point3<f64>]) -> Matching {
    let pairs: Vec<(Point3<f64>, f64)> = moved
        .par_iter()
        .map(|p| {
            let (j, d) = grid.nearest(p).expect("fixed cloud is non-empty");
            (grid.points()[j], d)
        })
        .collect();
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|(_, d)| d).sum::<f64>() / n;
    let rms = (pairs.iter().map(|(_, d)| d * d).sum::<f64>() / n).sqrt();
    Matching {
        targets: pairs.into_iter().map(|(q, _)| q).collect(),
        mean,
        rms,
    }
}

/// Least-squares rigid motion taking `src[i]` to `dst[i]` (Kabsch).
pub fn fit_rigid(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p.coords - cs) * (q.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("cross-covariance SVD failed".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform {
        rotation: r,
        translation: cd - r * cs,
    })
}

/// Point-to-point ICP of `moving` onto `fixed`. Without convergence within
/// `max_iter`, the lowest-error transform seen is returned with
/// `converged = false`.
pub fn icp_align(moving: &PointCloudFrame, fixed: &PointCloudFrame, config: &IcpConfig) -> Result<IcpResult> {
    moving.require(MIN_GEOMETRY_POINTS)?;
    fixed.require(MIN_GEOMETRY_POINTS)?;
    let grid = SpatialGrid::auto(&fixed.points);

    let mut transform = RigidTransform::identity();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, transform, f64::INFINITY);
    let mut prev_mean: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_mean;

    loop {
        let moved: Vec<Point3<f64>> = moving.points.iter().map(|p| transform.apply(p)).collect();
        let m = match_points(&grid, &moved);
        history.push(m.rms);
        last_mean = m.mean;
        if m.rms < best.0 {
            best = (m.rms, transform, m.mean);
        }
        if let Some(p) = prev_mean {
            if (p - m.mean).abs() < config.tol {
                converged = true;
            }
        }
        if converged || iterations == config.max_iter || m.rms == 0.0 {
            converged |= m.rms == 0.0;
            break;
        }
        prev_mean = Some(m.mean);
        let step = fit_rigid(&moved, &m.targets)?;
        transform = step.compose(&transform);
        iterations += 1;
    }

    let (transform, residual) = if converged {
        (transform, last_mean)
    } else {
        (best.1, best.2)
    };
    Ok(IcpResult {
        transform,
        residual,
        converged,
        iterations,
        rms_history: history,
    })
}

/// Aligned sequence with per-frame transforms onto frame 0.
#[derive(Debug, Clone)]
pub struct Registration {
    pub clouds: Vec<PointCloudFrame>,
    pub landmarks: Vec<Vec<Point3<f64>>>,
    pub transforms: Vec<RigidTransform>,
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
}

/// Registers every frame onto frame 0 and moves that frame's landmarks with
/// the same transform. `landmarks3d` may be empty.
pub fn register_sequence(
    clouds: &[PointCloudFrame],
    landmarks3d: &[Vec<Point3<f64>>],
    config: &IcpConfig,
) -> Result<Registration> {
    if clouds.len() < 2 {
        return Err(Error::Validation(format!(
            "registration needs at least 2 frames, got {}",
            clouds.len()
        )));
    }
    if !landmarks3d.is_empty() && landmarks3d.len() != clouds.len() {
        return Err(Error::DimensionMismatch {
            expected: clouds.len(),
            got: landmarks3d.len(),
        });
    }
    let fixed = &clouds[0];
    let results: Vec<IcpResult> = clouds[1..]
        .par_iter()
        .map(|c| icp_align(c, fixed, config))
        .collect::<Result<_>>()?;

    let mut transforms = vec![RigidTransform::identity()];
    let mut residuals = vec![0.0];
    let mut converged = vec![true];
    for r in &results {
        if !r.converged {
            log::warn!("ICP did not converge in {} iterations (residual {:.3e} m)", r.iterations, r.residual);
        }
        transforms.push(r.transform);
        residuals.push(r.residual);
        converged.push(r.converged);
    }
    let aligned = clouds
        .iter()
        .zip(&transforms)
        .map(|(c, t)| c.transformed(t))
        .collect();
    let landmarks = landmarks3d
        .iter()
        .zip(&transforms)
        .map(|(l, t)| l.iter().map(|p| t.apply(p)).collect())
        .collect();
    Ok(Registration {
        clouds: aligned,
        landmarks,
        transforms,
        residuals,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess3dConfig {
    pub denoise: DenoiseConfig,
    pub nose: NoseTipConfig,
    /// Face sphere radius around the nose tip, meters.
    pub crop_radius: f64,
    pub icp: IcpConfig,
}

impl Default for Preprocess3dConfig {
    fn default() -> Self {
        Preprocess3dConfig {
            denoise: DenoiseConfig::default(),
            nose: NoseTipConfig::default(),
            crop_radius: 0.1,
            icp: IcpConfig::default(),
        }
    }
}

/// Denoise, crop around the nose tip, and register a whole sequence.
pub fn preprocess_sequence(
    clouds: &[PointCloudFrame],
    landmarks3d: &[Vec<Point3<f64>>],
    config: &Preprocess3dConfig,
) -> Result<Registration> {
    let cropped: Vec<PointCloudFrame> = clouds
        .par_iter()
        .map(|c| {
            let clean = denoise(c, &config.denoise)?;
            let tip = find_nose_tip(&clean, &config.nose)?;
            if tip.degenerate {
                log::warn!("nose tip ambiguous at ({:.4}, {:.4}, {:.4})", tip.point.x, tip.point.y, tip.point.z);
            }
            Ok(spherical_crop(&clean, &tip.point, config.crop_radius))
        })
        .collect::<Result<_>>()?;
    register_sequence(&cropped, landmarks3d, &config.icp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_surface, SurfaceKind, SurfaceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(n: usize, seed: u64) -> PointCloudFrame {
        make_surface(SurfaceKind::Sphere, &SurfaceParams::sphere(0.05, Point3::new(0.0, 0.0, 0.5)), n, 0.0, seed)
            .unwrap()
            .cloud
    }

    fn face(n: usize, seed: u64) -> PointCloudFrame {
        make_surface(SurfaceKind::FaceProxy, &SurfaceParams::face_proxy(), n, 0.0, seed)
            .unwrap()
            .cloud
    }

    #[test]
    fn denoise_keeps_clean_sphere() {
        let c = sphere(2000, 7);
        let out = denoise(&c, &DenoiseConfig::default()).unwrap();
        let kept = out.len() as f64 / c.len() as f64;
        assert!(kept >= 0.99, "kept {kept}");
    }

    #[test]
    fn denoise_drops_far_outliers() {
        let mut c = sphere(2000, 8);
        let center = Point3::new(0.0, 0.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut outliers = Vec::new();
        for _ in 0..20 {
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            outliers.push(center + d * 0.5);
        }
        c.points.extend(outliers.iter().copied());
        let out = denoise(&c, &DenoiseConfig::default()).unwrap();
        for o in &outliers {
            assert!(!out.points.contains(o));
        }
        // output is a subset of the input
        assert!(out.points.iter().all(|p| c.points.contains(p)));
    }

    #[test]
    fn denoise_needs_k_plus_one_points() {
        assert!(denoise(&PointCloudFrame::default(), &DenoiseConfig::default()).is_err());
        let c = PointCloudFrame::new(vec![Point3::origin(); 8]).unwrap();
        assert!(denoise(&c, &DenoiseConfig::default()).is_err());
    }

    #[test]
    fn nose_tip_on_face_proxy() {
        let c = face(20000, 3);
        let tip = find_nose_tip(&c, &NoseTipConfig::default()).unwrap();
        let truth = crate::synth::SurfaceParams::face_proxy().nose_tip();
        assert!((tip.point - truth).norm() < 0.005, "{:?} vs {:?}", tip.point, truth);
        assert!(!tip.degenerate);
    }

    #[test]
    fn nose_tip_ignores_isolated_outlier() {
        let mut c = face(20000, 4);
        let truth = SurfaceParams::face_proxy().nose_tip();
        c.points.push(truth - Vector3::new(0.0, 0.0, 0.05));
        let tip = find_nose_tip(&c, &NoseTipConfig::default()).unwrap();
        assert!((tip.point - truth).norm() < 0.005);
    }

    #[test]
    fn nose_tip_on_plane_is_flagged() {
        let c = make_surface(SurfaceKind::Plane, &SurfaceParams::plane(0.1, Point3::new(0.0, 0.0, 0.5)), 1000, 0.0, 1)
            .unwrap()
            .cloud;
        let tip = find_nose_tip(&c, &NoseTipConfig::default()).unwrap();
        assert!(tip.degenerate);
        assert!(c.points.contains(&tip.point));
        assert!(find_nose_tip(&PointCloudFrame::default(), &NoseTipConfig::default()).is_err());
    }

    #[test]
    fn spherical_crop_boundaries() {
        let c = PointCloudFrame::new(vec![
            Point3::new(0.099, 0.0, 0.0),
            Point3::new(0.101, 0.0, 0.0),
            Point3::new(0.0, 0.05, 0.0),
        ])
        .unwrap();
        let out = spherical_crop(&c, &Point3::origin(), 0.1);
        assert_eq!(out.points, vec![c.points[0], c.points[2]]);
        assert!(spherical_crop(&c, &Point3::new(5.0, 5.0, 5.0), 0.1).is_empty());
        assert_eq!(spherical_crop(&out, &Point3::origin(), 0.1), out);
    }

    #[test]
    fn icp_identity_for_identical_clouds() {
        let c = face(3000, 5);
        let r = icp_align(&c, &c, &IcpConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.residual < 1e-12);
        assert!(r.transform.angle() < 1e-9);
        assert!(r.transform.translation.norm() < 1e-9);
    }

    #[test]
    fn icp_recovers_known_motion() {
        let moving = face(4000, 6);
        let center = moving.centroid().unwrap();
        let rot = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, 0.2), 10f64.to_radians(), Vector3::zeros());
        // rotate about the centroid, then shift 5 mm
        let truth = RigidTransform {
            rotation: rot.rotation,
            translation: center.coords - rot.rotation * center.coords + Vector3::new(0.003, -0.004, 0.0),
        };
        let fixed = moving.transformed(&truth);
        let r = icp_align(&moving, &fixed, &IcpConfig { max_iter: 200, tol: 1e-9 }).unwrap();
        assert!(r.transform.angle_to(&truth) < 1e-3);
        assert!((r.transform.translation - truth.translation).norm() < 1e-4);
        for w in r.rms_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "rms increased: {:?}", w);
        }
    }

    #[test]
    fn icp_with_noise_has_small_residual() {
        let params = SurfaceParams::face_proxy();
        let moving = make_surface(SurfaceKind::FaceProxy, &params, 4000, 0.0005, 10).unwrap().cloud;
        let fixed_base = make_surface(SurfaceKind::FaceProxy, &params, 4000, 0.0005, 11).unwrap().cloud;
        let t = RigidTransform::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 2f64.to_radians(), Vector3::new(0.002, 0.0, 0.001));
        let fixed = fixed_base.transformed(&t);
        let r = icp_align(&moving, &fixed, &IcpConfig::default()).unwrap();
        assert!(r.residual <= 0.0015, "residual {}", r.residual);
    }

    #[test]
    fn icp_rejects_small_clouds() {
        let c = PointCloudFrame::new(vec![Point3::origin(); 10]).unwrap();
        assert!(icp_align(&c, &c, &IcpConfig::default()).is_err());
    }

    #[test]
    fn register_static_and_jittered_sequences() {
        let base = face(3000, 12);
        let lms: Vec<Point3<f64>> = base.points.iter().step_by(100).copied().collect();
        let stat = register_sequence(&[base.clone(), base.clone(), base.clone()], &[], &IcpConfig::default()).unwrap();
        for t in &stat.transforms {
            assert!(t.angle() < 1e-9 && t.translation.norm() < 1e-9);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut clouds = vec![base.clone()];
        let mut landmarks = vec![lms.clone()];
        for _ in 0..3 {
            let j = RigidTransform::from_axis_angle(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                rng.random_range(-1.0..1.0f64).to_radians(),
                Vector3::new(rng.random_range(-0.001..0.001), rng.random_range(-0.001..0.001), 0.0),
            );
            clouds.push(base.transformed(&j));
            landmarks.push(lms.iter().map(|p| j.apply(p)).collect());
        }
        let reg = register_sequence(&clouds, &landmarks, &IcpConfig::default()).unwrap();
        for (k, r) in reg.residuals.iter().enumerate() {
            assert!(*r < 0.001, "frame {k} residual {r}");
        }
        // landmarks move with their cloud: nearest-point distances unchanged
        for k in 1..clouds.len() {
            let before = SpatialGrid::auto(&clouds[k].points);
            let after = SpatialGrid::auto(&reg.clouds[k].points);
            for (a, b) in landmarks[k].iter().zip(&reg.landmarks[k]) {
                let d0 = before.nearest(a).unwrap().1;
                let d1 = after.nearest(b).unwrap().1;
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }
}
