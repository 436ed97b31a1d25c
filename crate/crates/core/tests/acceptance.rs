//! Acceptance criteria. Each test prints one PASS/FAIL line straight to
//! stderr, so the lines show up even when output capture is on.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mex3d::cloud::RigidTransform;
use mex3d::config::RunConfig;
use mex3d::curvature::{hk_classify, quantize_si, shape_index, CurvatureEstimator, PrincipalCurvatures, SurfaceType};
use mex3d::dataset::{coder_reliability, parse_aus, AuSet, NonObjectiveLabel, ObjectiveLabel, SampleRecord};
use mex3d::feature::FeatureKind;
use mex3d::lbptop::{lbp_top_histogram, LbpTopConfig, RADIUS_GRID};
use mex3d::learn::{
    fuse, kfold_eval, loso_split, metrics, stratified_kfold, ClassDistribution, LogisticRegression, Protocol,
};
use mex3d::pipeline::{cmd_synth, run_all};
use mex3d::preprocess3d::{icp_align, IcpConfig};
use mex3d::synth::{make_surface, SignalMode, SurfaceKind, SurfaceParams, SynthSpec};
use mex3d::volume::FrameVolume;

fn report(n: u32, title: &str, ok: bool, detail: &str) {
    let line = format!(
        "{} criterion {n:>2}: {title} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn within(start: Instant, limit_s: u64) -> (bool, String) {
    let e = start.elapsed();
    (e <= Duration::from_secs(limit_s), format!("{:.1}s of {limit_s}s", e.as_secs_f64()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- LBP oracle

/// Plain bilinear read of `img(x, y)` on a `w × h` grid.
fn interp(img: &dyn Fn(usize, usize) -> f64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as usize, y0 as usize);
    let v00 = img(xi, yi);
    let v10 = if fx > 0.0 { img(xi + 1, yi) } else { 0.0 };
    let v01 = if fy > 0.0 { img(xi, yi + 1) } else { 0.0 };
    let v11 = if fx > 0.0 && fy > 0.0 { img(xi + 1, yi + 1) } else { 0.0 };
    (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 + (1.0 - fx) * fy * v01 + fx * fy * v11
}

/// Code of the point `(u, v)` of a plane image with `p` neighbours on an
/// ellipse with horizontal radius `ru` and vertical radius `rv`.
fn oracle_code(img: &dyn Fn(usize, usize) -> f64, u: usize, v: usize, p: usize, ru: f64, rv: f64) -> usize {
    let c = img(u, v);
    let mut code = 0;
    for i in 0..p {
        let ang = 2.0 * PI * i as f64 / p as f64;
        let du = (ru * ang.cos() * 1e6).round() / 1e6;
        let dv = (-rv * ang.sin() * 1e6).round() / 1e6;
        if interp(img, u as f64 + du, v as f64 + dv) - c >= -1e-6 {
            code |= 1 << i;
        }
    }
    code
}

fn oracle_blocks(len: usize, n: usize, overlap: usize) -> Vec<(usize, usize)> {
    let size = (len + (n - 1) * overlap) / n;
    (0..n)
        .map(|i| {
            let s = i * (size - overlap);
            (s, if i == n - 1 { len } else { s + size })
        })
        .collect()
}

fn oracle_lbp_top(vol: &FrameVolume, radii: (usize, usize, usize), blocks: (usize, usize)) -> Vec<f64> {
    let (rx, ry, rt) = radii;
    let (w, h, t) = (vol.width(), vol.height(), vol.frames());
    let mut out = Vec::new();
    for &(ya, yb) in &oracle_blocks(h, blocks.1, 0) {
        for &(xa, xb) in &oracle_blocks(w, blocks.0, 0) {
            let mut hist = vec![vec![0usize; 256]; 3];
            let mut n = 0usize;
            for tc in rt..t - rt {
                for yc in ya.max(ry)..yb.min(h - ry) {
                    for xc in xa.max(rx)..xb.min(w - rx) {
                        let xy = |a: usize, b: usize| vol.get(tc, b, a) as f64;
                        let xt = |a: usize, b: usize| vol.get(b, yc, a) as f64;
                        let yt = |a: usize, b: usize| vol.get(b, a, xc) as f64;
                        hist[0][oracle_code(&xy, xc, yc, 8, rx as f64, ry as f64)] += 1;
                        hist[1][oracle_code(&xt, xc, tc, 8, rx as f64, rt as f64)] += 1;
                        hist[2][oracle_code(&yt, yc, tc, 8, ry as f64, rt as f64)] += 1;
                        n += 1;
                    }
                }
            }
            out.extend(hist.into_iter().flatten().map(|c| c as f64 / n as f64));
        }
    }
    out
}

#[test]
fn c01_lbp_matches_brute_force_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut compared = 0;
    let mut mismatches = 0;
    for _ in 0..20 {
        let data: Vec<u8> = (0..16 * 32 * 32).map(|_| rng.random()).collect();
        let vol = FrameVolume::new(16, 32, 32, data).unwrap();
        for radii in RADIUS_GRID {
            for blocks in [(2, 2), (5, 5)] {
                let cfg = LbpTopConfig {
                    radii,
                    blocks,
                    ..LbpTopConfig::default()
                };
                let got = lbp_top_histogram(&vol, &cfg).unwrap().values;
                if got != oracle_lbp_top(&vol, radii, blocks) {
                    mismatches += 1;
                }
                compared += 1;
            }
        }
    }
    let (fast, t) = within(start, 30);
    report(
        1,
        "LBP-TOP equals brute-force oracle",
        mismatches == 0 && compared == 480 && fast,
        &format!("{mismatches} of {compared} configurations differ; {t}"),
    );
}

// ---------------------------------------------------------- curvature oracles

/// Curvatures with the convention that normals face the viewpoint and a
/// surface bending toward its normal is positive.
fn estimates(cloud: &mex3d::cloud::PointCloudFrame, view: Point3<f64>, stride: usize) -> Vec<(Point3<f64>, PrincipalCurvatures)> {
    let est = CurvatureEstimator::new(cloud, 0.015, view);
    cloud
        .points
        .iter()
        .step_by(stride)
        .filter_map(|p| est.estimate_at(p).ok().map(|c| (*p, c)))
        .collect()
}

#[test]
fn c02_curvature_matches_analytic_surfaces() {
    let start = Instant::now();
    let origin = Point3::origin();
    let r = 0.05;
    let c = Point3::new(0.0, 0.0, 0.5);
    let sphere = make_surface(SurfaceKind::Sphere, &SurfaceParams::sphere(r, c), 5000, 0.0, 3).unwrap().cloud;
    let (mut h_err, mut k_err) = (Vec::new(), Vec::new());
    for (p, pc) in estimates(&sphere, origin, 5) {
        // facing the viewer the sphere bends away from the normal
        let s = if (p - c).dot(&(origin - p)) > 0.0 { -1.0 } else { 1.0 };
        let (h, k) = ((pc.p_min + pc.p_max) / 2.0, pc.p_min * pc.p_max);
        h_err.push((h - s / r).abs() / (1.0 / r));
        k_err.push((k - 1.0 / (r * r)).abs() / (1.0 / (r * r)));
    }
    let (h_med, k_med) = (median(h_err), median(k_err));

    let plane = make_surface(SurfaceKind::Plane, &SurfaceParams::plane(0.1, c), 5000, 0.0, 4).unwrap().cloud;
    let plane_h = estimates(&plane, origin, 5)
        .iter()
        .map(|(_, pc)| ((pc.p_min + pc.p_max) / 2.0).abs())
        .fold(0.0, f64::max);

    let rc = 0.04;
    let cyl = make_surface(SurfaceKind::Cylinder, &SurfaceParams::cylinder(rc, 0.1, c), 5000, 0.0, 5).unwrap().cloud;
    let (mut curved, mut flat) = (Vec::new(), Vec::new());
    for (p, pc) in estimates(&cyl, origin, 5) {
        let radial = Vector3::new(p.x - c.x, 0.0, p.z - c.z);
        let facing = radial.dot(&(origin - p)) > 0.0;
        // (curved, flat) direction estimates
        let (kc, kf) = if facing { (pc.p_min, pc.p_max) } else { (pc.p_max, pc.p_min) };
        let want = if facing { -1.0 / rc } else { 1.0 / rc };
        curved.push((kc - want).abs() * rc);
        flat.push(kf.abs());
    }
    let (cyl_curved, cyl_flat) = (median(curved), median(flat));
    let (fast, t) = within(start, 60);
    report(
        2,
        "curvature oracle accuracy",
        h_med <= 0.10 && k_med <= 0.20 && plane_h <= 0.5 && cyl_curved <= 0.10 && cyl_flat <= 0.5 && fast,
        &format!(
            "sphere median rel. err H {h_med:.4}, K {k_med:.4}; plane max |H| {plane_h:.2e}; \
             cylinder median rel. err {cyl_curved:.4}, flat |k| {cyl_flat:.3}; {t}"
        ),
    );
}

#[test]
fn c03_curvature_rotation_invariance() {
    let start = Instant::now();
    let c = Point3::new(0.0, 0.0, 0.5);
    let sphere = make_surface(SurfaceKind::Sphere, &SurfaceParams::sphere(0.05, c), 5000, 0.0, 6).unwrap().cloud;
    let origin = Point3::origin();
    let base = estimates(&sphere, origin, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let shift = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let t = RigidTransform::from_axis_angle(axis, rng.random_range(0.0..PI), shift);
        let moved = sphere.transformed(&t);
        let est = CurvatureEstimator::new(&moved, 0.015, t.apply(&origin));
        let rel: Vec<f64> = base
            .iter()
            .filter_map(|(p, pc)| {
                let q = est.estimate_at(&t.apply(p)).ok()?;
                Some(
                    ((q.p_min - pc.p_min).abs() + (q.p_max - pc.p_max).abs()) / (pc.p_min.abs() + pc.p_max.abs()),
                )
            })
            .collect();
        worst = worst.max(median(rel));
    }
    let (fast, t) = within(start, 60);
    report(
        3,
        "rotation invariance of curvature estimates",
        worst <= 0.01 && fast,
        &format!("worst median relative change {worst:.2e} over 10 rotations; {t}"),
    );
}

// ------------------------------------------------------------- exact tables

#[test]
fn c04_hk_table_exhaustive() {
    use SurfaceType::*;
    // (sign K, sign H) -> type, one row per sign combination
    let table = [
        ((1.0, 1.0), Peak),
        ((0.0, 1.0), Ridge),
        ((-1.0, 1.0), SaddleRidge),
        ((1.0, 0.0), Undefined),
        ((0.0, 0.0), Flat),
        ((-1.0, 0.0), MinimalSurface),
        ((1.0, -1.0), Pit),
        ((0.0, -1.0), Valley),
        ((-1.0, -1.0), SaddleValley),
    ];
    let got: Vec<SurfaceType> = table.iter().map(|&((k, h), _)| hk_classify(k, h, 0.5)).collect();
    let want: Vec<SurfaceType> = table.iter().map(|&(_, s)| s).collect();
    let distinct: BTreeSet<String> = got.iter().map(|s| format!("{s:?}")).collect();
    report(
        4,
        "HK surface table over the 3x3 sign grid",
        got == want && distinct.len() == 9,
        &format!("{} of 9 rows match", got.iter().zip(&want).filter(|(a, b)| a == b).count()),
    );
}

#[test]
fn c05_shape_index_spot_values() {
    let si = |a: f64, b: f64| shape_index(PrincipalCurvatures::new(a, b));
    let spots = [(si(-1.0, 1.0), 0.5), (si(0.0, 1.0), 0.25), (si(-1.0, 0.0), 0.75)];
    let spot_ok = spots.iter().all(|(got, want)| (got - want).abs() <= 1e-12);
    let bins: Vec<usize> = (0..9).map(|i| quantize_si(i as f64 / 8.0).unwrap()).collect();
    report(
        5,
        "shape index spot values and bin centers",
        spot_ok && bins == (0..9).collect::<Vec<_>>(),
        &format!("spots {:?}, bins {bins:?}", spots.iter().map(|s| s.0).collect::<Vec<_>>()),
    );
}

#[test]
fn c06_fusion_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut simplex = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 1e-9).collect();
        let s: f64 = v.iter().sum();
        ClassDistribution::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    };
    let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];
    let (mut endpoints, mut worst) = (true, 0.0f64);
    for i in 0..1000 {
        let n = 2 + i % 4;
        let (p, q) = (simplex(n), simplex(n));
        endpoints &= fuse(&p, &q, 0.0).unwrap() == p && fuse(&p, &q, 1.0).unwrap() == q;
        for a in grid {
            let f = fuse(&p, &q, a).unwrap();
            worst = worst.max((f.probs().iter().sum::<f64>() - 1.0).abs());
            if f.probs().iter().any(|v| *v < 0.0) {
                worst = f64::INFINITY;
            }
        }
    }
    report(
        6,
        "fusion endpoints and simplex closure",
        endpoints && worst <= 1e-9,
        &format!("endpoints exact: {endpoints}; worst mass error {worst:.1e}"),
    );
}

#[test]
fn c07_reliability_examples() {
    let r = |a: &str, b: &str| coder_reliability(&parse_aus(a).unwrap(), &parse_aus(b).unwrap()).unwrap();
    let got = [r("1+2", "1+2"), r("4", "4+7"), r("4", "9")];
    let ok = got[0] == 1.0 && got[1] == 2.0 / 3.0 && got[2] == 0.0;
    let empty = coder_reliability(&AuSet::new(), &AuSet::new()).is_err();
    report(
        7,
        "coder reliability examples",
        ok && empty,
        &format!("{got:?}; both-empty rejected: {empty}"),
    );
}

// ------------------------------------------------------------- CV hygiene

fn index_22_subjects(rng: &mut ChaCha8Rng) -> (Vec<SampleRecord>, Vec<usize>) {
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for s in 0..22 {
        for m in 0..(1 + (s * 7) % 6) {
            records.push(SampleRecord {
                subject_id: format!("sub{s:02}"),
                sample_id: format!("ep{m}"),
                onset: 0,
                apex: 2,
                offset: 5,
                aus: AuSet::new(),
                objective_label: ObjectiveLabel::Others,
                nonobjective_label: NonObjectiveLabel::Others,
            });
            labels.push(rng.random_range(0..3));
        }
    }
    (records, labels)
}

#[test]
fn c08_cv_hygiene() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (records, labels) = index_22_subjects(&mut rng);
    let n = records.len();
    let folds = loso_split(&records).unwrap();
    let mut problems = Vec::new();
    if folds.len() != 22 {
        problems.push(format!("{} LOSO folds", folds.len()));
    }
    let mut tested = vec![0usize; n];
    for f in &folds {
        let test_subjects: BTreeSet<&str> = f.test.iter().map(|&i| records[i].subject_id.as_str()).collect();
        let train_subjects: BTreeSet<&str> = f.train.iter().map(|&i| records[i].subject_id.as_str()).collect();
        if test_subjects.len() != 1 || !test_subjects.is_disjoint(&train_subjects) {
            problems.push(format!("fold {} mixes subjects", f.name));
        }
        let whole: BTreeSet<usize> = f.train.iter().chain(&f.test).copied().collect();
        if whole.len() != n || f.train.len() + f.test.len() != n {
            problems.push(format!("fold {} is not a partition", f.name));
        }
        let s = *test_subjects.iter().next().unwrap();
        if f.test.len() != records.iter().filter(|r| r.subject_id == s).count() {
            problems.push(format!("fold {} misses samples of {s}", f.name));
        }
        f.test.iter().for_each(|&i| tested[i] += 1);
    }
    if tested.iter().any(|&c| c != 1) {
        problems.push("a sample is not tested exactly once".into());
    }

    let a = stratified_kfold(&labels, 10, 5).unwrap();
    if a != stratified_kfold(&labels, 10, 5).unwrap() {
        problems.push("k-fold split not reproducible".into());
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..6).map(|d| ((i * 31 + d * 17) % 13) as f64 + labels[i] as f64).collect()).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let learner = LogisticRegression::default();
    let r1 = kfold_eval(&learner, &refs, &labels, 3, 10, 3, 42).unwrap();
    let r2 = kfold_eval(&learner, &refs, &labels, 3, 10, 3, 42).unwrap();
    if r1 != r2 {
        problems.push("k-fold evaluation not bit-reproducible".into());
    }
    let (fast, t) = within(start, 10);
    report(
        8,
        "LOSO disjointness and reproducible k-fold",
        problems.is_empty() && fast,
        &format!("{n} samples, 22 subjects; problems: {problems:?}; {t}"),
    );
}

// ------------------------------------------------------------- end to end

#[test]
fn c09_fusion_beats_2d_only() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        signal: SignalMode::ThreeD,
        seed: 2024,
        ..SynthSpec::default()
    };
    cmd_synth(&spec, &dir.path().join("data")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset_root = dir.path().join("data");
    cfg.work_dir = dir.path().join("work");
    cfg.protocol = Protocol::Loso;
    cfg.eval_features = vec![FeatureKind::Lbp2d];
    cfg.fuse_with = Some(FeatureKind::SiHk);
    cfg.fusion_sweep = true;
    let (rows, summary) = run_all(&cfg, &LogisticRegression { config: cfg.classifier }).unwrap();
    let two_d = rows.iter().find(|r| r.features == "2d").unwrap().result.accuracy;
    let fused = rows.iter().find(|r| r.features.starts_with("2d+")).unwrap();
    let gain = fused.result.accuracy - two_d;
    let (fast, t) = within(start, 300);
    report(
        9,
        "fused accuracy beats 2D-only under LOSO",
        gain >= 0.05 && summary.failures.is_empty() && fast,
        &format!(
            "2D {:.3}, fused {:.3} ({}), gain {:.1} pp, {} samples; {t}",
            two_d,
            fused.result.accuracy,
            fused.features,
            100.0 * gain,
            summary.total
        ),
    );
}

#[test]
fn c10_metrics_example() {
    // A = 0, B = 1
    let r = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    // F1(A) = 2·1·0.5/1.5, F1(B) = 2·(2/3)·1/(5/3)
    let f1 = (2.0 / 3.0 + 0.8) / 2.0;
    report(
        10,
        "accuracy and macro-F1 of the worked example",
        (r.accuracy - 0.75).abs() <= 1e-4 && (r.f1 - 0.7333).abs() <= 1e-4 && (r.f1 - f1).abs() <= 1e-12,
        &format!("accuracy {}, macro-F1 {:.6}", r.accuracy, r.f1),
    );
}

#[test]
fn c11_icp_recovers_rigid_motion() {
    let start = Instant::now();
    let moving = make_surface(SurfaceKind::FaceProxy, &SurfaceParams::face_proxy(), 4000, 0.0, 12).unwrap().cloud;
    let center = moving.centroid().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let (mut worst_angle, mut worst_shift) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..15f64.to_radians());
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let shift = dir.normalize() * rng.random_range(0.0..0.010);
        // rotation about the face centroid followed by the shift
        let rot = RigidTransform::from_axis_angle(axis, angle, Vector3::zeros());
        let truth = RigidTransform {
            rotation: rot.rotation,
            translation: center.coords - rot.rotation * center.coords + shift,
        };
        let fixed = moving.transformed(&truth);
        let r = icp_align(&moving, &fixed, &IcpConfig { max_iter: 200, tol: 1e-9 }).unwrap();
        worst_angle = worst_angle.max(r.transform.angle_to(&truth));
        worst_shift = worst_shift.max((r.transform.translation - truth.translation).norm());
    }
    let (fast, t) = within(start, 30);
    report(
        11,
        "ICP recovers a known rigid motion",
        worst_angle <= 1e-3 && worst_shift <= 1e-4 && fast,
        &format!("worst rotation error {worst_angle:.2e} rad, translation error {:.2e} mm; {t}", worst_shift * 1e3),
    );
}
