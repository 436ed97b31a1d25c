//! Point clouds, rigid transforms and a uniform-grid spatial index.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Minimum cloud size accepted by the geometric operations.
pub const MIN_GEOMETRY_POINTS: usize = 50;

/// Unordered 3D points in meters, optionally with unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub points: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloudFrame {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation(format!("point {i} is not finite")));
        }
        Ok(PointCloudFrame {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: normals.len(),
            });
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::Validation(format!("normal {i} is not unit length")));
        }
        let mut c = Self::new(points)?;
        c.normals = Some(normals);
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the given index order, normals carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloudFrame {
        PointCloudFrame {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloudFrame {
        PointCloudFrame {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| t.rotation * v).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().map(|p| p.coords).sum();
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub(crate) fn require(&self, needed: usize) -> Result<()> {
        if self.points.len() < needed {
            return Err(Error::InsufficientPoints {
                needed,
                got: self.points.len(),
            });
        }
        Ok(())
    }
}

/// Proper rigid motion `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and orientation to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if !t.is_proper(1e-9) {
            return Err(Error::Validation(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        RigidTransform {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r * r.transpose() - Matrix3::identity()).amax() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Angle of `self⁻¹ ∘ other`.
    pub fn angle_to(&self, other: &RigidTransform) -> f64 {
        self.inverse().compose(other).angle()
    }
}

type CellKey = [i64; 3];

/// Uniform hash grid over a borrowed point set.
#[derive(Debug)]
pub struct SpatialGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
    lo: CellKey,
    hi: CellKey,
}

impl<'a> SpatialGrid<'a> {
    pub fn new(points: &'a [Point3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell size must be positive");
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        SpatialGrid {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    /// Picks a cell size giving a handful of points per occupied cell for
    /// surface-like clouds.
    pub fn auto(points: &'a [Point3<f64>]) -> Self {
        Self::new(points, auto_cell_size(points))
    }

    pub fn points(&self) -> &'a [Point3<f64>] {
        self.points
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Indices of all points with `‖p − q‖ ≤ radius`, ascending.
    pub fn within(&self, q: &Point3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.points.is_empty() {
            return out;
        }
        let r2 = radius * radius;
        let lo = key(&(q - Vector3::repeat(radius)), self.cell);
        let hi = key(&(q + Vector3::repeat(radius)), self.cell);
        for x in lo[0].max(self.lo[0])..=hi[0].min(self.hi[0]) {
            for y in lo[1].max(self.lo[1])..=hi[1].min(self.hi[1]) {
                for z in lo[2].max(self.lo[2])..=hi[2].min(self.hi[2]) {
                    if let Some(ids) = self.cells.get(&[x, y, z]) {
                        for &i in ids {
                            if (self.points[i as usize] - q).norm_squared() <= r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        self.k_nearest(q, 1, None).into_iter().next()
    }

    /// Up to `k` nearest points as `(index, distance)`, closest first; ties
    /// broken by index. `exclude` skips one index (the query's own point).
    pub fn k_nearest(&self, q: &Point3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        // squared distances, sorted ascending by (d2, idx)
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let qk = key(q, self.cell);
        let mut r: i64 = 0;
        loop {
            self.visit_ring(qk, r, |i| {
                if Some(i) == exclude {
                    return;
                }
                let d2 = (self.points[i] - q).norm_squared();
                if best.len() == k {
                    let worst = best[k - 1];
                    if (d2, i) >= worst {
                        return;
                    }
                }
                let pos = best.partition_point(|e| *e < (d2, i));
                best.insert(pos, (d2, i));
                best.truncate(k);
            });
            let covered = (0..3).all(|a| qk[a] - r <= self.lo[a] && qk[a] + r >= self.hi[a]);
            if covered {
                break;
            }
            if best.len() == k {
                let reach = r as f64 * self.cell;
                if best[k - 1].0 <= reach * reach {
                    break;
                }
            }
            r += 1;
        }
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    /// Calls `f` for every point in cells at Chebyshev distance exactly `r`
    /// from `c`.
    fn visit_ring(&self, c: CellKey, r: i64, mut f: impl FnMut(usize)) {
        let clip = |a: usize| ((c[a] - r).max(self.lo[a]), (c[a] + r).min(self.hi[a]));
        let (x0, x1) = clip(0);
        let (y0, y1) = clip(1);
        let (z0, z1) = clip(2);
        let mut cell = |k: CellKey| {
            if let Some(ids) = self.cells.get(&k) {
                for &i in ids {
                    f(i as usize);
                }
            }
        };
        for x in x0..=x1 {
            let xe = (x - c[0]).abs() == r;
            for y in y0..=y1 {
                let ye = (y - c[1]).abs() == r;
                if xe || ye {
                    for z in z0..=z1 {
                        cell([x, y, z]);
                    }
                } else {
                    for z in [c[2] - r, c[2] + r] {
                        if z >= z0 && z <= z1 {
                            cell([x, y, z]);
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn key(p: &Point3<f64>, cell: f64) -> CellKey {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

fn auto_cell_size(points: &[Point3<f64>]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = points[0].coords;
    let mut hi = points[0].coords;
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    let mut ext = [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z];
    ext.sort_by(|a, b| b.total_cmp(a));
    let area = if ext[1] > 1e-9 { ext[0] * ext[1] } else { ext[0] * ext[0] };
    if area <= 0.0 {
        return 1e-3;
    }
    (2.0 * (area / points.len() as f64).sqrt()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random::<f64>(), rng.random::<f64>(), 0.1 * rng.random::<f64>()))
            .collect()
    }

    fn brute_knn(points: &[Point3<f64>], q: &Point3<f64>, k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = random_points(800, 1);
        let grid = SpatialGrid::auto(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = Point3::new(
                rng.random_range(-0.5..1.5),
                rng.random_range(-0.5..1.5),
                rng.random_range(-0.5..0.6),
            );
            let got: Vec<usize> = grid.k_nearest(&q, 7, None).into_iter().map(|(i, _)| i).collect();
            assert_eq!(got, brute_knn(&pts, &q, 7));
        }
    }

    #[test]
    fn far_query_still_finds_nearest() {
        let pts = random_points(200, 3);
        let grid = SpatialGrid::new(&pts, 0.05);
        let q = Point3::new(40.0, -3.0, 2.0);
        assert_eq!(grid.nearest(&q).unwrap().0, brute_knn(&pts, &q, 1)[0]);
    }

    #[test]
    fn radius_query_matches_brute_force() {
        let pts = random_points(500, 4);
        let grid = SpatialGrid::auto(&pts);
        let q = Point3::new(0.4, 0.6, 0.05);
        let want: Vec<usize> = (0..pts.len())
            .filter(|&i| (pts[i] - q).norm() <= 0.15)
            .collect();
        assert_eq!(grid.within(&q, 0.15), want);
    }

    #[test]
    fn exclude_skips_self() {
        let pts = random_points(100, 5);
        let grid = SpatialGrid::auto(&pts);
        let nn = grid.k_nearest(&pts[10], 3, Some(10));
        assert!(nn.iter().all(|(i, _)| *i != 10));
        assert_eq!(nn.len(), 3);
    }

    #[test]
    fn transform_inverse_and_isometry() {
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(0.1, -0.2, 0.3));
        assert!(t.is_proper(1e-12));
        let p = Point3::new(0.3, 0.2, -0.1);
        let q = Point3::new(-0.5, 0.9, 0.4);
        let back = t.inverse().apply(&t.apply(&p));
        assert!((back - p).norm() < 1e-12);
        assert!(((t.apply(&p) - t.apply(&q)).norm() - (p - q).norm()).abs() < 1e-12);
        assert!((t.angle() - 0.7).abs() < 1e-12);
        assert!(RigidTransform::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }
}
