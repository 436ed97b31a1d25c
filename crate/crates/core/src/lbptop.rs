//! LBP codes and block-partitioned LBP-TOP histograms over a face volume, and
//! the mean-difference landmark weights.
//!
//! Neighbour `p` of `P` sits at angle `2πp/P`, counter-clockwise from the
//! positive horizontal axis of its plane. Plane axes are (x, y) for XY,
//! (x, t) for XT and (y, t) for YT; the vertical axis grows downward in all
//! three, so "counter-clockwise" means a negative vertical offset at 90°.

use nalgebra::Point2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::{fingerprint, FeatureKind, FeatureVector};
use crate::volume::{bilinear, Frame, FrameVolume};

/// Differences at or above `-SIGN_EPS` count as non-negative. Absorbs the
/// rounding of bilinear weights so that equal intensities compare equal.
pub const SIGN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LbpTopConfig {
    /// (Rx, Ry, Rt)
    pub radii: (usize, usize, usize),
    /// Neighbour counts of the XY, XT and YT planes.
    pub neighbors: (usize, usize, usize),
    /// Blocks along x and y.
    pub blocks: (usize, usize),
    /// Pixels shared by adjacent blocks.
    pub overlap: usize,
}

impl Default for LbpTopConfig {
    fn default() -> Self {
        LbpTopConfig {
            radii: (1, 1, 4),
            neighbors: (8, 8, 8),
            blocks: (5, 5),
            overlap: 0,
        }
    }
}

/// The radii studied for the 2D feature, in (Rx, Ry, Rt).
pub const RADIUS_GRID: [(usize, usize, usize); 12] = [
    (1, 1, 2),
    (1, 1, 3),
    (1, 1, 4),
    (2, 2, 2),
    (2, 2, 3),
    (2, 2, 4),
    (3, 3, 2),
    (3, 3, 3),
    (3, 3, 4),
    (4, 4, 2),
    (4, 4, 3),
    (4, 4, 4),
];

impl LbpTopConfig {
    pub fn validate(&self) -> Result<()> {
        let (rx, ry, rt) = self.radii;
        if rx == 0 || ry == 0 || rt == 0 {
            return Err(Error::Config("LBP radii must be at least 1".into()));
        }
        let (a, b, c) = self.neighbors;
        for p in [a, b, c] {
            if !(1..=16).contains(&p) {
                return Err(Error::Config(format!("LBP neighbour count {p} outside 1..=16")));
            }
        }
        let (bx, by) = self.blocks;
        if !(1..=10).contains(&bx) || !(1..=10).contains(&by) {
            return Err(Error::Config(format!("block grid {bx}x{by} outside 1..=10")));
        }
        Ok(())
    }

    /// Histogram length per block: the three planes side by side.
    pub fn block_len(&self) -> usize {
        let (a, b, c) = self.neighbors;
        (1 << a) + (1 << b) + (1 << c)
    }

    pub fn feature_len(&self) -> usize {
        self.blocks.0 * self.blocks.1 * self.block_len()
    }

    pub fn canonical(&self) -> String {
        let (rx, ry, rt) = self.radii;
        let (a, b, c) = self.neighbors;
        format!(
            "lbp.radii={rx},{ry},{rt};lbp.neighbors={a},{b},{c};lbp.blocks={},{};lbp.overlap={}",
            self.blocks.0, self.blocks.1, self.overlap
        )
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.canonical())
    }
}

/// Neighbour offsets `(horizontal, vertical)` on an ellipse, rounded to six
/// decimals so axis-aligned neighbours land on the grid exactly.
pub fn neighbor_offsets(p: usize, r_h: f64, r_v: f64) -> Vec<(f64, f64)> {
    let round = |v: f64| (v * 1e6).round() / 1e6;
    (0..p)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / p as f64;
            (round(r_h * a.cos()), round(-r_v * a.sin()))
        })
        .collect()
}

#[inline]
fn code_at(center: f64, offsets: &[(f64, f64)], sample: impl Fn(f64, f64) -> f64) -> u32 {
    offsets.iter().enumerate().fold(0u32, |acc, (i, &(dh, dv))| {
        if sample(dh, dv) - center >= -SIGN_EPS {
            acc | (1 << i)
        } else {
            acc
        }
    })
}

/// LBP code of pixel `(x, y)` with `p` neighbours on a circle of radius `r`.
pub fn lbp_code(image: &Frame<'_>, x: usize, y: usize, p: usize, r: f64) -> Result<u32> {
    if !(1..=16).contains(&p) || !(r > 0.0) {
        return Err(Error::Config(format!("LBP needs 1..=16 neighbours and a positive radius, got P={p}, R={r}")));
    }
    let (xf, yf) = (x as f64, y as f64);
    if xf < r || yf < r || xf + r > (image.width - 1) as f64 || yf + r > (image.height - 1) as f64 {
        return Err(Error::OutOfRange(format!(
            "center ({x}, {y}) closer than {r} to the border of a {}x{} image",
            image.width, image.height
        )));
    }
    let offsets = neighbor_offsets(p, r, r);
    let center = image.get(x, y) as f64;
    Ok(code_at(center, &offsets, |dh, dv| {
        image.sample(xf + dh, yf + dv).expect("neighbour inside the image")
    }))
}

/// Block extents `[start, end)` along one axis.
pub fn block_ranges(len: usize, blocks: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    let size = (len + (blocks - 1) * overlap) / blocks;
    if size == 0 || overlap >= size {
        return Err(Error::Config(format!(
            "{blocks} blocks with {overlap} px overlap do not fit {len} px"
        )));
    }
    let step = size - overlap;
    Ok((0..blocks)
        .map(|i| {
            let start = i * step;
            let end = if i + 1 == blocks { len } else { (start + size).min(len) };
            (start, end)
        })
        .collect())
}

/// Concatenated per-block (XY, XT, YT) histograms, each summing to 1.
pub fn lbp_top_histogram(volume: &FrameVolume, config: &LbpTopConfig) -> Result<FeatureVector> {
    config.validate()?;
    let (rx, ry, rt) = config.radii;
    let (w, h, t) = (volume.width(), volume.height(), volume.frames());
    if t < 2 * rt + 1 || w < 2 * rx + 1 || h < 2 * ry + 1 {
        return Err(Error::OutOfRange(format!(
            "volume {w}x{h}x{t} too small for radii ({rx}, {ry}, {rt})"
        )));
    }
    let xr = block_ranges(w, config.blocks.0, config.overlap)?;
    let yr = block_ranges(h, config.blocks.1, config.overlap)?;
    let (pxy, pxt, pyt) = config.neighbors;
    let off_xy = neighbor_offsets(pxy, rx as f64, ry as f64);
    let off_xt = neighbor_offsets(pxt, rx as f64, rt as f64);
    let off_yt = neighbor_offsets(pyt, ry as f64, rt as f64);

    let cells: Vec<(usize, usize)> = (0..yr.len())
        .flat_map(|by| (0..xr.len()).map(move |bx| (bx, by)))
        .collect();
    let blocks: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(bx, by)| {
            let (x0, x1) = (xr[bx].0.max(rx), xr[bx].1.min(w - rx));
            let (y0, y1) = (yr[by].0.max(ry), yr[by].1.min(h - ry));
            if x0 >= x1 || y0 >= y1 {
                return Err(Error::BlockTooSmall {
                    bx,
                    by,
                    reason: format!(
                        "x {:?}, y {:?} leave no centers at radii ({rx}, {ry})",
                        xr[bx], yr[by]
                    ),
                });
            }
            let mut hist = vec![
                vec![0u64; 1 << pxy],
                vec![0u64; 1 << pxt],
                vec![0u64; 1 << pyt],
            ];
            let data = volume.data();
            let at = |tt: usize, yy: usize, xx: usize| data[(tt * h + yy) * w + xx] as f64;
            for tc in rt..t - rt {
                for yc in y0..y1 {
                    for xc in x0..x1 {
                        let g = at(tc, yc, xc);
                        let (xf, yf, tf) = (xc as f64, yc as f64, tc as f64);
                        let c_xy = code_at(g, &off_xy, |dh, dv| {
                            bilinear(w, h, xf + dh, yf + dv, |a, b| at(tc, b, a)).unwrap()
                        });
                        let c_xt = code_at(g, &off_xt, |dh, dv| {
                            bilinear(w, t, xf + dh, tf + dv, |a, b| at(b, yc, a)).unwrap()
                        });
                        let c_yt = code_at(g, &off_yt, |dh, dv| {
                            bilinear(h, t, yf + dh, tf + dv, |a, b| at(b, a, xc)).unwrap()
                        });
                        hist[0][c_xy as usize] += 1;
                        hist[1][c_xt as usize] += 1;
                        hist[2][c_yt as usize] += 1;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0) * (t - 2 * rt)) as f64;
            Ok(hist.into_iter().flatten().map(|c| c as f64 / n).collect())
        })
        .collect::<Result<_>>()?;
    FeatureVector::new(FeatureKind::Lbp2d, config.fingerprint(), blocks.concat())
}

/// Motion weights of landmark discs in the mean absolute difference image
/// against the first frame, normalised to mean 1.
pub fn mean_difference_weights(volume: &FrameVolume, landmarks: &[Point2<f64>], radius_px: usize) -> Result<Vec<f64>> {
    if radius_px == 0 {
        return Err(Error::Config("weight disc radius must be positive".into()));
    }
    let (w, h, t) = (volume.width(), volume.height(), volume.frames());
    let base = volume.frame(0);
    let mut diff = vec![0.0f64; w * h];
    for k in 1..t {
        let f = volume.frame(k);
        for (d, (a, b)) in diff.iter_mut().zip(f.data.iter().zip(base.data)) {
            *d += (*a as f64 - *b as f64).abs();
        }
    }
    let norm = (t - 1) as f64;
    diff.iter_mut().for_each(|d| *d /= norm);

    let r = radius_px as f64;
    let raw = landmarks
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let (lo_x, hi_x) = ((l.x - r).ceil().max(0.0), (l.x + r).floor().min((w - 1) as f64));
            let (lo_y, hi_y) = ((l.y - r).ceil().max(0.0), (l.y + r).floor().min((h - 1) as f64));
            let mut sum = 0.0;
            let mut n = 0usize;
            if lo_x <= hi_x && lo_y <= hi_y {
                for y in lo_y as usize..=hi_y as usize {
                    for x in lo_x as usize..=hi_x as usize {
                        let (dx, dy) = (x as f64 - l.x, y as f64 - l.y);
                        if dx * dx + dy * dy <= r * r {
                            sum += diff[y * w + x];
                            n += 1;
                        }
                    }
                }
            }
            if n == 0 {
                return Err(Error::OutOfRange(format!(
                    "landmark {j} at ({:.1}, {:.1}): disc of radius {radius_px} lies outside the {w}x{h} frame",
                    l.x, l.y
                )));
            }
            Ok(sum / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if mean <= 0.0 {
        return Ok(vec![1.0; raw.len()]);
    }
    Ok(raw.into_iter().map(|v| v / mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(t: usize, h: usize, w: usize, seed: u64) -> FrameVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * h * w).map(|_| rng.random::<u8>()).collect();
        FrameVolume::new(t, h, w, data).unwrap()
    }

    fn image(data: &[u8], w: usize, h: usize) -> Frame<'_> {
        Frame { data, width: w, height: h }
    }

    #[test]
    fn constant_image_codes_255() {
        let d = vec![7u8; 25];
        assert_eq!(lbp_code(&image(&d, 5, 5), 2, 2, 8, 1.0).unwrap(), 255);
    }

    #[test]
    fn strict_maximum_codes_0() {
        let mut d = vec![3u8; 25];
        d[12] = 9;
        assert_eq!(lbp_code(&image(&d, 5, 5), 2, 2, 8, 1.0).unwrap(), 0);
    }

    #[test]
    fn documented_ordering_example() {
        // p=0 east, then counter-clockwise with y growing downward
        let n = [6u8, 5, 2, 1, 7, 8, 9, 3];
        let want: u32 = n.iter().enumerate().map(|(p, &g)| if g >= 5 { 1 << p } else { 0 }).sum();
        assert_eq!(want, 115);
        // radius 2: the 2x2 bilinear supports of the eight neighbours are
        // disjoint, so each neighbour samples exactly its own value
        let mut d = vec![0u8; 49];
        let w = 7;
        let offs = neighbor_offsets(8, 2.0, 2.0);
        for (p, (dx, dy)) in offs.iter().enumerate() {
            let (x, y) = (3.0 + dx, 3.0 + dy);
            for yy in [y.floor() as usize, y.ceil() as usize] {
                for xx in [x.floor() as usize, x.ceil() as usize] {
                    d[yy * w + xx] = n[p];
                }
            }
        }
        d[3 * w + 3] = 5;
        assert_eq!(lbp_code(&image(&d, 7, 7), 3, 3, 8, 2.0).unwrap(), 115);
    }

    #[test]
    fn border_centers_rejected() {
        let d = vec![0u8; 25];
        assert!(lbp_code(&image(&d, 5, 5), 0, 2, 8, 1.0).is_err());
        assert!(lbp_code(&image(&d, 5, 5), 2, 4, 8, 1.0).is_err());
    }

    #[test]
    fn shift_invariance() {
        let v = random_volume(2, 16, 16, 3);
        let shifted: Vec<u8> = v.frame(0).data.iter().map(|&g| (g / 2) + 10).collect();
        let halved: Vec<u8> = v.frame(0).data.iter().map(|&g| g / 2).collect();
        for (x, y) in [(3, 3), (8, 5), (12, 12)] {
            assert_eq!(
                lbp_code(&image(&shifted, 16, 16), x, y, 8, 2.0).unwrap(),
                lbp_code(&image(&halved, 16, 16), x, y, 8, 2.0).unwrap()
            );
        }
    }

    #[test]
    fn block_ranges_cover_axis() {
        assert_eq!(block_ranges(10, 2, 0).unwrap(), vec![(0, 5), (5, 10)]);
        assert_eq!(block_ranges(11, 2, 0).unwrap(), vec![(0, 5), (5, 11)]);
        assert_eq!(block_ranges(10, 2, 2).unwrap(), vec![(0, 6), (4, 10)]);
        assert!(block_ranges(10, 2, 10).is_err());
    }

    #[test]
    fn constant_volume_is_point_mass() {
        let v = FrameVolume::filled(9, 32, 32, 100).unwrap();
        let cfg = LbpTopConfig { blocks: (2, 2), ..LbpTopConfig::default() };
        let f = lbp_top_histogram(&v, &cfg).unwrap();
        assert_eq!(f.len(), 2 * 2 * 3 * 256);
        for chunk in f.values.chunks(256) {
            assert_eq!(chunk[255], 1.0);
        }
        assert_eq!(f.values.iter().sum::<f64>(), 12.0);
    }

    #[test]
    fn default_length() {
        let v = random_volume(9, 50, 50, 1);
        let f = lbp_top_histogram(&v, &LbpTopConfig::default()).unwrap();
        assert_eq!(f.len(), 19200);
        for chunk in f.values.chunks(256) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_block_names_block() {
        let v = random_volume(9, 16, 16, 2);
        let cfg = LbpTopConfig { radii: (4, 4, 2), blocks: (10, 10), ..LbpTopConfig::default() };
        match lbp_top_histogram(&v, &cfg) {
            Err(Error::BlockTooSmall { bx, by, .. }) => assert_eq!((bx, by), (0, 0)),
            other => panic!("{other:?}"),
        }
        let short = random_volume(4, 16, 16, 2);
        assert!(lbp_top_histogram(&short, &LbpTopConfig::default()).is_err());
    }

    #[test]
    fn permuting_constant_frames_changes_nothing() {
        let v = FrameVolume::filled(9, 20, 20, 50).unwrap();
        let cfg = LbpTopConfig { blocks: (2, 2), ..LbpTopConfig::default() };
        let a = lbp_top_histogram(&v, &cfg).unwrap();
        let frames: Vec<Vec<u8>> = (0..9).rev().map(|t| v.frame(t).data.to_vec()).collect();
        let b = lbp_top_histogram(&FrameVolume::from_frames(20, 20, frames).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    /// Triple loop over the whole volume; each center is credited to every
    /// block whose extent contains it.
    fn oracle(v: &FrameVolume, cfg: &LbpTopConfig) -> Vec<f64> {
        let (rx, ry, rt) = cfg.radii;
        let (w, h, t) = (v.width(), v.height(), v.frames());
        let g = |tt: usize, yy: usize, xx: usize| v.get(tt, yy, xx) as f64;
        let interp = |f: &dyn Fn(usize, usize) -> f64, x: f64, y: f64| {
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            if fx == 0.0 && fy == 0.0 {
                return f(x0, y0);
            }
            let top = f(x0, y0) * (1.0 - fx) + f(x0 + 1, y0) * fx;
            let bot = f(x0, y0 + 1) * (1.0 - fx) + f(x0 + 1, y0 + 1) * fx;
            top * (1.0 - fy) + bot * fy
        };
        let ring = |r1: usize, r2: usize| -> Vec<(f64, f64)> {
            (0..8)
                .map(|p| {
                    let a = std::f64::consts::PI * p as f64 / 4.0;
                    (((r1 as f64) * a.cos() * 1e6).round() / 1e6, ((-(r2 as f64)) * a.sin() * 1e6).round() / 1e6)
                })
                .collect()
        };
        let code = |c: f64, vals: Vec<f64>| -> usize {
            vals.iter().enumerate().map(|(p, &s)| if s - c >= -1e-6 { 1usize << p } else { 0 }).sum()
        };
        let xs = block_ranges(w, cfg.blocks.0, cfg.overlap).unwrap();
        let ys = block_ranges(h, cfg.blocks.1, cfg.overlap).unwrap();
        let nb = xs.len() * ys.len();
        let mut hist = vec![vec![0.0; 768]; nb];
        let mut counts = vec![0.0; nb];
        for tc in rt..t - rt {
            for yc in ry..h - ry {
                for xc in rx..w - rx {
                    let c = g(tc, yc, xc);
                    let (xf, yf, tf) = (xc as f64, yc as f64, tc as f64);
                    let cxy = code(c, ring(rx, ry).iter().map(|(a, b)| interp(&|i, j| g(tc, j, i), xf + a, yf + b)).collect());
                    let cxt = code(c, ring(rx, rt).iter().map(|(a, b)| interp(&|i, j| g(j, yc, i), xf + a, tf + b)).collect());
                    let cyt = code(c, ring(ry, rt).iter().map(|(a, b)| interp(&|i, j| g(j, i, xc), yf + a, tf + b)).collect());
                    for (by, &(y0, y1)) in ys.iter().enumerate() {
                        for (bx, &(x0, x1)) in xs.iter().enumerate() {
                            if (x0..x1).contains(&xc) && (y0..y1).contains(&yc) {
                                let b = by * xs.len() + bx;
                                hist[b][cxy] += 1.0;
                                hist[b][256 + cxt] += 1.0;
                                hist[b][512 + cyt] += 1.0;
                                counts[b] += 1.0;
                            }
                        }
                    }
                }
            }
        }
        hist.into_iter()
            .zip(counts)
            .flat_map(|(hb, n)| hb.into_iter().map(move |c| c / n))
            .collect()
    }

    #[test]
    fn matches_oracle_on_small_volumes() {
        for (seed, radii) in [(1u64, (1, 1, 2)), (2, (2, 2, 3)), (3, (1, 2, 1))] {
            let v = random_volume(8, 16, 16, seed);
            let cfg = LbpTopConfig { radii, blocks: (2, 2), overlap: 0, ..LbpTopConfig::default() };
            assert_eq!(lbp_top_histogram(&v, &cfg).unwrap().values, oracle(&v, &cfg), "radii {radii:?}");
        }
        let v = random_volume(8, 20, 24, 9);
        let cfg = LbpTopConfig { radii: (2, 1, 2), blocks: (3, 2), overlap: 2, ..LbpTopConfig::default() };
        assert_eq!(lbp_top_histogram(&v, &cfg).unwrap().values, oracle(&v, &cfg));
    }

    #[test]
    fn static_volume_gives_uniform_weights() {
        let v = FrameVolume::filled(5, 32, 32, 80).unwrap();
        let l: Vec<Point2<f64>> = (0..32).map(|i| Point2::new(4.0 + (i % 8) as f64 * 3.0, 4.0 + (i / 8) as f64 * 6.0)).collect();
        assert_eq!(mean_difference_weights(&v, &l, 3).unwrap(), vec![1.0; 32]);
    }

    fn blob_volume(scale: u8) -> FrameVolume {
        FrameVolume::from_fn(6, 40, 40, |t, y, x| {
            let (dx, dy) = (x as f64 - 20.0, y as f64 - 12.0);
            if t > 0 && dx * dx + dy * dy <= 9.0 {
                50 + scale * t as u8
            } else {
                50
            }
        })
        .unwrap()
    }

    #[test]
    fn motion_at_one_landmark_dominates() {
        let v = blob_volume(10);
        let mut l: Vec<Point2<f64>> = (0..32).map(|i| Point2::new(4.0 + (i % 8) as f64 * 4.5, 26.0 + (i / 8) as f64 * 3.0)).collect();
        l[5] = Point2::new(20.0, 12.0);
        let w = mean_difference_weights(&v, &l, 3).unwrap();
        assert!((w.iter().sum::<f64>() / 32.0 - 1.0).abs() < 1e-12);
        let best = w.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(best, 5);
        // doubling every difference leaves the normalised weights unchanged
        let w2 = mean_difference_weights(&blob_volume(20), &l, 3).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disc_outside_frame_is_error() {
        let v = blob_volume(10);
        let l = vec![Point2::new(-10.0, 5.0)];
        assert!(mean_difference_weights(&v, &l, 3).is_err());
    }
}
