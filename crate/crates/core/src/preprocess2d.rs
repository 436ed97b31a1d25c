//! Face alignment and cropping of video volumes.
//!
//! The first frame's inner eye corners define a non-reflective similarity
//! transform onto canonical positions; every frame is warped with that same
//! transform. The crop rectangle is then derived from the eye distance and
//! the eye-line to nasal-spine distance, rounded up to multiples of six so a
//! 6×6 block grid tiles it exactly.

use nalgebra::{Point2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{bilinear, FrameVolume};

/// `p ↦ scale · R(rotation) · p + translation`, image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Vector2<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: f64, translation: Vector2<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !rotation.is_finite() {
            return Err(Error::Validation(format!(
                "similarity needs finite positive scale, got {scale}"
            )));
        }
        Ok(SimilarityTransform {
            scale,
            rotation,
            translation,
        })
    }

    #[inline]
    fn linear(&self) -> (f64, f64) {
        (self.scale * self.rotation.cos(), self.scale * self.rotation.sin())
    }

    #[inline]
    pub fn apply(&self, p: &Point2<f64>) -> Point2<f64> {
        let (a, b) = self.linear();
        Point2::new(
            a * p.x - b * p.y + self.translation.x,
            b * p.x + a * p.y + self.translation.y,
        )
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let s = 1.0 / self.scale;
        let r = -self.rotation;
        let (c, sn) = (r.cos(), r.sin());
        let t = self.translation;
        SimilarityTransform {
            scale: s,
            rotation: r,
            translation: Vector2::new(-s * (c * t.x - sn * t.y), -s * (sn * t.x + c * t.y)),
        }
    }

    /// Determinant of the linear part; always positive.
    pub fn determinant(&self) -> f64 {
        self.scale * self.scale
    }
}

/// Similarity taking the two source eye corners exactly onto the canonical
/// ones.
pub fn estimate_alignment(
    inner_eye_left: Point2<f64>,
    inner_eye_right: Point2<f64>,
    canonical_left: Point2<f64>,
    canonical_right: Point2<f64>,
) -> Result<SimilarityTransform> {
    let ds = inner_eye_right - inner_eye_left;
    let dc = canonical_right - canonical_left;
    if ds.norm() < 1e-12 {
        return Err(Error::DegenerateGeometry("source eye corners coincide".into()));
    }
    if dc.norm() < 1e-12 {
        return Err(Error::DegenerateGeometry("canonical eye corners coincide".into()));
    }
    // complex division a = dc / ds
    let den = ds.norm_squared();
    let re = (dc.x * ds.x + dc.y * ds.y) / den;
    let im = (dc.y * ds.x - dc.x * ds.y) / den;
    let scale = re.hypot(im);
    let rotation = im.atan2(re);
    let mapped = Vector2::new(
        re * inner_eye_left.x - im * inner_eye_left.y,
        im * inner_eye_left.x + re * inner_eye_left.y,
    );
    SimilarityTransform::new(scale, rotation, canonical_left.coords - mapped)
}

/// Canonical eye corners as fractions of a `width × height` frame.
pub fn canonical_eyes(
    width: usize,
    height: usize,
    left: (f64, f64),
    right: (f64, f64),
) -> (Point2<f64>, Point2<f64>) {
    let (w, h) = (width as f64, height as f64);
    (
        Point2::new(left.0 * w, left.1 * h),
        Point2::new(right.0 * w, right.1 * h),
    )
}

/// Resamples every frame under `t` (output pixel `q` reads input at
/// `t⁻¹(q)`), bilinear, zero outside the source frame.
pub fn warp_volume(volume: &FrameVolume, t: &SimilarityTransform) -> FrameVolume {
    let (h, w) = (volume.height(), volume.width());
    let inv = t.inverse();
    let mut data = vec![0u8; volume.data().len()];
    data.par_chunks_mut(h * w).enumerate().for_each(|(ti, out)| {
        let frame = volume.frame(ti);
        for y in 0..h {
            for x in 0..w {
                let src = inv.apply(&Point2::new(x as f64, y as f64));
                // snap values within rounding noise of the pixel grid
                let sx = snap(src.x);
                let sy = snap(src.y);
                if let Some(v) = bilinear(w, h, sx, sy, |xi, yi| frame.get(xi, yi) as f64) {
                    out[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    });
    FrameVolume::new(volume.frames(), h, w, data).expect("warp preserves dimensions")
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Proportions of the face crop, in units of the eye-corner distance (width)
/// and the eye-line to nasal-spine distance (height, top offset).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub width_factor: f64,
    pub height_factor: f64,
    pub top_factor: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            width_factor: 1.5,
            height_factor: 3.0,
            top_factor: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Set when the ideal rectangle had to be moved or shrunk to fit.
    pub clamped: bool,
}

fn round_up_to_6(v: f64) -> usize {
    6 * ((v / 6.0 - 1e-9).ceil().max(1.0) as usize)
}

/// Computes the face crop rectangle for a `frame_w × frame_h` frame.
pub fn crop_rect(
    frame_w: usize,
    frame_h: usize,
    inner_eyes: [Point2<f64>; 2],
    nasal_spine: Point2<f64>,
    params: &CropParams,
) -> Result<CropRect> {
    let inside = |p: &Point2<f64>| {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (frame_w - 1) as f64 && p.y <= (frame_h - 1) as f64
    };
    for p in inner_eyes.iter().chain(std::iter::once(&nasal_spine)) {
        if !inside(p) {
            return Err(Error::OutOfRange(format!(
                "landmark ({:.1}, {:.1}) outside {frame_w}x{frame_h} frame",
                p.x, p.y
            )));
        }
    }
    let [l, r] = inner_eyes;
    let d_h = (r.x - l.x).abs();
    if d_h < 1e-9 {
        return Err(Error::DegenerateGeometry("inner eye corners have no horizontal separation".into()));
    }
    let eye_y = 0.5 * (l.y + r.y);
    let d_v = (nasal_spine.y - eye_y).abs();
    if d_v < 1e-9 {
        return Err(Error::DegenerateGeometry("nasal spine lies on the eye line".into()));
    }

    let mut clamped = false;
    let mut width = round_up_to_6(params.width_factor * d_h);
    let mut height = round_up_to_6(params.height_factor * d_v);
    if width > frame_w {
        width = 6 * (frame_w / 6);
        clamped = true;
    }
    if height > frame_h {
        height = 6 * (frame_h / 6);
        clamped = true;
    }
    let mid_x = 0.5 * (l.x + r.x);
    let place = |ideal: f64, size: usize, limit: usize, clamped: &mut bool| -> usize {
        let ideal = ideal.round();
        if ideal < 0.0 {
            *clamped = true;
            0
        } else if ideal as usize + size > limit {
            *clamped = true;
            limit - size
        } else {
            ideal as usize
        }
    };
    let x0 = place(mid_x - width as f64 / 2.0, width, frame_w, &mut clamped);
    let y0 = place(eye_y - params.top_factor * d_v, height, frame_h, &mut clamped);
    Ok(CropRect {
        x0,
        y0,
        width,
        height,
        clamped,
    })
}

pub fn crop_face(
    volume: &FrameVolume,
    inner_eyes: [Point2<f64>; 2],
    nasal_spine: Point2<f64>,
    params: &CropParams,
) -> Result<(FrameVolume, CropRect)> {
    let rect = crop_rect(volume.width(), volume.height(), inner_eyes, nasal_spine, params)?;
    if rect.clamped {
        log::warn!(
            "face crop clamped to {}x{}+{}+{}",
            rect.width,
            rect.height,
            rect.x0,
            rect.y0
        );
    }
    let v = volume.crop(rect.x0, rect.y0, rect.width, rect.height)?;
    Ok((v, rect))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn p(x: f64, y: f64) -> Point2<f64> {
        Point2::new(x, y)
    }

    #[test]
    fn identity_when_source_is_canonical() {
        let t = estimate_alignment(p(30.0, 40.0), p(70.0, 42.0), p(30.0, 40.0), p(70.0, 42.0)).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.rotation.abs() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn pure_scaling() {
        let t = estimate_alignment(p(0.0, 0.0), p(2.0, 0.0), p(0.0, 0.0), p(1.0, 0.0)).unwrap();
        assert!((t.scale - 0.5).abs() < 1e-12);
        assert!(t.rotation.abs() < 1e-12);
    }

    #[test]
    fn recovers_rotation_about_midpoint() {
        let (cl, cr) = (p(40.0, 50.0), p(80.0, 50.0));
        let mid = p(60.0, 50.0);
        let rot = SimilarityTransform::new(1.0, PI / 6.0, Vector2::zeros()).unwrap();
        let about_mid = |q: Point2<f64>| mid + rot.apply(&Point2::from(q - mid)).coords;
        let (sl, sr) = (about_mid(cl), about_mid(cr));
        let t = estimate_alignment(sl, sr, cl, cr).unwrap();
        assert!((t.rotation + PI / 6.0).abs() < 1e-9, "{}", t.rotation);
        assert!((t.scale - 1.0).abs() < 1e-9);
        assert!((t.apply(&sl) - cl).norm() < 1e-9);
        assert!((t.apply(&sr) - cr).norm() < 1e-9);
        assert!(t.determinant() > 0.0);
    }

    #[test]
    fn coincident_points_rejected() {
        assert!(estimate_alignment(p(1.0, 1.0), p(1.0, 1.0), p(0.0, 0.0), p(1.0, 0.0)).is_err());
        assert!(estimate_alignment(p(0.0, 0.0), p(1.0, 1.0), p(2.0, 2.0), p(2.0, 2.0)).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = SimilarityTransform::new(1.3, 0.4, Vector2::new(3.0, -7.0)).unwrap();
        let q = p(12.5, -3.25);
        assert!((t.inverse().apply(&t.apply(&q)) - q).norm() < 1e-12);
    }

    fn ramp() -> FrameVolume {
        FrameVolume::from_fn(3, 40, 48, |t, y, x| (x * 3 + y * 2 + t * 5) as u8).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let v = ramp();
        assert_eq!(warp_volume(&v, &SimilarityTransform::identity()), v);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let v = ramp();
        let t = SimilarityTransform::new(1.0, 0.0, Vector2::new(5.0, 0.0)).unwrap();
        let out = warp_volume(&v, &t);
        for ti in 0..v.frames() {
            for y in 0..v.height() {
                for x in 0..v.width() {
                    let want = if x >= 5 { v.get(ti, y, x - 5) } else { 0 };
                    assert_eq!(out.get(ti, y, x), want, "({ti},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let v = FrameVolume::from_fn(2, 64, 64, |_, y, x| {
            let fx = x as f64 / 63.0;
            let fy = y as f64 / 63.0;
            (40.0 + 120.0 * fx + 60.0 * fy * fy) as u8
        })
        .unwrap();
        let c = Vector2::new(32.0, 32.0);
        let rot = SimilarityTransform::new(1.1, 0.2, Vector2::zeros()).unwrap();
        // rotate about the image centre
        let t = SimilarityTransform {
            translation: c - rot.apply(&Point2::from(c)).coords,
            ..rot
        };
        let back = warp_volume(&warp_volume(&v, &t), &t.inverse());
        let mut max_err = 0i32;
        for ti in 0..2 {
            for y in 16..48 {
                for x in 16..48 {
                    max_err = max_err.max((back.get(ti, y, x) as i32 - v.get(ti, y, x) as i32).abs());
                }
            }
        }
        assert!(max_err <= 2, "max error {max_err}");
    }

    #[test]
    fn crop_formula_example() {
        let r = crop_rect(200, 160, [p(60.0, 40.0), p(120.0, 40.0)], p(90.0, 70.0), &CropParams::default()).unwrap();
        assert_eq!(r.width, 6 * ((1.5f64 * 60.0) / 6.0).ceil() as usize);
        assert_eq!(r.height, 6 * ((3.0f64 * 30.0) / 6.0).ceil() as usize);
        assert_eq!((r.x0, r.y0), (45, 13));
        assert!(!r.clamped);
    }

    #[test]
    fn crop_dimensions_are_multiples_of_six() {
        let r = crop_rect(300, 300, [p(100.3, 120.0), p(161.9, 121.0)], p(130.0, 155.7), &CropParams::default()).unwrap();
        assert_eq!(r.width % 6, 0);
        assert_eq!(r.height % 6, 0);
        assert!(r.width as f64 >= 1.5 * 61.6);
    }

    #[test]
    fn crop_of_crop_keeps_dimensions() {
        let v = FrameVolume::from_fn(2, 160, 200, |_, y, x| ((x + y) % 256) as u8).unwrap();
        let eyes = [p(63.0, 41.5), p(121.0, 41.5)];
        let spine = p(92.0, 69.0);
        let (c1, r1) = crop_face(&v, eyes, spine, &CropParams::default()).unwrap();
        let shift = Vector2::new(r1.x0 as f64, r1.y0 as f64);
        let (c2, r2) = crop_face(&c1, [eyes[0] - shift, eyes[1] - shift], spine - shift, &CropParams::default()).unwrap();
        assert_eq!((r2.width, r2.height), (r1.width, r1.height));
        assert_eq!((r2.x0, r2.y0), (0, 0));
        assert_eq!(c2, c1);
    }

    #[test]
    fn crop_errors_and_clamping() {
        let v = FrameVolume::filled(2, 100, 100, 9).unwrap();
        assert!(matches!(
            crop_face(&v, [p(50.0, 40.0), p(50.0, 40.0)], p(50.0, 60.0), &CropParams::default()),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(crop_face(&v, [p(50.0, 40.0), p(150.0, 40.0)], p(50.0, 60.0), &CropParams::default()).is_err());
        let (c, r) = crop_face(&v, [p(5.0, 10.0), p(45.0, 10.0)], p(25.0, 40.0), &CropParams::default()).unwrap();
        assert!(r.clamped);
        assert_eq!((c.width() % 6, c.height() % 6), (0, 0));
        assert!(r.x0 + r.width <= 100 && r.y0 + r.height <= 100);
    }
}
