//! 8-bit grayscale video volumes.

use crate::error::{Error, Result};

pub const MIN_FRAMES: usize = 2;
pub const MIN_SIDE: usize = 16;

/// A `T × H × W` cuboid of 8-bit intensities, stored frame-major then
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameVolume {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FrameVolume {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if frames < MIN_FRAMES || height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Validation(format!(
                "volume {frames}x{height}x{width} below minimum {MIN_FRAMES}x{MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != frames * height * width {
            return Err(Error::DimensionMismatch {
                expected: frames * height * width,
                got: data.len(),
            });
        }
        Ok(FrameVolume {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(frames, height, width, vec![value; frames * height * width])
    }

    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(t, y, x));
                }
            }
        }
        Self::new(frames, height, width, data)
    }

    /// Stacks equally sized frames, each `height * width` bytes.
    pub fn from_frames(height: usize, width: usize, frames: Vec<Vec<u8>>) -> Result<Self> {
        let n = frames.len();
        let mut data = Vec::with_capacity(n * height * width);
        for (i, f) in frames.into_iter().enumerate() {
            if f.len() != height * width {
                return Err(Error::Validation(format!(
                    "frame {i} has {} pixels, expected {}",
                    f.len(),
                    height * width
                )));
            }
            data.extend_from_slice(&f);
        }
        Self::new(n, height, width, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> u8 {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn frame(&self, t: usize) -> Frame<'_> {
        let n = self.height * self.width;
        Frame {
            data: &self.data[t * n..(t + 1) * n],
            height: self.height,
            width: self.width,
        }
    }

    /// Frames `start..=end`, clamped to the volume.
    pub fn window(&self, start: usize, end: usize) -> Result<FrameVolume> {
        let end = end.min(self.frames - 1);
        if start > end {
            return Err(Error::Validation(format!(
                "empty frame window {start}..={end}"
            )));
        }
        let n = self.height * self.width;
        Self::new(
            end - start + 1,
            self.height,
            self.width,
            self.data[start * n..(end + 1) * n].to_vec(),
        )
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)` out of every frame.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FrameVolume> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::OutOfRange(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(self.frames * w * h);
        for t in 0..self.frames {
            for y in y0..y0 + h {
                let row = (t * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::new(self.frames, h, w, data)
    }
}

/// Borrowed view of one frame.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub data: &'a [u8],
    pub height: usize,
    pub width: usize,
}

impl Frame<'_> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a real-valued position; `None` outside
    /// `[0, W-1] × [0, H-1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        bilinear(self.width, self.height, x, y, |xi, yi| self.get(xi, yi) as f64)
    }
}

/// Bilinear interpolation over an integer grid accessed through `at`.
#[inline]
pub(crate) fn bilinear(
    width: usize,
    height: usize,
    x: f64,
    y: f64,
    at: impl Fn(usize, usize) -> f64,
) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    if fx == 0.0 && fy == 0.0 {
        return Some(at(x0, y0));
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}
