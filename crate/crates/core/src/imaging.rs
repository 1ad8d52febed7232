//! Images, bilinear sampling, disparity-guided warping, and shading
//! visualisation of depth maps.

use crate::error::{Error, Result};
use crate::geometry::ScalarField;

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} image with {} values",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    /// Build from a closure returning one value per (x, y, channel); the
    /// result is clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    values.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self::new(width, height, channels, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let values = self
            .values
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() / self.channels as f32)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            values,
        }
    }

    pub fn flipped_horizontal(&self) -> Image {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out.values[dst..dst + c].copy_from_slice(&self.values[src..src + c]);
            }
        }
        out
    }
}

/// The right image resampled into the left image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedImage {
    pub image: Image,
    /// False where the disparity was invalid or the source fell outside
    /// the right image. Such pixels hold 0.
    pub valid: Vec<bool>,
}

/// Bilinear interpolation at a sub-pixel position.
///
/// Returns `None` when any tap with non-zero weight lies outside the image,
/// so integer coordinates on the last row/column are still in bounds.
pub fn bilinear_sample(img: &Image, x: f64, y: f64, c: usize) -> Option<f32> {
    if !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    if x1 >= img.width || y1 >= img.height {
        return None;
    }
    let mut acc = 0.0f64;
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    for (tx, ty, w) in taps {
        if w != 0.0 {
            acc += w * img.get(tx, ty, c) as f64;
        }
    }
    Some(acc as f32)
}

/// Resample `right` at `(x - d(x, y), y)` for every left-frame pixel.
pub fn warp_right_to_left(right: &Image, disparity: &ScalarField) -> Result<WarpedImage> {
    if right.dims() != disparity.dims() {
        return Err(Error::DimensionMismatch(format!(
            "warp: image {:?} vs disparity {:?}",
            right.dims(),
            disparity.dims()
        )));
    }
    let (w, h, c) = (right.width, right.height, right.channels);
    let mut values = vec![0.0f32; w * h * c];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = disparity.get(x, y) else {
                continue;
            };
            let sx = x as f64 - d;
            let i = y * w + x;
            let samples: Option<Vec<f32>> = (0..c).map(|ch| bilinear_sample(right, sx, y as f64, ch)).collect();
            if let Some(samples) = samples {
                values[i * c..(i + 1) * c].copy_from_slice(&samples);
                valid[i] = true;
            }
        }
    }
    Ok(WarpedImage {
        image: Image::new(w, h, c, values)?,
        valid,
    })
}

fn axis_gradient(z: &ScalarField, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
    let at = |xx: isize, yy: isize| -> Option<f64> {
        if xx < 0 || yy < 0 || xx >= z.width() as isize || yy >= z.height() as isize {
            return None;
        }
        z.get(xx as usize, yy as usize)
    };
    let (xi, yi) = (x as isize, y as isize);
    let centre = z.value_at(x, y);
    match (at(xi - dx, yi - dy), at(xi + dx, yi + dy)) {
        (Some(prev), Some(next)) => 0.5 * (next - prev),
        (None, Some(next)) => next - centre,
        (Some(prev), None) => centre - prev,
        (None, None) => 0.0,
    }
}

/// `1 / (|grad Z| + eps)` before any rescaling. Central differences in the
/// interior, one-sided at borders and next to invalid pixels.
pub fn inverse_gradient_magnitude(z: &ScalarField, eps: f64) -> Result<ScalarField> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    Ok(ScalarField::from_fn(z.width(), z.height(), |x, y| {
        if !z.is_valid(x, y) {
            return None;
        }
        let gx = axis_gradient(z, x, y, 1, 0);
        let gy = axis_gradient(z, x, y, 0, 1);
        Some(1.0 / (gx.hypot(gy) + eps))
    }))
}

/// Shading image of a depth map, min-max rescaled to `[0, 1]` over valid
/// pixels. Invalid pixels are black; a constant response maps to white.
pub fn shading_image(z: &ScalarField, eps: f64) -> Result<Image> {
    let raw = inverse_gradient_magnitude(z, eps)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &ok) in raw.values().iter().zip(raw.valid()) {
        if ok {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = hi - lo;
    Image::from_fn(z.width(), z.height(), 1, |x, y, _| match raw.get(x, y) {
        None => 0.0,
        Some(_) if !(span > 0.0) => 1.0,
        Some(v) => ((v - lo) / span) as f32,
    })
}
