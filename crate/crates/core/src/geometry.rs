//! Camera rig, scalar fields, and the depth/disparity relations of a
//! rectified stereo pair.
//!
//! Depth is always stored in meters and disparity in pixels. Degenerate
//! pixels (non-positive disparity or depth) become invalid rather than
//! infinite.

use crate::error::{Error, Result};

/// Horizontal baseline and focal length of a rectified pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    baseline_m: f64,
    focal_x_px: f64,
}

impl CameraRig {
    pub const DEFAULT_BASELINE_M: f64 = 0.54;
    pub const DEFAULT_FOCAL_X_PX: f64 = 480.0;

    pub fn new(baseline_m: f64, focal_x_px: f64) -> Result<Self> {
        if !(baseline_m.is_finite() && baseline_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "baseline must be positive, got {baseline_m}"
            )));
        }
        if !(focal_x_px.is_finite() && focal_x_px > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal length must be positive, got {focal_x_px}"
            )));
        }
        Ok(Self {
            baseline_m,
            focal_x_px,
        })
    }

    pub fn baseline_m(&self) -> f64 {
        self.baseline_m
    }

    pub fn focal_x_px(&self) -> f64 {
        self.focal_x_px
    }

    /// The product b * f_x shared by both directions of the conversion.
    pub fn bf(&self) -> f64 {
        self.baseline_m * self.focal_x_px
    }

    /// Depth for one disparity, `None` when `d <= 0`.
    pub fn depth_of(&self, disparity_px: f64) -> Option<f64> {
        (disparity_px > 0.0 && disparity_px.is_finite()).then(|| self.bf() / disparity_px)
    }

    /// Disparity for one depth, `None` when `z <= 0`.
    pub fn disparity_of(&self, depth_m: f64) -> Option<f64> {
        (depth_m > 0.0 && depth_m.is_finite()).then(|| self.bf() / depth_m)
    }
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            baseline_m: Self::DEFAULT_BASELINE_M,
            focal_x_px: Self::DEFAULT_FOCAL_X_PX,
        }
    }
}

/// A row-major grid of reals with a per-pixel validity flag.
///
/// Invalid pixels still carry a value (often a fill value) but it is never
/// read by metrics. Valid pixels are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || valid.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} field with {} values and {} flags",
                values.len(),
                valid.len()
            )));
        }
        if values.iter().zip(&valid).any(|(v, &ok)| ok && !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "valid pixels must hold finite values".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// All pixels valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = vec![true; width * height];
        Self::new(width, height, values, valid)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            valid: vec![value.is_finite(); width * height],
        }
    }

    /// Build from a per-pixel closure; `None` marks the pixel invalid (value 0).
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut values = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y).filter(|v| v.is_finite()) {
                    Some(v) => {
                        values.push(v);
                        valid.push(true);
                    }
                    None => {
                        values.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.values[i])
    }

    pub fn value_at(&self, x: usize, y: usize) -> f64 {
        self.values[self.index(x, y)]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same validity, values replaced by `f(value)` at valid pixels. A
    /// non-finite result invalidates the pixel.
    pub fn map_valid(&self, f: impl Fn(f64) -> Option<f64>) -> Self {
        let mut out = self.clone();
        for i in 0..out.values.len() {
            if !out.valid[i] {
                continue;
            }
            match f(out.values[i]).filter(|v| v.is_finite()) {
                Some(v) => out.values[i] = v,
                None => {
                    out.values[i] = 0.0;
                    out.valid[i] = false;
                }
            }
        }
        out
    }

    /// Replace the validity mask with `self.valid AND mask`.
    pub fn restrict(&mut self, mask: &[bool]) {
        for (v, &m) in self.valid.iter_mut().zip(mask) {
            *v &= m;
        }
    }

    /// Mirror left-right, keeping row order.
    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = y * self.width..(y + 1) * self.width;
            out.values[row.clone()].reverse();
            out.valid[row].reverse();
        }
        out
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn check_same_dims(&self, other: &ScalarField, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Triangulate: Z = b * f_x / d at every valid pixel with d > 0.
pub fn disparity_to_depth(disparity: &ScalarField, rig: &CameraRig) -> ScalarField {
    disparity.map_valid(|d| rig.depth_of(d))
}

/// Back-convert: d = b * f_x / Z at every valid pixel with Z > 0.
pub fn depth_to_disparity(depth: &ScalarField, rig: &CameraRig) -> ScalarField {
    depth.map_valid(|z| rig.disparity_of(z))
}

/// First-order depth error for a disparity error `eps_d` at ground-truth
/// disparity `d_gt`: `b f_x eps_d / d_gt^2`, i.e. `eps_d Z_gt^2 / (b f_x)`.
pub fn predicted_depth_error(d_gt: f64, eps_d: f64, rig: &CameraRig) -> Result<f64> {
    if !(d_gt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ground-truth disparity must be positive, got {d_gt}"
        )));
    }
    Ok(rig.bf() * eps_d / (d_gt * d_gt))
}

/// Exact depth error `Z_gt - Z_a` when the estimate is `d_gt + eps_d`.
pub fn exact_depth_error(d_gt: f64, eps_d: f64, rig: &CameraRig) -> Result<f64> {
    let d_a = d_gt + eps_d;
    if !(d_gt > 0.0 && d_a > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "disparities must be positive, got d_gt={d_gt}, d_gt+eps_d={d_a}"
        )));
    }
    Ok(rig.bf() * eps_d / (d_gt * d_a))
}
