//! The depth refinement network: a small U-Net whose single output channel
//! is a residual applied to the baseline depth, either multiplicatively
//! (`Z = Z_a (1 + f)`) or additively (`Z = Z_a + f`), plus the training
//! losses.

use std::fmt;
use std::str::FromStr;

use dr_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::EvalMask;
use crate::geometry::ScalarField;
use crate::imaging::{warp_right_to_left, Image, WarpedImage};
use crate::io::SampleRecord;
use crate::stereo::fill_invalid;

/// Refined depth never drops below this many meters.
pub const MIN_DEPTH_M: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadMode {
    Multiplicative,
    Additive,
}

impl HeadMode {
    pub(crate) fn code(self) -> u32 {
        match self {
            HeadMode::Multiplicative => 0,
            HeadMode::Additive => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(HeadMode::Multiplicative),
            1 => Some(HeadMode::Additive),
            _ => None,
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Multiplicative => "mul",
            HeadMode::Additive => "add",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" | "multiplicative" => Ok(HeadMode::Multiplicative),
            "add" | "additive" => Ok(HeadMode::Additive),
            _ => Err(Error::InvalidParameter(format!("unknown head {s:?}, expected mul or add"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub leaky_slope: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            in_channels: 3,
            leaky_slope: 0.1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.levels > 8 {
            return Err(Error::InvalidParameter(format!("levels must be in 1..=8, got {}", self.levels)));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "leaky slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Feature channels at encoder level `i` (0 is full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (level + 1)
    }

    /// Spatial sizes must survive `levels` halvings exactly.
    pub fn check_input_size(&self, width: usize, height: usize) -> Result<()> {
        let m = 1usize << self.levels;
        if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} input is not divisible by {m} for a {}-level network",
                self.levels
            )));
        }
        Ok(())
    }

    /// Name and shape of every parameter in forward order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("stem".into(), self.in_channels, self.channels(0), 3);
        for i in 1..=self.levels {
            conv(format!("enc{i}"), self.channels(i - 1), self.channels(i), 3);
        }
        for i in (1..=self.levels).rev() {
            conv(
                format!("dec{i}"),
                self.channels(i) + self.channels(i - 1),
                self.channels(i - 1),
                3,
            );
        }
        conv("head".into(), self.channels(0), 1, 1);
        out
    }
}

/// Parameters θ of the refinement U-Net together with its head mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineNetwork {
    config: UNetConfig,
    head: HeadMode,
    params: Vec<(String, Tensor<f32>)>,
}

/// Fresh network: He-uniform weights from the seeded generator, zero
/// biases, and an all-zero output head.
pub fn build_unet(config: UNetConfig, head: HeadMode, seed: u64) -> Result<RefineNetwork> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.starts_with("head.") || name.ends_with(".bias") {
                vec![0.0f32; n]
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let limit = (6.0 / fan_in).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect()
            };
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RefineNetwork { config, head, params })
}

impl RefineNetwork {
    /// Assemble from named tensors, e.g. read from a checkpoint. Every
    /// expected tensor must be present exactly once with the right shape.
    pub fn from_parameters(
        config: UNetConfig,
        head: HeadMode,
        mut tensors: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::InvalidParameter(format!("missing tensor {name}")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::InvalidParameter(format!("tensor {name} holds non-finite values")));
            }
            params.push((name, t));
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::InvalidParameter(format!("unexpected tensor {name}")));
        }
        Ok(Self { config, head, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn head(&self) -> HeadMode {
        self.head
    }

    pub fn parameters(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put θ on the tape as trainable leaves, in parameter order.
    pub fn register(&self, tape: &mut Tape<f32>) -> Result<Vec<Var>> {
        Ok(self
            .params
            .iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?)
    }

    /// Network output `f` of shape `[N, 1, H, W]` for an `[N, C, H, W]` input.
    pub fn forward(&self, tape: &mut Tape<f32>, params: &[Var], input: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(input).nchw();
        if c != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_input_size(w, h)?;
        let slope = self.config.leaky_slope;
        let mut p = params.chunks_exact(2);
        let mut conv = |tape: &mut Tape<f32>, x: Var, stride: usize, pad: usize| -> Result<Var> {
            let wb = p.next().expect("parameter list matches layout");
            Ok(tape.conv2d(x, wb[0], Some(wb[1]), stride, pad)?)
        };

        let stem = conv(tape, input, 1, 1)?;
        let mut skips = vec![tape.leaky_relu(stem, slope)?];
        for _ in 1..=self.config.levels {
            let prev = *skips.last().unwrap();
            let e = conv(tape, prev, 2, 1)?;
            skips.push(tape.leaky_relu(e, slope)?);
        }
        let mut x = skips.pop().unwrap();
        while let Some(skip) = skips.pop() {
            let up = tape.upsample_nearest2(x)?;
            let cat = tape.concat_channels(&[up, skip])?;
            let d = conv(tape, cat, 1, 1)?;
            x = tape.leaky_relu(d, slope)?;
        }
        conv(tape, x, 1, 0)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let params = self
            .params
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let x = tape.constant(input.clone())?;
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    /// Refined depth for one prepared sample.
    pub fn refine(&self, sample: &PreparedSample) -> Result<ScalarField> {
        let f = self.predict(&sample.input)?;
        let (w, h) = sample.z_a.dims();
        let f = ScalarField::from_values(w, h, f.data().iter().map(|&v| v as f64).collect())?;
        apply_head(&sample.z_a, &f, self.head)
    }
}

/// Network input `[1, C, H, W]`: `z_a / z_cap` clamped to `[0, 1.5]`, then
/// the left image channels, then the warped right image channels. Invalid
/// depth pixels that carry no finite value enter as 1.5.
pub fn prepare_inputs(z_a: &ScalarField, left: &Image, warped: &WarpedImage, z_cap: f64) -> Result<Tensor<f32>> {
    if !(z_cap > 0.0) {
        return Err(Error::InvalidParameter(format!("z_cap must be positive, got {z_cap}")));
    }
    let (w, h) = z_a.dims();
    if left.dims() != (w, h) || warped.image.dims() != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "depth {:?}, left {:?}, warped {:?}",
            (w, h),
            left.dims(),
            warped.image.dims()
        )));
    }
    let channels = 1 + left.channels() + warped.image.channels();
    let mut data = Vec::with_capacity(channels * w * h);
    data.extend(z_a.values().iter().map(|&z| {
        let v = z / z_cap;
        if v.is_finite() {
            v.clamp(0.0, 1.5) as f32
        } else {
            1.5
        }
    }));
    for img in [left, &warped.image] {
        for c in 0..img.channels() {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(x, y, c));
                }
            }
        }
    }
    Ok(Tensor::new(&[1, channels, h, w], data)?)
}

/// `Z = Z_a (1 + f)` or `Z = Z_a + f`, floored at [`MIN_DEPTH_M`]. Validity
/// follows `z_a`.
pub fn apply_head(z_a: &ScalarField, f_out: &ScalarField, mode: HeadMode) -> Result<ScalarField> {
    z_a.check_same_dims(f_out, "head inputs")?;
    let values = z_a
        .values()
        .iter()
        .zip(f_out.values())
        .zip(z_a.valid())
        .map(|((&z, &f), &ok)| {
            if !ok {
                return z;
            }
            let r = match mode {
                HeadMode::Multiplicative => z * (1.0 + f),
                HeadMode::Additive => z + f,
            };
            if r.is_finite() {
                r.max(MIN_DEPTH_M)
            } else {
                MIN_DEPTH_M
            }
        })
        .collect();
    let (w, h) = z_a.dims();
    ScalarField::new(w, h, values, z_a.valid().to_vec())
}

/// Everything the trainer and evaluator need from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub input: Tensor<f32>,
    /// Baseline depth. Validity is that of the unfilled baseline disparity;
    /// values at invalid pixels come from the filled disparity.
    pub z_a: ScalarField,
    /// Baseline disparity as estimated, invalid pixels unfilled.
    pub d_a: ScalarField,
    pub z_gt: ScalarField,
    pub d_gt: ScalarField,
    pub mask: EvalMask,
}

impl PreparedSample {
    pub fn from_record(record: &SampleRecord, d_max: f64, z_cap: f64) -> Result<Self> {
        let d = record.baseline()?;
        let (w, h) = d.dims();
        // fill_invalid keeps the mask, so treat the filled values as dense
        let dense = ScalarField::from_values(w, h, fill_invalid(d).values().to_vec())?;
        let rig = record.rig;
        let values = dense
            .values()
            .iter()
            .map(|&v| rig.depth_of(v).unwrap_or(f64::INFINITY))
            .collect::<Vec<_>>();
        let valid = d
            .valid()
            .iter()
            .zip(&values)
            .map(|(&ok, z)| ok && z.is_finite())
            .collect();
        let z_a = ScalarField::new(w, h, values, valid)?;
        let warped = warp_right_to_left(&record.right.to_gray(), &dense)?;
        let input = prepare_inputs(&z_a, &record.left.to_gray(), &warped, z_cap)?;
        let mask = EvalMask::new(&record.valid, &record.z_gt, &record.d_gt, z_a.valid(), d_max)?;
        Ok(Self {
            input,
            z_a,
            d_a: d.clone(),
            z_gt: record.z_gt.clone(),
            d_gt: record.d_gt.clone(),
            mask,
        })
    }

    /// Mirror every left-frame field horizontally.
    pub fn flipped(&self) -> Self {
        let [n, c, h, w] = self.input.nchw();
        let src = self.input.data();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(w) {
            data.extend(row.iter().rev());
        }
        let (mw, _) = self.z_a.dims();
        let mask = self
            .mask
            .as_slice()
            .chunks_exact(mw)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Self {
            input: Tensor::new(&[n, c, h, w], data).expect("same element count"),
            z_a: self.z_a.flipped_horizontal(),
            d_a: self.d_a.flipped_horizontal(),
            z_gt: self.z_gt.flipped_horizontal(),
            d_gt: self.d_gt.flipped_horizontal(),
            mask: EvalMask::from_vec(mask),
        }
    }
}

/// Per-pixel regression targets for a batch, stacked along N.
#[derive(Debug, Clone)]
pub struct LossTargets {
    /// `(z_gt - z_a) / z_a` on the mask, 0 elsewhere.
    relative: Tensor<f32>,
    /// `z_a` on the mask, 0 elsewhere.
    scale: Tensor<f32>,
    mask: Vec<bool>,
}

impl LossTargets {
    pub fn new(samples: &[&PreparedSample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let (w, h) = first.z_a.dims();
        let mut relative = Vec::with_capacity(samples.len() * w * h);
        let mut scale = Vec::with_capacity(samples.len() * w * h);
        let mut mask = Vec::with_capacity(samples.len() * w * h);
        for s in samples {
            if s.z_a.dims() != (w, h) {
                return Err(Error::DimensionMismatch("batch samples differ in size".into()));
            }
            for ((&za, &zg), &m) in s.z_a.values().iter().zip(s.z_gt.values()).zip(s.mask.as_slice()) {
                if m {
                    relative.push(((zg - za) / za) as f32);
                    scale.push(za as f32);
                } else {
                    relative.push(0.0);
                    scale.push(0.0);
                }
                mask.push(m);
            }
        }
        let shape = [samples.len(), 1, h, w];
        Ok(Self {
            relative: Tensor::new(&shape, relative)?,
            scale: Tensor::new(&shape, scale)?,
            mask,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn residual(&self, tape: &mut Tape<f32>, f_out: Var) -> Result<Var> {
        let target = tape.constant(self.relative.clone())?;
        Ok(tape.sub(f_out, target)?)
    }
}

/// Masked mean of `|(z_gt - z_a)/z_a - f|`.
pub fn loss_range_invariant(tape: &mut Tape<f32>, f_out: Var, targets: &LossTargets) -> Result<Var> {
    if !targets.mask.iter().any(|&m| m) {
        log::debug!("loss mask is empty; loss is 0");
    }
    let r = targets.residual(tape, f_out)?;
    Ok(tape.mean_abs_masked(r, &targets.mask)?)
}

/// Masked mean of `|z_gt - (z_a + f z_a)|`.
pub fn loss_direct_depth(tape: &mut Tape<f32>, f_out: Var, targets: &LossTargets) -> Result<Var> {
    let r = targets.residual(tape, f_out)?;
    let s = tape.constant(targets.scale.clone())?;
    let scaled = tape.mul(r, s)?;
    Ok(tape.mean_abs_masked(scaled, &targets.mask)?)
}

/// Range-normalized loss for the additive head, `|(f - (z_gt - z_a)) / z_a|`:
/// the same objective as [`loss_range_invariant`] with `f` in meters.
pub fn loss_additive_normalized(tape: &mut Tape<f32>, f_out: Var, targets: &LossTargets) -> Result<Var> {
    let inv: Vec<f32> = targets
        .scale
        .data()
        .iter()
        .map(|&z| if z > 0.0 { 1.0 / z } else { 0.0 })
        .collect();
    let inv = tape.constant(Tensor::new(targets.scale.shape(), inv)?)?;
    let absolute: Vec<f32> = targets
        .relative
        .data()
        .iter()
        .zip(targets.scale.data())
        .map(|(&r, &z)| r * z)
        .collect();
    let target = tape.constant(Tensor::new(targets.scale.shape(), absolute)?)?;
    let diff = tape.sub(f_out, target)?;
    let scaled = tape.mul(diff, inv)?;
    Ok(tape.mean_abs_masked(scaled, &targets.mask)?)
}

/// The training objective for a head mode.
pub fn training_loss(tape: &mut Tape<f32>, f_out: Var, targets: &LossTargets, head: HeadMode) -> Result<Var> {
    match head {
        HeadMode::Multiplicative => loss_range_invariant(tape, f_out, targets),
        HeadMode::Additive => loss_additive_normalized(tape, f_out, targets),
    }
}

/// Stack `[1, C, H, W]` inputs along N.
pub fn stack_inputs(samples: &[&PreparedSample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let [_, c, h, w] = first.input.nchw();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.input.nchw() != [1, c, h, w] {
            return Err(Error::DimensionMismatch("batch inputs differ in shape".into()));
        }
        data.extend_from_slice(s.input.data());
    }
    Ok(Tensor::new(&[samples.len(), c, h, w], data)?)
}
