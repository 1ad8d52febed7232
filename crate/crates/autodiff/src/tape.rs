use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    LeakyRelu(Var, T),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    MeanAbsMasked {
        input: Var,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of every primitive executed in a forward pass.
///
/// Nodes are appended as ops run, so the node list is already in
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zero when `var` is not on a path to
    /// the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "elementwise_mul", |x, y| x * y)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "elementwise_mul")
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.grad_flag(&[a]);
        self.push(out, Op::ScalarMul(a, s), rg, "scalar_mul")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.grad_flag(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), rg, "relu_leaky")
    }

    /// 2-D convolution with zero padding. `input` is `[N, C, H, W]`,
    /// `weight` is `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 4 || w.rank() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} and weight {:?} must be rank 4", x.shape(), w.shape()),
            });
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidAttribute {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let [n, c, h, wd] = x.nchw();
        let [o, wc, kh, kw] = w.nchw();
        if wc != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c} channels, weight expects {wc}"),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {:?}, expected [{o}]", self.value(b).shape()),
                });
            }
        }
        let (Some(out_h), Some(out_w)) = (
            ConvGeometry::output_extent(h, kh, stride, pad),
            ConvGeometry::output_extent(wd, kw, stride, pad),
        ) else {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            });
        };
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let data = ops::conv2d_forward(
            &geometry,
            x.data(),
            w.data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[n, o, out_h, out_w], data)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.grad_flag(&deps);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
            "conv2d",
        )
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "upsample_nearest",
                detail: format!("expected rank 4, got {:?}", x.shape()),
            });
        }
        let dims = x.nchw();
        let data = ops::upsample2_forward(dims, x.data());
        let out = Tensor::new(&[dims[0], dims[1], 2 * dims[2], 2 * dims[3]], data)?;
        let rg = self.grad_flag(&[input]);
        self.push(out, Op::Upsample2(input), rg, "upsample_nearest")
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_channels",
                detail: "no inputs".into(),
            });
        };
        let [n, _, h, w] = self.value(first).nchw();
        let mut channels = 0;
        for &v in inputs {
            let t = self.value(v);
            let [vn, vc, vh, vw] = t.nchw();
            if t.rank() != 4 || vn != n || vh != h || vw != w {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{:?} vs {:?}", self.value(first).shape(), t.shape()),
                });
            }
            channels += vc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.nchw()[1] * h * w;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(&[n, channels, h, w], data)?;
        let rg = self.grad_flag(inputs);
        self.push(out, Op::Concat(inputs.to_vec()), rg, "concat_channels")
    }

    /// Mean of `|x|` over positions where `mask` is true. An empty mask
    /// yields exactly zero (and zero gradient).
    pub fn mean_abs_masked(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_abs",
                detail: format!("mask has {} entries, input has {}", mask.len(), x.numel()),
            });
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (&v, &m) in x.data().iter().zip(mask) {
            if m {
                sum += v.as_f64().abs();
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.grad_flag(&[input]);
        self.push(
            Tensor::scalar(T::from_f64(mean)),
            Op::MeanAbsMasked {
                input,
                mask: mask.to_vec(),
                count,
            },
            rg,
            "mean_abs",
        )
    }

    /// Smallest distance from a kink (the origin) among inputs to
    /// non-smooth primitives. Finite-difference checks are only meaningful
    /// when this exceeds the perturbation's effect.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (input, mask) = match &node.op {
                Op::LeakyRelu(a, _) => (*a, None),
                Op::MeanAbsMasked { input, mask, .. } => (*input, Some(mask)),
                _ => continue,
            };
            for (i, v) in self.value(input).data().iter().enumerate() {
                if mask.is_none_or(|m| m[i]) {
                    margin = margin.min(v.as_f64().abs());
                }
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let data = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), data).expect("shape"));
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let data = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), data).expect("shape"));
                }
            }
            Op::ScalarMul(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let need_bias = bias.is_some_and(|b| self.needs(b));
                let out = ops::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    (self.needs(*input), self.needs(*weight), need_bias),
                );
                if let Some(gi) = out.input {
                    let t = Tensor::new(self.value(*input).shape(), gi).expect("shape");
                    self.accumulate(grads, *input, t);
                }
                if let Some(gw) = out.weight {
                    let t = Tensor::new(self.value(*weight).shape(), gw).expect("shape");
                    self.accumulate(grads, *weight, t);
                }
                if let (Some(b), Some(gb)) = (bias, out.bias) {
                    let t = Tensor::new(self.value(*b).shape(), gb).expect("shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Upsample2(a) => {
                let x = self.value(*a);
                let data = ops::upsample2_backward(x.nchw(), g.data());
                self.accumulate(grads, *a, Tensor::new(x.shape(), data).expect("shape"));
            }
            Op::Concat(inputs) => {
                let [n, total, h, w] = g.nchw();
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let c = t.nchw()[1];
                    if self.needs(v) {
                        let mut data = Vec::with_capacity(t.numel());
                        for b in 0..n {
                            let start = (b * total + offset) * h * w;
                            data.extend_from_slice(&g.data()[start..start + c * h * w]);
                        }
                        self.accumulate(grads, v, Tensor::new(t.shape(), data).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::MeanAbsMasked { input, mask, count } => {
                let x = self.value(*input);
                if *count == 0 {
                    self.accumulate(grads, *input, Tensor::zeros(x.shape()));
                    return;
                }
                let scale = g.data()[0].as_f64() / *count as f64;
                let data = x
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| {
                        if !m || v == T::zero() {
                            T::zero()
                        } else {
                            T::from_f64(scale * v.as_f64().signum())
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(x.shape(), data).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_1x1_scales_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.param(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_3x3_ones_with_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.param(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        // Direct summation: each output counts the in-bounds taps.
        let mut expected = [0.0; 9];
        for oy in 0..3i32 {
            for ox in 0..3i32 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (iy, ix) = (oy + dy, ox + dx);
                        if (0..3).contains(&iy) && (0..3).contains(&ix) {
                            acc += 1.0;
                        }
                    }
                }
                expected[(oy * 3 + ox) as usize] = acc;
            }
        }
        assert_eq!(tape.value(y).data(), &expected);
        assert_eq!(expected, [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn strided_conv_output_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 7, 5], 0.5)).unwrap();
        let w = tape.param(Tensor::full(&[4, 3, 3, 3], 0.1)).unwrap();
        let b = tape.param(Tensor::zeros(&[4])).unwrap();
        let y = tape.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let data = [0.5, -1.5, 2.0, 3.25];
        let x = tape.param(t(&[4], &data)).unwrap();
        let ones = tape.constant(Tensor::full(&[4], 1.0)).unwrap();
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), &data);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::<f64>::zeros(&[3])).unwrap();
        let b = tape.param(Tensor::<f64>::zeros(&[4])).unwrap();
        assert!(matches!(tape.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4])).unwrap();
        let w = tape.param(Tensor::<f64>::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(tape.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn non_finite_forward_is_a_fault() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1e308, 1.0])).unwrap();
        assert_eq!(
            tape.scalar_mul(a, 10.0),
            Err(AutodiffError::NonFinite { op: "scalar_mul" })
        );
        assert!(tape.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn mean_square_gradient_is_two_x_over_n() {
        // mean(x * x) expressed as mean_abs of a non-negative product.
        let data = [0.5, -1.5, 2.0, 3.25, -0.75];
        let mut tape = Tape::new();
        let x = tape.param(t(&[5], &data)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_abs_masked(sq, &[true; 5]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x);
        for (gi, xi) in g.data().iter().zip(data) {
            assert!((gi - 2.0 * xi / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn leaky_relu_negative_side_scales_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-2.0, 3.0])).unwrap();
        let y = tape.leaky_relu(x, 0.1).unwrap();
        let loss = tape.mean_abs_masked(y, &[true, true]).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        // upstream for mean_abs: sign(y)/2 = [-0.5, 0.5]
        assert!((g.data()[0] - (-0.5 * 0.1)).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn masked_mean_abs_counts_only_mask() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 100.0, 3.0])).unwrap();
        let loss = tape.mean_abs_masked(x, &[true, true, false, true]).unwrap();
        assert_eq!(tape.value(loss).item(), Some(2.0));
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[1.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn empty_mask_gives_zero_loss_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = tape.mean_abs_masked(x, &[false; 3]).unwrap();
        assert_eq!(tape.value(loss).item(), Some(0.0));
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn off_path_parameters_get_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = tape.mean_abs_masked(used, &[true, true]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(
            tape.backward(x).unwrap_err(),
            AutodiffError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn concat_and_upsample_shapes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2, 1, 2, 3], 1.0)).unwrap();
        let b = tape.param(Tensor::full(&[2, 2, 2, 3], 2.0)).unwrap();
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 2, 3]);
        assert_eq!(&tape.value(c).data()[..12], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let u = tape.upsample_nearest2(c).unwrap();
        assert_eq!(tape.value(u).shape(), &[2, 3, 4, 6]);
    }
}
