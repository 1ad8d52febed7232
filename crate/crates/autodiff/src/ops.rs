//! Forward and backward kernels. Everything here is a plain function over
//! slices; the tape decides which ones run and in what order.

use crate::element::Element;

/// Geometry of a 2-D convolution over one NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let patch = g.patch();
    let positions = g.positions();
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = g.out_channels * positions;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = vec![T::zero(); patch * positions];
    for n in 0..g.batch {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(positions).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            patch,
            positions,
            weight,
            (patch as isize, 1),
            &col,
            (positions as isize, 1),
            beta,
            dst,
            (positions as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let patch = g.patch();
    let positions = g.positions();
    let in_stride = g.in_channels * g.in_h * g.in_w;
    let out_stride = g.out_channels * positions;

    let mut grad_input = need_input.then(|| vec![T::zero(); input.len()]);
    let mut grad_weight = need_weight.then(|| vec![T::zero(); weight.len()]);
    let grad_bias = need_bias.then(|| {
        (0..g.out_channels)
            .map(|o| {
                let mut acc = 0.0f64;
                for n in 0..g.batch {
                    let start = n * out_stride + o * positions;
                    acc += grad_out[start..start + positions]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                T::from_f64(acc)
            })
            .collect()
    });

    let mut col = vec![T::zero(); patch * positions];
    for n in 0..g.batch {
        let go = &grad_out[n * out_stride..(n + 1) * out_stride];
        if let Some(gw) = grad_weight.as_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut col);
            // gw[O, patch] += go[O, P] * col[patch, P]^T
            T::gemm(
                g.out_channels,
                positions,
                patch,
                go,
                (positions as isize, 1),
                &col,
                (1, positions as isize),
                T::one(),
                gw,
                (patch as isize, 1),
            );
        }
        if let Some(gi) = grad_input.as_mut() {
            // col[patch, P] = weight[O, patch]^T * go[O, P]
            T::gemm(
                patch,
                g.out_channels,
                positions,
                weight,
                (1, patch as isize),
                go,
                (positions as isize, 1),
                T::zero(),
                &mut col,
                (positions as isize, 1),
            );
            col2im_add(g, &col, &mut gi[n * in_stride..(n + 1) * in_stride]);
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// Nearest-neighbour x2 upsampling of an NCHW buffer.
pub(crate) fn upsample2_forward<T: Element>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Element>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let a = src[2 * y * ow + 2 * x];
                let b = src[2 * y * ow + 2 * x + 1];
                let c2 = src[(2 * y + 1) * ow + 2 * x];
                let d = src[(2 * y + 1) * ow + 2 * x + 1];
                dst[y * w + x] = (a + b) + (c2 + d);
            }
        }
    }
    out
}
