use super::Tensor;
use crate::error::{Error, Result};

/// 2-D convolution weights. Computes cross-correlation (no kernel flip).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, kh, kw]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Output extent along one axis: `floor((len + 2*pad - k) / stride) + 1`.
pub fn conv_output_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvParams {
    /// Zero-initialized square-kernel convolution.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if self.weight.shape() != [self.out_channels, self.in_channels, kh, kw] {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not match [{}, {}, {kh}, {kw}]",
                self.weight.shape(),
                self.out_channels,
                self.in_channels
            )));
        }
        if self.bias.shape() != [self.out_channels] {
            return Err(Error::Shape(format!(
                "conv bias {:?} does not match [{}]",
                self.bias.shape(),
                self.out_channels
            )));
        }
        Ok(())
    }

    fn geometry(&self, input: &Tensor) -> Result<Geometry> {
        self.validate()?;
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (kh, kw) = self.kernel;
        let (Some(ho), Some(wo)) = (
            conv_output_extent(h, kh, self.stride, self.padding),
            conv_output_extent(w, kw, self.stride, self.padding),
        ) else {
            return Err(Error::Shape(format!(
                "input {h}x{w} (pad {}) smaller than kernel {kh}x{kw}",
                self.padding
            )));
        };
        Ok(Geometry {
            n,
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride: self.stride,
            pad: self.padding,
        })
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded conv reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.p();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let p = self.p();
        dx.fill(0.0);
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit
/// row/column strides on `a` and `b` so transposes need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the full strided extents of each
    // operand; all strides are non-negative and derived from those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Geometry {
    /// Column matrix for the whole batch: `K x (N*P)`, sample-major columns.
    fn batch_columns(&self, input: &Tensor) -> Vec<f32> {
        let (k, p, n) = (self.k(), self.p(), self.n);
        let mut cols = vec![0f32; k * n * p];
        let mut col = vec![0f32; k * p];
        for b in 0..n {
            let x = input.sample(b);
            let src: &[f32] = if self.is_pointwise() {
                x
            } else {
                self.im2col(x, &mut col);
                &col
            };
            for row in 0..k {
                cols[row * n * p + b * p..row * n * p + (b + 1) * p]
                    .copy_from_slice(&src[row * p..(row + 1) * p]);
            }
        }
        cols
    }
}

pub fn conv2d_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = p.geometry(input)?;
    input.ensure_finite("conv2d input")?;
    let (k, np, co, n) = (g.k(), g.p(), p.out_channels, g.n);
    let cols = g.batch_columns(input);
    let mut y = vec![0f32; co * n * np];
    gemm(co, k, n * np, p.weight.data(), (k as isize, 1), &cols, ((n * np) as isize, 1), 0.0, &mut y);
    let bias = p.bias.data();
    let mut out = vec![0f32; n * co * np];
    for b in 0..n {
        for o in 0..co {
            let src = &y[o * n * np + b * np..o * n * np + (b + 1) * np];
            let dst = &mut out[(b * co + o) * np..(b * co + o + 1) * np];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    Tensor::new(&[n, co, g.ho, g.wo], out)
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = p.geometry(input)?;
    let (k, np, co, n) = (g.k(), g.p(), p.out_channels, g.n);
    if grad_out.shape() != [n, co, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "conv grad_out {:?} does not match output [{n}, {co}, {}, {}]",
            grad_out.shape(),
            g.ho,
            g.wo
        )));
    }
    let width = n * np;
    // dY as Co x (N*P), matching the column layout.
    let mut dy = vec![0f32; co * width];
    for b in 0..n {
        let src = grad_out.sample(b);
        for o in 0..co {
            dy[o * width + b * np..o * width + (b + 1) * np]
                .copy_from_slice(&src[o * np..(o + 1) * np]);
        }
    }

    let mut grad_bias = vec![0f32; co];
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb = dy[o * width..(o + 1) * width]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>() as f32;
    }

    // dW = dY * cols^T
    let mut cols = g.batch_columns(input);
    let mut grad_weight = vec![0f32; co * k];
    gemm(co, width, k, &dy, (width as isize, 1), &cols, (1, width as isize), 0.0, &mut grad_weight);

    // dcols = W^T * dY, reusing the column buffer.
    gemm(k, co, width, p.weight.data(), (1, k as isize), &dy, (width as isize, 1), 0.0, &mut cols);
    let sample_len = g.c * g.h * g.w;
    let mut grad_input = vec![0f32; n * sample_len];
    let mut col = vec![0f32; k * np];
    for b in 0..n {
        let dx = &mut grad_input[b * sample_len..(b + 1) * sample_len];
        let target: &mut [f32] = if g.is_pointwise() { dx } else { &mut col };
        for row in 0..k {
            target[row * np..(row + 1) * np]
                .copy_from_slice(&cols[row * width + b * np..row * width + (b + 1) * np]);
        }
        if !g.is_pointwise() {
            g.col2im(&col, dx);
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        weight: Tensor::new(p.weight.shape(), grad_weight)?,
        bias: Tensor::new(&[co], grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filter(value: f32) -> ConvParams {
        let mut p = ConvParams::new(1, 1, 1, 1, 0);
        p.weight.data_mut()[0] = value;
        p
    }

    /// Direct nested-loop cross-correlation, used as a reference.
    fn naive(input: &Tensor, p: &ConvParams) -> Tensor {
        let (n, c, h, w) = input.dims4().unwrap();
        let (kh, kw) = p.kernel;
        let ho = conv_output_extent(h, kh, p.stride, p.padding).unwrap();
        let wo = conv_output_extent(w, kw, p.stride, p.padding).unwrap();
        let mut out = Tensor::zeros(&[n, p.out_channels, ho, wo]);
        let x = input.data();
        let wt = p.weight.data();
        for b in 0..n {
            for o in 0..p.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = p.bias.data()[o] as f64;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * p.stride + i) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + j) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = wt[((o * c + ci) * kh + i) * kw + j];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data_mut()[((b * p.out_channels + o) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_filter_scales_input() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d_forward(&x, &filter(2.0)).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn box_filter_sums() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut p = ConvParams::new(1, 1, 3, 1, 0);
        p.weight = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let x = Tensor::zeros(&[1, 3, 128, 128]);
        let p = ConvParams::new(3, 16, 3, 2, 1);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 16, 64, 64]);
    }

    #[test]
    fn matches_naive_reference() {
        let mut seed = 7u32;
        let mut rnd = move || {
            seed = seed.wrapping_mul(1664525).wrapping_add(1013904223);
            (seed >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        };
        for &(k, s, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 2, 0)] {
            let x = Tensor::from_fn(&[2, 3, 7, 6], |_| rnd());
            let mut p = ConvParams::new(3, 4, k, s, pad);
            p.weight = Tensor::from_fn(p.weight.shape(), |_| rnd());
            p.bias = Tensor::from_fn(&[4], |_| rnd());
            let fast = conv2d_forward(&x, &p).unwrap();
            let slow = naive(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} (k={k} s={s} p={pad})");
            }
        }
    }

    #[test]
    fn hand_chain_rule_pointwise() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let dy = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let g = conv2d_backward(&x, &filter(2.0), &dy).unwrap();
        assert_eq!(g.weight.data(), &[3.0]);
        assert_eq!(g.input.data(), &[2.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f32).sin());
        let mut p = ConvParams::new(2, 3, 3, 2, 1);
        p.weight = Tensor::from_fn(p.weight.shape(), |i| (i as f32).cos());
        let dy = Tensor::zeros(&[2, 3, 3, 3]);
        let g = conv2d_backward(&x, &p, &dy).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let p = ConvParams::new(3, 4, 3, 1, 1);
        assert!(matches!(
            conv2d_forward(&Tensor::zeros(&[1, 2, 4, 4]), &p),
            Err(Error::Shape(_))
        ));
        let tiny = ConvParams::new(1, 1, 3, 1, 0);
        assert!(conv2d_forward(&Tensor::zeros(&[1, 1, 2, 2]), &tiny).is_err());
        let mut x = Tensor::zeros(&[1, 3, 4, 4]);
        x.data_mut()[5] = f32::INFINITY;
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::NonFinite(_))));
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(&[1, 4, 3, 3])).is_err());
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(128, 3, 2, 1), Some(64));
        assert_eq!(conv_output_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv_output_extent(1, 3, 2, 1), Some(1));
        assert_eq!(conv_output_extent(2, 3, 1, 0), None);
    }
}
