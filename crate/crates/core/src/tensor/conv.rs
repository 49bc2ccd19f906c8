use serde::{Deserialize, Serialize};

use super::{gemm, Real, Tensor, TensorError};

/// Stride and (possibly asymmetric) zero padding, shared by both spatial axes.
///
/// `pad_begin` rows/columns are added before the input and `pad_end` after.
/// A transposed convolution with the same geometry is the exact adjoint of
/// the forward convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self::asymmetric(stride, padding, padding)
    }

    pub fn asymmetric(stride: usize, pad_begin: usize, pad_end: usize) -> Self {
        assert!(stride > 0, "stride must be positive");
        Self {
            stride,
            pad_begin,
            pad_end,
        }
    }

    /// Halves each spatial dimension for an odd kernel, like "same" padding.
    pub fn halving(kernel: usize) -> Self {
        let total = kernel - 2;
        Self::asymmetric(2, total / 2, total - total / 2)
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize, TensorError> {
        let padded = input + self.pad_begin + self.pad_end;
        if kernel > padded {
            return Err(TensorError::Shape(format!(
                "kernel {kernel} exceeds padded input {padded}"
            )));
        }
        if !(padded - kernel).is_multiple_of(self.stride) {
            return Err(TensorError::NonIntegral(format!(
                "({padded} - {kernel}) / {} for input {input}",
                self.stride
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn transposed_len(&self, input: usize, kernel: usize) -> Result<usize, TensorError> {
        let full = (input - 1) * self.stride + kernel;
        full.checked_sub(self.pad_begin + self.pad_end)
            .filter(|&v| v > 0)
            .ok_or_else(|| {
                TensorError::Shape(format!("padding consumes transposed output of {full}"))
            })
    }
}

/// Gradients of a (transposed) convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Plan {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeometry,
}

impl Plan {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    fn span(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.geom.stride;
        let pb = self.geom.pad_begin;
        // need 0 <= o*s + k - pb < in_len
        let lo = if k >= pb { 0 } else { (pb - k).div_ceil(s) };
        let hi = if in_len + pb > k {
            ((in_len + pb - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let s = self.geom.stride;
        let pb = self.geom.pad_begin;
        let ncols = self.cols();
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.channels {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                let (oy0, oy1) = self.span(ki, self.in_h, self.out_h);
                for kj in 0..self.kw {
                    let (ox0, ox1) = self.span(kj, self.in_w, self.out_w);
                    let row = ((c * self.kh + ki) * self.kw + kj) * ncols;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ki - pb;
                        let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if s == 1 {
                            let ix0 = ox0 + kj - pb;
                            dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] = src[ox * s + kj - pb];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let s = self.geom.stride;
        let pb = self.geom.pad_begin;
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                let (oy0, oy1) = self.span(ki, self.in_h, self.out_h);
                for kj in 0..self.kw {
                    let (ox0, ox1) = self.span(kj, self.in_w, self.out_w);
                    let row = ((c * self.kh + ki) * self.kw + kj) * ncols;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ki - pb;
                        let src = &cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        let dst = &mut plane[iy * self.in_w..(iy + 1) * self.in_w];
                        for ox in ox0..ox1 {
                            let ix = ox * s + kj - pb;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<(), TensorError> {
    match bias {
        Some(b) if b.len() != channels => Err(TensorError::Shape(format!(
            "bias of length {} for {channels} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (f, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[f % b.len()];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Real>(grad_out: &Tensor<T>, channels: usize, plane: usize) -> Tensor<T> {
    let mut g = vec![T::zero(); channels];
    for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
        g[i % channels] = g[i % channels] + chunk.iter().copied().sum::<T>();
    }
    Tensor::new(&[channels], g).expect("bias shape")
}

/// Cross-correlation of `[N, C, H, W]` input with `[F, C, kh, kw]` kernel plus per-filter bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>, TensorError> {
    let [n, c, h, w] = input.dims4()?;
    let [f, kc, kh, kw] = kernel.dims4()?;
    if kc != c {
        return Err(TensorError::Shape(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    check_bias(bias, f)?;
    let plan = Plan {
        channels: c,
        in_h: h,
        in_w: w,
        kh,
        kw,
        out_h: geom.output_len(h, kh)?,
        out_w: geom.output_len(w, kw)?,
        geom,
    };
    let (rows, ncols) = (plan.rows(), plan.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); n * f * ncols];
    for i in 0..n {
        plan.im2col(&input.data()[i * c * h * w..(i + 1) * c * h * w], &mut cols);
        let dst = &mut out[i * f * ncols..(i + 1) * f * ncols];
        gemm(f, rows, ncols, kernel.data(), false, &cols, false, dst, false);
    }
    add_bias(&mut out, bias, ncols);
    Tensor::new(&[n, f, plan.out_h, plan.out_w], out)
}

/// Exact gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, TensorError> {
    let [n, c, h, w] = input.dims4()?;
    let [f, _, kh, kw] = kernel.dims4()?;
    let plan = Plan {
        channels: c,
        in_h: h,
        in_w: w,
        kh,
        kw,
        out_h: geom.output_len(h, kh)?,
        out_w: geom.output_len(w, kw)?,
        geom,
    };
    if grad_out.shape() != [n, f, plan.out_h, plan.out_w] {
        return Err(TensorError::Shape(format!(
            "output gradient {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let (rows, ncols) = (plan.rows(), plan.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut grad_cols = vec![T::zero(); rows * ncols];
    let mut grad_kernel = vec![T::zero(); kernel.len()];
    let mut grad_input = vec![T::zero(); input.len()];
    for i in 0..n {
        plan.im2col(&input.data()[i * c * h * w..(i + 1) * c * h * w], &mut cols);
        let go = &grad_out.data()[i * f * ncols..(i + 1) * f * ncols];
        gemm(f, ncols, rows, go, false, &cols, true, &mut grad_kernel, true);
        gemm(rows, f, ncols, kernel.data(), true, go, false, &mut grad_cols, false);
        plan.col2im(&grad_cols, &mut grad_input[i * c * h * w..(i + 1) * c * h * w]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        kernel: Tensor::new(kernel.shape(), grad_kernel)?,
        bias: bias_grad(grad_out, f, ncols),
    })
}

fn transposed_plan<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Plan, [usize; 4]), TensorError> {
    let [n, c, h, w] = input.dims4()?;
    let [kc, f, kh, kw] = kernel.dims4()?;
    if kc != c {
        return Err(TensorError::Shape(format!(
            "transposed kernel expects {kc} input channels, input has {c}"
        )));
    }
    let out_h = geom.transposed_len(h, kh)?;
    let out_w = geom.transposed_len(w, kw)?;
    // the adjoint forward convolution maps [f, out_h, out_w] back to [c, h, w]
    if geom.output_len(out_h, kh)? != h || geom.output_len(out_w, kw)? != w {
        return Err(TensorError::Shape(format!(
            "transposed geometry {geom:?} is not invertible for {h}x{w}"
        )));
    }
    Ok((
        Plan {
            channels: f,
            in_h: out_h,
            in_w: out_w,
            kh,
            kw,
            out_h: h,
            out_w: w,
            geom,
        },
        [n, c, f, 0],
    ))
}

/// Transposed convolution of `[N, C, H, W]` input with a `[C, F, kh, kw]` kernel.
///
/// Output size is `(H - 1) * stride - pad_begin - pad_end + kh`.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>, TensorError> {
    let (plan, [n, c, f, _]) = transposed_plan(input, kernel, geom)?;
    check_bias(bias, f)?;
    let (rows, ncols) = (plan.rows(), plan.cols());
    let out_plane = plan.in_h * plan.in_w;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); n * f * out_plane];
    for i in 0..n {
        let x = &input.data()[i * c * ncols..(i + 1) * c * ncols];
        gemm(rows, c, ncols, kernel.data(), true, x, false, &mut cols, false);
        plan.col2im(&cols, &mut out[i * f * out_plane..(i + 1) * f * out_plane]);
    }
    add_bias(&mut out, bias, out_plane);
    Tensor::new(&[n, f, plan.in_h, plan.in_w], out)
}

/// Exact gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, TensorError> {
    let (plan, [n, c, f, _]) = transposed_plan(input, kernel, geom)?;
    let out_plane = plan.in_h * plan.in_w;
    if grad_out.shape() != [n, f, plan.in_h, plan.in_w] {
        return Err(TensorError::Shape(format!(
            "output gradient {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let (rows, ncols) = (plan.rows(), plan.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut grad_input = vec![T::zero(); input.len()];
    let mut grad_kernel = vec![T::zero(); kernel.len()];
    for i in 0..n {
        plan.im2col(&grad_out.data()[i * f * out_plane..(i + 1) * f * out_plane], &mut cols);
        let x = &input.data()[i * c * ncols..(i + 1) * c * ncols];
        gemm(c, rows, ncols, kernel.data(), false, &cols, false, &mut grad_input[i * c * ncols..(i + 1) * c * ncols], false);
        gemm(c, ncols, rows, x, false, &cols, true, &mut grad_kernel, true);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        kernel: Tensor::new(kernel.shape(), grad_kernel)?,
        bias: bias_grad(grad_out, f, out_plane),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
        let [n, c, h, w] = x.dims4().unwrap();
        let [f, _, kh, kw] = k.dims4().unwrap();
        let oh = geom.output_len(h, kh).unwrap();
        let ow = geom.output_len(w, kw).unwrap();
        let mut out = Tensor::zeros(&[n, f, oh, ow]);
        for b in 0..n {
            for o in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * geom.stride + i) as i64 - geom.pad_begin as i64;
                                    let ix = (ox * geom.stride + j) as i64 - geom.pad_begin as i64;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out.data_mut()[((b * f + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn full_kernel_gives_dot_product_plus_bias() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let b = Tensor::new(&[1], vec![0.75]).unwrap();
        let y = conv2d(&x, &k, Some(&b), ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        // 0.5 - 2 + 6 + 1 + 0.75
        assert_eq!(y.data()[0], 6.25);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [
            ConvGeometry::new(1, 0),
            ConvGeometry::new(1, 2),
            ConvGeometry::halving(5),
            ConvGeometry::asymmetric(3, 0, 2),
        ] {
            let x = Tensor::<f64>::uniform(&[2, 3, 8, 10], -1.0, 1.0, &mut rng);
            let k = Tensor::<f64>::uniform(&[4, 3, 5, 5], -1.0, 1.0, &mut rng);
            let (Ok(_), Ok(_)) = (geom.output_len(8, 5), geom.output_len(10, 5)) else {
                continue;
            };
            let y = conv2d(&x, &k, None, geom).unwrap();
            let z = naive_conv(&x, &k, geom);
            assert_eq!(y.shape(), z.shape());
            for (a, b) in y.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_integral_output_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 6, 6]);
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&x, &k, None, ConvGeometry::new(2, 2)),
            Err(TensorError::NonIntegral(_))
        ));
        let k3 = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            conv2d(&x, &k3, None, ConvGeometry::new(1, 0)),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn halving_geometry_halves_even_sizes() {
        let g = ConvGeometry::halving(5);
        assert_eq!((g.pad_begin, g.pad_end), (1, 2));
        assert_eq!(g.output_len(512, 5).unwrap(), 256);
        assert_eq!(g.transposed_len(256, 5).unwrap(), 512);
    }

    #[test]
    fn stride_two_transpose_spreads_scalar() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 3.5);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &k, None, ConvGeometry::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Tensor::<f64>::uniform(&[3, 2, 5, 5], -1.0, 1.0, &mut rng);
        let y = conv_transpose2d(&x, &k, None, ConvGeometry::halving(5)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeometry::halving(5);
        let x = Tensor::<f64>::uniform(&[2, 3, 8, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[4, 3, 5, 5], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng);
        let lhs = conv2d(&x, &k, None, geom).unwrap().dot(&y);
        let rhs = x.dot(&conv_transpose2d(&y, &k, None, geom).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10);
    }
}
