//! CPU convolution kernels (im2col + GEMM) with backward passes.
//!
//! The stock CPU convolutions are several times slower than a plain
//! im2col/GEMM formulation for the small channel counts used here, and the
//! transposed convolution has no fast path at all. Three kernels cover
//! everything: the forward convolution, its input gradient (which is also
//! the forward transposed convolution) and its weight gradient.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

fn bail(msg: impl Into<String>) -> candle_core::Error {
    candle_core::Error::Msg(msg.into())
}

trait Gemm: WithDType {
    /// `c = a·b + beta·c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_s: (isize, isize), b: &[Self], b_s: (isize, isize), beta: Self, c: &mut [Self], c_s: (isize, isize));
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_s: (isize, isize), b: &[Self], b_s: (isize, isize), beta: Self, c: &mut [Self], c_s: (isize, isize)) {
                debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: callers pass slices covering the m×k, k×n and m×n
                // extents addressed by the given strides.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), a_s.0, a_s.1, b.as_ptr(), b_s.0, b_s.1, beta, c.as_mut_ptr(), c_s.0, c_s.1);
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<Self> {
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kernel || span_w < kernel {
            return Err(bail(format!("conv: kernel {kernel} larger than padded input {span_h}x{span_w}")));
        }
        Ok(Self {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source column for output column `ox` and kernel column `kx`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// `col[(c·K + ky)·K + kx][oy·Wo + ox] = x[c][oy·s − p + ky][ox·s − p + kx]`
    fn im2col<T: WithDType>(&self, x: &[T], col: &mut [T]) {
        let k = self.kernel;
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src(oy, ky, self.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                if self.stride == 1 {
                                    let shift = kx as isize - self.padding as isize;
                                    for (ox, d) in dst.iter_mut().enumerate() {
                                        let ix = ox as isize + shift;
                                        *d = if ix >= 0 && (ix as usize) < self.w { src[ix as usize] } else { T::zero() };
                                    }
                                } else {
                                    for (ox, d) in dst.iter_mut().enumerate() {
                                        *d = match self.src(ox, kx, self.w) {
                                            Some(ix) => src[ix],
                                            None => T::zero(),
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds columns back into `x`.
    fn col2im<T: WithDType>(&self, col: &[T], x: &mut [T]) {
        let k = self.kernel;
        let cols = self.cols();
        x.fill(T::zero());
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, v) in src.iter().enumerate() {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                dst[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| bail("conv kernels require contiguous inputs"))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

/// Forward convolution; weight `(C_out, C_in, K, K)`.
struct ConvForward {
    stride: usize,
    padding: usize,
}

impl ConvForward {
    fn run<T: Gemm>(&self, x: &[T], xl: &Layout, w: &[T], wl: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let (n, c_in, h, wd) = dims4(xl)?;
        let (c_out, wc_in, k, k2) = dims4(wl)?;
        if wc_in != c_in || k != k2 {
            return Err(bail(format!("conv: input {:?} incompatible with weight {:?}", xl.dims(), wl.dims())));
        }
        let g = Geometry::new(c_in, h, wd, k, self.stride, self.padding)?;
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); n * c_out * cols];
        for b in 0..n {
            g.im2col(&x[b * c_in * h * wd..(b + 1) * c_in * h * wd], &mut col);
            let dst = &mut out[b * c_out * cols..(b + 1) * c_out * cols];
            T::gemm(c_out, rows, cols, w, (rows as isize, 1), &col, (cols as isize, 1), T::zero(), dst, (cols as isize, 1));
        }
        Ok((out, Shape::from((n, c_out, g.out_h, g.out_w))))
    }
}

/// Input gradient of a convolution: `(N, C_out, Ho, Wo)` upstream gradient
/// and `(C_out, C_in, K, K)` weight to `(N, C_in, H, W)`. With the roles of
/// the channels swapped this is the transposed convolution.
struct ConvInputGrad {
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
}

impl ConvInputGrad {
    fn run<T: Gemm>(&self, gy: &[T], gl: &Layout, w: &[T], wl: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let (n, c_out, gh, gw) = dims4(gl)?;
        let (wc_out, c_in, k, _) = dims4(wl)?;
        let g = Geometry::new(c_in, self.h, self.w, k, self.stride, self.padding)?;
        if wc_out != c_out || g.out_h != gh || g.out_w != gw {
            return Err(bail(format!(
                "conv input grad: gradient {:?} incompatible with weight {:?} and input {}x{}",
                gl.dims(),
                wl.dims(),
                self.h,
                self.w
            )));
        }
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = vec![T::zero(); rows * cols];
        let plane = c_in * self.h * self.w;
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            // col = Wᵀ · gy
            T::gemm(rows, c_out, cols, w, (1, rows as isize), &gy[b * c_out * cols..], (cols as isize, 1), T::zero(), &mut col, (cols as isize, 1));
            g.col2im(&col, &mut out[b * plane..(b + 1) * plane]);
        }
        Ok((out, Shape::from((n, c_in, self.h, self.w))))
    }
}

/// Weight gradient of a convolution: input `(N, C_in, H, W)` and upstream
/// gradient `(N, C_out, Ho, Wo)` to `(C_out, C_in, K, K)`.
struct ConvWeightGrad {
    stride: usize,
    padding: usize,
    kernel: usize,
}

impl ConvWeightGrad {
    fn run<T: Gemm>(&self, x: &[T], xl: &Layout, gy: &[T], gl: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let (n, c_in, h, w) = dims4(xl)?;
        let (gn, c_out, gh, gw) = dims4(gl)?;
        let g = Geometry::new(c_in, h, w, self.kernel, self.stride, self.padding)?;
        if gn != n || g.out_h != gh || g.out_w != gw {
            return Err(bail(format!("conv weight grad: input {:?} incompatible with gradient {:?}", xl.dims(), gl.dims())));
        }
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); c_out * rows];
        for b in 0..n {
            g.im2col(&x[b * c_in * h * w..(b + 1) * c_in * h * w], &mut col);
            // dW += gy · colᵀ
            let beta = if b == 0 { T::zero() } else { T::one() };
            T::gemm(c_out, cols, rows, &gy[b * c_out * cols..], (cols as isize, 1), &col, (1, cols as isize), beta, &mut out, (rows as isize, 1));
        }
        Ok((out, Shape::from((c_out, c_in, self.kernel, self.kernel))))
    }
}

macro_rules! dispatch {
    ($self:ident, $s1:ident, $l1:ident, $s2:ident, $l2:ident) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let (v, shape) = $self.run::<f32>(contiguous($s1, $l1)?, $l1, contiguous($s2, $l2)?, $l2)?;
                Ok((CpuStorage::F32(v), shape))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let (v, shape) = $self.run::<f64>(contiguous($s1, $l1)?, $l1, contiguous($s2, $l2)?, $l2)?;
                Ok((CpuStorage::F64(v), shape))
            }
            _ => Err(bail("conv kernels support matching f32 or f64 operands only")),
        }
    };
}

/// Differentiable `conv2d` with square kernels and no dilation.
struct Conv2dOp {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = ConvForward {
            stride: self.stride,
            padding: self.padding,
        };
        dispatch!(op, s1, l1, s2, l2)
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &InputGradOp(ConvInputGrad {
                stride: self.stride,
                padding: self.padding,
                h,
                w: wd,
            }),
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &WeightGradOp(ConvWeightGrad {
                stride: self.stride,
                padding: self.padding,
                kernel: w.dim(2)?,
            }),
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Differentiable transposed convolution; weight `(C_in, C_out, K, K)`.
struct ConvTranspose2dOp {
    stride: usize,
    padding: usize,
}

impl ConvTranspose2dOp {
    fn out_size(&self, input: usize, kernel: usize) -> candle_core::Result<usize> {
        ((input - 1) * self.stride + kernel)
            .checked_sub(2 * self.padding)
            .filter(|&s| s > 0)
            .ok_or_else(|| bail("conv_transpose2d: padding too large"))
    }
}

impl CustomOp2 for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv-transpose2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, h, w) = dims4(l1)?;
        let k = dims4(l2)?.2;
        let op = ConvInputGrad {
            stride: self.stride,
            padding: self.padding,
            h: self.out_size(h, k)?,
            w: self.out_size(w, k)?,
        };
        dispatch!(op, s1, l1, s2, l2)
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &ForwardOp(ConvForward {
                stride: self.stride,
                padding: self.padding,
            }),
        )?;
        let gw = grad.apply_op2_no_bwd(
            x,
            &WeightGradOp(ConvWeightGrad {
                stride: self.stride,
                padding: self.padding,
                kernel: w.dim(2)?,
            }),
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ForwardOp(ConvForward);
struct InputGradOp(ConvInputGrad);
struct WeightGradOp(ConvWeightGrad);

impl CustomOp2 for ForwardOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-nograd"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = &self.0;
        dispatch!(op, s1, l1, s2, l2)
    }
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = &self.0;
        dispatch!(op, s1, l1, s2, l2)
    }
}

impl CustomOp2 for WeightGradOp {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = &self.0;
        dispatch!(op, s1, l1, s2, l2)
    }
}

/// `x (N, C_in, H, W)` ⋆ `w (C_out, C_in, K, K)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { stride, padding })
}

/// Transposed convolution of `x (N, C_in, H, W)` with `w (C_in, C_out, K, K)`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvTranspose2dOp { stride, padding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Direct quadruple loop, independent of the im2col path.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                        continue;
                                    }
                                    acc += xv[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * wv[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(out, (n, co, oh, ow), &Device::Cpu).unwrap()
    }

    #[test]
    fn conv_matches_naive() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)] {
            let x = rand(&[2, 3, 9, 8], 1);
            let w = rand(&[5, 3, k, k], 2);
            let ours = conv2d(&x, &w, stride, pad).unwrap();
            assert!(max_diff(&ours, &naive_conv(&x, &w, stride, pad)) < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> = <x, convT(y)> with the same weight
        let x = rand(&[1, 3, 8, 8], 3);
        let w = rand(&[4, 3, 4, 4], 4);
        let y = rand(&[1, 4, 4, 4], 5);
        let lhs = (conv2d(&x, &w, 2, 1).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let xt = conv_transpose2d(&y, &w, 2, 1).unwrap();
        assert_eq!(xt.dims(), &[1, 3, 8, 8]);
        let rhs = (x * xt).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn matches_stock_kernels_including_gradients() {
        let x = Var::from_tensor(&rand(&[2, 3, 8, 8], 6)).unwrap();
        let w = Var::from_tensor(&rand(&[4, 3, 4, 4], 7)).unwrap();
        let wt = Var::from_tensor(&rand(&[4, 2, 4, 4], 8)).unwrap();
        let probe = rand(&[2, 2, 8, 8], 9);

        let run = |ours: bool| {
            let h = if ours { conv2d(&x, &w, 2, 1).unwrap() } else { x.conv2d(&w, 1, 2, 1, 1).unwrap() };
            let y = if ours {
                conv_transpose2d(&h, &wt, 2, 1).unwrap()
            } else {
                h.conv_transpose2d(&wt, 1, 0, 2, 1).unwrap()
            };
            let loss = (y * &probe).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            (
                grads.get(&x).unwrap().clone(),
                grads.get(&w).unwrap().clone(),
                grads.get(&wt).unwrap().clone(),
            )
        };
        let (a, b) = (run(true), run(false));
        assert!(max_diff(&a.0, &b.0) < 1e-10);
        assert!(max_diff(&a.1, &b.1) < 1e-10);
        assert!(max_diff(&a.2, &b.2) < 1e-10);
    }

    #[test]
    fn f32_supported() {
        let x = rand(&[1, 2, 6, 6], 1).to_dtype(DType::F32).unwrap();
        let w = rand(&[3, 2, 3, 3], 2).to_dtype(DType::F32).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap();
        let r = naive_conv(&x.to_dtype(DType::F64).unwrap(), &w.to_dtype(DType::F64).unwrap(), 1, 1);
        assert!(max_diff(&y.to_dtype(DType::F64).unwrap(), &r) < 1e-5);
    }
}
