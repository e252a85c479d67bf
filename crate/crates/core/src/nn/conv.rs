//! 2D convolution as im2col + GEMM.
//!
//! The convolution is a single fused autograd node; its backward computes the
//! input gradient (GEMM then fold) and the weight gradient (unfold then GEMM)
//! only for operands that are tracked.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

trait Element: Copy + Default + std::ops::AddAssign {}
impl Element for f32 {}
impl Element for f64 {}

/// Output columns `ox` whose input column `ox·stride + kj − padding` is in bounds.
fn valid_span(out: usize, input: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    // smallest ox with ox*stride + offset >= padding
    let lo = if offset >= padding { 0 } else { (padding - offset).div_ceil(stride) };
    // largest ox with ox*stride + offset - padding < input
    let limit = input + padding;
    let hi = if offset >= limit { 0 } else { ((limit - offset - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// `[B, C, H, W] -> [B, C·k·k, Ho·Wo]`.
fn unfold<T: Element>(src: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols) = (g.rows(), g.cols());
    let plane = g.height * g.width;
    let mut out = vec![T::default(); batch * rows * cols];
    for b in 0..batch {
        for c in 0..g.channels {
            let img = &src[(b * g.channels + c) * plane..][..plane];
            for ki in 0..g.kernel {
                let (y_lo, y_hi) = valid_span(ho, g.height, g.stride, ki, g.padding);
                for kj in 0..g.kernel {
                    let (x_lo, x_hi) = valid_span(wo, g.width, g.stride, kj, g.padding);
                    let r = (c * g.kernel + ki) * g.kernel + kj;
                    let dst = &mut out[(b * rows + r) * cols..][..cols];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.padding;
                        let row = &img[iy * g.width..][..g.width];
                        let line = &mut dst[oy * wo..][..wo];
                        let ix0 = x_lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            line[x_lo..x_hi].copy_from_slice(&row[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for (v, ix) in line[x_lo..x_hi].iter_mut().zip((ix0..).step_by(g.stride)) {
                                *v = row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold`]: `[B, C·k·k, Ho·Wo] -> [B, C, H, W]`, summing overlaps.
fn fold<T: Element>(src: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols) = (g.rows(), g.cols());
    let plane = g.height * g.width;
    let mut out = vec![T::default(); batch * g.channels * plane];
    for b in 0..batch {
        for c in 0..g.channels {
            let img = &mut out[(b * g.channels + c) * plane..][..plane];
            for ki in 0..g.kernel {
                let (y_lo, y_hi) = valid_span(ho, g.height, g.stride, ki, g.padding);
                for kj in 0..g.kernel {
                    let (x_lo, x_hi) = valid_span(wo, g.width, g.stride, kj, g.padding);
                    let r = (c * g.kernel + ki) * g.kernel + kj;
                    let s = &src[(b * rows + r) * cols..][..cols];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.padding;
                        let row = &mut img[iy * g.width..][..g.width];
                        let line = &s[oy * wo..][..wo];
                        let ix0 = x_lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            for (dst, v) in row[ix0..ix0 + (x_hi - x_lo)].iter_mut().zip(&line[x_lo..x_hi]) {
                                *dst += *v;
                            }
                        } else {
                            for (v, ix) in line[x_lo..x_hi].iter().zip((ix0..).step_by(g.stride)) {
                                row[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

/// Row-major `c = a · b (+ c)` with optional transposes.
trait Gemm: Element {
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, c: &mut [$t], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe row-major views of those slices.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

fn forward_impl<T: Gemm>(x: &[T], w: &[T], batch: usize, cout: usize, g: &ConvGeometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane_in = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * cout * cols];
    for b in 0..batch {
        let unfolded = unfold(&x[b * plane_in..][..plane_in], 1, g);
        T::gemm(cout, rows, cols, w, false, &unfolded, false, &mut out[b * cout * cols..][..cout * cols], false);
    }
    out
}

fn grad_input_impl<T: Gemm>(grad: &[T], w: &[T], batch: usize, cout: usize, g: &ConvGeometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane_in = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * plane_in];
    let mut scratch = vec![T::default(); rows * cols];
    for b in 0..batch {
        T::gemm(rows, cout, cols, w, true, &grad[b * cout * cols..][..cout * cols], false, &mut scratch, false);
        out[b * plane_in..][..plane_in].copy_from_slice(&fold(&scratch, 1, g));
    }
    out
}

fn grad_weight_impl<T: Gemm>(x: &[T], grad: &[T], batch: usize, cout: usize, g: &ConvGeometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane_in = g.channels * g.height * g.width;
    let mut out = vec![T::default(); cout * rows];
    for b in 0..batch {
        let unfolded = unfold(&x[b * plane_in..][..plane_in], 1, g);
        T::gemm(cout, cols, rows, &grad[b * cout * cols..][..cout * cols], false, &unfolded, true, &mut out, b > 0);
    }
    out
}

/// Fused convolution `x: [B, C, H, W]`, `w: [Co, C, k, k]` -> `[B, Co, Ho, Wo]`.
struct ConvOp(ConvGeometry);
/// `(grad_out, w) -> grad_x`.
struct ConvGradInput(ConvGeometry);
/// `(x, grad_out) -> grad_w`.
struct ConvGradWeight(ConvGeometry);

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let $a = contiguous(x, $l1, $name)?;
                let $b = contiguous(y, $l2, $name)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let $a = contiguous(x, $l1, $name)?;
                let $b = contiguous(y, $l2, $name)?;
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg(format!("{} supports matching f32/f64 only", $name))),
        }
    };
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l1.dims()[0];
        let cout = l2.dims()[0];
        let out = dispatch2!(s1, l1, s2, l2, "conv2d", |x, w| forward_impl(x, w, batch, cout, &g));
        Ok((out, Shape::from((batch, cout, g.out_height(), g.out_width()))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &ConvGradInput(self.0))?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.apply_op2_no_bwd(&grad, &ConvGradWeight(self.0))?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l1.dims()[0];
        let cout = l2.dims()[0];
        let out = dispatch2!(s1, l1, s2, l2, "conv2d-grad-input", |gr, w| grad_input_impl(gr, w, batch, cout, &g));
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l1.dims()[0];
        let cout = l2.dims()[1];
        let out = dispatch2!(s1, l1, s2, l2, "conv2d-grad-weight", |x, gr| grad_weight_impl(x, gr, batch, cout, &g));
        Ok((out, Shape::from((cout, g.channels, g.kernel, g.kernel))))
    }
}

/// Convolution of `x: [B, C, H, W]` with `weight: [Co, C, k, k]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(candle_core::Error::Msg(format!(
            "conv2d: input has {c} channels, kernel is {co}×{ci}×{k}×{k2}"
        )));
    }
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let out = if k == 1 && stride == 1 && padding == 0 {
        weight
            .reshape((co, c))?
            .broadcast_matmul(&x.reshape((b, c, h * w))?)?
            .reshape((b, co, h, w))?
    } else {
        x.contiguous()?.apply_op2(&weight.contiguous()?, ConvOp(g))?
    };
    match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, co, 1, 1))?),
        None => Ok(out),
    }
}
