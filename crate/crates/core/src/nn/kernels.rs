//! CPU kernels registered as candle custom ops.
//!
//! candle's own convolution backward pass goes through a transposed
//! convolution and a grouped convolution, both of which are slow on CPU. The
//! ops here lower every convolution to im2col + matmul (so candle's gemm does
//! the heavy lifting in both directions) and implement the depthwise 3x3
//! convolution and the 2x nearest upsample directly.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};
use num_traits::Float;

trait Elem: Float + Default + std::ops::AddAssign + Send + Sync + 'static {}
impl Elem for f32 {}
impl Elem for f64 {}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("kernel input must be contiguous"),
    }
}

macro_rules! dispatch1 {
    ($storage:expr, $layout:expr, |$x:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $x = contiguous(v, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $x = contiguous(v, $layout)?;
                CpuStorage::F64($body)
            }
            _ => bail!("kernels support f32 and f64 only"),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(v1), CpuStorage::F32(v2)) => {
                let $a = contiguous(v1, $l1)?;
                let $b = contiguous(v2, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(v1), CpuStorage::F64(v2)) => {
                let $a = contiguous(v1, $l1)?;
                let $b = contiguous(v2, $l2)?;
                CpuStorage::F64($body)
            }
            _ => bail!("kernels support matching f32 or f64 operands only"),
        }
    };
}

/// Geometry of a square-kernel 2D convolution over a `(B, C, H, W)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
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

    // Source index along one axis for output position `o` and kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn im2col<T: Elem>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.batch * rows * cols];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let dst = &mut out[(b * rows + row) * cols..][..cols];
                    for oy in 0..ho {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let src = &plane[iy * g.width..][..g.width];
                        let drow = &mut dst[oy * wo..][..wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Elem>(cols_data: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let plane =
                &mut out[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let src = &cols_data[(b * rows + row) * cols..][..cols];
                    for oy in 0..ho {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let dst = &mut plane[iy * g.width..][..g.width];
                        for ox in 0..wo {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                dst[ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(B, C, H, W) -> (B, C*k*k, Ho*Wo)` patch matrix; the backward pass is col2im.
pub struct Im2Col(pub ConvGeometry);

/// Scatter-add inverse of [`Im2Col`], used only on the backward path.
pub struct Col2Im(pub ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        if l.dims() != [g.batch, g.channels, g.height, g.width] {
            bail!("im2col: input {:?} does not match geometry {g:?}", l.dims());
        }
        let out = dispatch1!(s, l, |x| im2col(x, g));
        Ok((out, Shape::from((g.batch, g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        if l.dims() != [g.batch, g.rows(), g.cols()] {
            bail!("col2im: input {:?} does not match geometry {g:?}", l.dims());
        }
        let out = dispatch1!(s, l, |x| col2im(x, g));
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }
}

// Depthwise 3x3, stride 1, zero padding 1.
fn dw_forward<T: Elem>(x: &[T], w: &[T], b: usize, c: usize, h: usize, wd: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * c * h * wd];
    for bc in 0..b * c {
        let ch = bc % c;
        let k = &w[ch * 9..ch * 9 + 9];
        let src = &x[bc * h * wd..][..h * wd];
        let dst = &mut out[bc * h * wd..][..h * wd];
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = k[ky * 3 + kx];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * wd..][..wd];
                    let drow = &mut dst[y * wd..][..wd];
                    let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { wd - 1 } else { wd });
                    for xx in x0..x1 {
                        drow[xx] += wv * srow[xx + kx - 1];
                    }
                }
            }
        }
    }
    out
}

// Gradient w.r.t. the input: correlate the output gradient with the flipped kernel.
fn dw_grad_input<T: Elem>(gy: &[T], w: &[T], b: usize, c: usize, h: usize, wd: usize) -> Vec<T> {
    let mut flipped = vec![T::zero(); c * 9];
    for ch in 0..c {
        for t in 0..9 {
            flipped[ch * 9 + t] = w[ch * 9 + (8 - t)];
        }
    }
    dw_forward(gy, &flipped, b, c, h, wd)
}

fn dw_grad_weight<T: Elem>(x: &[T], gy: &[T], b: usize, c: usize, h: usize, wd: usize) -> Vec<T> {
    let mut gw = vec![T::zero(); c * 9];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &x[bc * h * wd..][..h * wd];
        let g = &gy[bc * h * wd..][..h * wd];
        for ky in 0..3 {
            for kx in 0..3 {
                let mut acc = T::zero();
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * wd..][..wd];
                    let grow = &g[y * wd..][..wd];
                    let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { wd - 1 } else { wd });
                    for xx in x0..x1 {
                        acc += grow[xx] * srow[xx + kx - 1];
                    }
                }
                gw[ch * 9 + ky * 3 + kx] += acc;
            }
        }
    }
    gw
}

/// Depthwise 3x3 convolution: `x (B, C, H, W)`, `w (C, 1, 3, 3)`.
pub struct DepthwiseConv3x3;
struct DepthwiseGradInput;
struct DepthwiseGradWeight;

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    match *l.dims() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => bail!("expected a rank-4 tensor, got {:?}", l.dims()),
    }
}

impl CustomOp2 for DepthwiseConv3x3 {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        if l2.dims() != [c, 1, 3, 3] {
            bail!("depthwise kernel must be ({c}, 1, 3, 3), got {:?}", l2.dims());
        }
        let out = dispatch2!(s1, l1, s2, l2, |x, k| dw_forward(x, k, b, c, h, w));
        Ok((out, Shape::from((b, c, h, w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &DepthwiseGradInput)?;
        let gw = x.apply_op2_no_bwd(&grad, &DepthwiseGradWeight)?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseGradInput {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |g, k| dw_grad_input(g, k, b, c, h, w));
        Ok((out, Shape::from((b, c, h, w))))
    }
}

impl CustomOp2 for DepthwiseGradWeight {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, g| dw_grad_weight(x, g, b, c, h, w));
        Ok((out, Shape::from((c, 1, 3, 3))))
    }
}

fn upsample2x<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            let row = &src[y * w..][..w];
            for dy in 0..2 {
                let drow = &mut dst[(2 * y + dy) * 2 * w..][..2 * w];
                for (xx, &v) in row.iter().enumerate() {
                    drow[2 * xx] = v;
                    drow[2 * xx + 1] = v;
                }
            }
        }
    }
    out
}

fn sum_pool2x<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / 2) * ow + xx / 2] += src[y * w + xx];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsample of a `(B, C, H, W)` tensor.
pub struct Upsample2x;
struct SumPool2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        let out = dispatch1!(s, l, |x| upsample2x(x, b * c, h, w));
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sum-pool-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        let out = dispatch1!(s, l, |x| sum_pool2x(x, b * c, h, w));
        Ok((out, Shape::from((b, c, h / 2, w / 2))))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn fast_tanh<T: Elem>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_forward<T: Elem>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    x.iter().map(|&v| half * v * (T::one() + fast_tanh(c * (v + a * v * v * v)))).collect()
}

fn gelu_backward<T: Elem>(x: &[T], g: &[T]) -> Vec<T> {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    let three_a = T::from(3.0 * GELU_A).unwrap();
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let t = fast_tanh(c * (v + a * v * v * v));
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three_a * v * v);
            gv * d
        })
        .collect()
}

/// Tanh-approximated GELU with an analytic backward pass.
pub struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch1!(s, l, |x| gelu_forward(x)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch2!(s1, l1, s2, l2, |x, g| gelu_backward(x, g)), l1.shape().clone()))
    }
}

/// Per-position mean and inverse standard deviation over the channel axis.
fn channel_stats<T: Elem>(x: &[T], b: usize, c: usize, hw: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); b * hw];
    let mut inv = vec![T::zero(); b * hw];
    let n = T::from(c).unwrap();
    for bi in 0..b {
        let m = &mut mean[bi * hw..(bi + 1) * hw];
        let s = &mut inv[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let row = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for p in 0..hw {
                m[p] += row[p];
            }
        }
        m.iter_mut().for_each(|v| *v = *v / n);
        for ci in 0..c {
            let row = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for p in 0..hw {
                let d = row[p] - m[p];
                s[p] += d * d;
            }
        }
        let e = T::from(eps).unwrap();
        s.iter_mut().for_each(|v| *v = T::one() / (*v / n + e).sqrt());
    }
    (mean, inv)
}

fn norm_forward<T: Elem>(x: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
    let (mean, inv) = channel_stats(x, b, c, hw, eps);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for p in 0..hw {
                out[o + p] = (x[o + p] - mean[bi * hw + p]) * inv[bi * hw + p];
            }
        }
    }
    out
}

fn norm_backward<T: Elem>(x: &[T], g: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
    let (mean, inv) = channel_stats(x, b, c, hw, eps);
    let n = T::from(c).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut g_mean = vec![T::zero(); hw];
    let mut gx_mean = vec![T::zero(); hw];
    for bi in 0..b {
        let (m, s) = (&mean[bi * hw..(bi + 1) * hw], &inv[bi * hw..(bi + 1) * hw]);
        g_mean.iter_mut().for_each(|v| *v = T::zero());
        gx_mean.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for p in 0..hw {
                g_mean[p] += g[o + p];
                gx_mean[p] += g[o + p] * (x[o + p] - m[p]) * s[p];
            }
        }
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for p in 0..hw {
                let xh = (x[o + p] - m[p]) * s[p];
                out[o + p] = s[p] * (g[o + p] - g_mean[p] / n - xh * gx_mean[p] / n);
            }
        }
    }
    out
}

/// Normalizes a `(B, C, H, W)` tensor to zero mean and unit variance over
/// the channel axis at every position.
pub struct ChannelNorm {
    pub eps: f64,
}
struct ChannelNormGrad {
    eps: f64,
}

impl CustomOp1 for ChannelNorm {
    fn name(&self) -> &'static str {
        "channel-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        let out = dispatch1!(s, l, |x| norm_forward(x, b, c, h * w, self.eps));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &ChannelNormGrad { eps: self.eps })?;
        Ok(Some(g))
    }
}

impl CustomOp2 for ChannelNormGrad {
    fn name(&self) -> &'static str {
        "channel-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, g| norm_backward(x, g, b, c, h * w, self.eps));
        Ok((out, l1.shape().clone()))
    }
}

/// Index of the scale for plane `(bi, ci)`: per image and channel, or per
/// channel only.
fn plane_param(bi: usize, ci: usize, c: usize, per_batch: bool) -> usize {
    if per_batch {
        bi * c + ci
    } else {
        ci
    }
}

fn plane_scale<T: Elem>(x: &[T], s: &[T], b: usize, c: usize, hw: usize, per_batch: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = s[plane_param(bi, ci, c, per_batch)];
            let o = (bi * c + ci) * hw;
            out[o..o + hw].iter_mut().zip(&x[o..o + hw]).for_each(|(y, &v)| *y = v * k);
        }
    }
    out
}

fn plane_shift<T: Elem>(x: &[T], t: &[T], b: usize, c: usize, hw: usize, per_batch: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = t[plane_param(bi, ci, c, per_batch)];
            let o = (bi * c + ci) * hw;
            out[o..o + hw].iter_mut().zip(&x[o..o + hw]).for_each(|(y, &v)| *y = v + k);
        }
    }
    out
}

/// Per-plane `sum(a * b)`, or `sum(a)` when `b` is `None`, accumulated per
/// channel unless `per_batch`.
fn plane_reduce<T: Elem>(a: &[T], b_: Option<&[T]>, b: usize, c: usize, hw: usize, per_batch: bool) -> Vec<T> {
    let mut out = vec![T::zero(); if per_batch { b * c } else { c }];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            let mut acc = T::zero();
            match b_ {
                Some(other) => a[o..o + hw].iter().zip(&other[o..o + hw]).for_each(|(&u, &v)| acc += u * v),
                None => a[o..o + hw].iter().for_each(|&u| acc += u),
            }
            out[plane_param(bi, ci, c, per_batch)] += acc;
        }
    }
    out
}

fn plane_params(x: &Layout, p: &Layout) -> candle_core::Result<(usize, usize, usize, bool)> {
    let (b, c, h, w) = dims4(x)?;
    let per_batch = match p.dims() {
        [pc] if *pc == c => false,
        [pb, pc] if *pb == b && *pc == c => true,
        d => bail!("per-plane parameter must be ({c}) or ({b}, {c}), got {d:?}"),
    };
    Ok((b, c, h * w, per_batch))
}

/// `x * s` with `s` of shape `(C)` or `(B, C)` broadcast over each plane.
pub struct PlaneScale;
/// `x + t` with `t` of shape `(C)` or `(B, C)` broadcast over each plane.
pub struct PlaneShift;
struct PlaneDot;
struct PlaneSum {
    per_batch: bool,
    batch: usize,
}

impl CustomOp2 for PlaneScale {
    fn name(&self) -> &'static str {
        "plane-scale"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw, pb) = plane_params(l1, l2)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, s| plane_scale(x, s, b, c, hw, pb));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        s: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(s, &PlaneScale)?;
        let mut gs = grad.apply_op2_no_bwd(&x.contiguous()?, &PlaneDot)?;
        if s.rank() == 1 {
            gs = gs.sum(0)?;
        }
        Ok((Some(gx), Some(gs)))
    }
}

impl CustomOp2 for PlaneDot {
    fn name(&self) -> &'static str {
        "plane-dot"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        if l2.dims() != l1.dims() {
            bail!("plane-dot operands differ: {:?} vs {:?}", l1.dims(), l2.dims());
        }
        let out = dispatch2!(s1, l1, s2, l2, |g, x| plane_reduce(g, Some(x), b, c, h * w, true));
        Ok((out, Shape::from((b, c))))
    }
}

impl CustomOp2 for PlaneShift {
    fn name(&self) -> &'static str {
        "plane-shift"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw, pb) = plane_params(l1, l2)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, t| plane_shift(x, t, b, c, hw, pb));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        t: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let per_batch = t.rank() == 2;
        let gt = grad.contiguous()?.apply_op1_no_bwd(&PlaneSum { per_batch, batch: x.dim(0)? })?;
        Ok((Some(grad.clone()), Some(gt)))
    }
}

impl CustomOp1 for PlaneSum {
    fn name(&self) -> &'static str {
        "plane-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        let out = dispatch1!(s, l, |g| plane_reduce(g, None, b, c, h * w, self.per_batch));
        let shape = if self.per_batch { Shape::from((self.batch, c)) } else { Shape::from(c) };
        Ok((out, shape))
    }
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

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn im2col_conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let g = ConvGeometry { batch: b, channels: c, height: h, width: wd, kernel: k, stride, padding };
        let cols = x.apply_op1(Im2Col(g)).unwrap();
        let wm = w.reshape((1, co, c * k * k)).unwrap().broadcast_as((b, co, c * k * k)).unwrap().contiguous().unwrap();
        wm.matmul(&cols).unwrap().reshape((b, co, g.out_height(), g.out_width())).unwrap()
    }

    #[test]
    fn im2col_matches_candle_conv() {
        let x = rand(&[2, 3, 9, 10], 1);
        let w = rand(&[4, 3, 3, 3], 2);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let ours = im2col_conv(&x, &w, stride, pad);
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs(&ours, &reference) < 1e-12);
        }
    }

    #[test]
    fn im2col_gradient_matches_candle() {
        let x = Var::from_tensor(&rand(&[1, 2, 6, 6], 3)).unwrap();
        let w = rand(&[3, 2, 3, 3], 4);
        let probe = rand(&[1, 3, 3, 3], 5);
        let ours = (im2col_conv(x.as_tensor(), &w, 2, 1) * &probe).unwrap().sum_all().unwrap();
        let reference = (x.as_tensor().conv2d(&w, 1, 2, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let g2 = reference.backward().unwrap();
        assert!(max_abs(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn depthwise_matches_grouped_conv_and_gradients() {
        let x = Var::from_tensor(&rand(&[2, 3, 5, 4], 6)).unwrap();
        let w = Var::from_tensor(&rand(&[3, 1, 3, 3], 7)).unwrap();
        let probe = rand(&[2, 3, 5, 4], 8);
        let ours = x.as_tensor().apply_op2(w.as_tensor(), DepthwiseConv3x3).unwrap();
        let reference = x.as_tensor().conv2d(w.as_tensor(), 1, 1, 1, 3).unwrap();
        assert!(max_abs(&ours, &reference) < 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_abs(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
        assert!(max_abs(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-12);
    }

    #[test]
    fn upsample_and_its_gradient() {
        let x = Var::from_tensor(&rand(&[1, 2, 3, 4], 9)).unwrap();
        let up = x.as_tensor().apply_op1(Upsample2x).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(6, 8).unwrap();
        assert!(max_abs(&up, &reference) < 1e-15);
        let g = up.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap();
        let fours = Tensor::full(4f64, (1, 2, 3, 4), &Device::Cpu).unwrap();
        assert!(max_abs(gx, &fours) < 1e-15);
        assert_eq!(gx.dtype(), DType::F64);
    }

    #[test]
    fn gelu_matches_candle_and_finite_differences() {
        let x = Var::from_tensor(&(rand(&[2, 3, 4, 5], 10) * 4.0).unwrap()).unwrap();
        let ours = x.as_tensor().apply_op1(Gelu).unwrap();
        assert!(max_abs(&ours, &x.as_tensor().gelu().unwrap()) < 1e-12);
        let g = ours.sum_all().unwrap().backward().unwrap();
        let analytic = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |v: f64| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh());
        let h = 1e-6;
        for (v, a) in xs.iter().zip(&analytic) {
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((fd - a).abs() < 1e-8, "{v}: {a} vs {fd}");
        }
    }

    #[test]
    fn channel_norm_matches_composed_ops_and_gradient() {
        let x = Var::from_tensor(&rand(&[2, 5, 3, 4], 12)).unwrap();
        let probe = rand(&[2, 5, 3, 4], 13);
        let eps = 1e-6;
        let ours = x.as_tensor().apply_op1(ChannelNorm { eps }).unwrap();
        let mean = x.as_tensor().mean_keepdim(1).unwrap();
        let centered = x.as_tensor().broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(1).unwrap();
        let reference = centered.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
        assert!(max_abs(&ours, &reference) < 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_abs(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
    }

    #[test]
    fn plane_scale_and_shift_match_broadcast_ops() {
        for per_batch in [false, true] {
            let x = Var::from_tensor(&rand(&[2, 3, 4, 5], 14)).unwrap();
            let pshape: &[usize] = if per_batch { &[2, 3] } else { &[3] };
            let s = Var::from_tensor(&rand(pshape, 15)).unwrap();
            let t = Var::from_tensor(&rand(pshape, 16)).unwrap();
            let probe = rand(&[2, 3, 4, 5], 17);
            let ours = x
                .as_tensor()
                .apply_op2(s.as_tensor(), PlaneScale)
                .unwrap()
                .apply_op2(t.as_tensor(), PlaneShift)
                .unwrap();
            let bshape: &[usize] = if per_batch { &[2, 3, 1, 1] } else { &[1, 3, 1, 1] };
            let reference = x
                .as_tensor()
                .broadcast_mul(&s.as_tensor().reshape(bshape).unwrap())
                .unwrap()
                .broadcast_add(&t.as_tensor().reshape(bshape).unwrap())
                .unwrap();
            assert!(max_abs(&ours, &reference) < 1e-12);
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &s, &t] {
                let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
                assert_eq!(a.dims(), b.dims());
                assert!(max_abs(a, b) < 1e-12);
            }
        }
    }
}
