//! Numeric kernels on plain tensors: convolutions, bilinear sampling and
//! pooling, each with its backward rules. The tape and the spiking encoder
//! both call into these.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in
/// `[0, in_len)`.
fn valid_range(out_len: usize, k: usize, stride: usize, pad: usize, in_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let limit = in_len + pad;
    let hi = if limit > k { ((limit - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    /// Visits every (input index, weight index, output index) triple of a
    /// cross-correlation with weight layout `[cout, cin, kh, kw]`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        for b in 0..g.batch {
            for co in 0..g.cout {
                let out_base = (b * g.cout + co) * g.oh * g.ow;
                for ci in 0..g.cin {
                    let in_base = (b * g.cin + ci) * g.h * g.w;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(g.oh, ky, g.stride, g.pad, g.h);
                        for kx in 0..g.kw {
                            let wi = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                            let (ox0, ox1) = valid_range(g.ow, kx, g.stride, g.pad, g.w);
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let in_row = in_base + iy * g.w;
                                let out_row = out_base + oy * g.ow;
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    f(in_row + ix, wi, out_row + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<S: Scalar>(
    op: &'static str,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Geom> {
    let (batch, cin, h, w) = input.dims4(op)?;
    let (cout, wcin, kh, kw) = weight.dims4(op)?;
    if wcin != cin {
        return Err(Error::dim(
            op,
            format!("input channels (axis 1) = {cin} but weight in-channels (axis 1) = {wcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::contract(format!("{op}: stride must be positive")));
    }
    let oh = conv_out_len(h, kh, stride, padding).ok_or_else(|| {
        Error::dim(op, format!("height (axis 2) {h} too small for kernel {kh} with padding {padding}"))
    })?;
    let ow = conv_out_len(w, kw, stride, padding).ok_or_else(|| {
        Error::dim(op, format!("width (axis 3) {w} too small for kernel {kw} with padding {padding}"))
    })?;
    Ok(Geom { batch, cin, h, w, cout, kh, kw, oh, ow, stride, pad: padding })
}

/// Cross-correlation without the odd-kernel check.
fn conv2d_any<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, stride: usize, padding: usize) -> Result<Tensor<S>> {
    let g = conv_geom("conv2d", input, weight, stride, padding)?;
    let mut out = vec![S::zero(); g.batch * g.cout * g.oh * g.ow];
    let (x, wt) = (input.data(), weight.data());
    g.for_each(|i, k, o| out[o] += x[i] * wt[k]);
    Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], out)
}

/// 2-D cross-correlation, `input [B,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, stride: usize, padding: usize) -> Result<Tensor<S>> {
    let (_, _, kh, kw) = weight.dims4("conv2d")?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} must have odd extents")));
    }
    conv2d_any(input, weight, stride, padding)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<S: Scalar>(
    grad_out: &Tensor<S>,
    weight: &Tensor<S>,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let probe = Tensor::zeros(input_shape);
    let g = conv_geom("conv2d_grad_input", &probe, weight, stride, padding)?;
    check_out_shape("conv2d_grad_input", grad_out, &[g.batch, g.cout, g.oh, g.ow])?;
    let mut gin = vec![S::zero(); probe.len()];
    let (go, wt) = (grad_out.data(), weight.data());
    g.for_each(|i, k, o| gin[i] += go[o] * wt[k]);
    Tensor::new(input_shape.to_vec(), gin)
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_grad_weight<S: Scalar>(
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let probe = Tensor::zeros(weight_shape);
    let g = conv_geom("conv2d_grad_weight", input, &probe, stride, padding)?;
    check_out_shape("conv2d_grad_weight", grad_out, &[g.batch, g.cout, g.oh, g.ow])?;
    let mut gw = vec![S::zero(); probe.len()];
    let (x, go) = (input.data(), grad_out.data());
    g.for_each(|i, k, o| gw[k] += go[o] * x[i]);
    Tensor::new(weight_shape.to_vec(), gw)
}

fn check_out_shape<S: Scalar>(op: &'static str, t: &Tensor<S>, expect: &[usize]) -> Result<()> {
    if t.shape() != expect {
        return Err(Error::dim(op, format!("gradient shape {:?}, expected {expect:?}", t.shape())));
    }
    Ok(())
}

/// Transposed convolution, `input [B,Cin,H,W]` with `weight [Cin,Cout,kh,kw]`.
///
/// This is the exact adjoint of [`conv2d`] with the same weight tensor and
/// geometry.
pub fn conv_transpose2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (b, cin, h, w) = input.dims4("conv_transpose2d")?;
    let (wcin, cout, kh, kw) = weight.dims4("conv_transpose2d")?;
    if wcin != cin {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("input channels (axis 1) = {cin} but weight in-channels (axis 0) = {wcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::contract("conv_transpose2d: stride must be positive"));
    }
    let oh = conv_transpose_out_len(h, kh, stride, padding)
        .ok_or_else(|| Error::dim("conv_transpose2d", format!("height (axis 2) output is empty for H={h}")))?;
    let ow = conv_transpose_out_len(w, kw, stride, padding)
        .ok_or_else(|| Error::dim("conv_transpose2d", format!("width (axis 3) output is empty for W={w}")))?;
    conv2d_grad_input(input, weight, &[b, cout, oh, ow], stride, padding)
}

/// Gradient of [`conv_transpose2d`] with respect to its input.
pub fn conv_transpose2d_grad_input<S: Scalar>(
    grad_out: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    conv2d_any(grad_out, weight, stride, padding)
}

/// Gradient of [`conv_transpose2d`] with respect to its weight.
pub fn conv_transpose2d_grad_weight<S: Scalar>(
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    conv2d_grad_weight(grad_out, input, weight_shape, stride, padding)
}

/// Adds a per-channel bias to a rank-4 tensor.
pub fn add_bias<S: Scalar>(input: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, c, h, w) = input.dims4("add_bias")?;
    if bias.len() != c {
        return Err(Error::dim("add_bias", format!("bias has {} entries for {c} channels", bias.len())));
    }
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias.data()[(i / (h * w)) % c];
    }
    Ok(out)
}

/// Sums a rank-4 gradient over batch and space, one value per channel.
pub fn bias_grad<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, c, h, w) = grad_out.dims4("bias_grad")?;
    let mut g = vec![S::zero(); c];
    for (i, v) in grad_out.data().iter().enumerate() {
        g[(i / (h * w)) % c] += *v;
    }
    Tensor::new(vec![c], g)
}

fn check_coords<S: Scalar>(image: &Tensor<S>, cx: &Tensor<S>, cy: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = image.dims4("bilinear_sample")?;
    for (name, t) in [("coords_x", cx), ("coords_y", cy)] {
        if t.shape() != [b, h, w] {
            return Err(Error::dim(
                "bilinear_sample",
                format!("{name} has shape {:?}, expected [{b}, {h}, {w}]", t.shape()),
            ));
        }
    }
    Ok((b, c, h, w))
}

/// Corner indices and weights of one bilinear lookup with border clamping.
#[derive(Clone, Copy)]
struct Lerp<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
}

impl<S: Scalar> Lerp<S> {
    fn new(px: S, py: S, h: usize, w: usize) -> Self {
        let clamp = |v: S, n: usize| -> usize {
            if v <= S::zero() {
                0
            } else {
                v.to_usize().unwrap_or(usize::MAX).min(n - 1)
            }
        };
        let fl_x = px.floor();
        let fl_y = py.floor();
        Lerp {
            x0: clamp(fl_x, w),
            x1: clamp(fl_x + S::one(), w),
            y0: clamp(fl_y, h),
            y1: clamp(fl_y + S::one(), h),
            fx: px - fl_x,
            fy: py - fl_y,
        }
    }
}

/// Samples `image [B,C,H,W]` at continuous pixel coordinates
/// `coords_x/coords_y [B,H,W]` with bilinear interpolation. Lookups outside
/// the image replicate the border pixels.
pub fn bilinear_sample<S: Scalar>(image: &Tensor<S>, cx: &Tensor<S>, cy: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = check_coords(image, cx, cy)?;
    let img = image.data();
    let mut out = vec![S::zero(); b * c * h * w];
    for bi in 0..b {
        for p in 0..h * w {
            let l = Lerp::new(cx.data()[bi * h * w + p], cy.data()[bi * h * w + p], h, w);
            let one = S::one();
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let v00 = img[base + l.y0 * w + l.x0];
                let v01 = img[base + l.y0 * w + l.x1];
                let v10 = img[base + l.y1 * w + l.x0];
                let v11 = img[base + l.y1 * w + l.x1];
                out[base + p] =
                    (one - l.fy) * ((one - l.fx) * v00 + l.fx * v01) + l.fy * ((one - l.fx) * v10 + l.fx * v11);
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// Backward rule of [`bilinear_sample`]: gradients for image, coords_x and
/// coords_y.
pub fn bilinear_sample_grad<S: Scalar>(
    image: &Tensor<S>,
    cx: &Tensor<S>,
    cy: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (b, c, h, w) = check_coords(image, cx, cy)?;
    image.expect_same_shape(grad_out, "bilinear_sample_grad")?;
    let img = image.data();
    let go = grad_out.data();
    let mut gi = vec![S::zero(); img.len()];
    let mut gx = vec![S::zero(); b * h * w];
    let mut gy = vec![S::zero(); b * h * w];
    let one = S::one();
    for bi in 0..b {
        for p in 0..h * w {
            let q = bi * h * w + p;
            let l = Lerp::new(cx.data()[q], cy.data()[q], h, w);
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let g = go[base + p];
                let (i00, i01) = (base + l.y0 * w + l.x0, base + l.y0 * w + l.x1);
                let (i10, i11) = (base + l.y1 * w + l.x0, base + l.y1 * w + l.x1);
                gi[i00] += g * (one - l.fx) * (one - l.fy);
                gi[i01] += g * l.fx * (one - l.fy);
                gi[i10] += g * (one - l.fx) * l.fy;
                gi[i11] += g * l.fx * l.fy;
                gx[q] += g * ((one - l.fy) * (img[i01] - img[i00]) + l.fy * (img[i11] - img[i10]));
                gy[q] += g * ((one - l.fx) * (img[i10] - img[i00]) + l.fx * (img[i11] - img[i01]));
            }
        }
    }
    Ok((Tensor::new(image.shape().to_vec(), gi)?, Tensor::new(vec![b, h, w], gx)?, Tensor::new(vec![b, h, w], gy)?))
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = input.dims4("avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::dim("avg_pool2", format!("{h}x{w} input is too small to pool")));
    }
    let quarter = S::lit(0.25);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let s = input.at4(bi, ch, 2 * y, 2 * x)
                        + input.at4(bi, ch, 2 * y, 2 * x + 1)
                        + input.at4(bi, ch, 2 * y + 1, 2 * x)
                        + input.at4(bi, ch, 2 * y + 1, 2 * x + 1);
                    out.set4(bi, ch, y, x, s * quarter);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_grad<S: Scalar>(input_shape: &[usize], grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, oh, ow) = grad_out.dims4("avg_pool2_grad")?;
    let mut gin = Tensor::zeros(input_shape);
    let quarter = S::lit(0.25);
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let g = grad_out.at4(bi, ch, y, x) * quarter;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        gin.set4(bi, ch, 2 * y + dy, 2 * x + dx, g);
                    }
                }
            }
        }
    }
    Ok(gin)
}
