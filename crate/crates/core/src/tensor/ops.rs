//! Forward and backward kernels on plain tensors.
//!
//! Every kernel uses a fixed loop nest and fixed work partitioning, so
//! repeated calls are bit-identical regardless of the execution policy.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::exec;

/// Rows of an output matrix handled by one GEMM task.
const ROW_CHUNK: usize = 32;

/// `c[m×n] = a[m×k] · b[k×n] + beta·c`, with explicit element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride/dilation/padding of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            dilation,
            padding,
        }
    }

    /// Padding that keeps the extent at stride 1: `dilation·(k−1)/2`.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    /// `floor((n + 2p − d(k−1) − 1)/s) + 1`, or `None` if the window does
    /// not fit.
    pub fn output_extent(&self, n: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<ConvDims> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape("conv2d", input.shape(), weight.shape()));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel must be square with odd extent, got {kh}×{kw}"),
        ));
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::invalid("conv2d", "stride and dilation must be ≥ 1"));
    }
    let (ho, wo) = match (geom.output_extent(h, kh), geom.output_extent(w, kh)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh} does not fit input {h}×{w} with {geom:?}"),
            ))
        }
    };
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        k: kh,
        ho,
        wo,
    })
}

fn is_pointwise(d: &ConvDims, g: ConvGeometry) -> bool {
    d.k == 1 && g.stride == 1 && g.padding == 0
}

/// Unfolds one batch item into a `(cin·k·k) × (ho·wo)` matrix.
fn im2col(src: &[f64], d: &ConvDims, g: ConvGeometry, cols: &mut [f64]) {
    let p = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &src[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im(cols: &[f64], d: &ConvDims, g: ConvGeometry, dst: &mut [f64]) {
    let p = d.ho * d.wo;
    for ci in 0..d.cin {
        let plane = &mut dst[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let img_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            img_row[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn columns(input: &Tensor, d: &ConvDims, g: ConvGeometry, b: usize) -> Vec<f64> {
    let in_len = d.cin * d.h * d.w;
    let src = &input.data()[b * in_len..(b + 1) * in_len];
    if is_pointwise(d, g) {
        return src.to_vec();
    }
    let mut cols = vec![0.0; d.cin * d.k * d.k * d.ho * d.wo];
    im2col(src, d, g, &mut cols);
    cols
}

/// 2-D cross-correlation (no kernel flip), no bias.
///
/// `input` is `B×Cin×H×W`, `weight` is `Cout×Cin×K×K` with odd `K`.
pub fn conv2d(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input, weight, geom)?;
    let p = d.ho * d.wo;
    let r = d.cin * d.k * d.k;
    let mut out = vec![0.0; d.b * d.cout * p];
    for b in 0..d.b {
        let cols = columns(input, &d, geom, b);
        let out_b = &mut out[b * d.cout * p..(b + 1) * d.cout * p];
        let wdata = weight.data();
        exec::for_each_chunk_mut(out_b, ROW_CHUNK * p, |i, chunk| {
            let rows = chunk.len() / p;
            let a = &wdata[i * ROW_CHUNK * r..];
            gemm(rows, r, p, a, (r, 1), &cols, (p, 1), 0.0, chunk);
        });
    }
    Tensor::new(vec![d.b, d.cout, d.ho, d.wo], out)
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(input, weight, geom)?;
    let p = d.ho * d.wo;
    let r = d.cin * d.k * d.k;
    if grad_out.shape() != [d.b, d.cout, d.ho, d.wo] {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &[d.b, d.cout, d.ho, d.wo]));
    }
    let all_cols: Vec<Vec<f64>> = (0..d.b).map(|b| columns(input, &d, geom, b)).collect();
    let g = grad_out.data();

    // dW[cout×r] = Σ_b gout_b[cout×p] · cols_bᵀ[p×r]
    let mut grad_w = vec![0.0; d.cout * r];
    exec::for_each_chunk_mut(&mut grad_w, ROW_CHUNK * r, |i, chunk| {
        let rows = chunk.len() / r;
        for (b, cols) in all_cols.iter().enumerate() {
            let a = &g[(b * d.cout + i * ROW_CHUNK) * p..];
            gemm(rows, p, r, a, (p, 1), cols, (1, p), if b == 0 { 0.0 } else { 1.0 }, chunk);
        }
    });

    // dcols_b[r×p] = Wᵀ[r×cout] · gout_b[cout×p], folded back by col2im
    let in_len = d.cin * d.h * d.w;
    let mut grad_in = vec![0.0; d.b * in_len];
    let wdata = weight.data();
    for b in 0..d.b {
        let gb = &g[b * d.cout * p..(b + 1) * d.cout * p];
        let mut dcols = vec![0.0; r * p];
        exec::for_each_chunk_mut(&mut dcols, ROW_CHUNK * p, |i, chunk| {
            let rows = chunk.len() / p;
            let a = &wdata[i * ROW_CHUNK..];
            gemm(rows, d.cout, p, a, (1, r), gb, (p, 1), 0.0, chunk);
        });
        let dst = &mut grad_in[b * in_len..(b + 1) * in_len];
        if is_pointwise(&d, geom) {
            dst.copy_from_slice(&dcols);
        } else {
            col2im(&dcols, &d, geom, dst);
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(weight.shape().to_vec(), grad_w)?,
    ))
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel centres without corner alignment:
/// `src = (dst + 0.5)/scale − 0.5`, clamped at 0, neighbours clamped at the
/// last index.
fn taps(n_in: usize, scale: usize) -> Vec<Tap> {
    (0..n_in * scale)
        .map(|i| {
            let src = ((i as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}

/// Bilinear upsampling of a `B×C×H×W` tensor by an integer factor.
pub fn bilinear_resize(input: &Tensor, scale: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if scale < 1 {
        return Err(Error::invalid("bilinear_resize", "scale must be ≥ 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize", "empty spatial extent"));
    }
    let (ho, wo) = (h * scale, w * scale);
    let ty = taps(h, scale);
    let tx = taps(w, scale);
    let mut out = vec![0.0; b * c * ho * wo];
    let src = input.data();
    for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, y) in ty.iter().enumerate() {
            let r0 = &plane[y.i0 * w..(y.i0 + 1) * w];
            let r1 = &plane[y.i1 * w..(y.i1 + 1) * w];
            for (ox, x) in tx.iter().enumerate() {
                dst[oy * wo + ox] = y.w0 * (x.w0 * r0[x.i0] + x.w1 * r0[x.i1])
                    + y.w1 * (x.w0 * r1[x.i0] + x.w1 * r1[x.i1]);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn bilinear_resize_backward(in_shape: &[usize], scale: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * scale, w * scale);
    let ty = taps(h, scale);
    let tx = taps(w, scale);
    let mut grad = Tensor::zeros(in_shape);
    for (plane, g) in grad.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(ho * wo)) {
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                plane[y.i0 * w + x.i0] += y.w0 * x.w0 * v;
                plane[y.i0 * w + x.i1] += y.w0 * x.w1 * v;
                plane[y.i1 * w + x.i0] += y.w1 * x.w0 * v;
                plane[y.i1 * w + x.i1] += y.w1 * x.w1 * v;
            }
        }
    }
    Ok(grad)
}

/// Concatenates along the channel axis, `a`'s channels first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    let plane = ha * wa;
    let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
    for i in 0..ba {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], out)
}

/// Channels `start..start+len` of a rank-4 tensor.
pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(Error::invalid(
            "narrow_channels",
            format!("range {start}..{} exceeds {c} channels", start + len),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * len * plane);
    for i in 0..b {
        let base = (i * c + start) * plane;
        out.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::new(vec![b, len, h, w], out)
}

/// Scatters `grad` (the gradient of a channel slice) into a zero tensor of
/// the full shape.
pub fn narrow_channels_backward(full: &[usize], start: usize, grad: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = (full[0], full[1], full[2], full[3]);
    let len = grad.shape()[1];
    let plane = h * w;
    let mut out = Tensor::zeros(full);
    for i in 0..b {
        let dst = (i * c + start) * plane;
        let src = i * len * plane;
        out.data_mut()[dst..dst + len * plane].copy_from_slice(&grad.data()[src..src + len * plane]);
    }
    Ok(out)
}

/// Spatial mean per channel: `B×C×H×W → B×C×1×1`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let n = (h * w) as f64;
    let data = input.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Tensor::new(vec![b, c, 1, 1], data)
}

pub fn global_avg_pool_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let n = plane as f64;
    let mut g = Vec::with_capacity(grad_out.numel() * plane);
    for &v in grad_out.data() {
        g.extend(std::iter::repeat_n(v / n, plane));
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: g,
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function. Outputs lie in the open interval (0,1)
/// for |x| < 36; beyond that they round to 0 or 1 in `f64`.
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Element strides of `b` when broadcast to `a`'s shape (0 on broadcast axes).
fn broadcast_strides(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape(op, a, b));
    }
    let mut strides = vec![0; b.len()];
    let mut acc = 1;
    for i in (0..b.len()).rev() {
        strides[i] = if b[i] == 1 && a[i] != 1 { 0 } else { acc };
        acc *= b[i];
    }
    Ok(strides)
}

/// Visits `(a_index, b_index)` pairs for `b` broadcast over `a`'s shape.
fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut bi = 0usize;
    for ai in 0..n {
        f(ai, bi);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            bi += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            bi -= strides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let strides = broadcast_strides(op, a.shape(), b.shape())?;
    let mut out = vec![0.0; a.numel()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), &strides, |ai, bi| out[ai] = f(ad[ai], bd[bi]));
    Tensor::new(a.shape().to_vec(), out)
}

/// Sums `grad` (shaped like the broadcast result) down to `b_shape`.
pub fn reduce_to(op: &'static str, grad: &Tensor, b_shape: &[usize]) -> Result<Tensor> {
    if grad.shape() == b_shape {
        return Ok(grad.clone());
    }
    let strides = broadcast_strides(op, grad.shape(), b_shape)?;
    let mut out = Tensor::zeros(b_shape);
    let g = grad.data();
    let o = out.data_mut();
    for_each_broadcast(grad.shape(), &strides, |ai, bi| o[bi] += g[ai]);
    Ok(out)
}

/// `a + b`, where each extent of `b` equals `a`'s or is 1 (broadcast).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

/// `a · b` elementwise, with the same broadcast rule as [`add`].
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

/// `h · α` with `α` of shape `B×C×1×1` scaling whole channels.
pub fn mul_channelwise(h: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = h.dims4()?;
    if alpha.shape() != [b, c, 1, 1] {
        return Err(Error::shape("mul_channelwise", h.shape(), alpha.shape()));
    }
    mul(h, alpha)
}

/// `x · wᵀ + bias` for `x: B×In`, `w: Out×In`, `bias: Out`.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[b, fin], &[fout, win]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    };
    if fin != win || bias.shape() != [fout] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let mut out = Vec::with_capacity(b * fout);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(b, fin, fout, x.data(), (fin, 1), w.data(), (1, fin), 1.0, &mut out);
    Tensor::new(vec![b, fout], out)
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let g = grad_out.data();
    let mut gx = vec![0.0; b * fin];
    gemm(b, fout, fin, g, (fout, 1), w.data(), (fin, 1), 0.0, &mut gx);
    let mut gw = vec![0.0; fout * fin];
    gemm(fout, b, fin, g, (1, fout), x.data(), (fin, 1), 0.0, &mut gw);
    let mut gb = vec![0.0; fout];
    for row in g.chunks(fout) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![fout], gb)?,
    ))
}

/// Per-channel statistics over batch and spatial axes.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the element count).
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn channel_stats(x: &Tensor) -> Result<NormStats> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = b * plane;
    if count == 0 {
        return Err(Error::invalid("batch_norm", "no elements per channel"));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..b {
            s += x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for i in 0..b {
            v += x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    Ok(NormStats { mean, var, count })
}

/// `gamma·(x − mean)·inv_std + beta` per channel. Returns the output and the
/// normalized input `x̂`.
pub fn batch_norm_apply(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let plane = h * w;
    let mut y = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    for i in 0..b {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let (g, bt, m, s) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for k in off..off + plane {
                let n = (x.data()[k] - m) * s;
                xhat[k] = n;
                y[k] = g * n + bt;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, Tensor::new(x.shape().to_vec(), xhat)?))
}

/// Backward of batch normalization with batch statistics.
/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_train_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = xhat.dims4()?;
    let plane = h * w;
    let n = (b * plane) as f64;
    let (gd, xd) = (grad_out.data(), xhat.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..b {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for k in off..off + plane {
                dbeta[ch] += gd[k];
                dgamma[ch] += gd[k] * xd[k];
            }
        }
    }
    let mut dx = vec![0.0; xhat.numel()];
    for i in 0..b {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let scale = gamma.data()[ch] * inv_std[ch] / n;
            for k in off..off + plane {
                dx[k] = scale * (n * gd[k] - dbeta[ch] - xd[k] * dgamma[ch]);
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Backward of batch normalization with frozen (running) statistics.
pub fn batch_norm_eval_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = xhat.dims4()?;
    let plane = h * w;
    let mut dx = grad_out.clone();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..b {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let s = gamma.data()[ch] * inv_std[ch];
            for k in off..off + plane {
                let g = grad_out.data()[k];
                dbeta[ch] += g;
                dgamma[ch] += g * xhat.data()[k];
                dx.data_mut()[k] = g * s;
            }
        }
    }
    Ok((dx, Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct seven-loop convolution.
    fn conv_naive(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Tensor {
        let (b, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let ho = g.output_extent(h, k).unwrap();
        let wo = g.output_extent(wd, k).unwrap();
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at4(n, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng(1);
        for &(k, s, d, p) in &[(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 1, 0), (5, 2, 1, 0), (1, 2, 1, 0)] {
            let g = ConvGeometry::new(s, d, p);
            let x = Tensor::randn(&[2, 3, 9, 7], &mut r);
            let w = Tensor::randn(&[40, 3, k, k], &mut r);
            let fast = conv2d(&x, &w, g).unwrap();
            let slow = conv_naive(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for k{k} s{s} d{d} p{p}");
            }
        }
    }

    #[test]
    fn conv_table_shapes() {
        let g = ConvGeometry::same(3, 2, 1);
        assert_eq!(g.output_extent(256, 3), Some(128));
        assert_eq!(g.output_extent(512, 3), Some(256));
        assert_eq!(g.output_extent(1024, 3), Some(512));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![4.25]).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, ConvGeometry::new(1, 1, 0)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::zeros(&[1, 4, 5, 5]);
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let err = conv2d(&x, &w, ConvGeometry::same(3, 1, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4, 5, 5]") && msg.contains("[2, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &w, ConvGeometry::new(1, 1, 0)).is_err());
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, dX> and <conv(x), g> = <w, dW> since conv is bilinear.
        let mut r = rng(2);
        for &(k, s, d, p) in &[(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 1, 0)] {
            let geom = ConvGeometry::new(s, d, p);
            let x = Tensor::randn(&[2, 5, 8, 6], &mut r);
            let w = Tensor::randn(&[35, 5, k, k], &mut r);
            let y = conv2d(&x, &w, geom).unwrap();
            let g = Tensor::randn(y.shape(), &mut r);
            let (dx, dw) = conv2d_backward(&x, &w, geom, &g).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rx: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let rw: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rx).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - rw).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_policy_independent() {
        let mut r = rng(3);
        let x = Tensor::randn(&[1, 8, 12, 12], &mut r);
        let w = Tensor::randn(&[70, 8, 3, 3], &mut r);
        let g = ConvGeometry::same(3, 1, 1);
        let before = exec::policy();
        exec::set_policy(exec::Policy::Sequential);
        let a = conv2d(&x, &w, g).unwrap();
        exec::set_policy(exec::Policy::Parallel);
        let b = conv2d(&x, &w, g).unwrap();
        exec::set_policy(before);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn bilinear_hand_table() {
        // Half-pixel sources along x for scale 2: -0.25→0 (clamped), 0.25, 0.75, 1.25→1.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let row = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            assert_eq!(&y.data()[r * 4..r * 4 + 4], &row);
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::full(&[1, 2, 3, 5], 3.0);
        for s in [1, 2, 4, 8] {
            assert!(bilinear_resize(&x, s).unwrap().data().iter().all(|&v| v == 3.0));
        }
        let y = bilinear_resize(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-14));
        assert!(bilinear_resize(&x, 0).is_err());
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut r = rng(4);
        let x = Tensor::randn(&[2, 3, 4, 5], &mut r);
        for s in [2, 3, 8] {
            let y = bilinear_resize(&x, s).unwrap();
            let g = Tensor::randn(y.shape(), &mut r);
            let dx = bilinear_resize_backward(x.shape(), s, &g).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn concat_and_narrow_index_bookkeeping() {
        let mut r = rng(5);
        let a = Tensor::randn(&[2, 3, 4, 5], &mut r);
        let b = Tensor::randn(&[2, 2, 4, 5], &mut r);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 4, 5]);
        for n in 0..2 {
            for j in 0..2 {
                for y in 0..4 {
                    for x in 0..5 {
                        assert_eq!(c.at4(n, 3 + j, y, x), b.at4(n, j, y, x));
                    }
                }
            }
        }
        assert!(narrow_channels(&c, 3, 2).unwrap().bit_eq(&b));
        assert!(narrow_channels(&c, 0, 3).unwrap().bit_eq(&a));
        let empty = Tensor::zeros(&[2, 0, 4, 5]);
        assert!(concat_channels(&a, &empty).unwrap().bit_eq(&a));
        assert!(concat_channels(&a, &Tensor::zeros(&[2, 1, 4, 4])).is_err());
    }

    #[test]
    fn concat_table_shape() {
        let a = Tensor::zeros(&[1, 512, 32, 64]);
        assert_eq!(concat_channels(&a, &a).unwrap().shape(), &[1, 1024, 32, 64]);
    }

    #[test]
    fn pool_matches_direct_sum() {
        let mut r = rng(6);
        let x = Tensor::randn(&[2, 3, 4, 6], &mut r);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for yy in 0..4 {
                    for xx in 0..6 {
                        s += x.at4(n, c, yy, xx);
                    }
                }
                assert!((y.at4(n, c, 0, 0) - s / 24.0).abs() < 1e-14);
            }
        }
        let c = global_avg_pool(&Tensor::full(&[1, 2, 3, 3], 1.5)).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn pool_table_shape() {
        let x = Tensor::zeros(&[1, 1024, 16, 32]);
        assert_eq!(global_avg_pool(&x).unwrap().shape(), &[1, 1024, 1, 1]);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let x = Tensor::new(vec![4], vec![-30.0, -1.0, 2.0, 30.0]).unwrap();
        let s = sigmoid(&x);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 30.0]);
    }

    #[test]
    fn broadcast_add_matches_tiling() {
        let mut r = rng(7);
        let h = Tensor::randn(&[2, 4, 3, 5], &mut r);
        let beta = Tensor::randn(&[2, 1, 3, 5], &mut r);
        let out = add(&h, &beta).unwrap();
        // explicit tiling of beta over channels
        let mut tiled = Vec::new();
        for n in 0..2 {
            for _ in 0..4 {
                tiled.extend_from_slice(&beta.data()[n * 15..(n + 1) * 15]);
            }
        }
        let tiled = Tensor::new(vec![2, 4, 3, 5], tiled).unwrap();
        assert!(out.bit_eq(&add(&h, &tiled).unwrap()));
        assert!(add(&h, &Tensor::zeros(&[2, 2, 3, 5])).is_err());
        let red = reduce_to("add", &Tensor::ones(&[2, 4, 3, 5]), &[2, 1, 3, 5]).unwrap();
        assert!(red.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn channelwise_identity() {
        let mut r = rng(8);
        let h = Tensor::randn(&[1, 3, 2, 2], &mut r);
        assert!(mul_channelwise(&h, &Tensor::ones(&[1, 3, 1, 1])).unwrap().bit_eq(&h));
        assert!(mul_channelwise(&h, &Tensor::ones(&[1, 3, 2, 1])).is_err());
    }

    #[test]
    fn linear_matches_loops() {
        let mut r = rng(9);
        let x = Tensor::randn(&[3, 5], &mut r);
        let w = Tensor::randn(&[4, 5], &mut r);
        let b = Tensor::randn(&[4], &mut r);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            for o in 0..4 {
                let s: f64 = (0..5).map(|k| x.data()[i * 5 + k] * w.data()[o * 5 + k]).sum::<f64>() + b.data()[o];
                assert!((y.data()[i * 4 + o] - s).abs() < 1e-12);
            }
        }
    }
}
