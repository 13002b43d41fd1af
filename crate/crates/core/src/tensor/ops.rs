//! Forward and backward kernels. Everything here is a pure function of its
//! arguments; [`super::Graph`] wires these into the autodiff tape.

use crate::error::{Error, Result};

use super::Tensor;

/// A convolution layer's parameters: `weight` is `(c_out, c_in, k_h, k_w)`,
/// `bias` is `(c_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvKernel {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let k = Self {
            weight,
            bias,
            stride,
            padding,
        };
        check_conv_params(&k.weight, &k.bias, stride)?;
        Ok(k)
    }
}

/// Geometry of one convolution, validated against an input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a strided, padded window; errors unless it is a positive integer.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("convolution stride must be positive"));
    }
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::config(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "({extent} + 2*{pad} - {kernel}) / {stride} is not an integer"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn check_conv_params(weight: &Tensor, bias: &Tensor, stride: usize) -> Result<()> {
    if weight.ndim() != 4 {
        return Err(Error::shape(format!(
            "conv weight must be (c_out, c_in, k_h, k_w), got {:?}",
            weight.shape()
        )));
    }
    if bias.shape() != [weight.shape()[0]] {
        return Err(Error::shape(format!(
            "conv bias shape {:?} does not match c_out = {}",
            bias.shape(),
            weight.shape()[0]
        )));
    }
    if stride == 0 {
        return Err(Error::config("convolution stride must be positive"));
    }
    Ok(())
}

pub fn conv_geometry(
    input: &[usize],
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    check_conv_params(weight, bias, stride)?;
    if input.len() != 4 {
        return Err(Error::shape(format!("conv input must be (B, C, H, W), got {input:?}")));
    }
    let ws = weight.shape();
    if input[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv expects {} input channels, input has {}",
            ws[1], input[1]
        )));
    }
    Ok(ConvGeometry {
        batch: input[0],
        c_in: input[1],
        h: input[2],
        w: input[3],
        c_out: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
        out_h: conv_out_extent(input[2], ws[2], stride, pad)?,
        out_w: conv_out_extent(input[3], ws[3], stride, pad)?,
    })
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let p_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let p_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · bᵀ` where `b` is `n×k`.
fn gemm_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
fn gemm_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Cross-correlation with bias broadcast. When `keep_cols` is set the
/// per-sample im2col buffers are returned for reuse in the backward pass.
pub(crate) fn conv2d_impl(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor, ConvGeometry, Option<Vec<f64>>)> {
    let g = conv_geometry(input.shape(), weight, bias, stride, pad)?;
    let (k_len, p_len) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; g.batch * g.c_out * p_len];
    let mut saved = if keep_cols {
        Some(vec![0.0; g.batch * k_len * p_len])
    } else {
        None
    };
    let mut scratch = vec![0.0; k_len * p_len];
    for b in 0..g.batch {
        let cols: &mut [f64] = match &mut saved {
            Some(all) => &mut all[b * k_len * p_len..(b + 1) * k_len * p_len],
            None => &mut scratch,
        };
        im2col(&g, input.outer(b), cols);
        let o = &mut out[b * g.c_out * p_len..(b + 1) * g.c_out * p_len];
        for (oc, chunk) in o.chunks_mut(p_len).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        gemm_acc(weight.data(), cols, o, g.c_out, k_len, p_len);
    }
    let t = Tensor::from_parts(vec![g.batch, g.c_out, g.out_h, g.out_w], out);
    Ok((t, g, saved))
}

pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    conv2d_impl(
        input,
        &kernel.weight,
        &kernel.bias,
        kernel.stride,
        kernel.padding,
        false,
    )
    .map(|(t, _, _)| t)
}

/// Gradients of a convolution w.r.t. input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    cols: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let (k_len, p_len) = (g.patch_len(), g.out_len());
    let mut gw = vec![0.0; g.c_out * k_len];
    let mut gb = vec![0.0; g.c_out];
    let mut gi = if need_input {
        vec![0.0; g.batch * g.c_in * g.h * g.w]
    } else {
        Vec::new()
    };
    let mut dcols = vec![0.0; k_len * p_len];
    let img_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let go = &grad_out[b * g.c_out * p_len..(b + 1) * g.c_out * p_len];
        let bc = &cols[b * k_len * p_len..(b + 1) * k_len * p_len];
        for (oc, chunk) in go.chunks(p_len).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
        gemm_abt_acc(go, bc, &mut gw, g.c_out, p_len, k_len);
        if need_input {
            dcols.fill(0.0);
            gemm_atb_acc(weight, go, &mut dcols, k_len, g.c_out, p_len);
            col2im(g, &dcols, &mut gi[b * img_len..(b + 1) * img_len]);
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Elementwise `max(0, x)`. Non-positive inputs (including `-0.0`) map to `+0.0`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub(crate) fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Rows and features of a linear-layer input; everything after the leading
/// dimension is flattened.
fn linear_dims(input: &[usize], weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if weight.ndim() != 2 {
        return Err(Error::shape(format!(
            "linear weight must be (out, in), got {:?}",
            weight.shape()
        )));
    }
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if bias.shape() != [out_f] {
        return Err(Error::shape(format!(
            "linear bias shape {:?} does not match out = {out_f}",
            bias.shape()
        )));
    }
    if input.len() < 2 {
        return Err(Error::shape(format!(
            "linear input needs a batch dimension, got {input:?}"
        )));
    }
    let features: usize = input[1..].iter().product();
    if features != in_f {
        return Err(Error::shape(format!(
            "linear expects {in_f} input features, input {input:?} has {features}"
        )));
    }
    Ok((input[0], in_f, out_f))
}

/// `y = x Wᵀ + b` over the flattened trailing dimensions of `input`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, in_f, out_f) = linear_dims(input.shape(), weight, bias)?;
    let mut out = vec![0.0; rows * out_f];
    for (r, y) in out.chunks_mut(out_f).enumerate() {
        y.copy_from_slice(bias.data());
        let x = &input.data()[r * in_f..(r + 1) * in_f];
        gemm_abt_acc(x, weight.data(), y, 1, in_f, out_f);
    }
    Ok(Tensor::from_parts(vec![rows, out_f], out))
}

pub(crate) fn linear_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    rows: usize,
    in_f: usize,
    out_f: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gi = vec![0.0; rows * in_f];
    gemm_acc(grad_out, weight, &mut gi, rows, out_f, in_f);
    let mut gw = vec![0.0; out_f * in_f];
    gemm_atb_acc(grad_out, input, &mut gw, out_f, rows, in_f);
    let mut gb = vec![0.0; out_f];
    for row in grad_out.chunks(out_f) {
        gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    (gi, gw, gb)
}

pub(crate) fn linear_shape(input: &[usize], weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    linear_dims(input, weight, bias)
}

/// Non-overlapping `size × size` max-pool; trailing rows/columns that do not
/// fill a window are dropped. Returns the flat argmax index of each output.
pub(crate) fn max_pool2d_impl(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("max-pool input must be (B, C, H, W), got {s:?}")));
    }
    if size == 0 || s[2] < size || s[3] < size {
        return Err(Error::shape(format!(
            "max-pool window {size} does not fit spatial extent {}x{}",
            s[2], s[3]
        )));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let x = input.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * size * w + ox * size;
                let mut best = x[best_i];
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![s[0], s[1], oh, ow], out), arg))
}

pub fn max_pool2d(input: &Tensor, size: usize) -> Result<Tensor> {
    max_pool2d_impl(input, size).map(|(t, _)| t)
}

/// Mean over spatial positions: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "global average pool input must be (B, C, H, W), got {s:?}"
        )));
    }
    let area = s[2] * s[3];
    let data = input
        .data()
        .chunks(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(Tensor::from_parts(vec![s[0], s[1]], data))
}

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.ndim() != 2 {
        return Err(Error::shape(format!("logits must be (B, K), got {:?}", logits.shape())));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(Error::shape(format!("need at least 2 classes, got {k}")));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} outside [0, {k})")));
    }
    Ok((b, k))
}

/// Per-row `-log softmax(z)[y]` and the softmax probabilities, stabilized by
/// subtracting the row maximum.
pub(crate) fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, k) = check_logits(logits, labels)?;
    let mut losses = Vec::with_capacity(labels.len());
    let mut probs = Vec::with_capacity(logits.numel());
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        losses.push(m + s.ln() - row[y]);
        probs.extend(exps.iter().map(|e| e / s));
    }
    Ok((losses, probs))
}

/// Cross-entropy of each sample separately.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    cross_entropy_rows(logits, labels).map(|(l, _)| l)
}

/// Batch-mean softmax cross-entropy.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let losses = cross_entropy_per_sample(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Numerically stable softmax of a vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Row-wise softmax of `(B, K)` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::shape(format!(
            "softmax rows needs (B, K), got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let data = logits.data().chunks(k).flat_map(softmax).collect();
    Ok(Tensor::from_parts(logits.shape().to_vec(), data))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
