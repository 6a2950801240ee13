//! Differentiable primitives with explicit forward and backward passes.
//!
//! Activations of the convolutional stack use a channel-major batched layout
//! `C x N x H x W` ("CNHW"): the `N` images of one channel are contiguous, so
//! a 3x3 convolution over the whole batch is one im2col plus one GEMM whose
//! output is already in the layout the next layer expects. For `N = 1` this
//! is the ordinary `C x H x W` layout.
//!
//! Backward functions accumulate into parameter gradients (`+=`) and return
//! fresh input gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::open01;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A strided matrix view: element `(i, j)` is `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

fn view_fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c = alpha a b + beta c` with `a` `m x k`, `b` `k x n` and `c` of row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], rsc: usize) {
    assert!(view_fits(a.data.len(), m, k, a.rs, a.cs));
    assert!(view_fits(b.data.len(), k, n, b.rs, b.cs));
    assert!(view_fits(c.len(), m, n, rsc, 1));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertions above keep every addressed element in bounds,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    transpose_a: bool,
    b: &[f64],
    transpose_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rs, cs) = if transpose_a { (1, m) } else { (k, 1) };
    let av = View { data: a, rs, cs };
    let (rs, cs) = if transpose_b { (1, k) } else { (n, 1) };
    let bv = View { data: b, rs, cs };
    gemm_strided(m, k, n, alpha, av, bv, beta, c, n);
}

/// Extents of a batched activation in CNHW layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
    pub fn columns(&self) -> usize {
        self.batch * self.plane()
    }
    pub fn len(&self) -> usize {
        self.channels * self.columns()
    }
}

/// Source and destination column ranges of a horizontal tap `kx` on rows of width `w`.
#[inline]
fn tap_span(kx: usize, w: usize) -> (usize, usize, usize) {
    // Destination x in [lo, hi) reads source x + kx - 1.
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { w - 1 } else { w };
    (lo, hi, lo + kx - 1)
}

/// Unfolds zero-padded 3x3 neighbourhoods of images `n0 .. n0 + nb`:
/// row `(c, ky, kx)`, column `(n - n0, y, x)`.
fn im2col(input: &[f64], e: Extent, n0: usize, nb: usize, cols: &mut [f64]) {
    let (h, w) = (e.height, e.width);
    let plane = e.plane();
    let width = nb * plane;
    for c in 0..e.channels {
        let chan = &input[c * e.columns() + n0 * plane..][..width];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * width..][..width];
                let (lo, hi, src_lo) = tap_span(kx, w);
                for n in 0..nb {
                    let img = &chan[n * plane..(n + 1) * plane];
                    let out = &mut row[n * plane..(n + 1) * plane];
                    for y in 0..h {
                        let dst = &mut out[y * w..(y + 1) * w];
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &img[(sy - 1) * w..sy * w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if hi > lo {
                            dst[lo..hi].copy_from_slice(&src[src_lo..src_lo + hi - lo]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into images `n0 .. n0 + nb` of `grad`.
fn col2im(cols: &[f64], e: Extent, n0: usize, nb: usize, grad: &mut [f64]) {
    let (h, w) = (e.height, e.width);
    let plane = e.plane();
    let width = nb * plane;
    let columns = e.columns();
    for c in 0..e.channels {
        let chan = &mut grad[c * columns + n0 * plane..][..width];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * width..][..width];
                let (lo, hi, src_lo) = tap_span(kx, w);
                for n in 0..nb {
                    let img = &mut chan[n * plane..(n + 1) * plane];
                    let src = &row[n * plane..(n + 1) * plane];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let dst = &mut img[(sy - 1) * w..sy * w];
                        for (d, v) in dst[src_lo..src_lo + hi.saturating_sub(lo)]
                            .iter_mut()
                            .zip(&src[y * w + lo..y * w + hi.max(lo)])
                        {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Images per im2col block, sized so the unfolded block stays cache-resident.
fn block_images(e: Extent) -> usize {
    const BLOCK_ENTRIES: usize = 1 << 17;
    (BLOCK_ENTRIES / (e.channels * 9 * e.plane()).max(1)).clamp(1, e.batch.max(1))
}

/// Input of one convolution, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub extent: Extent,
    input: Vec<f64>,
}

/// 3x3, stride 1, zero padding 1 convolution over a CNHW batch.
///
/// `weight` is `c_out x c_in x 3 x 3`, `bias` has `c_out` entries. Output
/// extent equals the input extent with `c_out` channels.
pub fn conv3x3_forward(
    input: &[f64],
    e: Extent,
    weight: &[f64],
    bias: &[f64],
) -> Result<(Vec<f64>, ConvCache)> {
    let c_out = bias.len();
    if input.len() != e.len() || weight.len() != c_out * e.channels * 9 {
        return Err(Error::Shape(format!(
            "conv3x3: input {} for {e:?}, weight {} for {c_out} x {} x 3 x 3",
            input.len(),
            weight.len(),
            e.channels
        )));
    }
    let ncols = e.columns();
    let kdim = e.channels * 9;
    let plane = e.plane();
    let mut out = vec![0.0; c_out * ncols];
    for (o, b) in out.chunks_exact_mut(ncols.max(1)).zip(bias) {
        o.fill(*b);
    }
    let step = block_images(e);
    let mut cols = vec![0.0; kdim * step * plane];
    let wv = View { data: weight, rs: kdim, cs: 1 };
    let mut n0 = 0;
    while n0 < e.batch {
        let nb = step.min(e.batch - n0);
        let width = nb * plane;
        let block = &mut cols[..kdim * width];
        im2col(input, e, n0, nb, block);
        let bv = View { data: block, rs: width, cs: 1 };
        gemm_strided(c_out, kdim, width, 1.0, wv, bv, 1.0, &mut out[n0 * plane..], ncols);
        n0 += nb;
    }
    Ok((
        out,
        ConvCache {
            extent: e,
            input: input.to_vec(),
        },
    ))
}

/// Gradient of [`conv3x3_forward`]; accumulates into `dweight`, `dbias` and
/// returns the input gradient (skipped when `need_input` is false).
pub fn conv3x3_backward(
    dout: &[f64],
    cache: &ConvCache,
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let e = cache.extent;
    let c_out = dbias.len();
    let ncols = e.columns();
    let kdim = e.channels * 9;
    let plane = e.plane();
    for (db, row) in dbias.iter_mut().zip(dout.chunks_exact(ncols.max(1))) {
        *db += row.iter().sum::<f64>();
    }
    let step = block_images(e);
    let mut cols = vec![0.0; kdim * step * plane];
    let mut dcols = if need_input { vec![0.0; kdim * step * plane] } else { Vec::new() };
    let mut dinput = if need_input { vec![0.0; e.len()] } else { Vec::new() };
    let wt = View { data: weight, rs: 1, cs: kdim };
    let mut n0 = 0;
    while n0 < e.batch {
        let nb = step.min(e.batch - n0);
        let width = nb * plane;
        let block = &mut cols[..kdim * width];
        im2col(&cache.input, e, n0, nb, block);
        let dv = View { data: &dout[n0 * plane..], rs: ncols, cs: 1 };
        let bt = View { data: block, rs: 1, cs: width };
        gemm_strided(c_out, width, kdim, 1.0, dv, bt, 1.0, dweight, kdim);
        if need_input {
            let dblock = &mut dcols[..kdim * width];
            gemm_strided(kdim, c_out, width, 1.0, wt, dv, 0.0, dblock, width);
            col2im(dblock, e, n0, nb, &mut dinput);
        }
        n0 += nb;
    }
    need_input.then_some(dinput)
}

/// Single-image convolution on `C_in x H x W` with `C_out x C_in x 3 x 3` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c_in, h, w] = input.shape[..] else {
        return Err(Error::Shape("conv2d input must be C x H x W".into()));
    };
    let [c_out, kc, 3, 3] = kernels.shape[..] else {
        return Err(Error::Shape("conv2d kernels must be C_out x C_in x 3 x 3".into()));
    };
    if kc != c_in || bias.shape != [c_out] {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {c_in}, kernels {kc}, bias {:?}",
            bias.shape
        )));
    }
    let e = Extent {
        channels: c_in,
        batch: 1,
        height: h,
        width: w,
    };
    let (out, _) = conv3x3_forward(&input.data, e, &kernels.data, &bias.data)?;
    Tensor::new(vec![c_out, h, w], out)
}

/// 2x2 stride-2 max-pool over `planes` images of `h x w`.
///
/// Returns the pooled values and, per output cell, the flat input index of
/// the first maximal entry in window order (top-left, top-right,
/// bottom-left, bottom-right).
pub fn maxpool2x2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max-pool needs even extents, got {h} x {w}")));
    }
    debug_assert_eq!(input.len(), planes * h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2x2_backward(dout: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut dinput = vec![0.0; input_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        dinput[i] += g;
    }
    dinput
}

/// Mask propagation: a coarse cell is valid when any cell of its window is.
pub fn maxpool2x2_mask(mask: &[bool], planes: usize, h: usize, w: usize) -> Result<Vec<bool>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max-pool needs even extents, got {h} x {w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                out.push(mask[i0] || mask[i0 + 1] || mask[i0 + w] || mask[i0 + w + 1]);
            }
        }
    }
    Ok(out)
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Batched affine map: `input` is `batch x n`, `weight` is `m x n`.
pub fn linear_forward(input: &[f64], batch: usize, weight: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let m = bias.len();
    if batch == 0 || input.len() % batch != 0 {
        return Err(Error::Shape("linear: batch does not divide input".into()));
    }
    let n = input.len() / batch;
    if weight.len() != m * n {
        return Err(Error::Shape(format!(
            "linear: weight has {} entries, expected {m} x {n}",
            weight.len()
        )));
    }
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, n, m, 1.0, input, false, weight, true, 1.0, &mut out);
    Ok(out)
}

/// Gradient of [`linear_forward`]; accumulates parameter gradients.
pub fn linear_backward(
    dout: &[f64],
    input: &[f64],
    batch: usize,
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let m = dbias.len();
    let n = input.len() / batch;
    gemm(m, batch, n, 1.0, dout, true, input, false, 1.0, dweight);
    for row in dout.chunks_exact(m) {
        for (db, g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
    if !need_input {
        return None;
    }
    let mut dinput = vec![0.0; batch * n];
    gemm(batch, m, n, 1.0, dout, false, weight, false, 0.0, &mut dinput);
    Some(dinput)
}

/// Single-vector convenience over [`linear_forward`].
pub fn linear(input: &[f64], weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.shape != [bias.len(), input.len()] {
        return Err(Error::Shape(format!(
            "linear: weight {:?} against input {} and bias {}",
            weight.shape,
            input.len(),
            bias.len()
        )));
    }
    linear_forward(input, 1, &weight.data, bias)
}

pub const ATTENTION_EPSILON: f64 = 1e-8;

/// Weights and output of one masked attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub output: Vec<f64>,
    pub weights: Vec<f64>,
    /// True when no cell was valid and uniform averaging was used.
    pub fallback: bool,
}

/// `out = sum_p alpha_p T[:, p]`, `alpha_p = M_p e_p / (sum_q M_q e_q + eps)`,
/// `e_p = exp(s_p - max_valid s)`.
///
/// Scores are shifted by their maximum over valid cells, so `eps` is relative
/// to a denominator of at least 1 and adding a constant to every score leaves
/// the result unchanged. `features` is `C x P` row-major. With no valid cell
/// every cell gets weight `1 / P`.
pub fn masked_softmax_sum(scores: &[f64], features: &[f64], mask: &[bool], eps: f64) -> Attention {
    let cells = scores.len();
    debug_assert_eq!(mask.len(), cells);
    debug_assert_eq!(features.len() % cells.max(1), 0);
    let channels = features.len() / cells.max(1);
    let top = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let fallback = top == f64::NEG_INFINITY;
    let weights: Vec<f64> = if fallback {
        vec![1.0 / cells as f64; cells]
    } else {
        let e: Vec<f64> = scores
            .iter()
            .zip(mask)
            .map(|(&s, &m)| if m { (s - top).exp() } else { 0.0 })
            .collect();
        let denom = e.iter().sum::<f64>() + eps;
        e.into_iter().map(|v| v / denom).collect()
    };
    let output = (0..channels)
        .map(|c| {
            features[c * cells..(c + 1) * cells]
                .iter()
                .zip(&weights)
                .map(|(t, a)| t * a)
                .sum()
        })
        .collect();
    Attention {
        output,
        weights,
        fallback,
    }
}

/// Gradient of [`masked_softmax_sum`] given `dout`; returns `(dscores, dfeatures)`.
pub fn masked_softmax_sum_backward(att: &Attention, features: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cells = att.weights.len();
    let channels = dout.len();
    let mut dfeat = vec![0.0; channels * cells];
    for c in 0..channels {
        for p in 0..cells {
            dfeat[c * cells + p] = att.weights[p] * dout[c];
        }
    }
    if att.fallback {
        return (vec![0.0; cells], dfeat);
    }
    let g_out: f64 = dout.iter().zip(&att.output).map(|(g, o)| g * o).sum();
    let dscores = (0..cells)
        .map(|p| {
            let g_t: f64 = (0..channels).map(|c| dout[c] * features[c * cells + p]).sum();
            att.weights[p] * (g_t - g_out)
        })
        .collect();
    (dscores, dfeat)
}

/// Inverted dropout multipliers: 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if open01(rng) < p { 0.0 } else { keep })
        .collect()
}

/// Applies dropout in place; the identity when `train` is false or `p == 0`.
/// Returns the multipliers used (for the backward pass).
pub fn dropout<R: Rng + ?Sized>(x: &mut [f64], p: f64, train: bool, rng: &mut R) -> Option<Vec<f64>> {
    if !train || p == 0.0 {
        return None;
    }
    let mask = dropout_mask(x.len(), p, rng);
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

/// Mean SmoothL1 (beta = 1) and its gradient with respect to `pred`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = p - t;
            if e.abs() < 1.0 {
                loss += 0.5 * e * e;
                e / n
            } else {
                loss += e.abs() - 0.5;
                e.signum() / n
            }
        })
        .collect();
    (loss / n, grad)
}

/// Mean binary cross-entropy on logits and its gradient, computed as
/// `max(x, 0) - x y + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            (sigmoid(x) - y) / n
        })
        .collect();
    (loss / n, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;
    use rand_distr::StandardNormal;

    fn randn(n: usize, rng: &mut crate::seed::Stream) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Max over entries of `|a - n| / max(|a|, |n|, 1e-6)` with central differences.
    fn fd_check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            let num = (fp - fm) / (2.0 * h);
            let scale = analytic[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max((analytic[i] - num).abs() / scale);
        }
        worst
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = stream(1);
        let x = Tensor::new(vec![1, 4, 5], randn(20, &mut rng)).unwrap();
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        k.data[4] = 1.0;
        let y = conv2d(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn box_kernel_sums_neighbourhood() {
        let x = Tensor::new(vec![1, 4, 4], vec![2.5; 16]).unwrap();
        let k = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.data[5], 22.5);
        assert_eq!(y.data[0], 10.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![2, 4, 4]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros(vec![1])), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream(2);
        let e = Extent {
            channels: 2,
            batch: 2,
            height: 4,
            width: 4,
        };
        let c_out = 3;
        let x = randn(e.len(), &mut rng);
        let w = randn(c_out * 18, &mut rng);
        let b = randn(c_out, &mut rng);
        let probe = randn(c_out * e.columns(), &mut rng);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let (y, _) = conv3x3_forward(x, e, w, b).unwrap();
            y.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let (_, cache) = conv3x3_forward(&x, e, &w, &b).unwrap();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = conv3x3_backward(&probe, &cache, &w, &mut dw, &mut db, true).unwrap();
        assert!(fd_check(&mut |v| loss(v, &w, &b), &x, &dx) < 1e-4);
        assert!(fd_check(&mut |v| loss(&x, v, &b), &w, &dw) < 1e-4);
        assert!(fd_check(&mut |v| loss(&x, &w, v), &b, &db) < 1e-4);
    }

    #[test]
    fn mask_pooling_keeps_partially_valid_windows() {
        let m = maxpool2x2_mask(&[false, false, false, true], 1, 2, 2).unwrap();
        assert_eq!(m, vec![true]);
        let m = maxpool2x2_mask(&[false; 4], 1, 2, 2).unwrap();
        assert_eq!(m, vec![false]);
        assert!(maxpool2x2_mask(&[false; 6], 1, 3, 2).is_err());
    }

    #[test]
    fn constant_pool_routes_to_first_entry() {
        let (y, arg) = maxpool2x2_forward(&[1.5; 16], 1, 4, 4).unwrap();
        assert_eq!(y, vec![1.5; 4]);
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool2x2_backward(&[1.0; 4], &arg, 16);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        assert!(maxpool2x2_forward(&[0.0; 12], 1, 4, 3).is_err());
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let mut rng = stream(3);
        // Distinct values keep every window away from ties.
        let x: Vec<f64> = (0..32).map(|i| i as f64 * 0.37 + rng.random::<f64>() * 0.1).collect();
        let mut x = x;
        for i in (1..x.len()).rev() {
            let j = rng.random_range(0..=i);
            x.swap(i, j);
        }
        let probe = randn(8, &mut rng);
        let (_, arg) = maxpool2x2_forward(&x, 2, 4, 4).unwrap();
        let dx = maxpool2x2_backward(&probe, &arg, 32);
        let mut f = |v: &[f64]| -> f64 {
            let (y, _) = maxpool2x2_forward(v, 2, 4, 4).unwrap();
            y.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        assert!(fd_check(&mut f, &x, &dx) < 1e-4);
    }

    #[test]
    fn linear_relu_basics_and_gradients() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(linear(&[3.0, -4.0], &eye, &[0.0, 0.0]).unwrap(), vec![3.0, -4.0]);
        let mut v = vec![-2.0, 0.0, 3.0];
        relu_inplace(&mut v);
        assert_eq!(v, vec![0.0, 0.0, 3.0]);
        assert!(linear(&[1.0], &eye, &[0.0, 0.0]).is_err());

        let mut rng = stream(4);
        let (batch, n, m) = (3, 5, 4);
        let x = randn(batch * n, &mut rng);
        let w = randn(m * n, &mut rng);
        let b = randn(m, &mut rng);
        let probe = randn(batch * m, &mut rng);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let y = linear_forward(x, batch, w, b).unwrap();
            y.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; m];
        let dx = linear_backward(&probe, &x, batch, &w, &mut dw, &mut db, true).unwrap();
        assert!(fd_check(&mut |v| loss(v, &w, &b), &x, &dx) < 1e-4);
        assert!(fd_check(&mut |v| loss(&x, v, &b), &w, &dw) < 1e-4);
        assert!(fd_check(&mut |v| loss(&x, &w, v), &b, &db) < 1e-4);
    }

    #[test]
    fn relu_gradient_away_from_kinks() {
        let mut rng = stream(5);
        let x: Vec<f64> = randn(20, &mut rng)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
            .collect();
        let probe = randn(20, &mut rng);
        let mut y = x.clone();
        relu_inplace(&mut y);
        let mut g = probe.clone();
        relu_backward_inplace(&mut g, &y);
        let mut f = |v: &[f64]| -> f64 { v.iter().zip(&probe).map(|(a, p)| a.max(0.0) * p).sum() };
        assert!(fd_check(&mut f, &x, &g) < 1e-4);
    }

    #[test]
    fn attention_closed_forms() {
        let att = masked_softmax_sum(&[0.0, 3f64.ln()], &[10.0, 20.0], &[true, true], ATTENTION_EPSILON);
        // Shifted exponentials {1/3, 1}: denominator 4/3 + eps.
        let factor = 1.0 - ATTENTION_EPSILON / (4.0 / 3.0 + ATTENTION_EPSILON);
        assert!((att.weights[0] - 0.25 * factor).abs() < 1e-15);
        assert!((att.weights[1] - 0.75 * factor).abs() < 1e-15);
        assert!((att.output[0] - 17.5).abs() < 1e-6);

        let feats = [4.0; 8];
        let att = masked_softmax_sum(&[0.3, -2.0, 1.0, 0.0], &feats, &[true, false, true, false], ATTENTION_EPSILON);
        assert_eq!(att.weights[1], 0.0);
        assert!(att.weights.iter().sum::<f64>() < 1.0);
        assert!(att.output.iter().all(|v| (v - 4.0).abs() < 1e-6 * 4.0));

        let att = masked_softmax_sum(&[5.0, 1.0], &[1.0, 2.0, 3.0, 4.0], &[false, true], ATTENTION_EPSILON);
        assert!((att.output[0] - 2.0).abs() < 2e-8 && (att.output[1] - 4.0).abs() < 4e-8);
    }

    #[test]
    fn attention_all_invalid_falls_back_to_mean() {
        let att = masked_softmax_sum(&[1.0, 9.0], &[1.0, 3.0], &[false, false], ATTENTION_EPSILON);
        assert!(att.fallback);
        assert_eq!(att.output, vec![2.0]);
    }

    #[test]
    fn attention_ignores_scores_at_masked_cells() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mask = [true, false, true];
        let a = masked_softmax_sum(&[0.2, 7.0, -1.0], &t, &mask, ATTENTION_EPSILON);
        let b = masked_softmax_sum(&[0.2, -40.0, -1.0], &t, &mask, ATTENTION_EPSILON);
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = stream(6);
        let (c, p) = (3, 6);
        let s = randn(p, &mut rng);
        let t = randn(c * p, &mut rng);
        let mask = [true, false, true, true, false, true];
        let probe = randn(c, &mut rng);
        let att = masked_softmax_sum(&s, &t, &mask, ATTENTION_EPSILON);
        let (ds, dt) = masked_softmax_sum_backward(&att, &t, &probe);
        let loss = |s: &[f64], t: &[f64]| -> f64 {
            masked_softmax_sum(s, t, &mask, ATTENTION_EPSILON)
                .output
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let check_s: Vec<usize> = (0..p).filter(|&i| mask[i]).collect();
        let sub_s: Vec<f64> = check_s.iter().map(|&i| ds[i]).collect();
        let base: Vec<f64> = check_s.iter().map(|&i| s[i]).collect();
        let mut f = |v: &[f64]| {
            let mut ss = s.clone();
            for (k, &i) in check_s.iter().enumerate() {
                ss[i] = v[k];
            }
            loss(&ss, &t)
        };
        assert!(fd_check(&mut f, &base, &sub_s) < 1e-4);
        assert!(fd_check(&mut |v| loss(&s, v), &t, &dt) < 1e-4);
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = stream(7);
        let mut x = vec![1.0; 1_000_000];
        let mask = dropout(&mut x, 0.2, true, &mut rng).unwrap();
        let kept = mask.iter().filter(|&&m| m > 0.0).count() as f64 / 1e6;
        assert!((kept - 0.8).abs() < 0.01);
        let mean = x.iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01);
        let mut y = vec![2.0; 10];
        assert!(dropout(&mut y, 0.2, false, &mut rng).is_none());
        assert_eq!(y, vec![2.0; 10]);
    }

    #[test]
    fn loss_hand_values() {
        assert_eq!(smooth_l1(&[1.0], &[1.0]).0, 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).0, 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).0, 1.5);
        assert!((bce_with_logits(&[0.0], &[1.0]).0 - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(&[800.0], &[1.0]).0 < 1e-300);
        assert!(bce_with_logits(&[-800.0], &[1.0]).0.is_finite());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = stream(8);
        let pred: Vec<f64> = randn(10, &mut rng).into_iter().map(|v| 3.0 * v).collect();
        let target = randn(10, &mut rng);
        let (_, g) = smooth_l1(&pred, &target);
        assert!(fd_check(&mut |v| smooth_l1(v, &target).0, &pred, &g) < 1e-4);
        let labels: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let (_, g) = bce_with_logits(&pred, &labels);
        assert!(fd_check(&mut |v| bce_with_logits(v, &labels).0, &pred, &g) < 1e-4);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut state = OptimizerState::new(3, AdamConfig::default());
        let mut p = vec![1.0, 2.0, 3.0];
        adam_step(&mut p, &[0.0; 3], &mut state).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);

        let mut state = OptimizerState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        adam_step(&mut p, &[0.7, -3.0], &mut state).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
        assert!(adam_step(&mut p, &[1.0], &mut state).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut state = OptimizerState::new(2, AdamConfig::default());
            let mut p = vec![0.5, -0.5];
            for i in 0..50 {
                let g = [p[0] * 2.0 + i as f64 * 0.01, p[1] - 0.3];
                adam_step(&mut p, &g, &mut state).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
