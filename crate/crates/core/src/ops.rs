//! Pure numeric kernels. Every function here is a plain tensor-in /
//! tensor-out computation with no hidden state; the tape in `tape.rs` wires
//! them into a differentiable graph.
//!
//! Determinism contract: each output element is produced by one fixed-order
//! summation, independent of thread count. For conv2d forward the per-cell
//! order is pinned to (input channel, kernel row, kernel col) with the bias
//! added last, and zero padding contributes by *skipping* out-of-bounds taps
//! rather than multiplying stored zeros, so results are bitwise reproducible
//! against a straightforward nested-loop evaluation of the same definition.

use crate::error::TensorError;
use crate::runtime::for_each_chunk_mut;
use crate::tensor::{IndexMap, IntTensor, Scalar, Tensor, VOID};

fn same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        let dim = a
            .shape()
            .iter()
            .zip(b.shape())
            .position(|(x, y)| x != y)
            .unwrap_or_else(|| a.shape().len().min(b.shape().len()));
        return Err(TensorError::ShapeMismatch {
            op,
            dim,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Output extent of a convolution along one axis.
fn conv_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dim: &'static str,
) -> Result<usize, TensorError> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(TensorError::KernelTooLarge {
            dim,
            kernel,
            padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation (`weight` is applied unflipped) over NCHW input
/// with square `k x k` kernels, zero padding, and optional per-channel bias.
///
/// Output shape: `(N, C_out, (H + 2p - k)/s + 1, (W + 2p - k)/s + 1)`.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>, TensorError> {
    let (n_b, c_in, h_in, w_in) = input.dims4("conv2d input")?;
    let (c_out, wc_in, k, k2) = weight.dims4("conv2d weight")?;
    if stride == 0 {
        return Err(TensorError::NonPositiveStride);
    }
    if k != k2 {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "kernel (must be square)",
            expected: k,
            got: k2,
        });
    }
    if wc_in != c_in {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "input channels",
            expected: wc_in,
            got: c_in,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: c_out,
                got: b.numel(),
            });
        }
    }
    let h_out = conv_extent(h_in, k, stride, padding, "height")?;
    let w_out = conv_extent(w_in, k, stride, padding, "width")?;

    let mut out = Tensor::zeros(&[n_b, c_out, h_out, w_out]);
    let in_data = input.data();
    let w_data = weight.data();
    let in_plane = h_in * w_in;
    let out_plane = h_out * w_out;

    // One worker per (n, c_out) output plane; planes are disjoint.
    for_each_chunk_mut(out.data_mut(), out_plane, |p, plane| {
        let n = p / c_out;
        let co = p % c_out;
        for ho in 0..h_out {
            let acc = &mut plane[ho * w_out..][..w_out];
            for ci in 0..c_in {
                let x_plane = &in_data[(n * c_in + ci) * in_plane..][..in_plane];
                let w_base = ((co * c_in + ci) * k) * k;
                for kh in 0..k {
                    let hi = (ho * stride + kh) as isize - padding as isize;
                    if hi < 0 || hi >= h_in as isize {
                        continue;
                    }
                    let x_row = &x_plane[hi as usize * w_in..][..w_in];
                    let w_row = &w_data[w_base + kh * k..][..k];
                    if stride == 1 {
                        for (kw, &wv) in w_row.iter().enumerate() {
                            let off = kw as isize - padding as isize;
                            let lo = (-off).max(0) as usize;
                            let hi_x = (w_in as isize - off).clamp(0, w_out as isize) as usize;
                            if lo >= hi_x {
                                continue;
                            }
                            let src = &x_row[(lo as isize + off) as usize..][..hi_x - lo];
                            for (a, &x) in acc[lo..hi_x].iter_mut().zip(src) {
                                *a = *a + wv * x;
                            }
                        }
                    } else {
                        for (kw, &wv) in w_row.iter().enumerate() {
                            for wo in 0..w_out {
                                let wi = (wo * stride + kw) as isize - padding as isize;
                                if wi < 0 || wi >= w_in as isize {
                                    continue;
                                }
                                acc[wo] = acc[wo] + wv * x_row[wi as usize];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[co];
                for a in acc.iter_mut() {
                    *a = *a + bv;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of `conv2d_forward` w.r.t. input and weight.
///
/// Accumulation orders are fixed (and thread-count independent) but chosen
/// for vectorizability, so they are *numerically* deterministic without
/// being element-for-element identical to some other implementation's order.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<S>, Tensor<S>), TensorError> {
    let (n_b, c_in, h_in, w_in) = input.dims4("conv2d input")?;
    let (c_out, _, k, _) = weight.dims4("conv2d weight")?;
    let (gn, gc, h_out, w_out) = grad_out.dims4("conv2d grad_out")?;
    if gn != n_b || gc != c_out {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            dim: if gn != n_b { 0 } else { 1 },
            expected: vec![n_b, c_out],
            got: vec![gn, gc],
        });
    }

    let in_plane = h_in * w_in;
    let gout_plane = h_out * w_out;
    let w_data = weight.data();
    let g_data = grad_out.data();
    let x_data = input.data();

    // d/d input: scatter each upstream cell through the kernel. One worker
    // per (n, c_in) plane.
    let mut grad_input = Tensor::zeros(&[n_b, c_in, h_in, w_in]);
    for_each_chunk_mut(grad_input.data_mut(), in_plane, |p, gplane| {
        let n = p / c_in;
        let ci = p % c_in;
        for co in 0..c_out {
            let g_plane = &g_data[(n * c_out + co) * gout_plane..][..gout_plane];
            let w_base = ((co * c_in + ci) * k) * k;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w_data[w_base + kh * k + kw];
                    for ho in 0..h_out {
                        let hi = (ho * stride + kh) as isize - padding as isize;
                        if hi < 0 || hi >= h_in as isize {
                            continue;
                        }
                        let dst = &mut gplane[hi as usize * w_in..][..w_in];
                        let g_row = &g_plane[ho * w_out..][..w_out];
                        if stride == 1 {
                            let off = kw as isize - padding as isize;
                            let lo = (-off).max(0) as usize;
                            let hi_x = (w_in as isize - off).clamp(0, w_out as isize) as usize;
                            if lo >= hi_x {
                                continue;
                            }
                            let dst_seg = &mut dst[(lo as isize + off) as usize..][..hi_x - lo];
                            for (d, &g) in dst_seg.iter_mut().zip(&g_row[lo..hi_x]) {
                                *d = *d + wv * g;
                            }
                        } else {
                            for wo in 0..w_out {
                                let wi = (wo * stride + kw) as isize - padding as isize;
                                if wi < 0 || wi >= w_in as isize {
                                    continue;
                                }
                                dst[wi as usize] = dst[wi as usize] + wv * g_row[wo];
                            }
                        }
                    }
                }
            }
        }
    });

    // d/d weight: per kernel tap, a lane-wise product accumulated over
    // (n, ho) then reduced left-to-right. One worker per c_out block.
    let mut grad_weight = Tensor::zeros(&[c_out, c_in, k, k]);
    let wblock = c_in * k * k;
    for_each_chunk_mut(grad_weight.data_mut(), wblock, |co, gw_block| {
        let mut lanes = vec![S::zero(); w_out];
        for ci in 0..c_in {
            for kh in 0..k {
                for kw in 0..k {
                    lanes.fill(S::zero());
                    let mut scalar_acc = S::zero();
                    for n in 0..n_b {
                        let x_plane = &x_data[(n * c_in + ci) * in_plane..][..in_plane];
                        let g_plane = &g_data[(n * c_out + co) * gout_plane..][..gout_plane];
                        for ho in 0..h_out {
                            let hi = (ho * stride + kh) as isize - padding as isize;
                            if hi < 0 || hi >= h_in as isize {
                                continue;
                            }
                            let x_row = &x_plane[hi as usize * w_in..][..w_in];
                            let g_row = &g_plane[ho * w_out..][..w_out];
                            if stride == 1 {
                                let off = kw as isize - padding as isize;
                                let lo = (-off).max(0) as usize;
                                let hi_x =
                                    (w_in as isize - off).clamp(0, w_out as isize) as usize;
                                if lo >= hi_x {
                                    continue;
                                }
                                let src = &x_row[(lo as isize + off) as usize..][..hi_x - lo];
                                for ((l, &g), &x) in
                                    lanes[lo..hi_x].iter_mut().zip(&g_row[lo..hi_x]).zip(src)
                                {
                                    *l = *l + g * x;
                                }
                            } else {
                                for wo in 0..w_out {
                                    let wi = (wo * stride + kw) as isize - padding as isize;
                                    if wi < 0 || wi >= w_in as isize {
                                        continue;
                                    }
                                    scalar_acc = scalar_acc + g_row[wo] * x_row[wi as usize];
                                }
                            }
                        }
                    }
                    let mut total = scalar_acc;
                    for &l in &lanes {
                        total = total + l;
                    }
                    gw_block[(ci * k + kh) * k + kw] = total;
                }
            }
        }
    });

    Ok((grad_input, grad_weight))
}

/// Gradient of `conv2d_forward` w.r.t. the bias: upstream summed over
/// batch and spatial dims per output channel.
pub fn conv2d_backward_bias<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (n_b, c_out, h_out, w_out) = grad_out.dims4("conv2d grad_out")?;
    let plane = h_out * w_out;
    let g = grad_out.data();
    let mut gb = vec![S::zero(); c_out];
    for n in 0..n_b {
        for (co, gbv) in gb.iter_mut().enumerate() {
            for &v in &g[(n * c_out + co) * plane..][..plane] {
                *gbv = *gbv + v;
            }
        }
    }
    Tensor::new(vec![c_out], gb)
}

/// 2x2 max pooling with stride 2. Spatial extents must be even. Returns the
/// pooled tensor and the argmax locations; ties resolve to the lowest flat
/// offset (window cells are visited in row-major order with a strict `>`).
pub fn max_pool2d_forward<S: Scalar>(
    input: &Tensor<S>,
) -> Result<(Tensor<S>, IndexMap), TensorError> {
    let (n_b, c, h, w) = input.dims4("max_pool2d input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatialExtent { h, w });
    }
    assert!(
        input.numel() <= u32::MAX as usize,
        "max_pool2d: input too large for u32 argmax indices"
    );
    let (h2, w2) = (h / 2, w / 2);
    let x = input.data();
    let mut vals = vec![S::zero(); n_b * c * h2 * w2];
    let mut idxs = vec![0u32; vals.len()];
    let mut o = 0;
    for p in 0..n_b * c {
        let plane = &x[p * h * w..][..h * w];
        let plane_base = p * h * w;
        for ho in 0..h2 {
            for wo in 0..w2 {
                let (bh, bw) = (2 * ho, 2 * wo);
                let mut best_off = bh * w + bw;
                let mut best = plane[best_off];
                for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                    let off = (bh + dh) * w + (bw + dw);
                    if plane[off] > best {
                        best = plane[off];
                        best_off = off;
                    }
                }
                vals[o] = best;
                idxs[o] = (plane_base + best_off) as u32;
                o += 1;
            }
        }
    }
    let out_shape = vec![n_b, c, h2, w2];
    let out = Tensor::new(out_shape.clone(), vals)?;
    Ok((out, IndexMap::new(vec![n_b, c, h, w], out_shape, idxs)))
}

/// Gradient of max pooling: upstream values scatter to the recorded argmax
/// positions; everything else gets zero.
pub fn max_pool2d_backward<S: Scalar>(
    indices: &IndexMap,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    if grad_out.shape() != indices.output_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "max_pool2d_backward",
            dim: 0,
            expected: indices.output_shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let mut grad_in = Tensor::zeros(indices.input_shape());
    let limit = grad_in.numel();
    let gi = grad_in.data_mut();
    for (&ix, &g) in indices.indices().iter().zip(grad_out.data()) {
        let ix = ix as usize;
        if ix >= limit {
            return Err(TensorError::IndexOutOfRange { index: ix, limit });
        }
        gi[ix] = gi[ix] + g;
    }
    Ok(grad_in)
}

/// SegNet-style unpooling: places each input value at its recorded argmax
/// position in a zero tensor of the pre-pool shape.
pub fn max_unpool2d_forward<S: Scalar>(
    input: &Tensor<S>,
    indices: &IndexMap,
) -> Result<Tensor<S>, TensorError> {
    if input.shape() != indices.output_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "max_unpool2d",
            dim: 0,
            expected: indices.output_shape().to_vec(),
            got: input.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(indices.input_shape());
    let limit = out.numel();
    let o = out.data_mut();
    for (&ix, &v) in indices.indices().iter().zip(input.data()) {
        let ix = ix as usize;
        if ix >= limit {
            return Err(TensorError::IndexOutOfRange { index: ix, limit });
        }
        o[ix] = v;
    }
    Ok(out)
}

/// Gradient of unpooling: gather upstream values back from the scattered
/// positions.
pub fn max_unpool2d_backward<S: Scalar>(
    indices: &IndexMap,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    if grad_out.shape() != indices.input_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "max_unpool2d_backward",
            dim: 0,
            expected: indices.input_shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let g = grad_out.data();
    let limit = g.len();
    let mut out = vec![S::zero(); indices.indices().len()];
    for (o, &ix) in out.iter_mut().zip(indices.indices()) {
        let ix = ix as usize;
        if ix >= limit {
            return Err(TensorError::IndexOutOfRange { index: ix, limit });
        }
        *o = g[ix];
    }
    Tensor::new(indices.output_shape().to_vec(), out)
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Subgradient at 0 is 0.
pub fn relu_backward<S: Scalar>(
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    same_shape("relu_backward", input, grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn tanh_op<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| v.tanh())
}

/// Uses the saved *output* y: d tanh = 1 - y^2.
pub fn tanh_backward<S: Scalar>(
    output: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    same_shape("tanh_backward", output, grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * (S::one() - y * y))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<S: Scalar>(input: &Tensor<S>, factor: S) -> Tensor<S> {
    input.map(|v| v * factor)
}

/// Concatenates along the channel dim; `a`'s channels come first.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (n, ca, h, w) = a.dims4("concat_channels lhs")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels rhs")?;
    if n != nb || h != hb || w != wb {
        let dim = if n != nb {
            0
        } else if h != hb {
            2
        } else {
            3
        };
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            dim,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..][..ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..][..cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Splits a concat gradient back into the two operands' gradients.
pub fn split_channels<S: Scalar>(
    grad_out: &Tensor<S>,
    ca: usize,
    cb: usize,
) -> Result<(Tensor<S>, Tensor<S>), TensorError> {
    let (n, c, h, w) = grad_out.dims4("split_channels")?;
    if c != ca + cb {
        return Err(TensorError::DimMismatch {
            op: "split_channels",
            dim: "channels",
            expected: ca + cb,
            got: c,
        });
    }
    let plane = h * w;
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for i in 0..n {
        let block = &grad_out.data()[i * c * plane..][..c * plane];
        da.extend_from_slice(&block[..ca * plane]);
        db.extend_from_slice(&block[ca * plane..]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], da)?,
        Tensor::new(vec![n, cb, h, w], db)?,
    ))
}

pub fn sum_all<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut acc = S::zero();
    for &v in input.data() {
        acc = acc + v;
    }
    Tensor::scalar(acc)
}

/// Result of the fused softmax + cross-entropy forward pass. `probs` is kept
/// for the backward pass; `valid` counts pixels whose label is not void.
pub struct SoftmaxCrossEntropy<S> {
    pub loss: Tensor<S>,
    pub probs: Tensor<S>,
    pub valid: usize,
}

/// Mean pixel-wise cross entropy over non-void labels, computed from logits
/// with the max-subtraction trick. Labels equal to [`VOID`] are ignored; a
/// label `>= C` (other than void) is an error. All labels void => loss 0.
pub fn softmax_cross_entropy_forward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &IntTensor,
) -> Result<SoftmaxCrossEntropy<S>, TensorError> {
    let (n_b, c, h, w) = logits.dims4("softmax_cross_entropy logits")?;
    if labels.shape() != [n_b, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            dim: 0,
            expected: vec![n_b, h, w],
            got: labels.shape().to_vec(),
        });
    }
    if c > VOID as usize {
        return Err(TensorError::DimMismatch {
            op: "softmax_cross_entropy",
            dim: "classes (must stay below the void id)",
            expected: VOID as usize,
            got: c,
        });
    }
    let plane = h * w;
    let x = logits.data();
    let mut probs = vec![S::zero(); x.len()];
    let mut loss_acc = S::zero();
    let mut valid = 0usize;
    for n in 0..n_b {
        for pix in 0..plane {
            let mut m = x[(n * c) * plane + pix];
            for ch in 1..c {
                let v = x[(n * c + ch) * plane + pix];
                if v > m {
                    m = v;
                }
            }
            let mut denom = S::zero();
            for ch in 0..c {
                let e = (x[(n * c + ch) * plane + pix] - m).exp();
                probs[(n * c + ch) * plane + pix] = e;
                denom = denom + e;
            }
            for ch in 0..c {
                let i = (n * c + ch) * plane + pix;
                probs[i] = probs[i] / denom;
            }
            let y = labels.data()[n * plane + pix];
            if y == VOID {
                continue;
            }
            if y as usize >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: y,
                    classes: c,
                    void: VOID,
                });
            }
            let shifted = x[(n * c + y as usize) * plane + pix] - m;
            loss_acc = loss_acc + (denom.ln() - shifted);
            valid += 1;
        }
    }
    let loss = if valid == 0 {
        S::zero()
    } else {
        loss_acc / S::from_f64(valid as f64)
    };
    Ok(SoftmaxCrossEntropy {
        loss: Tensor::scalar(loss),
        probs: Tensor::new(logits.shape().to_vec(), probs)?,
        valid,
    })
}

/// Gradient of the mean cross entropy w.r.t. the logits:
/// `(softmax - onehot) * upstream / valid` at non-void pixels, zero elsewhere.
pub fn softmax_cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    labels: &IntTensor,
    valid: usize,
    upstream: S,
) -> Result<Tensor<S>, TensorError> {
    let (n_b, c, h, w) = probs.dims4("softmax_cross_entropy probs")?;
    let plane = h * w;
    let mut grad = vec![S::zero(); probs.numel()];
    if valid == 0 {
        return Tensor::new(probs.shape().to_vec(), grad);
    }
    let g_scale = upstream / S::from_f64(valid as f64);
    let p = probs.data();
    for n in 0..n_b {
        for pix in 0..plane {
            let y = labels.data()[n * plane + pix];
            if y == VOID {
                continue;
            }
            for ch in 0..c {
                let i = (n * c + ch) * plane + pix;
                let indicator = if ch == y as usize { S::one() } else { S::zero() };
                grad[i] = g_scale * (p[i] - indicator);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), grad)
}
