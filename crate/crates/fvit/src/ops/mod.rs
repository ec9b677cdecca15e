//! Differentiable operations recorded on a [`Tape`].
//!
//! Each function runs its forward kernel eagerly, then pushes a node whose
//! backward closure routes the upstream gradient to the operation's inputs.
//! Saved intermediates are reference-counted tensor clones, so recording is
//! cheap.

pub mod conv;
pub mod gemm;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub use conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvSpec,
};

use crate::gabor::{
    self, build_kernel, kernel_param_grads_mode, softplus, softplus_grad, GaborParams,
    LambdaGradMode,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Elementwise sum of two equally shaped variables.
pub fn add<T: Scalar>(tape: &mut Tape<T>, a: VarId, b: VarId) -> Result<VarId> {
    let value = tape.value(a).add(tape.value(b))?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            sink.accumulate(a, g.clone());
            sink.accumulate(b, g.clone());
        })),
    ))
}

/// Elementwise product.
pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: VarId, b: VarId) -> Result<VarId> {
    let va = tape.value(a).clone();
    let vb = tape.value(b).clone();
    let value = va.zip_map(&vb, |x, y| x * y)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            sink.accumulate(a, g.zip_map(&vb, |x, y| x * y).unwrap());
            sink.accumulate(b, g.zip_map(&va, |x, y| x * y).unwrap());
        })),
    ))
}

/// Multiply by a constant.
pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: VarId, s: f64) -> VarId {
    let sv = T::from_f64(s);
    let value = tape.value(a).scale(sv);
    tape.push(
        value,
        Some(Box::new(move |g, sink| {
            sink.accumulate(a, g.scale(sv));
        })),
    )
}

/// Reduce to a scalar by summation.
pub fn sum<T: Scalar>(tape: &mut Tape<T>, a: VarId) -> VarId {
    let shape = tape.value(a).shape().to_vec();
    let value = Tensor::scalar(tape.value(a).sum());
    tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let gv = g.data()[0];
            sink.accumulate(a, Tensor::full(&shape, gv));
        })),
    )
}

/// 2-D cross-correlation. See [`conv::conv2d_forward`] for layout rules.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    w: VarId,
    bias: Option<VarId>,
    spec: ConvSpec,
) -> Result<VarId> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = bias.map(|b| tape.value(b).clone());
    let value = conv2d_forward(&xv, &wv, bv.as_ref(), spec)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let dx = conv2d_backward_input(g, &wv, xv.shape(), spec)
                .expect("input gradient shapes were validated in forward");
            sink.accumulate(x, dx);
            let dw = conv2d_backward_weight(g, &xv, wv.shape(), spec)
                .expect("weight gradient shapes were validated in forward");
            sink.accumulate(w, dw);
            if let Some(b) = bias {
                sink.accumulate(b, conv2d_backward_bias(g).unwrap());
            }
        })),
    ))
}

/// Affine map over the last axis: `[..., F_in] -> [..., F_out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    wv.expect_ndim(2, "linear weight")?;
    let (f_out, f_in) = (wv.shape()[0], wv.shape()[1]);
    if xv.ndim() == 0 || *xv.shape().last().unwrap() != f_in {
        return Err(Error::Dimension(format!(
            "linear input last axis must be F_in={} (weight {:?}), got input {:?}",
            f_in,
            wv.shape(),
            xv.shape()
        )));
    }
    if bv.shape() != [f_out] {
        return Err(Error::Dimension(format!(
            "linear bias must be [{}], got {:?}",
            f_out,
            bv.shape()
        )));
    }
    let m = xv.numel() / f_in;
    let mut out = vec![T::zero(); m * f_out];
    gemm::matmul_a_bt_acc(&mut out, xv.data(), wv.data(), m, f_in, f_out);
    for row in out.chunks_mut(f_out) {
        for (o, &bias_v) in row.iter_mut().zip(bv.data()) {
            *o = *o + bias_v;
        }
    }
    let mut out_shape = xv.shape().to_vec();
    *out_shape.last_mut().unwrap() = f_out;
    let value = Tensor::from_vec(&out_shape, out)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let gd = g.data();
            let mut dx = vec![T::zero(); m * f_in];
            gemm::matmul_acc(&mut dx, gd, wv.data(), m, f_out, f_in);
            sink.accumulate(x, Tensor::from_vec(xv.shape(), dx).unwrap());
            let mut dw = vec![T::zero(); f_out * f_in];
            gemm::matmul_at_b_acc(&mut dw, gd, xv.data(), m, f_out, f_in);
            sink.accumulate(w, Tensor::from_vec(&[f_out, f_in], dw).unwrap());
            let mut db = vec![T::zero(); f_out];
            for row in gd.chunks(f_out) {
                for (acc, &gv) in db.iter_mut().zip(row) {
                    *acc = *acc + gv;
                }
            }
            sink.accumulate(b, Tensor::from_vec(&[f_out], db).unwrap());
        })),
    ))
}

/// Normalize over the channel axis with learned affine parameters.
///
/// Rank-4 input is `[N, C, H, W]` normalized over `C` at every spatial
/// position (feature maps are treated as one token per position); rank-2
/// input is `[N, C]` normalized over the last axis.
pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    eps: f64,
) -> Result<VarId> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let xv = tape.value(x).clone();
    let gv = tape.value(gamma).clone();
    let bv = tape.value(beta).clone();
    let (c, positions, stride, plane) = match xv.ndim() {
        4 => {
            let s = xv.shape();
            (s[1], s[0] * s[2] * s[3], s[2] * s[3], s[2] * s[3])
        }
        2 => (xv.shape()[1], xv.shape()[0], 1, 1),
        _ => {
            return Err(Error::Dimension(format!(
                "layer_norm expects rank 2 or 4 input, got {:?}",
                xv.shape()
            )))
        }
    };
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::Dimension(format!(
            "layer_norm affine parameters must be [{}], got gamma {:?} beta {:?}",
            c,
            gv.shape(),
            bv.shape()
        )));
    }

    // Index of (position, channel) in the flat buffer.
    let index = move |pos: usize, ch: usize| -> usize {
        if stride == 1 {
            pos * c + ch
        } else {
            let n = pos / plane;
            let hw = pos % plane;
            (n * c + ch) * plane + hw
        }
    };

    let xd = xv.data();
    let inv_c = T::from_f64(1.0 / c as f64);
    let epsv = T::from_f64(eps);
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); positions];
    for pos in 0..positions {
        let mut mean = T::zero();
        for ch in 0..c {
            mean = mean + xd[index(pos, ch)];
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for ch in 0..c {
            let d = xd[index(pos, ch)] - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let inv = T::one() / (var + epsv).sqrt();
        inv_std[pos] = inv;
        for ch in 0..c {
            let i = index(pos, ch);
            let xh = (xd[i] - mean) * inv;
            xhat[i] = xh;
            y[i] = gv.data()[ch] * xh + bv.data()[ch];
        }
    }
    let value = Tensor::from_vec(xv.shape(), y)?;
    let xhat = Tensor::from_vec(xv.shape(), xhat)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let gd = g.data();
            let xh = xhat.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for pos in 0..positions {
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for ch in 0..c {
                    let i = index(pos, ch);
                    let dyg = gd[i] * gv.data()[ch];
                    m1 = m1 + dyg;
                    m2 = m2 + dyg * xh[i];
                }
                m1 = m1 * inv_c;
                m2 = m2 * inv_c;
                let inv = inv_std[pos];
                for ch in 0..c {
                    let i = index(pos, ch);
                    let dyg = gd[i] * gv.data()[ch];
                    dx[i] = inv * (dyg - m1 - xh[i] * m2);
                    dgamma[ch] = dgamma[ch] + gd[i] * xh[i];
                    dbeta[ch] = dbeta[ch] + gd[i];
                }
            }
            sink.accumulate(x, Tensor::from_vec(xhat.shape(), dx).unwrap());
            sink.accumulate(gamma, Tensor::from_vec(&[c], dgamma).unwrap());
            sink.accumulate(beta, Tensor::from_vec(&[c], dbeta).unwrap());
        })),
    ))
}

/// Exact Gaussian-error GELU: `x * Phi(x)`.
pub fn gelu<T: Scalar>(tape: &mut Tape<T>, x: VarId) -> VarId {
    let xv = tape.value(x).clone();
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let value = xv.map(|v| v * half * (T::one() + (v * inv_sqrt2).erf()));
    tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let dx = g
                .zip_map(&xv, |gv, v| {
                    let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-v * v * half).exp();
                    gv * (phi_cdf + v * pdf)
                })
                .unwrap();
            sink.accumulate(x, dx);
        })),
    )
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
    let xv = tape.value(x).clone();
    xv.expect_ndim(4, "global_avg_pool input")?;
    let (n, c, h, w) = (
        xv.shape()[0],
        xv.shape()[1],
        xv.shape()[2],
        xv.shape()[3],
    );
    let inv_hw = T::from_f64(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &xv.data()[(ni * c + ci) * h * w..][..h * w];
            let mut acc = T::zero();
            for &v in plane {
                acc = acc + v;
            }
            out[ni * c + ci] = acc * inv_hw;
        }
    }
    let value = Tensor::from_vec(&[n, c], out)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g.data()[ni * c + ci] * inv_hw;
                    dx[(ni * c + ci) * h * w..][..h * w]
                        .iter_mut()
                        .for_each(|v| *v = gv);
                }
            }
            sink.accumulate(x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
        })),
    ))
}

/// Mean softmax cross-entropy with label smoothing, numerically stabilized
/// by max subtraction. Returns a scalar loss variable.
pub fn softmax_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: VarId,
    labels: &[usize],
    label_smoothing: f64,
) -> Result<VarId> {
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::Parameter(format!(
            "label smoothing must be in [0, 1), got {label_smoothing}"
        )));
    }
    let lv = tape.value(logits).clone();
    lv.expect_ndim(2, "softmax_cross_entropy logits")?;
    let (n, k) = (lv.shape()[0], lv.shape()[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "batch axis mismatch: {} logit rows vs {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().position(|&l| l >= k) {
        return Err(Error::Input(format!(
            "label {} at index {bad} is out of range for {k} classes",
            labels[bad]
        )));
    }
    let off = T::from_f64(label_smoothing / k as f64);
    let on = T::from_f64(1.0 - label_smoothing) + off;
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        let r = &lv.data()[row * k..(row + 1) * k];
        let max = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for &v in r {
            z = z + (v - max).exp();
        }
        let log_z = z.ln() + max;
        let mut row_loss = T::zero();
        for (col, &v) in r.iter().enumerate() {
            probs[row * k + col] = (v - log_z).exp();
            let t = if col == label { on } else { off };
            row_loss = row_loss - t * (v - log_z);
        }
        loss = loss + row_loss;
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let value = Tensor::scalar(loss * inv_n);
    let labels = labels.to_vec();
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let gv = g.data()[0] * inv_n;
            let mut dl = probs;
            for (row, &label) in labels.iter().enumerate() {
                for col in 0..k {
                    let t = if col == label { on } else { off };
                    let i = row * k + col;
                    dl[i] = (dl[i] - t) * gv;
                }
            }
            sink.accumulate(logits, Tensor::from_vec(&[n, k], dl).unwrap());
        })),
    ))
}

/// Stochastic depth on the leading (batch) axis. In training each sample's
/// branch is zeroed with probability `rate` and kept scaled by
/// `1 / (1 - rate)` otherwise, so evaluation is the identity.
pub fn drop_path<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    rate: f64,
    training: bool,
    rng: &mut ChaCha12Rng,
) -> Result<VarId> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "drop path rate must be in [0, 1], got {rate}"
        )));
    }
    let xv = tape.value(x).clone();
    if !training || rate == 0.0 {
        let value = xv;
        return Ok(tape.push(
            value,
            Some(Box::new(move |g, sink| sink.accumulate(x, g.clone()))),
        ));
    }
    let n = xv.shape()[0];
    let per_sample = xv.numel() / n;
    let keep_scale = if rate < 1.0 {
        T::from_f64(1.0 / (1.0 - rate))
    } else {
        T::zero()
    };
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mut out = xv.data().to_vec();
    for (s, chunk) in out.chunks_mut(per_sample).enumerate() {
        let m = mask[s];
        chunk.iter_mut().for_each(|v| *v = *v * m);
    }
    let value = Tensor::from_vec(xv.shape(), out)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let mut dx = g.data().to_vec();
            for (s, chunk) in dx.chunks_mut(per_sample).enumerate() {
                let m = mask[s];
                chunk.iter_mut().for_each(|v| *v = *v * m);
            }
            sink.accumulate(x, Tensor::from_vec(g.shape(), dx).unwrap());
        })),
    ))
}

/// Slice a contiguous channel range out of an NCHW tensor.
pub fn narrow_channels<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    start: usize,
    len: usize,
) -> Result<VarId> {
    let xv = tape.value(x).clone();
    xv.expect_ndim(4, "narrow_channels input")?;
    let (n, c, h, w) = (
        xv.shape()[0],
        xv.shape()[1],
        xv.shape()[2],
        xv.shape()[3],
    );
    if start + len > c {
        return Err(Error::Dimension(format!(
            "channel slice {start}..{} exceeds C={c}",
            start + len
        )));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); n * len * plane];
    for ni in 0..n {
        let src = &xv.data()[(ni * c + start) * plane..][..len * plane];
        out[ni * len * plane..][..len * plane].copy_from_slice(src);
    }
    let value = Tensor::from_vec(&[n, len, h, w], out)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let mut dx = vec![T::zero(); n * c * plane];
            for ni in 0..n {
                let dst = &mut dx[(ni * c + start) * plane..][..len * plane];
                dst.copy_from_slice(&g.data()[ni * len * plane..][..len * plane]);
            }
            sink.accumulate(x, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
        })),
    ))
}

/// Concatenate two NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, a: VarId, b: VarId) -> Result<VarId> {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    av.expect_ndim(4, "concat_channels lhs")?;
    bv.expect_ndim(4, "concat_channels rhs")?;
    let (n, ca, h, w) = (
        av.shape()[0],
        av.shape()[1],
        av.shape()[2],
        av.shape()[3],
    );
    let cb = bv.shape()[1];
    if bv.shape() != [n, cb, h, w] {
        return Err(Error::Dimension(format!(
            "concat_channels needs matching batch/spatial axes, got {:?} vs {:?}",
            av.shape(),
            bv.shape()
        )));
    }
    let plane = h * w;
    let c = ca + cb;
    let mut out = vec![T::zero(); n * c * plane];
    for ni in 0..n {
        out[ni * c * plane..][..ca * plane]
            .copy_from_slice(&av.data()[ni * ca * plane..][..ca * plane]);
        out[(ni * c + ca) * plane..][..cb * plane]
            .copy_from_slice(&bv.data()[ni * cb * plane..][..cb * plane]);
    }
    let value = Tensor::from_vec(&[n, c, h, w], out)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let mut da = vec![T::zero(); n * ca * plane];
            let mut db = vec![T::zero(); n * cb * plane];
            for ni in 0..n {
                da[ni * ca * plane..][..ca * plane]
                    .copy_from_slice(&g.data()[ni * c * plane..][..ca * plane]);
                db[ni * cb * plane..][..cb * plane]
                    .copy_from_slice(&g.data()[(ni * c + ca) * plane..][..cb * plane]);
            }
            sink.accumulate(a, Tensor::from_vec(&[n, ca, h, w], da).unwrap());
            sink.accumulate(b, Tensor::from_vec(&[n, cb, h, w], db).unwrap());
        })),
    ))
}

/// Depthwise convolution whose per-channel kernels are generated from five
/// trainable Gabor parameter vectors (stored pre-softplus for the three
/// positive ones). The backward pass chains the convolution's weight
/// gradient through the analytic kernel-parameter derivatives.
#[allow(clippy::too_many_arguments)]
pub fn gabor_dwconv<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    lambda_raw: VarId,
    theta: VarId,
    psi: VarId,
    gamma_raw: VarId,
    sigma_raw: VarId,
    kernel_size: usize,
    padding: usize,
    mode: LambdaGradMode,
) -> Result<VarId> {
    let xv = tape.value(x).clone();
    xv.expect_ndim(4, "gabor depthwise input")?;
    let c = xv.shape()[1];
    let raw = [lambda_raw, theta, psi, gamma_raw, sigma_raw];
    for (var, name) in raw.iter().zip(gabor::PARAM_NAMES) {
        if tape.value(*var).shape() != [c] {
            return Err(Error::Dimension(format!(
                "gabor {name} vector must match channel axis C={c}, got {:?}",
                tape.value(*var).shape()
            )));
        }
    }
    let raw_vals: Vec<Tensor<T>> = raw.iter().map(|&v| tape.value(v).clone()).collect();
    let params: Vec<GaborParams<T>> = (0..c)
        .map(|ci| GaborParams {
            lambda: softplus(raw_vals[0].data()[ci]),
            theta: raw_vals[1].data()[ci],
            psi: raw_vals[2].data()[ci],
            gamma: softplus(raw_vals[3].data()[ci]),
            sigma: softplus(raw_vals[4].data()[ci]),
        })
        .collect();
    let k = kernel_size;
    let mut weight = vec![T::zero(); c * k * k];
    for (ci, p) in params.iter().enumerate() {
        let kern = build_kernel(k, p)?;
        weight[ci * k * k..(ci + 1) * k * k].copy_from_slice(kern.data());
    }
    let weight = Tensor::from_vec(&[c, 1, k, k], weight)?;
    let spec = ConvSpec::new(1, padding, c);
    let value = conv2d_forward(&xv, &weight, None, spec)?;
    Ok(tape.push(
        value,
        Some(Box::new(move |g, sink| {
            let dx = conv2d_backward_input(g, &weight, xv.shape(), spec).unwrap();
            sink.accumulate(x, dx);
            let dk = conv2d_backward_weight(g, &xv, weight.shape(), spec).unwrap();
            let mut dparam = vec![vec![T::zero(); c]; 5];
            for (ci, p) in params.iter().enumerate() {
                let grads = kernel_param_grads_mode(k, p, mode).unwrap();
                let dk_c = &dk.data()[ci * k * k..(ci + 1) * k * k];
                for pi in 0..5 {
                    let gk = grads.by_index(pi);
                    let mut acc = T::zero();
                    for (a, b) in dk_c.iter().zip(gk.data()) {
                        acc = acc + *a * *b;
                    }
                    // Positive parameters are stored pre-softplus.
                    if pi == 0 || pi == 3 || pi == 4 {
                        acc = acc * softplus_grad(raw_vals[pi].data()[ci]);
                    }
                    dparam[pi][ci] = acc;
                }
            }
            for (pi, d) in dparam.into_iter().enumerate() {
                sink.accumulate(raw[pi], Tensor::from_vec(&[c], d).unwrap());
            }
        })),
    ))
}
