//! 2-D convolution (cross-correlation) kernels: forward, input gradient,
//! weight gradient. Layout is NCHW with square `[O, I, K, K]` weights.
//!
//! General convolutions go through im2col + GEMM; depthwise convolutions
//! (`groups == C == O`) and pointwise 1x1 convolutions take direct paths.
//! All parallel loops write disjoint output regions and weight-gradient
//! partials are reduced over a fixed chunk grid, so every pass is bitwise
//! deterministic.

use rayon::prelude::*;

use super::gemm::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Fixed number of sample chunks for weight-gradient reduction. Independent
/// of the thread count so results do not depend on the machine.
const WGRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups,
        }
    }

    pub fn pointwise() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub group_in: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Validate shapes and compute output dimensions (floor division).
pub fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<ConvDims> {
    x.expect_ndim(4, "conv2d input")?;
    w.expect_ndim(4, "conv2d weight")?;
    if spec.stride < 1 {
        return Err(Error::Parameter(format!(
            "conv2d stride must be >= 1, got {}",
            spec.stride
        )));
    }
    if spec.groups < 1 {
        return Err(Error::Parameter("conv2d groups must be >= 1".into()));
    }
    let (n, c, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, i, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh != kw {
        return Err(Error::Dimension(format!(
            "kernel axes must be square, got {kh}x{kw}"
        )));
    }
    if c % spec.groups != 0 {
        return Err(Error::Dimension(format!(
            "input channel axis C={} not divisible by groups={}",
            c, spec.groups
        )));
    }
    if o % spec.groups != 0 {
        return Err(Error::Dimension(format!(
            "output channel axis O={} not divisible by groups={}",
            o, spec.groups
        )));
    }
    if i != c / spec.groups {
        return Err(Error::Dimension(format!(
            "weight input axis I={} but C/groups={}/{}={}",
            i,
            c,
            spec.groups,
            c / spec.groups
        )));
    }
    let span = h + 2 * spec.padding;
    if span < kh {
        return Err(Error::Dimension(format!(
            "spatial axis H={} too small for kernel {} at padding {}",
            h, kh, spec.padding
        )));
    }
    let out_h = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let out_w = (iw + 2 * spec.padding - kw) / spec.stride + 1;
    if iw + 2 * spec.padding < kw {
        return Err(Error::Dimension(format!(
            "spatial axis W={} too small for kernel {} at padding {}",
            iw, kw, spec.padding
        )));
    }
    Ok(ConvDims {
        batch: n,
        in_channels: c,
        in_h: h,
        in_w: iw,
        out_channels: o,
        group_in: i,
        kernel: kh,
        out_h,
        out_w,
    })
}

fn is_depthwise(d: &ConvDims, spec: ConvSpec) -> bool {
    spec.groups == d.in_channels && d.out_channels == d.in_channels && d.group_in == 1
}

fn is_pointwise(d: &ConvDims, spec: ConvSpec) -> bool {
    d.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfold one sample's group slice into a `[I*K*K, OH*OW]` patch matrix.
fn im2col<T: Scalar>(
    x: &[T],
    d: &ConvDims,
    spec: ConvSpec,
    col: &mut [T],
) {
    let (k, h, w) = (d.kernel, d.in_h, d.in_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let (s, p) = (spec.stride, spec.padding);
    debug_assert_eq!(x.len(), d.group_in * h * w);
    debug_assert_eq!(col.len(), d.group_in * k * k * oh * ow);
    for ci in 0..d.group_in {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, dv) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        *dv = if ix >= 0 && ix < w as isize {
                            x_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter a `[I*K*K, OH*OW]` gradient matrix back onto one input slice.
fn col2im_acc<T: Scalar>(col: &[T], d: &ConvDims, spec: ConvSpec, dx: &mut [T]) {
    let (k, h, w) = (d.kernel, d.in_h, d.in_w);
    let (oh, ow) = (d.out_h, d.out_w);
    let (s, p) = (spec.stride, spec.padding);
    for ci in 0..d.group_in {
        let dx_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dx_row = &mut dx_plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dx_row[ix as usize] = dx_row[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [d.out_channels] {
            return Err(Error::Dimension(format!(
                "bias axis must be [{}], got {:?}",
                d.out_channels,
                b.shape()
            )));
        }
    }
    let (oh, ow) = (d.out_h, d.out_w);
    let out_stride = d.out_channels * oh * ow;
    let x_stride = d.in_channels * d.in_h * d.in_w;
    let mut out = vec![T::zero(); d.batch * out_stride];
    let xd = x.data();
    let wd = w.data();

    let per_sample = |xs: &[T], os: &mut [T]| {
        if is_depthwise(&d, spec) {
            depthwise_forward(xs, wd, &d, spec, os);
        } else {
            let og = d.out_channels / spec.groups;
            let patch = d.group_in * d.kernel * d.kernel;
            let mut col = vec![T::zero(); patch * oh * ow];
            for g in 0..spec.groups {
                let xg = &xs[g * d.group_in * d.in_h * d.in_w..][..d.group_in * d.in_h * d.in_w];
                let wg = &wd[g * og * patch..][..og * patch];
                let outg = &mut os[g * og * oh * ow..][..og * oh * ow];
                if is_pointwise(&d, spec) {
                    matmul_acc(outg, wg, xg, og, patch, oh * ow);
                } else {
                    im2col(xg, &d, spec, &mut col);
                    matmul_acc(outg, wg, &col, og, patch, oh * ow);
                }
            }
        }
        if let Some(b) = bias {
            for (o, chunk) in os.chunks_mut(oh * ow).enumerate() {
                let bv = b.data()[o];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    };

    if d.batch > 1 {
        out.par_chunks_mut(out_stride)
            .zip(xd.par_chunks(x_stride))
            .for_each(|(os, xs)| per_sample(xs, os));
    } else {
        per_sample(xd, &mut out);
    }
    Tensor::from_vec(&[d.batch, d.out_channels, oh, ow], out)
}

fn depthwise_forward<T: Scalar>(xs: &[T], wd: &[T], d: &ConvDims, spec: ConvSpec, os: &mut [T]) {
    let (k, h, w, oh, ow) = (d.kernel, d.in_h, d.in_w, d.out_h, d.out_w);
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..d.in_channels {
        let x_plane = &xs[c * h * w..(c + 1) * h * w];
        let w_plane = &wd[c * k * k..(c + 1) * k * k];
        let o_plane = &mut os[c * oh * ow..(c + 1) * oh * ow];
        for kh in 0..k {
            for kw in 0..k {
                let wv = w_plane[kh * k + kw];
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    let o_row = &mut o_plane[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        // contiguous span of valid ox for this kw
                        let lo = p.saturating_sub(kw);
                        let hi = (w + p - kw).min(ow);
                        for ox in lo..hi {
                            let ix = ox + kw - p;
                            o_row[ox] = o_row[ox] + wv * x_row[ix];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * s + kw) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                o_row[ox] = o_row[ox] + wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let x_probe = Tensor::<T>::zeros(x_shape);
    let d = conv_dims(&x_probe, w, spec)?;
    let (oh, ow) = (d.out_h, d.out_w);
    let out_stride = d.out_channels * oh * ow;
    let x_stride = d.in_channels * d.in_h * d.in_w;
    let mut dx = vec![T::zero(); d.batch * x_stride];
    let gyd = gy.data();
    let wd = w.data();

    let per_sample = |gys: &[T], dxs: &mut [T]| {
        if is_depthwise(&d, spec) {
            depthwise_backward_input(gys, wd, &d, spec, dxs);
            return;
        }
        let og = d.out_channels / spec.groups;
        let patch = d.group_in * d.kernel * d.kernel;
        for g in 0..spec.groups {
            let wg = &wd[g * og * patch..][..og * patch];
            let gyg = &gys[g * og * oh * ow..][..og * oh * ow];
            let dxg = &mut dxs[g * d.group_in * d.in_h * d.in_w..][..d.group_in * d.in_h * d.in_w];
            if is_pointwise(&d, spec) {
                matmul_at_b_acc(dxg, wg, gyg, og, patch, oh * ow);
            } else {
                let mut dcol = vec![T::zero(); patch * oh * ow];
                matmul_at_b_acc(&mut dcol, wg, gyg, og, patch, oh * ow);
                col2im_acc(&dcol, &d, spec, dxg);
            }
        }
    };

    if d.batch > 1 {
        dx.par_chunks_mut(x_stride)
            .zip(gyd.par_chunks(out_stride))
            .for_each(|(dxs, gys)| per_sample(gys, dxs));
    } else {
        per_sample(gyd, &mut dx);
    }
    Tensor::from_vec(x_shape, dx)
}

fn depthwise_backward_input<T: Scalar>(
    gys: &[T],
    wd: &[T],
    d: &ConvDims,
    spec: ConvSpec,
    dxs: &mut [T],
) {
    let (k, h, w, oh, ow) = (d.kernel, d.in_h, d.in_w, d.out_h, d.out_w);
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..d.in_channels {
        let gy_plane = &gys[c * oh * ow..(c + 1) * oh * ow];
        let w_plane = &wd[c * k * k..(c + 1) * k * k];
        let dx_plane = &mut dxs[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let wv = w_plane[kh * k + kw];
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let gy_row = &gy_plane[oy * ow..(oy + 1) * ow];
                    let dx_row = &mut dx_plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dx_row[ix as usize] = dx_row[ix as usize] + wv * gy_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the weight, reduced over the batch in a fixed
/// chunk order.
pub fn conv2d_backward_weight<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let w_probe = Tensor::<T>::zeros(w_shape);
    let d = conv_dims(x, &w_probe, spec)?;
    let (oh, ow) = (d.out_h, d.out_w);
    let out_stride = d.out_channels * oh * ow;
    let x_stride = d.in_channels * d.in_h * d.in_w;
    let w_len: usize = w_shape.iter().product();
    let xd = x.data();
    let gyd = gy.data();

    let chunk_size = d.batch.div_ceil(WGRAD_CHUNKS.min(d.batch));
    let partials: Vec<Vec<T>> = (0..d.batch.div_ceil(chunk_size))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * chunk_size;
            let hi = (lo + chunk_size).min(d.batch);
            let mut dw = vec![T::zero(); w_len];
            let og = d.out_channels / spec.groups;
            let patch = d.group_in * d.kernel * d.kernel;
            let mut col = vec![T::zero(); patch * oh * ow];
            for n in lo..hi {
                let xs = &xd[n * x_stride..(n + 1) * x_stride];
                let gys = &gyd[n * out_stride..(n + 1) * out_stride];
                if is_depthwise(&d, spec) {
                    depthwise_backward_weight(gys, xs, &d, spec, &mut dw);
                    continue;
                }
                for g in 0..spec.groups {
                    let xg = &xs[g * d.group_in * d.in_h * d.in_w..]
                        [..d.group_in * d.in_h * d.in_w];
                    let gyg = &gys[g * og * oh * ow..][..og * oh * ow];
                    let dwg = &mut dw[g * og * patch..][..og * patch];
                    if is_pointwise(&d, spec) {
                        matmul_a_bt_acc(dwg, gyg, xg, og, oh * ow, patch);
                    } else {
                        im2col(xg, &d, spec, &mut col);
                        matmul_a_bt_acc(dwg, gyg, &col, og, oh * ow, patch);
                    }
                }
            }
            dw
        })
        .collect();

    let mut dw = vec![T::zero(); w_len];
    for part in partials {
        for (acc, v) in dw.iter_mut().zip(part) {
            *acc = *acc + v;
        }
    }
    Tensor::from_vec(w_shape, dw)
}

fn depthwise_backward_weight<T: Scalar>(
    gys: &[T],
    xs: &[T],
    d: &ConvDims,
    spec: ConvSpec,
    dw: &mut [T],
) {
    let (k, h, w, oh, ow) = (d.kernel, d.in_h, d.in_w, d.out_h, d.out_w);
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..d.in_channels {
        let gy_plane = &gys[c * oh * ow..(c + 1) * oh * ow];
        let x_plane = &xs[c * h * w..(c + 1) * h * w];
        let dw_plane = &mut dw[c * k * k..(c + 1) * k * k];
        for kh in 0..k {
            for kw in 0..k {
                let mut acc = T::zero();
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    let gy_row = &gy_plane[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            acc = acc + x_row[ix as usize] * gy_row[ox];
                        }
                    }
                }
                dw_plane[kh * k + kw] = dw_plane[kh * k + kw] + acc;
            }
        }
    }
}

/// Bias gradient: plain sum of the output gradient over batch and space.
pub fn conv2d_backward_bias<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    gy.expect_ndim(4, "conv2d output gradient")?;
    let (n, o, oh, ow) = (
        gy.shape()[0],
        gy.shape()[1],
        gy.shape()[2],
        gy.shape()[3],
    );
    let mut db = vec![T::zero(); o];
    let gyd = gy.data();
    for ni in 0..n {
        for oi in 0..o {
            let plane = &gyd[(ni * o + oi) * oh * ow..][..oh * ow];
            let mut acc = T::zero();
            for &v in plane {
                acc = acc + v;
            }
            db[oi] = db[oi] + acc;
        }
    }
    Tensor::from_vec(&[o], db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Independent 7-loop reference implementation.
    pub fn conv2d_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: ConvSpec,
    ) -> Tensor<f64> {
        let d = conv_dims(x, w, spec).unwrap();
        let (k, s, p) = (d.kernel, spec.stride, spec.padding);
        let og = d.out_channels / spec.groups;
        let mut out = Tensor::zeros(&[d.batch, d.out_channels, d.out_h, d.out_w]);
        let o_idx = |n: usize, c: usize, y: usize, xw: usize| {
            ((n * d.out_channels + c) * d.out_h + y) * d.out_w + xw
        };
        let data = out.data_mut();
        for n in 0..d.batch {
            for o in 0..d.out_channels {
                let g = o / og;
                for oy in 0..d.out_h {
                    for ox in 0..d.out_w {
                        let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                        for ci in 0..d.group_in {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * s + kh) as isize - p as isize;
                                    let ix = (ox * s + kw) as isize - p as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= d.in_h as isize
                                        || ix >= d.in_w as isize
                                    {
                                        continue;
                                    }
                                    let c = g * d.group_in + ci;
                                    acc += x.at4(n, c, iy as usize, ix as usize)
                                        * w.at4(o, ci, kh, kw);
                                }
                            }
                        }
                        data[o_idx(n, o, oy, ox)] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn one_by_one_identity_kernel_preserves_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 4]);
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), ConvSpec::pointwise()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn strided_padded_conv_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 4, 8, 8]);
        let w = rand_tensor(&mut rng, &[6, 4, 3, 3]);
        let b = rand_tensor(&mut rng, &[6]);
        let spec = ConvSpec::new(2, 1, 1);
        let got = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
        let expect = conv2d_naive(&x, &w, Some(&b), spec);
        assert_eq!(got.shape(), &[2, 6, 4, 4]);
        assert!(crate::tensor::max_rel_diff(&got, &expect) < 1e-12);
    }

    #[test]
    fn grid_of_stride_padding_groups_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for &groups in &[1usize, 2, 4] {
            for &stride in &[1usize, 2, 3] {
                for &padding in &[0usize, 1, 2] {
                    for &k in &[1usize, 3] {
                        if k == 1 && padding > 0 {
                            continue;
                        }
                        let c = 4;
                        let o = 8;
                        let x = rand_tensor(&mut rng, &[2, c, 7, 6]);
                        let w = rand_tensor(&mut rng, &[o, c / groups, k, k]);
                        let spec = ConvSpec::new(stride, padding, groups);
                        let got = conv2d_forward(&x, &w, None, spec).unwrap();
                        let expect = conv2d_naive(&x, &w, None, spec);
                        assert!(
                            crate::tensor::max_rel_diff(&got, &expect) < 1e-12,
                            "mismatch at groups={groups} stride={stride} padding={padding} k={k}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let c = 5;
        let x = rand_tensor(&mut rng, &[3, c, 9, 7]);
        let w = rand_tensor(&mut rng, &[c, 1, 3, 3]);
        let spec = ConvSpec::new(1, 1, c);
        let got = conv2d_forward(&x, &w, None, spec).unwrap();
        let expect = conv2d_naive(&x, &w, None, spec);
        assert!(crate::tensor::max_rel_diff(&got, &expect) < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 4, 8, 8]);
        let w = Tensor::<f64>::zeros(&[6, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, None, ConvSpec::new(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("I=3"), "got: {err}");
        let w2 = Tensor::<f64>::zeros(&[6, 4, 3, 3]);
        let err2 = conv2d_forward(&x, &w2, None, ConvSpec::new(1, 1, 3)).unwrap_err();
        assert!(err2.to_string().contains("groups=3"), "got: {err2}");
    }

    /// Gradients validated against finite differences of the forward pass.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let spec = ConvSpec::new(2, 1, 2);
        let x = rand_tensor(&mut rng, &[2, 4, 6, 5]);
        let w = rand_tensor(&mut rng, &[6, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[6]);
        // downstream weights make the scalar loss sensitive to every output
        let y0 = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
        let proj = rand_tensor(&mut rng, y0.shape());
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let y = conv2d_forward(x, w, Some(b), spec).unwrap();
            y.data()
                .iter()
                .zip(proj.data())
                .map(|(a, p)| a * p)
                .sum::<f64>()
        };
        let gy = proj.clone();
        let dx = conv2d_backward_input(&gy, &w, x.shape(), spec).unwrap();
        let dw = conv2d_backward_weight(&gy, &x, w.shape(), spec).unwrap();
        let db = conv2d_backward_bias(&gy).unwrap();

        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for i in (0..x.numel()).step_by(13) {
            let g = fd(&|eps| {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                loss(&xp, &w, &b)
            });
            assert!((g - dx.data()[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in 0..w.numel() {
            let g = fd(&|eps| {
                let mut wp = w.clone();
                wp.data_mut()[i] += eps;
                loss(&x, &wp, &b)
            });
            assert!((g - dw.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
        for i in 0..b.numel() {
            let g = fd(&|eps| {
                let mut bp = b.clone();
                bp.data_mut()[i] += eps;
                loss(&x, &w, &bp)
            });
            assert!((g - db.data()[i]).abs() < 1e-7, "db[{i}]");
        }
    }
}
