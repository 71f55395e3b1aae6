//! Layer kernels: forward and backward for the fixed layer set.
//!
//! All activation buffers are dense at the *active* channel count of the
//! current configuration; weight buffers are allocated at maximum width and
//! addressed through leading-channel slices (`ci_max`/`io_max` strides).
//! Convolution and fully-connected layers lower to GEMM; depthwise stays as
//! direct loops. Reductions that feed statistics or losses accumulate in f64.

use super::elem::Elem;
use super::tensor::Tensor;

/// im2col for "same" padding, odd kernel. `cols` is [ci*k*k, ho*wo] row-major.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    x: &[E],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [E],
) {
    let pad = (k - 1) / 2;
    debug_assert_eq!(cols.len(), ci * k * k * ho * wo);
    let mut row = 0usize;
    for c in 0..ci {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let out_row = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let dst = &mut out_row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        dst.iter_mut().for_each(|v| *v = E::ZERO);
                        continue;
                    }
                    let xrow = &xc[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            E::ZERO
                        } else {
                            xrow[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Elem>(
    dcols: &[E],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dx: &mut [E],
) {
    let pad = (k - 1) / 2;
    let mut row = 0usize;
    for c in 0..ci {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let src_row = &dcols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = ih as usize * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dxc[base + iw as usize] += src_row[oh * wo + ow];
                    }
                }
                row += 1;
            }
        }
    }
}

pub struct ConvDims {
    pub ci: usize,
    pub co: usize,
    /// Input-channel capacity of the weight allocation (row stride factor).
    pub ci_max: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

/// x: [n, ci, h, w], weight: [co_max, ci_max, k, k], bias: [co_max],
/// out: [n, co, ho, wo].
pub fn conv_forward<E: Elem>(x: &Tensor<E>, weight: &[E], bias: &[E], d: &ConvDims, out: &mut Tensor<E>) {
    let n = x.shape()[0];
    let kk = d.k * d.k;
    let kdim = d.ci * kk;
    let hw_out = d.ho * d.wo;
    let in_stride = d.ci * d.h * d.w;
    let out_stride = d.co * hw_out;
    let mut cols = vec![E::ZERO; kdim * hw_out];
    let (xs, os) = (x.data(), out.data_mut());
    for i in 0..n {
        im2col(
            &xs[i * in_stride..(i + 1) * in_stride],
            d.ci,
            d.h,
            d.w,
            d.k,
            d.stride,
            d.ho,
            d.wo,
            &mut cols,
        );
        let oblk = &mut os[i * out_stride..(i + 1) * out_stride];
        unsafe {
            E::gemm(
                d.co,
                kdim,
                hw_out,
                E::ONE,
                weight.as_ptr(),
                (d.ci_max * kk) as isize,
                1,
                cols.as_ptr(),
                hw_out as isize,
                1,
                E::ZERO,
                oblk.as_mut_ptr(),
                hw_out as isize,
                1,
            );
        }
        for c in 0..d.co {
            let b = bias[c];
            oblk[c * hw_out..(c + 1) * hw_out]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

/// Gradients for a conv layer; `dweight`/`dbias` accumulate into the leading
/// slice of max-width buffers, `dx` is dense at active channels.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<E: Elem>(
    x: &Tensor<E>,
    weight: &[E],
    dout: &Tensor<E>,
    d: &ConvDims,
    dx: &mut Tensor<E>,
    dweight: &mut [E],
    dbias: &mut [E],
) {
    let n = x.shape()[0];
    let kk = d.k * d.k;
    let kdim = d.ci * kk;
    let hw_out = d.ho * d.wo;
    let in_stride = d.ci * d.h * d.w;
    let out_stride = d.co * hw_out;
    let mut cols = vec![E::ZERO; kdim * hw_out];
    let mut dcols = vec![E::ZERO; kdim * hw_out];
    let (xs, dos, dxs) = (x.data(), dout.data(), dx.data_mut());
    let w_row = (d.ci_max * kk) as isize;
    for i in 0..n {
        let doblk = &dos[i * out_stride..(i + 1) * out_stride];
        // dcols = W^T (kdim x co) * dout (co x hw)
        unsafe {
            E::gemm(
                kdim,
                d.co,
                hw_out,
                E::ONE,
                weight.as_ptr(),
                1,
                w_row,
                doblk.as_ptr(),
                hw_out as isize,
                1,
                E::ZERO,
                dcols.as_mut_ptr(),
                hw_out as isize,
                1,
            );
        }
        col2im_add(
            &dcols,
            d.ci,
            d.h,
            d.w,
            d.k,
            d.stride,
            d.ho,
            d.wo,
            &mut dxs[i * in_stride..(i + 1) * in_stride],
        );
        // dW += dout (co x hw) * cols^T (hw x kdim)
        im2col(
            &xs[i * in_stride..(i + 1) * in_stride],
            d.ci,
            d.h,
            d.w,
            d.k,
            d.stride,
            d.ho,
            d.wo,
            &mut cols,
        );
        unsafe {
            E::gemm(
                d.co,
                hw_out,
                kdim,
                E::ONE,
                doblk.as_ptr(),
                hw_out as isize,
                1,
                cols.as_ptr(),
                1,
                hw_out as isize,
                E::ONE,
                dweight.as_mut_ptr(),
                w_row,
                1,
            );
        }
        for c in 0..d.co {
            let mut s = E::ZERO;
            for &g in &doblk[c * hw_out..(c + 1) * hw_out] {
                s += g;
            }
            dbias[c] += s;
        }
    }
}

pub struct DwDims {
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

/// weight: [c_max, k, k], bias: [c_max].
pub fn dwconv_forward<E: Elem>(x: &Tensor<E>, weight: &[E], bias: &[E], d: &DwDims, out: &mut Tensor<E>) {
    let n = x.shape()[0];
    let pad = (d.k - 1) / 2;
    let kk = d.k * d.k;
    let (xs, os) = (x.data(), out.data_mut());
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.c * d.ho * d.wo;
    for i in 0..n {
        for c in 0..d.c {
            let xc = &xs[i * in_stride + c * d.h * d.w..];
            let wc = &weight[c * kk..(c + 1) * kk];
            let ob = &mut os[i * out_stride + c * d.ho * d.wo..i * out_stride + (c + 1) * d.ho * d.wo];
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let mut acc = bias[c];
                    for kh in 0..d.k {
                        let ih = (oh * d.stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kw in 0..d.k {
                            let iw = (ow * d.stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            acc += wc[kh * d.k + kw] * xc[ih as usize * d.w + iw as usize];
                        }
                    }
                    ob[oh * d.wo + ow] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dwconv_backward<E: Elem>(
    x: &Tensor<E>,
    weight: &[E],
    dout: &Tensor<E>,
    d: &DwDims,
    dx: &mut Tensor<E>,
    dweight: &mut [E],
    dbias: &mut [E],
) {
    let n = x.shape()[0];
    let pad = (d.k - 1) / 2;
    let kk = d.k * d.k;
    let (xs, dos, dxs) = (x.data(), dout.data(), dx.data_mut());
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.c * d.ho * d.wo;
    for i in 0..n {
        for c in 0..d.c {
            let xc = &xs[i * in_stride + c * d.h * d.w..];
            let dxc = &mut dxs[i * in_stride + c * d.h * d.w..i * in_stride + (c + 1) * d.h * d.w];
            let wc = &weight[c * kk..(c + 1) * kk];
            let dwc = &mut dweight[c * kk..(c + 1) * kk];
            let dob = &dos[i * out_stride + c * d.ho * d.wo..];
            let mut bsum = E::ZERO;
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let g = dob[oh * d.wo + ow];
                    bsum += g;
                    for kh in 0..d.k {
                        let ih = (oh * d.stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kw in 0..d.k {
                            let iw = (ow * d.stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let xi = ih as usize * d.w + iw as usize;
                            dwc[kh * d.k + kw] += g * xc[xi];
                            dxc[xi] += g * wc[kh * d.k + kw];
                        }
                    }
                }
            }
            dbias[c] += bsum;
        }
    }
}

pub struct FcDims {
    pub i: usize,
    pub o: usize,
    /// Input-feature capacity of the weight allocation.
    pub i_max: usize,
}

/// x: [n, i], weight: [o_max, i_max], bias: [o_max], out: [n, o].
pub fn fc_forward<E: Elem>(x: &Tensor<E>, weight: &[E], bias: &[E], d: &FcDims, out: &mut Tensor<E>) {
    let n = x.shape()[0];
    unsafe {
        E::gemm(
            n,
            d.i,
            d.o,
            E::ONE,
            x.data().as_ptr(),
            d.i as isize,
            1,
            weight.as_ptr(),
            1,
            d.i_max as isize,
            E::ZERO,
            out.data_mut().as_mut_ptr(),
            d.o as isize,
            1,
        );
    }
    let os = out.data_mut();
    for r in 0..n {
        for c in 0..d.o {
            os[r * d.o + c] += bias[c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fc_backward<E: Elem>(
    x: &Tensor<E>,
    weight: &[E],
    dout: &Tensor<E>,
    d: &FcDims,
    dx: &mut Tensor<E>,
    dweight: &mut [E],
    dbias: &mut [E],
) {
    let n = x.shape()[0];
    unsafe {
        // dx = dout (n x o) * W (o x i)
        E::gemm(
            n,
            d.o,
            d.i,
            E::ONE,
            dout.data().as_ptr(),
            d.o as isize,
            1,
            weight.as_ptr(),
            d.i_max as isize,
            1,
            E::ZERO,
            dx.data_mut().as_mut_ptr(),
            d.i as isize,
            1,
        );
        // dW += dout^T (o x n) * x (n x i)
        E::gemm(
            d.o,
            n,
            d.i,
            E::ONE,
            dout.data().as_ptr(),
            1,
            d.o as isize,
            x.data().as_ptr(),
            d.i as isize,
            1,
            E::ONE,
            dweight.as_mut_ptr(),
            d.i_max as isize,
            1,
        );
    }
    let dos = dout.data();
    for r in 0..n {
        for c in 0..d.o {
            dbias[c] += dos[r * d.o + c];
        }
    }
}

pub fn relu_forward<E: Elem>(x: &Tensor<E>, out: &mut Tensor<E>) {
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = v.maximum(E::ZERO);
    }
}

pub fn relu_backward<E: Elem>(x: &Tensor<E>, dout: &Tensor<E>, dx: &mut Tensor<E>) {
    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dout.data()).zip(x.data()) {
        *d += if v > E::ZERO { g } else { E::ZERO };
    }
}

/// x: [n, c, h, w] -> out: [n, c, 1, 1].
pub fn gap_forward<E: Elem>(x: &Tensor<E>, c: usize, hw: usize, out: &mut Tensor<E>) {
    let n = x.shape()[0];
    let inv = E::from_f64(1.0 / hw as f64);
    let (xs, os) = (x.data(), out.data_mut());
    for i in 0..n {
        for ch in 0..c {
            let blk = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let mut s = E::ZERO;
            for &v in blk {
                s += v;
            }
            os[i * c + ch] = s * inv;
        }
    }
}

pub fn gap_backward<E: Elem>(dout: &Tensor<E>, c: usize, hw: usize, dx: &mut Tensor<E>) {
    let n = dout.shape()[0];
    let inv = E::from_f64(1.0 / hw as f64);
    let (dos, dxs) = (dout.data(), dx.data_mut());
    for i in 0..n {
        for ch in 0..c {
            let g = dos[i * c + ch] * inv;
            dxs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v += g);
        }
    }
}

pub fn add_forward<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, out: &mut Tensor<E>) {
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x + y;
    }
}

/// Per-channel batch statistics cache kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics of `x` ([n, c, hw]) per channel, f64 accumulation.
/// Returns (mean, biased variance, element count per channel).
pub fn batch_moments<E: Elem>(x: &Tensor<E>, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let n = x.shape()[0];
    let m = n * hw;
    let xs = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let blk = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let mut s = 0.0f64;
            for &v in blk {
                s += v.to_f64();
            }
            mean[ch] += s;
        }
    }
    for mch in mean.iter_mut() {
        *mch /= m as f64;
    }
    for i in 0..n {
        for ch in 0..c {
            let blk = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let mu = mean[ch];
            let mut s = 0.0f64;
            for &v in blk {
                let d = v.to_f64() - mu;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for vch in var.iter_mut() {
        *vch /= m as f64;
    }
    (mean, var, m)
}

/// Normalize with the given per-channel statistics and affine parameters.
#[allow(clippy::too_many_arguments)]
pub fn bn_apply<E: Elem>(
    x: &Tensor<E>,
    c: usize,
    hw: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[E],
    beta: &[E],
    out: &mut Tensor<E>,
) {
    let n = x.shape()[0];
    let (xs, os) = (x.data(), out.data_mut());
    for i in 0..n {
        for ch in 0..c {
            let scale = E::from_f64(gamma[ch].to_f64() * inv_std[ch]);
            let shift = E::from_f64(beta[ch].to_f64() - gamma[ch].to_f64() * inv_std[ch] * mean[ch]);
            let src = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let dst = &mut os[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * scale + shift;
            }
        }
    }
}

/// Train-mode backward through batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward<E: Elem>(
    x: &Tensor<E>,
    c: usize,
    hw: usize,
    cache: &BnCache,
    gamma: &[E],
    dout: &Tensor<E>,
    dx: &mut Tensor<E>,
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let n = x.shape()[0];
    let m = (n * hw) as f64;
    let (xs, dos, dxs) = (x.data(), dout.data(), dx.data_mut());
    for ch in 0..c {
        let mu = cache.mean[ch];
        let istd = cache.inv_std[ch];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let dy = dos[base + j].to_f64();
                let xhat = (xs[base + j].to_f64() - mu) * istd;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[ch] += E::from_f64(sum_dy_xhat);
        dbeta[ch] += E::from_f64(sum_dy);
        let g = gamma[ch].to_f64();
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let dy = dos[base + j].to_f64();
                let xhat = (xs[base + j].to_f64() - mu) * istd;
                dxs[base + j] += E::from_f64(g * istd * (dy - mean_dy - xhat * mean_dy_xhat));
            }
        }
    }
}

/// Row-stable softmax probabilities; logits: [n, c].
pub fn softmax_probs<E: Elem>(logits: &Tensor<E>, c: usize) -> Tensor<E> {
    let n = logits.shape()[0];
    let ls = logits.data();
    let mut out = Tensor::zeros(&[n, c]);
    let os = out.data_mut();
    for i in 0..n {
        let row = &ls[i * c..(i + 1) * c];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v.to_f64());
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.to_f64() - mx).exp();
        }
        let orow = &mut os[i * c..(i + 1) * c];
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = E::from_f64(((v.to_f64() - mx).exp()) / denom);
        }
    }
    out
}

pub enum Targets<'a, E: Elem> {
    /// Ground-truth class indices.
    Hard(&'a [usize]),
    /// Teacher distribution, [n, c]; rows sum to 1.
    Soft(&'a Tensor<E>),
}

/// Mean cross-entropy and its gradient w.r.t. logits.
pub fn softmax_xent<E: Elem>(
    logits: &Tensor<E>,
    c: usize,
    targets: &Targets<'_, E>,
) -> (f64, Tensor<E>) {
    let n = logits.shape()[0];
    let ls = logits.data();
    let mut dlogits = Tensor::zeros(&[n, c]);
    let ds = dlogits.data_mut();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &ls[i * c..(i + 1) * c];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v.to_f64());
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.to_f64() - mx).exp();
        }
        let log_denom = denom.ln();
        let drow = &mut ds[i * c..(i + 1) * c];
        match targets {
            Targets::Hard(labels) => {
                let y = labels[i];
                debug_assert!(y < c);
                loss -= (ls[i * c + y].to_f64() - mx) - log_denom;
                for (j, (d, &v)) in drow.iter_mut().zip(row).enumerate() {
                    let p = ((v.to_f64() - mx).exp()) / denom;
                    let t = if j == y { 1.0 } else { 0.0 };
                    *d = E::from_f64((p - t) * inv_n);
                }
            }
            Targets::Soft(q) => {
                let qrow = &q.data()[i * c..(i + 1) * c];
                for (j, (d, &v)) in drow.iter_mut().zip(row).enumerate() {
                    let logp = (v.to_f64() - mx) - log_denom;
                    let p = logp.exp();
                    let qv = qrow[j].to_f64();
                    loss -= qv * logp;
                    *d = E::from_f64((p - qv) * inv_n);
                }
            }
        }
    }
    (loss * inv_n, dlogits)
}

/// Top-1 accuracy; ties resolve to the lowest class index.
pub fn top1_accuracy<E: Elem>(logits: &Tensor<E>, c: usize, labels: &[usize]) -> f64 {
    let n = logits.shape()[0];
    let ls = logits.data();
    let mut correct = 0usize;
    for i in 0..n {
        let row = &ls[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
