//! Pure forward tensor ops. The autodiff tape wraps these and adds the
//! backward rules; the inference path calls them directly.
//!
//! Accumulation order is fixed and documented per op so results are
//! bit-reproducible regardless of thread count: parallelism only ever
//! splits independent output elements, never a single reduction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) fn binary_elementwise(kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            "elementwise",
            format!("{:?} and {:?} not broadcastable", a.shape(), b.shape()),
        )
    })?;
    let f = |x: f64, y: f64| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };
    let out = if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(out_shape, data)?
    } else {
        let ab = a.broadcast_to(&out_shape)?;
        let bb = b.broadcast_to(&out_shape)?;
        let data = ab
            .data()
            .iter()
            .zip(bb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(out_shape, data)?
    };
    out.check_finite("elementwise")?;
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(BinKind::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(BinKind::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(BinKind::Mul, a, b)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_elementwise(BinKind::Div, a, b)
}

/// a[m,k] · b[k,n]. Inner k loop runs in index order into a single
/// accumulator, matching the naive triple-loop definition bit-exactly.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape("matmul", "inputs must be rank 2".to_string()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {k} vs {k2}"),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * bd[l * n + j];
            }
            *r = acc;
        }
    });
    let t = Tensor::new(vec![m, n], out)?;
    t.check_finite("matmul")?;
    Ok(t)
}

/// Output spatial extent of a convolution, or an error when the stride
/// does not divide the padded extent evenly.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("geometry not divisible: (in={input}, k={kernel}, s={stride}, p={pad})"),
        ));
    }
    Ok(span / stride + 1)
}

/// Materialize x padded spatially by `pad` with constant `pad_value`.
pub(crate) fn pad2d(x: &Tensor, pad: usize, pad_value: f64) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (n, c, h, w) = dims4(x);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::full(&[n, c, hp, wp], pad_value);
    let od = out.data_mut();
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let src = ((ni * c + ci) * h + hi) * w;
                let dst = ((ni * c + ci) * hp + hi + pad) * wp + pad;
                od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    out
}

pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// 2-D convolution, NCHW x FCHW -> NFHW. Constant padding (`pad_value`
/// is 0 for ordinary float convs, -1 for sign-domain convs). For each
/// output element the reduction runs c, then kh, then kw, sequentially.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, pad_value: f64) -> Result<Tensor> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(Error::shape("conv2d", "inputs must be rank 4".to_string()));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive".to_string()));
    }
    let (n, c, h, wd) = dims4(x);
    let (f, cw, kh, kw) = dims4(w);
    if c != cw {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c} != kernel channels {cw}"),
        ));
    }
    let ho = conv_out_extent(h, kh, stride, pad)?;
    let wo = conv_out_extent(wd, kw, stride, pad)?;

    let xp = pad2d(x, pad, pad_value);
    let (_, _, hp, wp) = dims4(&xp);
    let xd = xp.data();
    let wdta = w.data();

    let mut out = vec![0.0; n * f * ho * wo];
    // One (image, filter) plane per task; element order inside is fixed.
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, od)| {
        let ni = plane / f;
        let fi = plane % f;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    let wbase = ((fi * c + ci) * kh) * kw;
                    let xbase = (ni * c + ci) * hp;
                    for i in 0..kh {
                        let xrow = (xbase + oy * stride + i) * wp + ox * stride;
                        let wrow = wbase + i * kw;
                        for j in 0..kw {
                            acc += xd[xrow + j] * wdta[wrow + j];
                        }
                    }
                }
                od[oy * wo + ox] = acc;
            }
        }
    });
    let t = Tensor::new(vec![n, f, ho, wo], out)?;
    t.check_finite("conv2d")?;
    Ok(t)
}

/// Gradient of conv2d w.r.t. the (unpadded) input.
pub(crate) fn conv2d_input_grad(
    dz: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (f, _, kh, kw) = dims4(w);
    let (_, _, ho, wo) = dims4(dz);
    let dzd = dz.data();
    let wdta = w.data();
    let mut out = vec![0.0; n * c * h * wd];
    out.par_chunks_mut(h * wd).enumerate().for_each(|(plane, od)| {
        let ni = plane / c;
        let ci = plane % c;
        for hy in 0..h {
            for hx in 0..wd {
                // padded coordinate of this input element
                let py = hy + pad;
                let px = hx + pad;
                let mut acc = 0.0;
                for fi in 0..f {
                    let dzbase = (ni * f + fi) * ho;
                    let wbase = ((fi * c + ci) * kh) * kw;
                    for i in 0..kh {
                        if py < i || (py - i) % stride != 0 {
                            continue;
                        }
                        let oy = (py - i) / stride;
                        if oy >= ho {
                            continue;
                        }
                        for j in 0..kw {
                            if px < j || (px - j) % stride != 0 {
                                continue;
                            }
                            let ox = (px - j) / stride;
                            if ox >= wo {
                                continue;
                            }
                            acc += dzd[(dzbase + oy) * wo + ox] * wdta[wbase + i * kw + j];
                        }
                    }
                }
                od[hy * wd + hx] = acc;
            }
        }
    });
    Tensor::new(x_shape.to_vec(), out).expect("conv2d_input_grad shape")
}

/// Gradient of conv2d w.r.t. the kernel. Padding contributes nothing:
/// the pad value is a constant.
pub(crate) fn conv2d_weight_grad(
    dz: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    pad_value: f64,
) -> Tensor {
    let (f, c, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (n, _, _, _) = dims4(x);
    let (_, _, ho, wo) = dims4(dz);
    let xp = pad2d(x, pad, pad_value);
    let (_, _, hp, wp) = dims4(&xp);
    let xd = xp.data();
    let dzd = dz.data();
    let mut out = vec![0.0; f * c * kh * kw];
    out.par_chunks_mut(kh * kw).enumerate().for_each(|(plane, od)| {
        let fi = plane / c;
        let ci = plane % c;
        for i in 0..kh {
            for j in 0..kw {
                let mut acc = 0.0;
                for ni in 0..n {
                    let dzbase = (ni * f + fi) * ho;
                    let xbase = (ni * c + ci) * hp;
                    for oy in 0..ho {
                        let xrow = (xbase + oy * stride + i) * wp + j;
                        let dzrow = (dzbase + oy) * wo;
                        for ox in 0..wo {
                            acc += dzd[dzrow + ox] * xd[xrow + ox * stride];
                        }
                    }
                }
                od[i * kw + j] = acc;
            }
        }
    });
    Tensor::new(w_shape.to_vec(), out).expect("conv2d_weight_grad shape")
}

/// Max pooling with square kernel. Returns the output and the flat argmax
/// index (into the input) per output element, for the backward scatter.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(x);
    let ho = conv_out_extent(h, k, stride, 0)?;
    let wo = conv_out_extent(w, k, stride, 0)?;
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = x.at4(ni, ci, oy * stride + i, ox * stride + j);
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((ni * c + ci) * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

/// [N,C,H,W] -> [N,C] spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x);
    let hw = (h * w) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c];
    for (plane, o) in out.iter_mut().enumerate() {
        let base = plane * h * w;
        let mut acc = 0.0;
        for v in &xd[base..base + h * w] {
            acc += v;
        }
        *o = acc / hw;
    }
    Tensor::new(vec![n, c], out)
}

/// Per-channel mean and population variance over (N, H, W).
pub fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = dims4(x);
    let m = (n * h * w) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for v in &xd[base..base + h * w] {
                acc += v;
            }
        }
        mean[ci] = acc / m;
        let mut acc2 = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for v in &xd[base..base + h * w] {
                let d = v - mean[ci];
                acc2 += d * d;
            }
        }
        var[ci] = acc2 / m;
    }
    Ok((mean, var))
}

/// Normalize with the given per-channel statistics and affine parameters.
pub fn batchnorm_apply(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x);
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("parameter length != channels ({c})"),
        ));
    }
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let g = gamma[ci];
        let b = beta[ci];
        let mu = mean[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for k in base..base + h * w {
                out[k] = g * (xd[k] - mu) * inv_std + b;
            }
        }
    }
    let t = Tensor::new(x.shape().to_vec(), out)?;
    t.check_finite("batchnorm2d")?;
    Ok(t)
}

/// Row softmax over the last axis of a rank-2 tensor, max-subtracted.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    rows_map(x, "softmax", |row, out| {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    })
}

/// Row log-softmax over the last axis of a rank-2 tensor.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    rows_map(x, "log_softmax", |row, out| {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    })
}

fn rows_map(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(&[f64], &mut [f64]),
) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::shape(op, "expected rank 2".to_string()));
    }
    let cols = x.shape()[1];
    if cols == 0 {
        return Err(Error::shape(op, "empty axis".to_string()));
    }
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
        f(row, orow);
    }
    let t = Tensor::new(x.shape().to_vec(), out)?;
    t.check_finite(op)?;
    Ok(t)
}

/// Mean cross-entropy of logits [N,K] against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(Error::shape("cross_entropy", "expected rank 2".to_string()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch {}", labels.len(), n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range {k}")));
    }
    let ls = log_softmax(logits)?;
    let mut acc = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        acc -= ls.data()[i * k + l];
    }
    Ok(acc / n as f64)
}

pub fn sum(x: &Tensor) -> f64 {
    let mut acc = 0.0;
    for v in x.data() {
        acc += v;
    }
    acc
}

pub fn mean(x: &Tensor) -> f64 {
    sum(x) / x.numel() as f64
}

/// Population variance (divide by n).
pub fn variance(x: &Tensor) -> f64 {
    let mu = mean(x);
    let mut acc = 0.0;
    for v in x.data() {
        let d = v - mu;
        acc += d * d;
    }
    acc / x.numel() as f64
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn hardtanh(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn add_and_annihilator() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);

        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let z = Tensor::scalar(0.0);
        assert_eq!(mul(&x, &z).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(sub(&x, &x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn add_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn matmul_identity_and_small() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap().data(), x.data());

        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly() {
        let mut rng = seeded_rng(3);
        let a = Tensor::randn(&[5, 7], &mut rng);
        let b = Tensor::randn(&[7, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        // independent naive triple loop, same reduction order
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for l in 0..7 {
                    acc += a.data()[i * 7 + l] * b.data()[l * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j], acc);
            }
        }
    }

    #[test]
    fn conv2d_scalar_kernel_doubles() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let z = conv2d(&x, &w, 1, 0, 0.0).unwrap();
        assert_eq!(z.shape(), &[1, 1, 3, 3]);
        for (a, b) in z.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut rng = seeded_rng(7);
        let x = Tensor::randn(&[1, 1, 5, 5], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let z = conv2d(&x, &w, 1, 1, 0.0).unwrap();
        assert_eq!(z.shape(), x.shape());
        for (a, b) in z.data().iter().zip(x.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        // (5 - 2) % 2 != 0
        assert!(conv2d(&x, &w, 2, 0, 0.0).is_err());
    }

    #[test]
    fn softmax_errors_and_sums() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let s = softmax(&x).unwrap();
        for row in s.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_perfect_logits_approach_zero() {
        // strongly peaked logits on the true class
        let x = Tensor::new(vec![1, 3], vec![30.0, 0.0, 0.0]).unwrap();
        let ce = cross_entropy(&x, &[0]).unwrap();
        assert!(ce < 1e-9, "ce={ce}");
    }

    #[test]
    fn variance_population_convention() {
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(variance(&x), 1.25);
    }

    #[test]
    fn mean_of_constant() {
        let x = Tensor::full(&[5], 2.5);
        assert_eq!(mean(&x), 2.5);
    }
}
