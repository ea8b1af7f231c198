//! Forward kernels on plain tensors. The graph records these and adds the
//! matching backward rules; they are also used directly wherever a value is
//! needed without a gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{split_axis, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

pub fn elu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log N(x; mean, sigma^2)`.
pub fn gaussian_logpdf<S: Scalar>(x: S, mean: S, sigma: S) -> S {
    let d = (x - mean) / sigma;
    S::lit(-0.5) * d * d - sigma.ln() - S::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Log-sum-exp of a strided slice. Terms are added in sorted order so the
/// result does not depend on the order of the slice.
pub(crate) fn lse_slice<S: Scalar>(x: &[S], stride: usize, n: usize, buf: &mut Vec<S>) -> S {
    buf.clear();
    buf.extend((0..n).map(|j| x[j * stride]));
    buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let Some(&m) = buf.last() else {
        return S::neg_infinity();
    };
    if m == S::neg_infinity() {
        return m;
    }
    let mut s = S::zero();
    for &v in buf.iter() {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// Sum in ascending order, independent of the input order.
fn sorted_sum<S: Scalar>(buf: &mut [S]) -> S {
    buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    buf.iter().copied().sum()
}

/// Log-sum-exp along `axis`, keeping the axis with length 1.
pub fn logsumexp<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    check_axis("logsumexp", t.shape(), axis)?;
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    let x = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut buf = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            out.push(lse_slice(&x[o * n * inner + i..], inner, n, &mut buf));
        }
    }
    Tensor::new(shape, out)
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    check_axis("softmax", t.shape(), axis)?;
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![S::zero(); x.len()];
    let mut buf = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = S::neg_infinity();
            for j in 0..n {
                m = m.max(x[base + j * inner]);
            }
            buf.clear();
            for j in 0..n {
                let e = (x[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                buf.push(e);
            }
            let s = sorted_sum(&mut buf);
            for j in 0..n {
                out[base + j * inner] /= s;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

pub fn log_softmax<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    check_axis("log_softmax", t.shape(), axis)?;
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![S::zero(); x.len()];
    let mut buf = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let l = lse_slice(&x[base..], inner, n, &mut buf);
            for j in 0..n {
                out[base + j * inner] = x[base + j * inner] - l;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Standardizes every slice formed by the axes from `axis` onwards. No affine
/// parameters.
pub fn layer_norm<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    check_axis("layer_norm", t.shape(), axis)?;
    let n: usize = t.shape()[axis..].iter().product();
    let mut out = t.data().to_vec();
    if n == 0 {
        return Tensor::new(t.shape().to_vec(), out);
    }
    let eps = S::lit(LAYER_NORM_EPS);
    let nf = S::from_usize(n).unwrap();
    for chunk in out.chunks_exact_mut(n) {
        let mean = chunk.iter().copied().sum::<S>() / nf;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
        let inv = S::one() / (var + eps).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Sum along `axis`, keeping the axis with length 1.
pub fn sum_axis<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    check_axis("sum_axis", t.shape(), axis)?;
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    let x = t.data();
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Sub-tensor `[start, start+len)` along `axis`.
pub fn narrow<S: Scalar>(t: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
    check_axis("narrow", t.shape(), axis)?;
    let (outer, n, inner) = split_axis(t.shape(), axis);
    if start + len > n {
        return Err(Error::shape(
            "narrow",
            format!("{start}..{} exceeds axis {axis} of {:?}", start + len, t.shape()),
        ));
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    Tensor::new(shape, out)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let (_, n, inner) = split_axis(p.shape(), axis);
            out.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    Tensor::new(shape, out)
}

/// `[m,k] x [k,n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let mut out = vec![S::zero(); m * n];
            S::gemm(m, k, n, S::one(), a.data(), (k, 1), b.data(), (n, 1), S::zero(), &mut out, (n, 1));
            Tensor::new(vec![m, n], out)
        }
        _ => Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        )),
    }
}
