//! Dense f32 kernels.
//!
//! Each operation comes in two flavours: a slice kernel used on the hot
//! paths of the models, and a [`Tensor`]-level wrapper that validates
//! shapes and dtypes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

pub const DEFAULT_NORM_EPS: f32 = 1e-5;
pub const DEFAULT_ROPE_THETA: f32 = 10_000.0;

/// `[m×k] · [k×n]` on row-major slices.
pub fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `y = W·x` for `W` stored `[rows×cols]`.
pub fn matvec_f32(w: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    w.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let out = matmul_f32(&a.expect_f32("matmul")?, &b.expect_f32("matmul")?, m, k, n);
    Tensor::from_f32(vec![m, n], &out)
}

/// Numerically stable softmax in place. `x` must be non-empty.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Layer normalization with population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::shape("layer_norm", &[x.len()], &[gamma.len(), beta.len()]));
    }
    if x.is_empty() {
        return Err(Error::Argument("layer_norm of an empty vector".into()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Argument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out);
    Ok(out)
}

pub(crate) fn layer_norm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / libm::sqrtf(var + eps);
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * inv + beta[i];
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))) as f32
}

/// Rotates adjacent pairs `(x[2i], x[2i+1])` of every head by
/// `position · theta_base^(-2i/head_dim)`.
pub(crate) fn rope_in_place(x: &mut [f32], head_dim: usize, position: usize, theta_base: f32) {
    debug_assert!(head_dim.is_multiple_of(2) && x.len().is_multiple_of(head_dim));
    let half = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..half {
            let freq = libm::pow(theta_base as f64, -(2.0 * i as f64) / head_dim as f64);
            let angle = position as f64 * freq;
            let (sin, cos) = (libm::sin(angle) as f32, libm::cos(angle) as f32);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// RoPE over a `[n_heads × head_dim]` tensor.
pub fn rope_apply(x: &Tensor, position: usize, theta_base: f32) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Argument(format!(
            "rope_apply expects [n_heads, head_dim], got {shape:?}"
        )));
    }
    let head_dim = shape[1];
    if !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("rope needs an even head_dim, got {head_dim}")));
    }
    let mut data = x.expect_f32("rope_apply")?;
    rope_in_place(&mut data, head_dim, position, theta_base);
    Tensor::from_f32(shape.to_vec(), &data)
}

/// Single-head scaled dot-product attention on row-major slices.
///
/// `q` is `[lq×d]`, `k` is `[lk×d]`, `v` is `[lk×dv]`. With `causal`, query
/// `i` sits at absolute position `lk - lq + i` and sees keys up to it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_head(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    lq: usize,
    lk: usize,
    d: usize,
    dv: usize,
    causal: bool,
) -> Vec<f32> {
    let scale = 1.0 / libm::sqrtf(d as f32);
    let offset = lk - lq.min(lk);
    let mut out = vec![0.0f32; lq * dv];
    let mut scores = vec![0.0f32; lk];
    for i in 0..lq {
        let visible = if causal { (offset + i + 1).min(lk) } else { lk };
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..visible {
            scores[j] = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        softmax_in_place(&mut scores[..visible]);
        let oi = &mut out[i * dv..(i + 1) * dv];
        for j in 0..visible {
            let w = scores[j];
            for (o, vv) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += w * vv;
            }
        }
    }
    out
}

/// Multi-head attention over `[n_heads × len × head_dim]` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(Error::Argument(format!(
            "attention expects rank-3 [heads, len, dim] tensors, got {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    if sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::shape("attention q/k", sq, sk));
    }
    if sk[0] != sv[0] || sk[1] != sv[1] {
        return Err(Error::shape("attention k/v", sk, sv));
    }
    let (heads, lq, d) = (sq[0], sq[1], sq[2]);
    let (lk, dv) = (sk[1], sv[2]);
    if causal && lq > lk {
        return Err(Error::shape("causal attention needs lq <= lk", sq, sk));
    }
    let (qd, kd, vd) = (
        q.expect_f32("attention")?,
        k.expect_f32("attention")?,
        v.expect_f32("attention")?,
    );
    let mut out = Vec::with_capacity(heads * lq * dv);
    for h in 0..heads {
        out.extend(attention_head(
            &qd[h * lq * d..(h + 1) * lq * d],
            &kd[h * lk * d..(h + 1) * lk * d],
            &vd[h * lk * dv..(h + 1) * lk * dv],
            lq,
            lk,
            d,
            dv,
            causal,
        ));
    }
    Tensor::from_f32(vec![heads, lq, dv], &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_f32(shape.to_vec(), v).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let col = t(&[2, 1], &[5.0, 6.0]);
        let c = matmul(&a, &col).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.to_f32_vec().unwrap(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let err = matmul(&a, &a).unwrap_err();
        assert_eq!(err, Error::shape("matmul", &[2, 3], &[2, 3]));
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[3.0; 4]).unwrap();
        assert!(close(&u, &[0.25; 4], 1e-7));
        // e^0 / (e^0 + 3) = 0.25
        let p = softmax(&[0.0, libm::logf(3.0)]).unwrap();
        assert!(close(&p, &[0.25, 0.75], 1e-6));
        let x = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f32> = x.iter().map(|v| v + 7.5).collect();
        assert!(close(&softmax(&x).unwrap(), &softmax(&shifted).unwrap(), 1e-6));
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&[4.0; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-6));
        let y = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!(close(&y, &[-1.0, 1.0], 1e-5));
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        // Φ(1) = 0.841344746...
        assert!((gelu(1.0) - 0.841_345).abs() < 1e-4);
        assert!((gelu(-1.0) + 0.158_655).abs() < 1e-4);
    }

    #[test]
    fn rope_cases() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 2.0]);
        assert_eq!(rope_apply(&x, 0, 10_000.0).unwrap(), x);

        let x = t(&[1, 2], &[0.6, -1.3]);
        let y = rope_apply(&x, 1, 123.0).unwrap().to_f32_vec().unwrap();
        let (s, c) = (1.0f64.sin() as f32, 1.0f64.cos() as f32);
        assert!(close(&y, &[0.6 * c + 1.3 * s, 0.6 * s - 1.3 * c], 1e-6));

        let odd = Tensor::zeros(vec![1, 3]).unwrap();
        assert!(matches!(rope_apply(&odd, 1, 10_000.0), Err(Error::Config(_))));
    }

    #[test]
    fn attention_single_position_returns_value() {
        let q = t(&[1, 1, 2], &[0.3, -0.7]);
        let k = t(&[1, 1, 2], &[1.0, 2.0]);
        let v = t(&[1, 1, 3], &[4.0, 5.0, 6.0]);
        let o = attention(&q, &k, &v, true).unwrap();
        assert!(close(&o.to_f32_vec().unwrap(), &[4.0, 5.0, 6.0], 1e-6));
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = t(&[1, 1, 2], &[0.9, 0.1]);
        let k = t(&[1, 3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let v = t(&[1, 3, 1], &[1.0, 2.0, 6.0]);
        let o = attention(&q, &k, &v, false).unwrap();
        assert!(close(&o.to_f32_vec().unwrap(), &[3.0], 1e-6));
    }

    #[test]
    fn attention_two_position_causal_hand_expansion() {
        let q = t(&[1, 2, 1], &[1.0, 2.0]);
        let k = t(&[1, 2, 1], &[0.5, -1.0]);
        let v = t(&[1, 2, 1], &[10.0, 20.0]);
        let o = attention(&q, &k, &v, true).unwrap().to_f32_vec().unwrap();
        // position 0 sees only itself; position 1 mixes scores 2·0.5 and 2·(-1)
        let (s0, s1) = (1.0f64, -2.0f64);
        let w0 = s0.exp() / (s0.exp() + s1.exp());
        let expected1 = (w0 * 10.0 + (1.0 - w0) * 20.0) as f32;
        assert!(close(&o, &[10.0, expected1], 1e-5));
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor::zeros(vec![2, 1, 4]).unwrap();
        let k = Tensor::zeros(vec![1, 1, 4]).unwrap();
        assert!(matches!(attention(&q, &k, &k, false), Err(Error::Shape { .. })));
        let k = Tensor::zeros(vec![2, 3, 4]).unwrap();
        let v = Tensor::zeros(vec![2, 2, 4]).unwrap();
        assert!(matches!(attention(&q, &k, &v, false), Err(Error::Shape { .. })));
    }
}
