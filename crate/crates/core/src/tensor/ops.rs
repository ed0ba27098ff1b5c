//! Forward kernels shared by the eager backend and the tape.

use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor added inside every layer norm.
pub const LN_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

/// `C = A·B + beta·C` over strided views; the shared matmul primitive.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let max_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let max_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(max_a < a.len() && max_b < b.len(), "gemm view out of bounds");
    // SAFETY: the asserts above bound every strided access into `a` and `b`,
    // and `c` holds at least m*n contiguous row-major entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `A·Bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Matrix-vector product `W·x` for `W: m×n`, `x: [n]`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = require_matrix("matvec", w)?;
    if n != x.len() {
        return Err(Error::Shape {
            op: "matvec",
            left: w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    Ok((0..m)
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("transpose", a)?;
    let mut out = vec![0.0; m * n];
    let src = a.data();
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("multiply", a, b, |x, y| x * y)
}

pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("maximum", a, b, f64::max)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x * s)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| x + s)
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| x.max(0.0))
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    let out = map(a, f64::exp);
    out.ensure_finite("exp")?;
    Ok(out)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|x| *x <= 0.0) {
        return Err(Error::NonFinite { op: "log" });
    }
    Ok(map(a, f64::ln))
}

/// Adds a bias vector (`[n]` or `1×n`) to every row of `x`.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    if bias.len() != n {
        return Err(shape_err("add_row", x, bias));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Multiplies row `i` of `x` by `w[i]`.
pub fn scale_rows(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.len() != x.rows() {
        return Err(shape_err("scale_rows", x, w));
    }
    let mut out = x.clone();
    for (r, s) in w.data().iter().enumerate() {
        for o in out.row_mut(r) {
            *o *= s;
        }
    }
    Ok(out)
}

/// Row sums as an `m×1` column.
pub fn sum_rows(x: &Tensor) -> Tensor {
    let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
    Tensor::from_parts(vec![x.rows(), 1], data)
}

/// Query rows per block in [`attention`].
const ATTENTION_BLOCK: usize = 64;

/// `softmax(Q·Kᵀ·scale)·V` per head over contiguous column blocks of
/// `q`, `k`, `v`, computed a block of query rows at a time so the score
/// buffer stays at `ATTENTION_BLOCK × L`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, d_head: usize, scale: f64) -> Result<Tensor> {
    let (lq, d) = require_matrix("attention", q)?;
    let (lk, dk) = require_matrix("attention", k)?;
    let (lv, dv) = require_matrix("attention", v)?;
    if dk != d || dv != d || lv != lk || heads * d_head != d {
        return Err(shape_err("attention", q, k));
    }
    if lk == 0 {
        return Err(Error::contract("softmax over zero columns"));
    }
    let mut out = vec![0.0; lq * d];
    let mut scores = vec![0.0; ATTENTION_BLOCK.min(lq) * lk];
    let mut mixed = vec![0.0; ATTENTION_BLOCK.min(lq) * d_head];
    for h in 0..heads {
        let off = h * d_head;
        for r0 in (0..lq).step_by(ATTENTION_BLOCK) {
            let br = ATTENTION_BLOCK.min(lq - r0);
            let s = &mut scores[..br * lk];
            gemm(br, d_head, lk, &q.data()[r0 * d + off..], (d, 1), &k.data()[off..], (1, d), s, 0.0);
            for row in s.chunks_mut(lk) {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "softmax_rows" });
                }
                softmax_in_place(row);
            }
            let m = &mut mixed[..br * d_head];
            gemm(br, lk, d_head, s, (lk, 1), &v.data()[off..], (d, 1), m, 0.0);
            for (i, row) in m.chunks(d_head).enumerate() {
                out[(r0 + i) * d + off..(r0 + i) * d + off + d_head].copy_from_slice(row);
            }
        }
    }
    Ok(Tensor::from_parts(vec![lq, d], out))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(Error::contract("softmax over zero columns"));
    }
    x.ensure_finite("softmax_rows")?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("log_softmax_rows")?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Layer norm of a single vector: zero mean, unit variance (plus
/// [`LN_EPS`]), then `gain ⊙ · + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.len() < 2 {
        return Err(Error::contract("layer_norm needs at least two features"));
    }
    let row = x.clone().reshape(&[1, x.len()])?;
    let (y, _) = layer_norm_rows(&row, gain, bias)?;
    y.reshape(x.shape())
}

/// Row-wise layer norm. Also returns the normalized input and per-row
/// inverse standard deviations, which the backward pass reuses.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let n = x.cols();
    if gain.len() != n || bias.len() != n {
        return Err(shape_err("layer_norm", x, gain));
    }
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = normalized.row_mut(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
        let src = normalized.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = gain.data()[j] * src[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = require_matrix("slice_cols", x)?;
    if start + len > n {
        return Err(Error::Index {
            what: "column",
            index: start + len,
            len: n,
        });
    }
    let mut out = Vec::with_capacity(m * len);
    for r in 0..m {
        out.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![m, len], out))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
    let m = first.rows();
    for p in parts {
        require_matrix("concat_cols", p)?;
        if p.rows() != m {
            return Err(shape_err("concat_cols", first, p));
        }
    }
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Output row `i` is input row `index[i]`.
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (m, n) = require_matrix("gather_rows", x)?;
    let mut out = Vec::with_capacity(index.len() * n);
    for &i in index {
        if i >= m {
            return Err(Error::Index { what: "row", index: i, len: m });
        }
        out.extend_from_slice(x.row(i));
    }
    Ok(Tensor::from_parts(vec![index.len(), n], out))
}

/// `weight · Σ −log softmax(logits[row])[class]` over the listed targets.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[(usize, usize)], weight: f64) -> Result<f64> {
    let (m, v) = require_matrix("cross_entropy", logits)?;
    let mut total = 0.0;
    for &(r, c) in targets {
        if r >= m || c >= v {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: if r >= m { r } else { c },
                len: if r >= m { m } else { v },
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    Ok(weight * total)
}

/// Diagonal linear time-invariant scan.
///
/// `u: L×C` drives `C` independent channels; each channel `ch` has a
/// `d_state`-long diagonal transition `a[ch]`, input vector `b[ch]` and
/// readout `c[ch]` (all `C×N`). With `h_{-1} = 0`:
///
/// ```text
/// h_t = a ⊙ h_{t-1} + b · u_t,     y_t = c · h_t
/// ```
///
/// When `keep_states` is set, all `L×C×N` hidden states are returned for
/// the backward pass.
pub fn ssm_scan(u: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, keep_states: bool) -> Result<(Tensor, Option<Vec<f64>>)> {
    let (len, channels) = require_matrix("ssm_scan", u)?;
    let (ca, n) = require_matrix("ssm_scan", a)?;
    if ca != channels || b.shape() != a.shape() || c.shape() != a.shape() {
        return Err(shape_err("ssm_scan", u, a));
    }
    let (ad, bd, cd, ud) = (a.data(), b.data(), c.data(), u.data());
    let mut h = vec![0.0; channels * n];
    let mut y = vec![0.0; len * channels];
    let mut states = if keep_states { Some(Vec::with_capacity(len * channels * n)) } else { None };
    for t in 0..len {
        let u_row = &ud[t * channels..(t + 1) * channels];
        let y_row = &mut y[t * channels..(t + 1) * channels];
        for ch in 0..channels {
            let off = ch * n;
            let hs = &mut h[off..off + n];
            let (ak, bk, ck) = (&ad[off..off + n], &bd[off..off + n], &cd[off..off + n]);
            let x = u_row[ch];
            let mut acc = 0.0;
            for s in 0..n {
                let v = ak[s] * hs[s] + bk[s] * x;
                hs[s] = v;
                acc += ck[s] * v;
            }
            y_row[ch] = acc;
        }
        if let Some(st) = states.as_mut() {
            st.extend_from_slice(&h);
        }
    }
    let out = Tensor::from_parts(vec![len, channels], y);
    out.ensure_finite("ssm_scan")?;
    Ok((out, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = SeededRng::new(1);
        let m = rng.normal_tensor(&[3, 3], 1.0);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
        let z = matmul(&Tensor::zeros(&[2, 3]), &rng.normal_tensor(&[3, 4], 1.0)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(2);
        for (m, k, n) in [(4, 4, 4), (1, 7, 3), (9, 2, 5), (33, 17, 65)] {
            let a = rng.normal_tensor(&[m, k], 1.0);
            let b = rng.normal_tensor(&[k, n], 1.0);
            let got = matmul(&a, &b).unwrap();
            assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
            let bt = transpose(&b).unwrap();
            assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&got) <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let eq = softmax_rows(&Tensor::full(&[1, 4], 3.0)).unwrap();
        for v in eq.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        // e/(1+e) evaluated independently.
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((s.data()[0] - 0.73106).abs() < 1e-5);
        assert!((s.data()[1] - 0.26894).abs() < 1e-5);
        let big = softmax_rows(&Tensor::matrix(1, 2, vec![5.0, 1005.0]).unwrap()).unwrap();
        assert!(big.data()[0] < 1e-300 && (big.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::from_parts(vec![1, 2], vec![f64::INFINITY, 0.0]);
        assert!(matches!(softmax_rows(&t), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let out = layer_norm(&Tensor::full(&[4], 7.5), &one, &zero).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));

        let g2 = Tensor::full(&[2], 1.0);
        let b2 = Tensor::zeros(&[2]);
        let out = layer_norm(&Tensor::vector(vec![-1.0, 1.0]), &g2, &b2).unwrap();
        // Exact value is ±1/sqrt(1 + eps).
        assert!((out.data()[0] + 1.0).abs() < 1e-5 && (out.data()[1] - 1.0).abs() < 1e-5);

        // Constant input maps to the bias, not NaN.
        let bias = Tensor::vector(vec![0.5, -0.5, 2.0]);
        let out = layer_norm(&Tensor::full(&[3], -4.0), &Tensor::full(&[3], 3.0), &bias).unwrap();
        assert_eq!(out, bias);
        assert!(layer_norm(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn layer_norm_statistics_oracle() {
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let x = rng.normal_tensor(&[8], 10.0);
            let out = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8])).unwrap();
            let mean = out.data().iter().sum::<f64>() / 8.0;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6, "variance {var}");
            // Exact relation with the epsilon term for any scale.
            let raw_mean = x.data().iter().sum::<f64>() / 8.0;
            let raw_var = x.data().iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / 8.0;
            assert!((var - raw_var / (raw_var + LN_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_running_sum() {
        let u = Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let one = Tensor::full(&[1, 1], 1.0);
        let (y, _) = ssm_scan(&u, &one, &one, &one, false).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(&[3, 256]);
        let ce = cross_entropy_logits(&logits, &[(0, 1), (1, 7), (2, 255)], 1.0 / 3.0).unwrap();
        assert!((ce - (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_and_concat() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = gather_rows(&x, &[1, 1, 0]).unwrap();
        assert_eq!(g.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(gather_rows(&x, &[2]).is_err());
        let c = concat_cols(&[&x, &slice_cols(&x, 1, 1).unwrap()]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0]);
    }
}
