use super::ops;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// The op set model code is written against.
///
/// [`Eager`] evaluates immediately on owned tensors (inference); [`Tape`]
/// records every op for a later backward pass (training).
pub trait Backend {
    type V: Clone;

    /// Binds a parameter. On a tape it becomes a trainable leaf when
    /// `trainable` is set and a constant otherwise.
    fn param(&mut self, t: &Tensor, trainable: bool) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: f64) -> Result<Self::V>;
    fn add_row(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, a: &Self::V) -> Result<Self::V>;
    fn softmax_rows(&mut self, a: &Self::V) -> Result<Self::V>;
    fn layer_norm_rows(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn slice_cols(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn ssm_scan(&mut self, u: &Self::V, a: &Self::V, b: &Self::V, c: &Self::V) -> Result<Self::V>;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Result<Self::V>;
    fn maximum(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn log(&mut self, a: &Self::V) -> Result<Self::V>;
    fn log_softmax_rows(&mut self, a: &Self::V) -> Result<Self::V>;
    fn gather_rows(&mut self, x: &Self::V, index: &[usize]) -> Result<Self::V>;
    fn sum_rows(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Result<Self::V>;
    fn mean(&mut self, a: &Self::V) -> Result<Self::V>;

    /// Scaled dot-product attention over `heads` contiguous column blocks.
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V, heads: usize, d_head: usize) -> Result<Self::V> {
        let inv = 1.0 / (d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = self.slice_cols(q, head * d_head, d_head)?;
            let kh = self.slice_cols(k, head * d_head, d_head)?;
            let vh = self.slice_cols(v, head * d_head, d_head)?;
            let scores = self.matmul_nt(&qh, &kh)?;
            let scores = self.scale(&scores, inv)?;
            let probs = self.softmax_rows(&scores)?;
            outs.push(self.matmul(&probs, &vh)?);
        }
        if outs.len() == 1 {
            Ok(outs.pop().unwrap())
        } else {
            self.concat_cols(&outs)
        }
    }
}

/// Tape-free evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type V = Tensor;

    fn param(&mut self, t: &Tensor, _trainable: bool) -> Tensor {
        t.clone()
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::matmul(a, b)?;
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::matmul_nt(a, b)?;
        out.ensure_finite("matmul_nt")?;
        Ok(out)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mul(a, b)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        Ok(ops::scale(a, s))
    }

    fn add_row(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        ops::add_row(x, bias)
    }

    fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(a))
    }

    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::softmax_rows(a)
    }

    fn layer_norm_rows(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm_rows(x, gain, bias)?.0)
    }

    fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        ops::slice_cols(x, start, len)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat_cols(&refs)
    }

    fn ssm_scan(&mut self, u: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
        Ok(ops::ssm_scan(u, a, b, c, false)?.0)
    }

    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        Ok(ops::add_scalar(a, s))
    }

    fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::maximum(a, b)
    }

    fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::log(a)
    }

    fn log_softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::log_softmax_rows(a)
    }

    fn gather_rows(&mut self, x: &Tensor, index: &[usize]) -> Result<Tensor> {
        ops::gather_rows(x, index)
    }

    fn sum_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(ops::sum_rows(a))
    }

    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(a.sum()))
    }

    fn attention(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, d_head: usize) -> Result<Tensor> {
        ops::attention(q, k, v, heads, d_head, 1.0 / (d_head as f64).sqrt())
    }

    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(crate::error::Error::contract("mean of an empty tensor"));
        }
        Ok(Tensor::scalar(a.sum() / a.len() as f64))
    }
}

impl Backend for Tape {
    type V = Var;

    fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.leaf(t.clone(), trainable)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Tape::value(self, *v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul_nt(self, *a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::mul(self, *a, *b)
    }

    fn scale(&mut self, a: &Var, s: f64) -> Result<Var> {
        Tape::scale(self, *a, s)
    }

    fn add_row(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        Tape::add_row(self, *x, *bias)
    }

    fn relu(&mut self, a: &Var) -> Result<Var> {
        Tape::relu(self, *a)
    }

    fn softmax_rows(&mut self, a: &Var) -> Result<Var> {
        Tape::softmax_rows(self, *a)
    }

    fn layer_norm_rows(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        Tape::layer_norm_rows(self, *x, *gain, *bias)
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_cols(self, *x, start, len)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_cols(self, parts)
    }

    fn ssm_scan(&mut self, u: &Var, a: &Var, b: &Var, c: &Var) -> Result<Var> {
        Tape::ssm_scan(self, *u, *a, *b, *c)
    }

    fn add_scalar(&mut self, a: &Var, s: f64) -> Result<Var> {
        Tape::add_scalar(self, *a, s)
    }

    fn maximum(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::maximum(self, *a, *b)
    }

    fn log(&mut self, a: &Var) -> Result<Var> {
        Tape::log(self, *a)
    }

    fn log_softmax_rows(&mut self, a: &Var) -> Result<Var> {
        Tape::log_softmax_rows(self, *a)
    }

    fn gather_rows(&mut self, x: &Var, index: &[usize]) -> Result<Var> {
        Tape::gather_rows(self, *x, index)
    }

    fn sum_rows(&mut self, a: &Var) -> Result<Var> {
        Tape::sum_rows(self, *a)
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        Tape::sum(self, *a)
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        Tape::mean(self, *a)
    }
}
