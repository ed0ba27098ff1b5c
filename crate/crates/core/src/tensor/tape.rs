//! Explicit reverse-mode tape.
//!
//! Nodes are appended in execution order, so every op's inputs precede it
//! and the backward sweep is a plain reverse iteration. Ops whose inputs
//! are all constants are folded into constant nodes and never revisited.

use super::ops::{self, LayerNormCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        weight: f64,
    },
    SsmScan {
        u: Var,
        a: Var,
        b: Var,
        c: Var,
        states: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        self.push("matmul_nt", v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        self.push("multiply", v, Op::Mul(a, b), &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::maximum(self.value(a), self.value(b))?;
        self.push("maximum", v, Op::Maximum(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = ops::scale(self.value(a), s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = ops::add_scalar(self.value(a), s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = ops::add_row(self.value(x), self.value(bias))?;
        self.push("add_row", v, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = ops::scale_rows(self.value(x), self.value(w))?;
        self.push("scale_rows", v, Op::ScaleRows(x, w), &[x, w])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = ops::relu(self.value(a));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = ops::exp(self.value(a))?;
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = ops::log(self.value(a))?;
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = ops::sum_rows(self.value(a));
        self.push("sum_rows", v, Op::SumRows(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_rows(self.value(a))?;
        self.push("softmax_rows", v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = ops::log_softmax_rows(self.value(a))?;
        self.push("log_softmax_rows", v, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (v, cache) = ops::layer_norm_rows(self.value(x), self.value(gain), self.value(bias))?;
        self.push("layer_norm", v, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice_cols(self.value(x), start, len)?;
        self.push("slice_cols", v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ops::concat_cols(&vals)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = ops::gather_rows(self.value(x), index)?;
        self.push("gather_rows", v, Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    /// Scalar `weight · Σ −log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], weight: f64) -> Result<Var> {
        let v = Tensor::scalar(ops::cross_entropy_logits(self.value(logits), targets, weight)?);
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weight,
            },
            &[logits],
        )
    }

    pub fn ssm_scan(&mut self, u: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (v, states) = ops::ssm_scan(self.value(u), self.value(a), self.value(b), self.value(c), true)?;
        let states = states.unwrap_or_default();
        self.push("ssm_scan", v, Op::SsmScan { u, a, b, c, states }, &[u, a, b, c])
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => existing.add_assign_scaled(&g, 1.0),
            None => node.grad = Some(g),
        }
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Gradients add up across multiple uses of a node and
    /// across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                self.accumulate(v, t);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut da, 0.0);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g.data(), (n, 1), bv.data(), (k, 1), &mut da, 0.0);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    ops::gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), &mut db, 0.0);
                    out.push((*b, Tensor::from_parts(vec![n, k], db)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, ops::mul(g, self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, ops::mul(g, self.value(*a))?));
                }
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((x, y), (p, q)) in av.data().iter().zip(bv.data()).zip(ga.data_mut().iter_mut().zip(gb.data_mut())) {
                    if x >= y {
                        *q = 0.0;
                    } else {
                        *p = 0.0;
                    }
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Scale(a, s) => out.push((*a, ops::scale(g, *s))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::AddRow(x, bias) => {
                out.push((*x, g.clone()));
                if self.needs(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    out.push((*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), db)));
                }
            }
            Op::ScaleRows(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    out.push((*x, ops::scale_rows(g, wv)?));
                }
                if self.needs(*w) {
                    let dw = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*w, Tensor::from_parts(wv.shape().to_vec(), dw)));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (v, x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *x <= 0.0 {
                        *v = 0.0;
                    }
                }
                out.push((*a, d));
            }
            Op::Exp(a) => out.push((*a, ops::mul(g, &node.value)?)),
            Op::Log(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                out.push((*a, Tensor::from_parts(x.shape().to_vec(), d)));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.value(*a).shape(), g.item()))),
            Op::Mean(a) => {
                let x = self.value(*a);
                out.push((*a, Tensor::full(x.shape(), g.item() / x.len() as f64)));
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let gr = g.data()[r];
                    d.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                out.push((*a, d));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (dv, yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dv = yv * (*dv - dot);
                    }
                }
                out.push((*a, d));
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (dv, yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dv -= yv.exp() * total;
                    }
                }
                out.push((*a, d));
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let gv = self.value(*gain);
                let n = g.cols();
                let xhat = &cache.normalized;
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(g.shape());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let inv = cache.inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for j in 0..n {
                            dg[j] += g.row(r)[j] * xhat.row(r)[j];
                            db[j] += g.row(r)[j];
                        }
                    }
                    out.push((*gain, Tensor::from_parts(gv.shape().to_vec(), dg)));
                    out.push((*bias, Tensor::from_parts(self.value(*bias).shape().to_vec(), db)));
                }
            }
            Op::Transpose(a) => out.push((*a, ops::transpose(g)?)),
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..xv.rows() {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                out.push((*x, d));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        out.push((*p, ops::slice_cols(g, start, w)?));
                    }
                    start += w;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                for (o, &src) in index.iter().enumerate() {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                out.push((*x, d));
            }
            Op::CrossEntropy { logits, targets, weight } => {
                let lv = self.value(*logits);
                let mut d = Tensor::zeros(lv.shape());
                let scale = weight * g.item();
                for &(r, c) in targets {
                    let mut p = lv.row(r).to_vec();
                    ops::softmax_in_place(&mut p);
                    p[c] -= 1.0;
                    for (dv, pv) in d.row_mut(r).iter_mut().zip(&p) {
                        *dv += scale * pv;
                    }
                }
                out.push((*logits, d));
            }
            Op::SsmScan { u, a, b, c, states } => {
                let (uv, av, bv, cv) = (self.value(*u), self.value(*a), self.value(*b), self.value(*c));
                let (len, channels) = (uv.rows(), uv.cols());
                let n = av.cols();
                let mut du = vec![0.0; len * channels];
                let mut da = vec![0.0; channels * n];
                let mut db = vec![0.0; channels * n];
                let mut dc = vec![0.0; channels * n];
                let mut carry = vec![0.0; channels * n];
                let (ad, bd, cd) = (av.data(), bv.data(), cv.data());
                let block = channels * n;
                for t in (0..len).rev() {
                    let h_t = &states[t * block..(t + 1) * block];
                    let h_prev = if t > 0 { Some(&states[(t - 1) * block..t * block]) } else { None };
                    for ch in 0..channels {
                        let gy = g.data()[t * channels + ch];
                        let x = uv.data()[t * channels + ch];
                        let mut gu = 0.0;
                        for s in 0..n {
                            let k = ch * n + s;
                            let gh = gy * cd[k] + carry[k];
                            dc[k] += gy * h_t[k];
                            if let Some(hp) = h_prev {
                                da[k] += gh * hp[k];
                            }
                            db[k] += gh * x;
                            gu += gh * bd[k];
                            carry[k] = ad[k] * gh;
                        }
                        du[t * channels + ch] = gu;
                    }
                }
                out.push((*u, Tensor::from_parts(uv.shape().to_vec(), du)));
                out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                out.push((*c, Tensor::from_parts(cv.shape().to_vec(), dc)));
            }
        }
        Ok(out)
    }
}
