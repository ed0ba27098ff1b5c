use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{ops, Backend, Tensor};

/// Low-rank adapter over a frozen base map.
///
/// The effective weight is `W + (α/r)·B·A`, with `W: m×n`, `A: r×n` and
/// `B: m×r`. It is never formed densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAAdapter {
    pub w: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoRAAdapter {
    pub fn new(w: Tensor, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (m, n) = (w.rows(), w.cols());
        let r = a.rows();
        check_rank(r, m, n)?;
        if a.cols() != n || b.rows() != m || b.cols() != r {
            return Err(Error::Shape { op: "lora", left: a.shape().to_vec(), right: b.shape().to_vec() });
        }
        if !(alpha > 0.0) {
            return Err(Error::config("lora_alpha", "must be positive"));
        }
        Ok(Self { w, a, b, alpha })
    }

    /// Standard initialization: Gaussian `A`, zero `B`, so the adapter
    /// starts as the identity on the base map.
    pub fn init(w: Tensor, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        let (m, n) = (w.rows(), w.cols());
        check_rank(rank, m, n)?;
        let a = rng.normal_tensor(&[rank, n], 1.0 / (n as f64).sqrt());
        Self::new(w, a, Tensor::zeros(&[m, rank]), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `W + (α/r)·B·A`, for oracles and inspection only.
    pub fn merged(&self) -> Result<Tensor> {
        let ba = ops::matmul(&self.b, &self.a)?;
        ops::add(&self.w, &ops::scale(&ba, self.scaling()))
    }
}

pub(crate) fn check_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    if rank == 0 || rank >= m.min(n) {
        return Err(Error::config(
            "lora_rank",
            format!("rank {rank} must satisfy 0 < r < min({m}, {n})"),
        ));
    }
    Ok(())
}

/// `(W + (α/r)·B·A)·x` computed as `W·x + (α/r)·B·(A·x)`.
pub fn lora_apply(adapter: &LoRAAdapter, x: &Tensor) -> Result<Tensor> {
    let base = ops::matvec(&adapter.w, x.data())?;
    let ax = ops::matvec(&adapter.a, x.data())?;
    let bax = ops::matvec(&adapter.b, &ax)?;
    let s = adapter.scaling();
    let out = base.iter().zip(&bax).map(|(w, d)| w + s * d).collect();
    let out = Tensor::vector(out);
    out.ensure_finite("lora_apply")?;
    Ok(out)
}

/// Whether a parameter belongs to the base model or to an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Base,
    Adapter,
}

/// Low-rank factor pair attached to a [`Linear`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair<T> {
    pub a: T,
    pub b: T,
}

/// Row-batched projection `y = x·Wᵀ` with `W: out×in`, optionally adapted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: T,
    pub lora: Option<LoraPair<T>>,
}

impl<T> Linear<T> {
    pub fn plain(w: T) -> Self {
        Self { w, lora: None }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(Role, &T) -> U) -> Linear<U> {
        Linear {
            w: f(Role::Base, &self.w),
            lora: self.lora.as_ref().map(|p| LoraPair { a: f(Role::Adapter, &p.a), b: f(Role::Adapter, &p.b) }),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(Role, &'a T)) {
        f(Role::Base, &self.w);
        if let Some(p) = &self.lora {
            f(Role::Adapter, &p.a);
            f(Role::Adapter, &p.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(Role, &mut T)) {
        f(Role::Base, &mut self.w);
        if let Some(p) = &mut self.lora {
            f(Role::Adapter, &mut p.a);
            f(Role::Adapter, &mut p.b);
        }
    }
}

impl Linear<Tensor> {
    /// Attaches a zero-initialized adapter of the given rank.
    pub fn attach_lora(&mut self, rank: usize, rng: &mut SeededRng) -> Result<()> {
        let (m, n) = (self.w.rows(), self.w.cols());
        check_rank(rank, m, n)?;
        let a = rng.normal_tensor(&[rank, n], 1.0 / (n as f64).sqrt());
        self.lora = Some(LoraPair { a, b: Tensor::zeros(&[m, rank]) });
        Ok(())
    }

    pub fn out_features(&self) -> usize {
        self.w.rows()
    }

    pub fn in_features(&self) -> usize {
        self.w.cols()
    }

    pub fn rank(&self) -> usize {
        self.lora.as_ref().map_or(0, |p| p.a.rows())
    }
}

/// Applies a [`Linear`] to the rows of `x`; `scaling` is `α/r`.
pub(crate) fn linear<B: Backend>(be: &mut B, x: &B::V, lin: &Linear<B::V>, scaling: f64) -> Result<B::V> {
    let y = be.matmul_nt(x, &lin.w)?;
    match &lin.lora {
        None => Ok(y),
        Some(p) => {
            let xa = be.matmul_nt(x, &p.a)?;
            let xab = be.matmul_nt(&xa, &p.b)?;
            let delta = be.scale(&xab, scaling)?;
            be.add(&y, &delta)
        }
    }
}
