use serde::{Deserialize, Serialize};

use super::lora::{linear, Linear, Role};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{ops, Backend, Eager, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub vocab: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub lora_alpha: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_model: 64, vocab: 256, num_layers: 2, num_heads: 4, d_ff: 256, lora_alpha: 16.0 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.num_heads),
            ));
        }
        if self.d_model < 2 || self.num_layers == 0 || self.d_ff == 0 || self.vocab == 0 {
            return Err(Error::config("attention", "all dimensions must be positive, d_model ≥ 2"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Abstract sequence-mixing cost: `2·layers·L²·d_model`.
    pub fn abstract_ops(&self, len: usize) -> u64 {
        2 * (self.num_layers * len * len * self.d_model) as u64
    }
}

/// Weights of one encoder block. Projections are stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnLayer<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    /// `d_ff × d_model`
    pub ffn_in: T,
    /// `d_model × d_ff`
    pub ffn_out: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnWeights<T> {
    pub layers: Vec<AttnLayer<T>>,
    /// `vocab × d_model`
    pub head_w: T,
    pub head_b: T,
}

impl<T> AttnWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(Role, &T) -> U) -> AttnWeights<U> {
        AttnWeights {
            layers: self
                .layers
                .iter()
                .map(|l| AttnLayer {
                    wq: l.wq.map(f),
                    wk: l.wk.map(f),
                    wv: l.wv.map(f),
                    wo: l.wo.map(f),
                    ffn_in: f(Role::Base, &l.ffn_in),
                    ffn_out: f(Role::Base, &l.ffn_out),
                    ln1_gain: f(Role::Base, &l.ln1_gain),
                    ln1_bias: f(Role::Base, &l.ln1_bias),
                    ln2_gain: f(Role::Base, &l.ln2_gain),
                    ln2_bias: f(Role::Base, &l.ln2_bias),
                })
                .collect(),
            head_w: f(Role::Base, &self.head_w),
            head_b: f(Role::Base, &self.head_b),
        }
    }

    /// Visits every parameter in declaration order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(Role, &'a T)) {
        for l in &self.layers {
            l.wq.visit(f);
            l.wk.visit(f);
            l.wv.visit(f);
            l.wo.visit(f);
            for t in [&l.ffn_in, &l.ffn_out, &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias] {
                f(Role::Base, t);
            }
        }
        f(Role::Base, &self.head_w);
        f(Role::Base, &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(Role, &mut T)) {
        for l in &mut self.layers {
            l.wq.visit_mut(f);
            l.wk.visit_mut(f);
            l.wv.visit_mut(f);
            l.wo.visit_mut(f);
            for t in [
                &mut l.ffn_in,
                &mut l.ffn_out,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ] {
                f(Role::Base, t);
            }
        }
        f(Role::Base, &mut self.head_w);
        f(Role::Base, &mut self.head_b);
    }
}

/// The attention expert: bidirectional multi-head encoder blocks with a
/// byte-vocabulary output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExpertParams {
    pub cfg: AttentionConfig,
    pub weights: AttnWeights<Tensor>,
    pub frozen: bool,
}

impl AttentionExpertParams {
    pub fn init(cfg: AttentionConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let sd = 1.0 / (d as f64).sqrt();
        let proj = |rows: usize, cols: usize, rng: &mut SeededRng| rng.normal_tensor(&[rows, cols], 1.0 / (cols as f64).sqrt());
        let layers = (0..cfg.num_layers)
            .map(|_| AttnLayer {
                wq: Linear::plain(proj(d, d, rng)),
                wk: Linear::plain(proj(d, d, rng)),
                wv: Linear::plain(proj(d, d, rng)),
                wo: Linear::plain(proj(d, d, rng)),
                ffn_in: proj(cfg.d_ff, d, rng),
                ffn_out: proj(d, cfg.d_ff, rng),
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            cfg,
            weights: AttnWeights {
                layers,
                head_w: rng.normal_tensor(&[cfg.vocab, d], sd),
                head_b: Tensor::zeros(&[cfg.vocab]),
            },
            frozen: false,
        })
    }

    /// Adds rank-`rank` adapters on the query and value projections.
    pub fn attach_lora(&mut self, rank: usize, rng: &mut SeededRng) -> Result<()> {
        for l in &mut self.weights.layers {
            l.wq.attach_lora(rank, rng)?;
            l.wv.attach_lora(rank, rng)?;
        }
        Ok(())
    }

    pub fn lora_rank(&self) -> usize {
        self.weights.layers.first().map_or(0, |l| l.wq.rank())
    }

    pub fn lora_scaling(&self) -> f64 {
        match self.lora_rank() {
            0 => 0.0,
            r => self.cfg.lora_alpha / r as f64,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.weights.visit(&mut |_, t| n += t.len());
        n
    }

    /// One encoder block on `h: L×d_model`:
    /// `h' = LN(h + MultiHead(h))`, `out = LN(h' + FFN(h'))`.
    pub fn layer(&self, h: &Tensor, layer: usize) -> Result<Tensor> {
        let l = self.weights.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: self.cfg.num_layers,
        })?;
        block(&mut Eager, &self.cfg, l, h.clone(), self.lora_scaling())
    }

    /// Per-head attention probabilities of block `layer` for input `h`.
    pub fn attention_weights(&self, h: &Tensor, layer: usize) -> Result<Vec<Tensor>> {
        let l = self.weights.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: self.cfg.num_layers,
        })?;
        let s = self.lora_scaling();
        let q = linear(&mut Eager, h, &l.wq, s)?;
        let k = linear(&mut Eager, h, &l.wk, s)?;
        let dh = self.cfg.d_head();
        (0..self.cfg.num_heads)
            .map(|head| {
                let qh = ops::slice_cols(&q, head * dh, dh)?;
                let kh = ops::slice_cols(&k, head * dh, dh)?;
                let scores = ops::scale(&ops::matmul_nt(&qh, &kh)?, 1.0 / (dh as f64).sqrt());
                ops::softmax_rows(&scores)
            })
            .collect()
    }
}

/// Scaled dot-product attention over all heads. `q`, `k`, `v` are `L×d`
/// with heads laid out as contiguous column blocks.
pub(crate) fn multi_head<B: Backend>(be: &mut B, q: &B::V, k: &B::V, v: &B::V, heads: usize, d_head: usize) -> Result<B::V> {
    be.attention(q, k, v, heads, d_head)
}

pub(crate) fn block<B: Backend>(be: &mut B, cfg: &AttentionConfig, l: &AttnLayer<B::V>, h: B::V, scaling: f64) -> Result<B::V> {
    let q = linear(be, &h, &l.wq, scaling)?;
    let k = linear(be, &h, &l.wk, scaling)?;
    let v = linear(be, &h, &l.wv, scaling)?;
    let mixed = multi_head(be, &q, &k, &v, cfg.num_heads, cfg.d_head())?;
    let attn = linear(be, &mixed, &l.wo, scaling)?;
    let res = be.add(&h, &attn)?;
    let h1 = be.layer_norm_rows(&res, &l.ln1_gain, &l.ln1_bias)?;
    let f = be.matmul_nt(&h1, &l.ffn_in)?;
    let f = be.relu(&f)?;
    let f = be.matmul_nt(&f, &l.ffn_out)?;
    let res = be.add(&h1, &f)?;
    be.layer_norm_rows(&res, &l.ln2_gain, &l.ln2_bias)
}

/// All blocks then the output head; returns `(hidden, logits)`.
pub(crate) fn forward<B: Backend>(be: &mut B, cfg: &AttentionConfig, w: &AttnWeights<B::V>, x: B::V, scaling: f64) -> Result<(B::V, B::V)> {
    let mut h = x;
    for l in &w.layers {
        h = block(be, cfg, l, h, scaling)?;
    }
    let logits = be.matmul_nt(&h, &w.head_w)?;
    let logits = be.add_row(&logits, &w.head_b)?;
    Ok((h, logits))
}

/// Analytic floating-point operation count of a full forward pass.
pub fn flops(cfg: &AttentionConfig, len: usize, lora_rank: usize) -> u64 {
    let (l, d, f, v) = (len as u64, cfg.d_model as u64, cfg.d_ff as u64, cfg.vocab as u64);
    let r = lora_rank as u64;
    let proj = 4 * 2 * l * d * d + 2 * (2 * l * d * r + 2 * l * r * d);
    let mixing = 2 * 2 * l * l * d + 5 * l * l * cfg.num_heads as u64;
    let ffn = 2 * 2 * l * d * f + l * f;
    let norms = 2 * 8 * l * d;
    cfg.num_layers as u64 * (proj + mixing + ffn + norms) + 2 * l * d * v + l * v
}
