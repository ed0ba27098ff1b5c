use serde::{Deserialize, Serialize};

use super::lora::{linear, Linear, Role};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Backend, Eager, Tensor};

/// Largest admissible `|Ā|` entry.
pub const STABILITY_BOUND: f64 = 1.0 + 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_model: usize,
    pub vocab: usize,
    pub num_layers: usize,
    pub channels: usize,
    pub d_state: usize,
    pub lora_alpha: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self { d_model: 64, vocab: 256, num_layers: 2, channels: 64, d_state: 16, lora_alpha: 16.0 }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.num_layers == 0 || self.channels == 0 || self.d_state == 0 || self.vocab == 0 {
            return Err(Error::config("ssm", "all dimensions must be positive, d_model ≥ 2"));
        }
        Ok(())
    }

    /// Abstract scan cost: `2·layers·L·channels·d_state`.
    pub fn abstract_ops(&self, len: usize) -> u64 {
        2 * (self.num_layers * len * self.channels * self.d_state) as u64
    }
}

/// One residual block `LN(h + W_out·scan(W_in·h))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmLayer<T> {
    /// `channels × d_model`
    pub w_in: Linear<T>,
    /// `d_model × channels`
    pub w_out: Linear<T>,
    /// Diagonal transition per channel, `channels × d_state`.
    pub a: T,
    /// `channels × d_state`
    pub b: T,
    /// `channels × d_state`
    pub c: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmWeights<T> {
    pub layers: Vec<SsmLayer<T>>,
    /// `vocab × d_model`
    pub head_w: T,
    pub head_b: T,
}

impl<T> SsmWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(Role, &T) -> U) -> SsmWeights<U> {
        SsmWeights {
            layers: self
                .layers
                .iter()
                .map(|l| SsmLayer {
                    w_in: l.w_in.map(f),
                    w_out: l.w_out.map(f),
                    a: f(Role::Base, &l.a),
                    b: f(Role::Base, &l.b),
                    c: f(Role::Base, &l.c),
                    ln_gain: f(Role::Base, &l.ln_gain),
                    ln_bias: f(Role::Base, &l.ln_bias),
                })
                .collect(),
            head_w: f(Role::Base, &self.head_w),
            head_b: f(Role::Base, &self.head_b),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(Role, &'a T)) {
        for l in &self.layers {
            l.w_in.visit(f);
            l.w_out.visit(f);
            for t in [&l.a, &l.b, &l.c, &l.ln_gain, &l.ln_bias] {
                f(Role::Base, t);
            }
        }
        f(Role::Base, &self.head_w);
        f(Role::Base, &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(Role, &mut T)) {
        for l in &mut self.layers {
            l.w_in.visit_mut(f);
            l.w_out.visit_mut(f);
            for t in [&mut l.a, &mut l.b, &mut l.c, &mut l.ln_gain, &mut l.ln_bias] {
                f(Role::Base, t);
            }
        }
        f(Role::Base, &mut self.head_w);
        f(Role::Base, &mut self.head_b);
    }
}

/// The state-space expert: stacked diagonal linear recurrences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SSMExpertParams {
    pub cfg: SsmConfig,
    pub weights: SsmWeights<Tensor>,
    pub frozen: bool,
}

impl SSMExpertParams {
    /// Random init with `Ā ~ U[0.5, 0.99]` and `B̄ = (1 − Ā)·N(0, 1)`, the
    /// input scaling a zero-order-hold discretization would produce. It
    /// keeps every mode a bounded-gain moving average, so slow modes do not
    /// blow up long inputs at the start of training.
    pub fn init(cfg: SsmConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d, ch, n) = (cfg.d_model, cfg.channels, cfg.d_state);
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let w_in = Linear::plain(rng.normal_tensor(&[ch, d], 1.0 / (d as f64).sqrt()));
                let w_out = Linear::plain(rng.normal_tensor(&[d, ch], 1.0 / (ch as f64).sqrt()));
                let a = rng.uniform_tensor(&[ch, n], 0.5, 0.99);
                let mut b = rng.normal_tensor(&[ch, n], 1.0);
                for (bv, av) in b.data_mut().iter_mut().zip(a.data()) {
                    *bv *= 1.0 - av;
                }
                let c = rng.normal_tensor(&[ch, n], 1.0 / (n as f64).sqrt());
                SsmLayer {
                    w_in,
                    w_out,
                    a,
                    b,
                    c,
                    ln_gain: Tensor::full(&[d], 1.0),
                    ln_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            weights: SsmWeights {
                layers,
                head_w: rng.normal_tensor(&[cfg.vocab, d], 1.0 / (d as f64).sqrt()),
                head_b: Tensor::zeros(&[cfg.vocab]),
            },
            frozen: false,
        })
    }

    /// Adds rank-`rank` adapters on the input and output projections.
    pub fn attach_lora(&mut self, rank: usize, rng: &mut SeededRng) -> Result<()> {
        for l in &mut self.weights.layers {
            l.w_in.attach_lora(rank, rng)?;
            l.w_out.attach_lora(rank, rng)?;
        }
        Ok(())
    }

    pub fn lora_rank(&self) -> usize {
        self.weights.layers.first().map_or(0, |l| l.w_in.rank())
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

    /// Rejects any transition entry with `|a| > 1 + 1e-9`.
    pub fn check_stability(&self) -> Result<()> {
        for (i, l) in self.weights.layers.iter().enumerate() {
            check_transition(&l.a, i)?;
        }
        Ok(())
    }

    /// Pulls every transition entry back into `[-1, 1]`.
    pub fn project_stable(&mut self) {
        for l in &mut self.weights.layers {
            for a in l.a.data_mut() {
                *a = a.clamp(-1.0, 1.0);
            }
        }
    }

    /// Sequence mixing of block `layer`: `W_out·scan(W_in·x)` on
    /// `x: L×d_model`, with `h_0 = 0`.
    pub fn scan(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        let l = self.weights.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: self.cfg.num_layers,
        })?;
        check_transition(&l.a, layer)?;
        mix(&mut Eager, l, x, self.lora_scaling())
    }

    /// Full residual block `LN(x + W_out·scan(W_in·x))`.
    pub fn layer(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        let l = self.weights.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: self.cfg.num_layers,
        })?;
        block(&mut Eager, l, x.clone(), layer, self.lora_scaling())
    }

    /// `Σ (a − 1)²` over every transition entry: the squared Frobenius
    /// distance of the diagonal transitions from the identity.
    pub fn stability_penalty(&self) -> f64 {
        self.weights
            .layers
            .iter()
            .flat_map(|l| l.a.data().iter())
            .map(|a| (a - 1.0).powi(2))
            .sum()
    }
}

pub(crate) fn check_transition(a: &Tensor, layer: usize) -> Result<()> {
    let n = a.cols();
    for (i, &v) in a.data().iter().enumerate() {
        if !(v.abs() <= STABILITY_BOUND) {
            return Err(Error::Stability { layer, channel: i / n, state: i % n, value: v });
        }
    }
    Ok(())
}

fn mix<B: Backend>(be: &mut B, l: &SsmLayer<B::V>, x: &B::V, scaling: f64) -> Result<B::V> {
    let u = linear(be, x, &l.w_in, scaling)?;
    let y = be.ssm_scan(&u, &l.a, &l.b, &l.c)?;
    linear(be, &y, &l.w_out, scaling)
}

pub(crate) fn block<B: Backend>(be: &mut B, l: &SsmLayer<B::V>, h: B::V, layer: usize, scaling: f64) -> Result<B::V> {
    check_transition(be.value(&l.a), layer)?;
    let o = mix(be, l, &h, scaling)?;
    let res = be.add(&h, &o)?;
    be.layer_norm_rows(&res, &l.ln_gain, &l.ln_bias)
}

pub(crate) fn forward<B: Backend>(be: &mut B, w: &SsmWeights<B::V>, x: B::V, scaling: f64) -> Result<(B::V, B::V)> {
    let mut h = x;
    for (i, l) in w.layers.iter().enumerate() {
        h = block(be, l, h, i, scaling)?;
    }
    let logits = be.matmul_nt(&h, &w.head_w)?;
    let logits = be.add_row(&logits, &w.head_b)?;
    Ok((h, logits))
}

/// Analytic floating-point operation count of a full forward pass.
pub fn flops(cfg: &SsmConfig, len: usize, lora_rank: usize) -> u64 {
    let (l, d, c, n, v) = (len as u64, cfg.d_model as u64, cfg.channels as u64, cfg.d_state as u64, cfg.vocab as u64);
    let r = lora_rank as u64;
    let proj = 2 * 2 * l * d * c + 2 * (2 * l * d * r + 2 * l * r * c);
    let scan = 5 * l * c * n;
    let norms = 9 * l * d;
    cfg.num_layers as u64 * (proj + scan + norms) + 2 * l * d * v + l * v
}
