//! The two frozen experts and their shared input embedding.
//!
//! [`ExpertKind::Mamba`] is the linear-cost state-space expert and
//! [`ExpertKind::T5`] the quadratic-cost attention expert. Both read the
//! same [`EmbeddingAdaptation`] and emit logits over the same byte
//! vocabulary, so the router can swap them per unit without touching the
//! output space.

pub mod attention;
pub mod embedding;
pub mod lora;
pub mod ssm;
pub mod train;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use attention::{AttentionConfig, AttentionExpertParams};
pub use embedding::{adapt_embedding, EmbeddingAdaptation};
pub use lora::{lora_apply, LoRAAdapter};
pub use ssm::{SSMExpertParams, SsmConfig};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{ops, Eager, Tensor};

/// Expert index as used by gate scores: Mamba is 0, T5 is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertKind {
    Mamba = 0,
    T5 = 1,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 2] = [ExpertKind::Mamba, ExpertKind::T5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ExpertKind::Mamba),
            1 => Ok(ExpertKind::T5),
            _ => Err(Error::Index { what: "expert", index: i, len: 2 }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Mamba => "mamba",
            ExpertKind::T5 => "t5",
        }
    }
}

/// Either expert behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expert {
    T5(AttentionExpertParams),
    Mamba(SSMExpertParams),
}

impl Expert {
    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::T5(_) => ExpertKind::T5,
            Expert::Mamba(_) => ExpertKind::Mamba,
        }
    }

    pub fn frozen(&self) -> bool {
        match self {
            Expert::T5(p) => p.frozen,
            Expert::Mamba(p) => p.frozen,
        }
    }

    pub fn freeze(&mut self) {
        match self {
            Expert::T5(p) => p.frozen = true,
            Expert::Mamba(p) => p.frozen = true,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Expert::T5(p) => p.cfg.d_model,
            Expert::Mamba(p) => p.cfg.d_model,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Expert::T5(p) => p.cfg.vocab,
            Expert::Mamba(p) => p.cfg.vocab,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Expert::T5(p) => p.param_count(),
            Expert::Mamba(p) => p.param_count(),
        }
    }

    /// Abstract op count for a length-`len` input: `∝ L²` for attention,
    /// `∝ L` for the scan.
    pub fn abstract_ops(&self, len: usize) -> u64 {
        match self {
            Expert::T5(p) => p.cfg.abstract_ops(len),
            Expert::Mamba(p) => p.cfg.abstract_ops(len),
        }
    }

    /// Analytic floating-point cost of one forward pass.
    pub fn flops(&self, len: usize) -> u64 {
        match self {
            Expert::T5(p) => attention::flops(&p.cfg, len, p.lora_rank()),
            Expert::Mamba(p) => ssm::flops(&p.cfg, len, p.lora_rank()),
        }
    }

    /// Hidden states and logits for an already embedded input `x: L×d`.
    pub fn forward_embedded(&self, x: Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            Expert::T5(p) => attention::forward(&mut Eager, &p.cfg, &p.weights, x, p.lora_scaling()),
            Expert::Mamba(p) => ssm::forward(&mut Eager, &p.weights, x, p.lora_scaling()),
        }
    }
}

impl Expert {
    /// Header dims are the config fields, then LoRA rank and frozen flag;
    /// the only scalar is the LoRA alpha.
    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Expert::T5(p) => {
                let c = &p.cfg;
                let dims = [c.d_model, c.vocab, c.num_layers, c.num_heads, c.d_ff, p.lora_rank(), p.frozen as usize];
                let mut ck = Checkpoint::new(CheckpointKind::T5, dims.map(|d| d as u64).to_vec(), vec![c.lora_alpha]);
                p.weights.visit(&mut |_, t| ck.blocks.push(t.clone()));
                ck
            }
            Expert::Mamba(p) => {
                let c = &p.cfg;
                let dims = [c.d_model, c.vocab, c.num_layers, c.channels, c.d_state, p.lora_rank(), p.frozen as usize];
                let mut ck = Checkpoint::new(CheckpointKind::Mamba, dims.map(|d| d as u64).to_vec(), vec![c.lora_alpha]);
                p.weights.visit(&mut |_, t| ck.blocks.push(t.clone()));
                ck
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let d = |i| ck.dim(i);
        let mut scratch = SeededRng::new(0);
        let (rank, frozen) = (d(5)?, d(6)? != 0);
        let mut expert = match ck.kind {
            CheckpointKind::T5 => {
                let cfg = AttentionConfig {
                    d_model: d(0)?,
                    vocab: d(1)?,
                    num_layers: d(2)?,
                    num_heads: d(3)?,
                    d_ff: d(4)?,
                    lora_alpha: ck.scalar(0)?,
                };
                let mut p = AttentionExpertParams::init(cfg, &mut scratch)?;
                if rank > 0 {
                    p.attach_lora(rank, &mut scratch)?;
                }
                fill_slots(ck, &mut p.weights, |w, f| w.visit_mut(&mut |r, t| f(r, t)))?;
                Expert::T5(p)
            }
            CheckpointKind::Mamba => {
                let cfg = SsmConfig {
                    d_model: d(0)?,
                    vocab: d(1)?,
                    num_layers: d(2)?,
                    channels: d(3)?,
                    d_state: d(4)?,
                    lora_alpha: ck.scalar(0)?,
                };
                let mut p = SSMExpertParams::init(cfg, &mut scratch)?;
                if rank > 0 {
                    p.attach_lora(rank, &mut scratch)?;
                }
                fill_slots(ck, &mut p.weights, |w, f| w.visit_mut(&mut |r, t| f(r, t)))?;
                p.check_stability()?;
                Expert::Mamba(p)
            }
            other => return Err(Error::Checkpoint(format!("{other:?} is not an expert checkpoint"))),
        };
        if frozen {
            expert.freeze();
        }
        Ok(expert)
    }
}

fn fill_slots<W>(ck: &Checkpoint, weights: &mut W, visit: impl FnOnce(&mut W, &mut dyn FnMut(lora::Role, &mut Tensor))) -> Result<()> {
    let mut blocks = ck.blocks.iter();
    let mut err = None;
    visit(weights, &mut |_, t| {
        if err.is_some() {
            return;
        }
        match blocks.next() {
            Some(b) if b.shape() == t.shape() => t.data_mut().copy_from_slice(b.data()),
            Some(b) => err = Some(Error::Checkpoint(format!("block shape {:?} does not match {:?}", b.shape(), t.shape()))),
            None => err = Some(Error::Checkpoint("too few parameter blocks".into())),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if blocks.next().is_some() {
        return Err(Error::Checkpoint("too many parameter blocks".into()));
    }
    Ok(())
}

/// Everything one expert pass produces.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    pub kind: ExpertKind,
    /// `L × d_model`
    pub hidden: Tensor,
    /// `L × vocab`
    pub logits: Tensor,
    pub seconds: f64,
    pub abstract_ops: u64,
    pub flops: u64,
}

impl ExpertOutput {
    /// Greedy token at each listed row.
    pub fn argmax_rows(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| argmax(self.logits.row(r))).collect()
    }
}

/// Embeds `tokens` (first token at absolute position `start`) under
/// `domain`, runs every layer and projects to vocabulary logits.
pub fn expert_forward(expert: &Expert, tokens: &[usize], start: usize, domain: usize, adaptation: &EmbeddingAdaptation) -> Result<ExpertOutput> {
    if tokens.is_empty() {
        return Err(Error::contract("expert_forward needs a nonempty sequence"));
    }
    if adaptation.d_model() != expert.d_model() {
        return Err(Error::Shape {
            op: "expert_forward",
            left: vec![adaptation.d_model()],
            right: vec![expert.d_model()],
        });
    }
    let clock = Instant::now();
    let x = adaptation.embed(tokens, start, domain)?;
    let (hidden, logits) = expert.forward_embedded(x)?;
    let seconds = clock.elapsed().as_secs_f64();
    Ok(ExpertOutput {
        kind: expert.kind(),
        hidden,
        logits,
        seconds,
        abstract_ops: expert.abstract_ops(tokens.len()),
        flops: expert.flops(tokens.len()),
    })
}

/// Supervision for one training sequence, as `(row, token)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeqTargets {
    /// Answer positions scored by the task loss.
    pub answer: Vec<(usize, usize)>,
    /// Next-token targets over the input.
    pub lm: Vec<(usize, usize)>,
}

fn mean_ce(logits: &Tensor, targets: &[(usize, usize)]) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    ops::cross_entropy_logits(logits, targets, 1.0 / targets.len() as f64)
}

/// Attention-expert objective: `L_CE + λ·L_LM`, each a mean over its
/// target positions.
pub fn loss_t5(logits: &Tensor, targets: &SeqTargets, lm_weight: f64) -> Result<f64> {
    let ce = mean_ce(logits, &targets.answer)?;
    if lm_weight == 0.0 {
        return Ok(ce);
    }
    Ok(ce + lm_weight * mean_ce(logits, &targets.lm)?)
}

/// State-space-expert objective: `L_CE + β·Σ(a − 1)²`.
pub fn loss_mamba(logits: &Tensor, targets: &SeqTargets, params: &SSMExpertParams, stability_weight: f64) -> Result<f64> {
    let ce = mean_ce(logits, &targets.answer)?;
    Ok(ce + stability_weight * params.stability_penalty())
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
