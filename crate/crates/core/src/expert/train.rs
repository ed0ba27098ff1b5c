//! Expert customization: base training from random init, then a short
//! LoRA-only phase, after which the expert is frozen.

use serde::{Deserialize, Serialize};

use super::lora::Role;
use super::{attention, ssm, EmbeddingAdaptation, Expert, SeqTargets};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

/// One supervised training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub tokens: Vec<usize>,
    /// Absolute position of `tokens[0]` in the original sequence.
    pub start: usize,
    pub domain: usize,
    pub targets: SeqTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lora_rank: usize,
    pub lora_steps: usize,
    pub lora_lr: f64,
    /// Next-token weight for the attention expert's objective.
    pub lm_weight: f64,
    /// Transition regularizer weight for the state-space expert.
    pub stability_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for ExpertTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 16,
            lr: 1e-3,
            lora_rank: 8,
            lora_steps: 60,
            lora_lr: 1e-3,
            lm_weight: 0.1,
            stability_weight: 0.01,
            clip: 5.0,
        }
    }
}

/// Per-step mean batch loss of each phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub base: Vec<f64>,
    pub lora: Vec<f64>,
}

/// Trains `expert` on `items` and freezes it.
pub fn customize(expert: &mut Expert, adaptation: &EmbeddingAdaptation, items: &[TrainItem], cfg: &ExpertTrainConfig, rng: &mut SeededRng) -> Result<TrainHistory> {
    if expert.frozen() {
        return Err(Error::Frozen(format!("{} expert", expert.kind().name())));
    }
    if items.is_empty() {
        return Err(Error::contract("expert training needs at least one item"));
    }
    let mut history = TrainHistory::default();
    let mut order = Sampler::new(items.len(), rng.fork(1));
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    for _ in 0..cfg.steps {
        let batch = order.next_batch(cfg.batch);
        history.base.push(train_step(expert, adaptation, items, &batch, Role::Base, cfg, &mut opt)?);
    }
    if cfg.lora_rank > 0 && cfg.lora_steps > 0 {
        let mut init = rng.fork(2);
        match expert {
            Expert::T5(p) => p.attach_lora(cfg.lora_rank, &mut init)?,
            Expert::Mamba(p) => p.attach_lora(cfg.lora_rank, &mut init)?,
        }
        let mut opt = Adam::new(AdamConfig { lr: cfg.lora_lr, ..Default::default() });
        for _ in 0..cfg.lora_steps {
            let batch = order.next_batch(cfg.batch);
            history.lora.push(train_step(expert, adaptation, items, &batch, Role::Adapter, cfg, &mut opt)?);
        }
    }
    expert.freeze();
    Ok(history)
}

/// One optimizer step on the parameters of `role`; returns the batch loss.
pub fn train_step(
    expert: &mut Expert,
    adaptation: &EmbeddingAdaptation,
    items: &[TrainItem],
    batch: &[usize],
    role: Role,
    cfg: &ExpertTrainConfig,
    opt: &mut Adam,
) -> Result<f64> {
    if expert.frozen() {
        return Err(Error::Frozen(format!("{} expert", expert.kind().name())));
    }
    let mut tape = Tape::new();
    let weight = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    let grads = match expert {
        Expert::T5(p) => {
            let bound = p.weights.map(&mut |r, t| tape.leaf(t.clone(), r == role));
            let scaling = p.lora_scaling();
            for &i in batch {
                let item = &items[i];
                let x = tape.constant(adaptation.embed(&item.tokens, item.start, item.domain)?);
                let (_, logits) = attention::forward(&mut tape, &p.cfg, &bound, x, scaling)?;
                if let Some(l) = sequence_loss(&mut tape, logits, &item.targets, cfg.lm_weight, weight)? {
                    total = Some(accumulate(&mut tape, total, l)?);
                }
            }
            let total = total.ok_or_else(|| Error::contract("batch carries no targets"))?;
            tape.backward(total)?;
            let mut grads = Vec::new();
            bound.visit(&mut |r, v| {
                if r == role {
                    grads.push(grad_or_zero(&tape, *v));
                }
            });
            (tape.value(total).item(), grads)
        }
        Expert::Mamba(p) => {
            let bound = p.weights.map(&mut |r, t| tape.leaf(t.clone(), r == role));
            let scaling = p.lora_scaling();
            for &i in batch {
                let item = &items[i];
                let x = tape.constant(adaptation.embed(&item.tokens, item.start, item.domain)?);
                let (_, logits) = ssm::forward(&mut tape, &bound, x, scaling)?;
                if let Some(l) = sequence_loss(&mut tape, logits, &item.targets, 0.0, weight)? {
                    total = Some(accumulate(&mut tape, total, l)?);
                }
            }
            let mut total = total.ok_or_else(|| Error::contract("batch carries no targets"))?;
            if cfg.stability_weight > 0.0 && role == Role::Base {
                for l in &bound.layers {
                    let shifted = tape.add_scalar(l.a, -1.0)?;
                    let sq = tape.mul(shifted, shifted)?;
                    let s = tape.sum(sq)?;
                    let s = tape.scale(s, cfg.stability_weight)?;
                    total = tape.add(total, s)?;
                }
            }
            tape.backward(total)?;
            let mut grads = Vec::new();
            bound.visit(&mut |r, v| {
                if r == role {
                    grads.push(grad_or_zero(&tape, *v));
                }
            });
            (tape.value(total).item(), grads)
        }
    };
    let (loss, mut grads) = grads;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "expert loss" });
    }
    clip_global(&mut grads, cfg.clip);
    opt.begin_step();
    let mut slot = 0;
    let mut result = Ok(());
    let mut apply = |r: Role, t: &mut Tensor| {
        if r == role && result.is_ok() {
            result = opt.update(slot, t, &grads[slot]);
            slot += 1;
        }
    };
    match expert {
        Expert::T5(p) => p.weights.visit_mut(&mut apply),
        Expert::Mamba(p) => {
            p.weights.visit_mut(&mut apply);
            p.project_stable();
        }
    }
    result?;
    Ok(loss)
}

fn sequence_loss(tape: &mut Tape, logits: Var, targets: &SeqTargets, lm_weight: f64, weight: f64) -> Result<Option<Var>> {
    let mut out = None;
    if !targets.answer.is_empty() {
        out = Some(tape.cross_entropy(logits, &targets.answer, weight / targets.answer.len() as f64)?);
    }
    if lm_weight > 0.0 && !targets.lm.is_empty() {
        let lm = tape.cross_entropy(logits, &targets.lm, weight * lm_weight / targets.lm.len() as f64)?;
        out = Some(accumulate(tape, out, lm)?);
    }
    Ok(out)
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        Some(a) => tape.add(a, v),
        None => Ok(v),
    }
}

fn grad_or_zero(tape: &Tape, v: Var) -> Tensor {
    tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
}

fn clip_global(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Epoch-style sampling without replacement, reshuffled each pass.
pub(crate) struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Sampler {
    pub(crate) fn new(n: usize, mut rng: SeededRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
