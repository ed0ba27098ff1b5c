//! The routed layer: two frozen experts behind one router.
//!
//! A *routing unit* is either a whole sequence (one decision, mean-pooled
//! embedding) or a single answer slot (one decision per generated token,
//! that slot's own embedding). Both carry the sequence-level `(ℓ, d)`.
//!
//! Abstract op accounting in hard mode charges each unit to exactly one
//! expert. A sequence unit costs one full pass of its expert. A token unit
//! costs that expert's per-row share of the pass, `ops(L) / L`, which is
//! exact because both counters are multiples of `L`.

use serde::{Deserialize, Serialize};

use crate::data::{length_feature, Encoded};
use crate::error::{Error, Result};
use crate::expert::{expert_forward, Expert, ExpertKind, ExpertOutput, EmbeddingAdaptation};
use crate::router::{hard_select, router_row, GateScores, RouterFeatures, RouterInput, RouterMLP, RoutingDecision};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Token,
    #[default]
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    Soft,
    #[default]
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub granularity: Granularity,
    pub mode: MixMode,
    /// `(p_mamba, p_t5)`.
    pub fractions: (f64, f64),
}

impl MoEConfig {
    pub fn new(granularity: Granularity, mode: MixMode, fractions: (f64, f64)) -> Result<Self> {
        let c = Self { granularity, mode, fractions };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, t) = self.fractions;
        if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&t) || (m + t - 1.0).abs() > 1e-12 {
            return Err(Error::config("fractions", format!("({m}, {t}) is not a distribution")));
        }
        Ok(())
    }
}

/// `p_mamba·N + p_t5·N²` unit ops.
pub fn expected_cost(n: usize, cfg: &MoEConfig) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("expected_cost needs N ≥ 1"));
    }
    cfg.validate()?;
    let n = n as f64;
    Ok(cfg.fractions.0 * n + cfg.fractions.1 * n * n)
}

/// Both frozen experts and the embedding they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub adaptation: EmbeddingAdaptation,
    pub mamba: Expert,
    pub t5: Expert,
}

impl ExpertBank {
    pub fn new(adaptation: EmbeddingAdaptation, mamba: Expert, t5: Expert) -> Result<Self> {
        if mamba.kind() != ExpertKind::Mamba || t5.kind() != ExpertKind::T5 {
            return Err(Error::contract("expert bank slots hold the wrong expert kinds"));
        }
        if mamba.d_model() != t5.d_model() || mamba.d_model() != adaptation.d_model() {
            return Err(Error::contract("experts and embedding must share d_model"));
        }
        if mamba.vocab() != t5.vocab() {
            return Err(Error::contract("experts must share one output vocabulary"));
        }
        Ok(Self { adaptation, mamba, t5 })
    }

    pub fn get(&self, kind: ExpertKind) -> &Expert {
        match kind {
            ExpertKind::Mamba => &self.mamba,
            ExpertKind::T5 => &self.t5,
        }
    }

    pub fn d_model(&self) -> usize {
        self.adaptation.d_model()
    }

    pub fn forward(&self, kind: ExpertKind, enc: &Encoded) -> Result<ExpertOutput> {
        expert_forward(self.get(kind), &enc.tokens, 0, enc.domain, &self.adaptation)
    }
}

/// How a sequence is cut into routing units and what the router sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteContext {
    pub granularity: Granularity,
    pub input: RouterInput,
    /// When false the domain feature is forced to 0.
    pub domain_feature: bool,
    pub l_max: usize,
}

impl Default for RouteContext {
    fn default() -> Self {
        Self { granularity: Granularity::Sequence, input: RouterInput::Concat, domain_feature: true, l_max: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub repr: Vec<f64>,
    pub features: RouterFeatures,
    /// Answer slots (indices into `Encoded::answer`) this unit decides.
    pub slots: Vec<usize>,
}

pub fn features(enc: &Encoded, l_max: usize) -> Result<RouterFeatures> {
    RouterFeatures::new(length_feature(enc.len(), l_max), enc.domain.min(1) as f64)
}

pub fn units(adaptation: &EmbeddingAdaptation, enc: &Encoded, ctx: &RouteContext) -> Result<Vec<Unit>> {
    if enc.answer.is_empty() {
        return Err(Error::contract("sequence has no answer slots to route"));
    }
    let f = features(enc, ctx.l_max)?;
    match ctx.granularity {
        Granularity::Sequence => Ok(vec![Unit {
            repr: adaptation.mean_embedding(&enc.tokens, 0, enc.domain)?,
            features: f,
            slots: (0..enc.answer.len()).collect(),
        }]),
        Granularity::Token => enc
            .answer_rows
            .iter()
            .enumerate()
            .map(|(j, &row)| {
                let e = crate::expert::adapt_embedding(adaptation, enc.tokens[row], row, enc.domain)?;
                Ok(Unit { repr: e.into_data(), features: f, slots: vec![j] })
            })
            .collect(),
    }
}

/// Router input matrix, one row per unit. Without `domain_feature` the
/// domain indicator is forced to 0.
pub fn router_rows(units: &[Unit], input: RouterInput, domain_feature: bool) -> Result<Tensor> {
    let rows = units
        .iter()
        .map(|u| {
            let mut f = u.features;
            if !domain_feature {
                f.domain = 0.0;
            }
            router_row(&u.repr, f, input)
        })
        .collect::<Result<Vec<_>>>()?;
    let width = rows.first().map_or(0, |r| r.len());
    let data: Vec<f64> = rows.into_iter().flat_map(|r| r.into_data()).collect();
    Tensor::matrix(units.len(), width, data)
}

/// Abstract ops charged to one unit routed to `kind` in a length-`len`
/// sequence.
pub fn unit_ops(expert: &Expert, len: usize, granularity: Granularity) -> u64 {
    let full = expert.abstract_ops(len);
    match granularity {
        Granularity::Sequence => full,
        Granularity::Token => full / len as u64,
    }
}

/// Probability rows of the answer slots under one expert's logits.
pub fn slot_probs(out: &ExpertOutput, enc: &Encoded) -> Result<Tensor> {
    let rows = ops::gather_rows(&out.logits, &enc.answer_rows)?;
    ops::softmax_rows(&rows)
}

#[derive(Debug, Clone)]
pub struct SoftOutput {
    /// Blended next-token distributions at the answer slots, `k × vocab`.
    pub probs: Tensor,
    pub scores: Vec<GateScores>,
    /// Unit index of every slot.
    pub unit_of_slot: Vec<usize>,
}

/// Convex combination `Σ_k G_k·p_k` of the experts' slot distributions,
/// with `scores[unit_of_slot[i]]` weighting row `i`.
pub fn blend(p_mamba: &Tensor, p_t5: &Tensor, scores: &[GateScores], unit_of_slot: &[usize]) -> Result<Tensor> {
    if p_mamba.shape() != p_t5.shape() || p_mamba.rows() != unit_of_slot.len() {
        return Err(Error::Shape { op: "blend", left: p_mamba.shape().to_vec(), right: p_t5.shape().to_vec() });
    }
    let mut out = Tensor::zeros(p_mamba.shape());
    for (i, &u) in unit_of_slot.iter().enumerate() {
        let g = scores.get(u).ok_or(Error::Index { what: "unit", index: u, len: scores.len() })?;
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(p_mamba.row(i)).zip(p_t5.row(i)) {
            *o = g.mamba() * a + g.t5() * b;
        }
    }
    Ok(out)
}

fn unit_of_slot(units: &[Unit], n_slots: usize) -> Vec<usize> {
    let mut out = vec![0; n_slots];
    for (u, unit) in units.iter().enumerate() {
        for &s in &unit.slots {
            out[s] = u;
        }
    }
    out
}

/// Training-mode pass: both experts run, outputs blended by the scores.
pub fn moe_forward_soft(bank: &ExpertBank, router: &RouterMLP, enc: &Encoded, ctx: &RouteContext) -> Result<SoftOutput> {
    let units = units(&bank.adaptation, enc, ctx)?;
    let scores = router.scores_batch(&router_rows(&units, router.input, ctx.domain_feature)?)?;
    let pm = slot_probs(&bank.forward(ExpertKind::Mamba, enc)?, enc)?;
    let pt = slot_probs(&bank.forward(ExpertKind::T5, enc)?, enc)?;
    let uos = unit_of_slot(&units, enc.answer.len());
    let probs = blend(&pm, &pt, &scores, &uos)?;
    Ok(SoftOutput { probs, scores, unit_of_slot: uos })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardOutput {
    pub decisions: Vec<RoutingDecision>,
    /// Greedy token at each answer slot from the expert that owns it.
    pub prediction: Vec<usize>,
    /// Log-probability of the reference token at each slot.
    pub target_logprob: Vec<f64>,
    /// Abstract ops charged per unit.
    pub unit_ops: Vec<u64>,
    /// Per expert (Mamba, T5): abstract ops, analytic flops, seconds and
    /// whether it ran at all.
    pub ops: [u64; 2],
    pub flops: [u64; 2],
    pub seconds: [f64; 2],
    pub executed: [bool; 2],
}

/// Inference pass: route every unit, then run only the experts that own at
/// least one unit.
pub fn moe_forward_hard(bank: &ExpertBank, router: &RouterMLP, enc: &Encoded, ctx: &RouteContext) -> Result<HardOutput> {
    let units = units(&bank.adaptation, enc, ctx)?;
    let scores = router.scores_batch(&router_rows(&units, router.input, ctx.domain_feature)?)?;
    let decisions: Vec<RoutingDecision> = scores.into_iter().map(hard_select).collect();
    execute(bank, enc, &units, decisions, ctx.granularity)
}

/// Runs a fixed routing.
pub fn execute(bank: &ExpertBank, enc: &Encoded, units: &[Unit], decisions: Vec<RoutingDecision>, granularity: Granularity) -> Result<HardOutput> {
    if decisions.len() != units.len() {
        return Err(Error::contract("one decision per unit required"));
    }
    let mut outputs: [Option<ExpertOutput>; 2] = [None, None];
    for d in &decisions {
        let k = d.expert.index();
        if outputs[k].is_none() {
            outputs[k] = Some(bank.forward(d.expert, enc)?);
        }
    }
    let k = enc.answer.len();
    let mut out = HardOutput {
        prediction: vec![0; k],
        target_logprob: vec![0.0; k],
        unit_ops: Vec::with_capacity(units.len()),
        ops: [0; 2],
        flops: [0; 2],
        seconds: [0.0; 2],
        executed: [outputs[0].is_some(), outputs[1].is_some()],
        decisions,
    };
    for (unit, d) in units.iter().zip(&out.decisions) {
        let o = outputs[d.expert.index()].as_ref().expect("selected expert ran");
        for &s in &unit.slots {
            let row = o.logits.row(enc.answer_rows[s]);
            out.prediction[s] = crate::expert::argmax(row);
            out.target_logprob[s] = log_softmax_at(row, enc.answer[s]);
        }
        let c = unit_ops(bank.get(d.expert), enc.len(), granularity);
        out.unit_ops.push(c);
        out.ops[d.expert.index()] += c;
    }
    for (i, o) in outputs.iter().enumerate() {
        if let Some(o) = o {
            out.flops[i] = o.flops;
            out.seconds[i] = o.seconds;
        }
    }
    Ok(out)
}

pub(crate) fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[target] - lse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    /// Units per expert, (Mamba, T5).
    pub counts: [usize; 2],
    pub fractions: [f64; 2],
    /// Mean length of the sequences whose units went to each expert; zero
    /// for an unused expert.
    pub mean_len: [f64; 2],
}

/// Counts over `(expert, sequence length)` per unit.
pub fn utilization_stats(decisions: &[(ExpertKind, usize)]) -> Result<UtilizationStats> {
    if decisions.is_empty() {
        return Err(Error::contract("utilization over an empty batch"));
    }
    let mut counts = [0usize; 2];
    let mut lens = [0f64; 2];
    for &(k, len) in decisions {
        counts[k.index()] += 1;
        lens[k.index()] += len as f64;
    }
    let n = decisions.len() as f64;
    let mean = |i: usize| if counts[i] == 0 { 0.0 } else { lens[i] / counts[i] as f64 };
    Ok(UtilizationStats {
        counts,
        fractions: [counts[0] as f64 / n, counts[1] as f64 / n],
        mean_len: [mean(0), mean(1)],
    })
}

/// Everything the router objective and policy evaluation need from one
/// sequence, with both experts already run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqRecord {
    pub len: usize,
    pub domain: usize,
    pub units: Vec<Unit>,
    pub answer: Vec<usize>,
    /// Per expert: greedy token per slot.
    pub pred: [Vec<usize>; 2],
    /// Per expert: probability of the reference token per slot.
    pub target_prob: [Vec<f64>; 2],
    /// Per expert: log-probability of the reference token per slot.
    pub target_logprob: [Vec<f64>; 2],
    /// Per expert: abstract ops charged per unit.
    pub unit_ops: [u64; 2],
    pub flops: [u64; 2],
    pub seconds: [f64; 2],
}

impl SeqRecord {
    pub fn unit_of_slot(&self) -> Vec<usize> {
        unit_of_slot(&self.units, self.answer.len())
    }

    /// Answer assembled from the expert index chosen for each unit.
    pub fn prediction_for(&self, choice: &[usize]) -> Vec<usize> {
        let mut out = vec![0; self.answer.len()];
        for (unit, &k) in self.units.iter().zip(choice) {
            for &s in &unit.slots {
                out[s] = self.pred[k][s];
            }
        }
        out
    }

    /// Per-slot log-probability of the reference under the chosen experts.
    pub fn logprob_for(&self, choice: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.answer.len()];
        for (unit, &k) in self.units.iter().zip(choice) {
            for &s in &unit.slots {
                out[s] = self.target_logprob[k][s];
            }
        }
        out
    }
}

pub fn record(bank: &ExpertBank, enc: &Encoded, ctx: &RouteContext) -> Result<SeqRecord> {
    let units = units(&bank.adaptation, enc, ctx)?;
    let mut pred: [Vec<usize>; 2] = Default::default();
    let mut prob: [Vec<f64>; 2] = Default::default();
    let mut logp: [Vec<f64>; 2] = Default::default();
    let mut flops = [0; 2];
    let mut seconds = [0.0; 2];
    let mut uops = [0; 2];
    for kind in ExpertKind::ALL {
        let i = kind.index();
        let o = bank.forward(kind, enc)?;
        for (&row, &t) in enc.answer_rows.iter().zip(&enc.answer) {
            let r = o.logits.row(row);
            let lp = log_softmax_at(r, t);
            pred[i].push(crate::expert::argmax(r));
            logp[i].push(lp);
            prob[i].push(lp.exp());
        }
        flops[i] = o.flops;
        seconds[i] = o.seconds;
        uops[i] = unit_ops(bank.get(kind), enc.len(), ctx.granularity);
    }
    Ok(SeqRecord {
        len: enc.len(),
        domain: enc.domain,
        units,
        answer: enc.answer.clone(),
        pred,
        target_prob: prob,
        target_logprob: logp,
        unit_ops: uops,
        flops,
        seconds,
    })
}
