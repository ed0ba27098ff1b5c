//! Policy evaluation, the exhaustive utility oracle, ablation variants and
//! latency profiling.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::attention::{self, AttentionConfig};
use crate::expert::{ExpertKind, SsmConfig};
use crate::metrics::{self, F1};
use crate::moe::{router_rows, SeqRecord};
use crate::objective::{LossWeights, RouterView};
use crate::rng::SeededRng;
use crate::router::{hard_select, threshold_route, utility_gain, RouterInput, RouterMLP, UtilityEstimate};
use crate::tensor::{ops, Eager, Tensor};

/// Largest unit count searched exhaustively by the oracle.
pub const ORACLE_EXHAUSTIVE_UNITS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Learned,
    AlwaysMamba,
    AlwaysT5,
    Oracle,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::AlwaysMamba, Policy::AlwaysT5, Policy::Learned, Policy::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Learned => "learned",
            Policy::AlwaysMamba => "always-mamba",
            Policy::AlwaysT5 => "always-t5",
            Policy::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("policy", format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    NoGate,
    NoSpeedPenalty,
    NoDomainFeature,
    LengthOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoGate,
        AblationVariant::NoSpeedPenalty,
        AblationVariant::NoDomainFeature,
        AblationVariant::LengthOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoGate => "no-gate",
            AblationVariant::NoSpeedPenalty => "no-speed-penalty",
            AblationVariant::NoDomainFeature => "no-domain-feature",
            AblationVariant::LengthOnly => "length-only",
        }
    }

    /// The single config delta of the variant. `None` means the router is
    /// bypassed and every unit goes to Mamba.
    pub fn apply(self, weights: &LossWeights, view: RouterView) -> Option<(LossWeights, RouterView)> {
        match self {
            AblationVariant::Full => Some((*weights, view)),
            AblationVariant::NoGate => None,
            AblationVariant::NoSpeedPenalty => Some((LossWeights { lambda2: 0.0, ..*weights }, view)),
            AblationVariant::NoDomainFeature => Some((*weights, RouterView { domain_feature: false, ..view })),
            AblationVariant::LengthOnly => Some((*weights, RouterView { input: RouterInput::FeaturesOnly, ..view })),
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Wall-clock side of a report. Kept apart so the rest of the report is
/// reproducible bit for bit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub mean_latency_s: f64,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_seq: usize,
    pub n_units: usize,
    /// Means over sequences.
    pub f1: F1,
    pub exact_match: f64,
    pub rouge_l: f64,
    pub rouge_beta: f64,
    pub perplexity: f64,
    pub memory_mb: f64,
    /// Percent of units whose decision matches the oracle.
    pub routing_efficiency: f64,
    /// Unit fractions (Mamba, T5).
    pub utilization: [f64; 2],
    pub mean_ops: f64,
    pub mean_flops: f64,
    #[serde(skip)]
    pub timing: Timing,
}

impl MetricReport {
    pub fn accuracy(&self) -> f64 {
        self.f1.f1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub report: MetricReport,
    /// Chosen expert index per unit, per sequence.
    pub choices: Vec<Vec<usize>>,
}

fn f1_of(r: &SeqRecord, choice: &[usize]) -> Result<f64> {
    Ok(metrics::token_f1(&r.prediction_for(choice), &r.answer)?.f1)
}

/// Per-unit routing that maximizes answer F1, preferring fewer T5 units on
/// ties. Exhaustive up to [`ORACLE_EXHAUSTIVE_UNITS`] units; beyond that
/// each unit independently takes T5 only where T5 is right and Mamba is
/// not.
pub fn oracle_choice(r: &SeqRecord) -> Result<Vec<usize>> {
    let n = r.units.len();
    if n > ORACLE_EXHAUSTIVE_UNITS {
        return Ok(r
            .units
            .iter()
            .map(|u| {
                let right = |k: usize| u.slots.iter().filter(|&&s| r.pred[k][s] == r.answer[s]).count();
                usize::from(right(1) > right(0))
            })
            .collect());
    }
    let mut best = (vec![0; n], f1_of(r, &vec![0; n])?, 0u32);
    for mask in 1u32..(1 << n) {
        let choice: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let f = f1_of(r, &choice)?;
        let t5 = mask.count_ones();
        if f > best.1 || (f == best.1 && t5 < best.2) {
            best = (choice, f, t5);
        }
    }
    Ok(best.0)
}

/// Sequence-level utility gain: F1 of T5's answer minus F1 of Mamba's.
pub fn sequence_utility(r: &SeqRecord, threshold: f64) -> Result<UtilityEstimate> {
    let t5 = f1_of(r, &vec![1; r.units.len()])?;
    let mamba = f1_of(r, &vec![0; r.units.len()])?;
    Ok(utility_gain(t5, mamba, threshold))
}

/// T5 utilization of threshold routing at each `τ`.
pub fn threshold_sweep(records: &[SeqRecord], taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let gains = records.iter().map(|r| sequence_utility(r, 0.0).map(|u| u.gain)).collect::<Result<Vec<_>>>()?;
    Ok(taus
        .iter()
        .map(|&tau| {
            let n = gains.iter().filter(|&&g| threshold_route(UtilityEstimate { gain: g, threshold: tau }) == ExpertKind::T5).count();
            (tau, n as f64 / gains.len().max(1) as f64)
        })
        .collect())
}

/// Per-unit choices of `policy` on every record.
pub fn policy_choices(records: &[SeqRecord], policy: Policy, router: Option<(&RouterMLP, RouterView)>) -> Result<Vec<Vec<usize>>> {
    records
        .iter()
        .map(|r| match policy {
            Policy::AlwaysMamba => Ok(vec![0; r.units.len()]),
            Policy::AlwaysT5 => Ok(vec![1; r.units.len()]),
            Policy::Oracle => oracle_choice(r),
            Policy::Learned => {
                let (mlp, view) = router.ok_or_else(|| Error::contract("the learned policy needs a router"))?;
                let scores = mlp.scores_batch(&router_rows(&r.units, view.input, view.domain_feature)?)?;
                Ok(scores.into_iter().map(|s| hard_select(s).expert.index()).collect())
            }
        })
        .collect()
}

/// Hard-mode metrics of `policy` over cached expert outputs.
///
/// `expert_params` gives parameter counts of (Mamba, T5) and
/// `router_params` is charged only to the learned policy. The oracle
/// must run both experts to decide, so it is charged for both.
pub fn evaluate_policy(
    records: &[SeqRecord],
    policy: Policy,
    router: Option<(&RouterMLP, RouterView)>,
    expert_params: [usize; 2],
) -> Result<PolicyEval> {
    let choices = policy_choices(records, policy, router)?;
    let oracle = if policy == Policy::Oracle { choices.clone() } else { policy_choices(records, Policy::Oracle, None)? };
    let router_params = if policy == Policy::Learned { router.map_or(0, |(m, _)| m.param_count()) } else { 0 };
    report(records, &choices, &oracle, policy == Policy::Oracle, expert_params, router_params)
        .map(|report| PolicyEval { report, choices })
}

/// Metrics for a fixed routing.
pub fn report(
    records: &[SeqRecord],
    choices: &[Vec<usize>],
    oracle: &[Vec<usize>],
    runs_both: bool,
    expert_params: [usize; 2],
    router_params: usize,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::contract("evaluation needs at least one sequence"));
    }
    let n = records.len() as f64;
    let (mut p, mut rc, mut f, mut em, mut rouge) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut nll, mut slots) = (0.0, 0usize);
    let (mut ops_sum, mut flops_sum, mut secs) = (0.0, 0.0, 0.0);
    let (mut units, mut agree) = (0usize, 0usize);
    let mut counts = [0usize; 2];
    let mut used = [runs_both, runs_both];
    for ((r, c), o) in records.iter().zip(choices).zip(oracle) {
        let pred = r.prediction_for(c);
        let s = metrics::token_f1(&pred, &r.answer)?;
        p += s.precision;
        rc += s.recall;
        f += s.f1;
        em += f64::from(u8::from(pred == r.answer));
        rouge += metrics::rouge_l(&pred, &r.answer, 1.0)?.score;
        for lp in r.logprob_for(c) {
            nll -= lp;
            slots += 1;
        }
        let mut ran = [runs_both, runs_both];
        for (&k, &ok) in c.iter().zip(o) {
            counts[k] += 1;
            ran[k] = true;
            agree += usize::from(k == ok);
            ops_sum += if runs_both { (r.unit_ops[0] + r.unit_ops[1]) as f64 } else { r.unit_ops[k] as f64 };
        }
        units += c.len();
        for k in 0..2 {
            if ran[k] {
                flops_sum += r.flops[k] as f64;
                secs += r.seconds[k];
                used[k] = true;
            }
        }
    }
    let params = (0..2).filter(|&k| used[k]).map(|k| expert_params[k]).sum::<usize>() + router_params;
    let timing = Timing {
        total_seconds: secs,
        mean_latency_s: secs / n,
        throughput: if secs > 0.0 { metrics::throughput(records.len(), secs)? } else { 0.0 },
    };
    Ok(MetricReport {
        n_seq: records.len(),
        n_units: units,
        f1: F1 { precision: p / n, recall: rc / n, f1: f / n },
        exact_match: em / n,
        rouge_l: rouge / n,
        rouge_beta: 1.0,
        perplexity: metrics::perplexity(nll / slots.max(1) as f64)?,
        memory_mb: metrics::memory_footprint(params),
        routing_efficiency: metrics::routing_efficiency(agree, units)?,
        utilization: [counts[0] as f64 / units as f64, counts[1] as f64 / units as f64],
        mean_ops: ops_sum / n,
        mean_flops: flops_sum / n,
        timing,
    })
}

pub const REPORT_CSV_HEADER: &str =
    "label,n_seq,n_units,f1,precision,recall,exact_match,rouge_l,perplexity,memory_mb,routing_efficiency,util_mamba,util_t5,mean_ops,mean_flops";

pub fn report_csv_row(label: &str, r: &MetricReport) -> String {
    format!(
        "{label},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.n_seq,
        r.n_units,
        r.f1.f1,
        r.f1.precision,
        r.f1.recall,
        r.exact_match,
        r.rouge_l,
        r.perplexity,
        r.memory_mb,
        r.routing_efficiency,
        r.utilization[0],
        r.utilization[1],
        r.mean_ops,
        r.mean_flops
    )
}

/// What `latency_profile` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProfileTarget {
    /// Scaled dot-product attention over all heads: `softmax(QKᵀ/√d)·V`.
    AttentionKernel { d_model: usize, num_heads: usize },
    /// The diagonal recurrence over `channels × d_state` modes.
    ScanKernel { channels: usize, d_state: usize },
}

impl ProfileTarget {
    pub fn name(&self) -> &'static str {
        match self {
            ProfileTarget::AttentionKernel { .. } => "attention",
            ProfileTarget::ScanKernel { .. } => "ssm",
        }
    }

    /// One-layer abstract op count.
    pub fn abstract_ops(&self, len: usize) -> u64 {
        match *self {
            ProfileTarget::AttentionKernel { d_model, num_heads } => {
                AttentionConfig { d_model, num_heads, num_layers: 1, ..Default::default() }.abstract_ops(len)
            }
            ProfileTarget::ScanKernel { channels, d_state } => {
                SsmConfig { channels, d_state, num_layers: 1, ..Default::default() }.abstract_ops(len)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub len: usize,
    pub median_seconds: f64,
    pub abstract_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub target: ProfileTarget,
    pub rows: Vec<ProfileRow>,
    /// Least-squares slope of log median seconds against log length.
    pub slope: f64,
}

/// Median-of-`trials` wall clock per length after `warmup` untimed runs.
/// Inputs are fixed random draws from `seed`, built outside the timed
/// region.
pub fn latency_profile(target: ProfileTarget, lengths: &[usize], trials: usize, warmup: usize, seed: u64) -> Result<LatencyProfile> {
    if lengths.len() < 3 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("lengths", "need at least three strictly ascending lengths"));
    }
    if trials == 0 {
        return Err(Error::config("trials", "must be positive"));
    }
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    for &len in lengths {
        let mut run: Box<dyn FnMut() -> Result<()>> = match target {
            ProfileTarget::AttentionKernel { d_model, num_heads } => {
                if num_heads == 0 || d_model % num_heads != 0 {
                    return Err(Error::config("num_heads", "must divide d_model"));
                }
                let q = rng.normal_tensor(&[len, d_model], 1.0);
                let k = rng.normal_tensor(&[len, d_model], 1.0);
                let v = rng.normal_tensor(&[len, d_model], 1.0);
                Box::new(move || attention::multi_head(&mut Eager, &q, &k, &v, num_heads, d_model / num_heads).map(drop))
            }
            ProfileTarget::ScanKernel { channels, d_state } => {
                let u = rng.normal_tensor(&[len, channels], 1.0);
                let a = rng.uniform_tensor(&[channels, d_state], 0.5, 0.99);
                let b = rng.normal_tensor(&[channels, d_state], 0.1);
                let c = rng.normal_tensor(&[channels, d_state], 0.25);
                Box::new(move || ops::ssm_scan(&u, &a, &b, &c, false).map(drop))
            }
        };
        for _ in 0..warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t = Instant::now();
            run()?;
            times.push(t.elapsed().as_secs_f64());
        }
        rows.push(ProfileRow { len, median_seconds: metrics::median(&mut times), abstract_ops: target.abstract_ops(len) });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_seconds.max(1e-12)).collect();
    let slope = metrics::log_log_slope(&xs, &ys)?;
    Ok(LatencyProfile { target, rows, slope })
}

/// Median seconds of a full forward pass of an expert at each length,
/// with the slope. Informational: at desk-scale widths the linear
/// projections still dominate attention's quadratic term.
pub fn expert_latency(
    expert: &crate::expert::Expert,
    adaptation: &crate::expert::EmbeddingAdaptation,
    lengths: &[usize],
    trials: usize,
    seed: u64,
) -> Result<(Vec<ProfileRow>, f64)> {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    for &len in lengths {
        let tokens: Vec<usize> = (0..len).map(|_| rng.int_range(0, adaptation.vocab() - 1)).collect();
        let x: Tensor = adaptation.embed(&tokens, 0, 0)?;
        expert.forward_embedded(x.clone())?;
        let mut times = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t = Instant::now();
            expert.forward_embedded(x.clone())?;
            times.push(t.elapsed().as_secs_f64());
        }
        rows.push(ProfileRow { len, median_seconds: metrics::median(&mut times), abstract_ops: expert.abstract_ops(len) });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_seconds.max(1e-12)).collect();
    let slope = metrics::log_log_slope(&xs, &ys)?;
    Ok((rows, slope))
}
