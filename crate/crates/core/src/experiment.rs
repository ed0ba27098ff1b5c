//! End-to-end pipeline: corpus, expert customization, cached expert
//! outputs, router training and policy evaluation.
//!
//! Every random draw descends from `ExperimentConfig::seed` through fixed
//! fork tags, so a config fully determines every artifact.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::{evaluate_policy, AblationVariant, MetricReport, Policy, PolicyEval};
use crate::data::{encode, gen_synthetic, load_jsonl, split_dataset, DatasetSplits, DomainMap, Encoded, QAPair, SyntheticSpec};
use crate::error::{Error, Result};
use crate::expert::train::{customize, ExpertTrainConfig, TrainHistory};
use crate::expert::{AttentionConfig, AttentionExpertParams, EmbeddingAdaptation, Expert, SSMExpertParams, SsmConfig};
use crate::moe::{record, ExpertBank, Granularity, RouteContext, SeqRecord};
use crate::objective::{train_router, LossWeights, RouterTrainConfig, RouterView, TrainState};
use crate::rng::SeededRng;
use crate::router::{RouterInput, RouterMLP};

const TAG_POOL: u64 = 0x9001;
const TAG_EMBED: u64 = 1;
const TAG_MAMBA: u64 = 2;
const TAG_T5: u64 = 3;
const TAG_FIT_MAMBA: u64 = 4;
const TAG_FIT_T5: u64 = 5;
const TAG_ROUTER: u64 = 6;
const TAG_ROUTER_TRAIN: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Synthetic { n: usize, spec: SyntheticSpec },
    Jsonl { path: PathBuf },
}

/// Expert customization schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertSchedule {
    pub t5_steps: usize,
    pub t5_crop: usize,
    pub mamba_steps: usize,
    pub mamba_crop: usize,
    pub batch: usize,
    pub lr: f64,
    pub lora_rank: usize,
    pub lora_steps: usize,
    pub lora_lr: f64,
    /// Size of the separate customization pool drawn for synthetic runs.
    pub pool_size: usize,
    /// Long-regime fraction of that pool.
    pub pool_long_frac: f64,
}

impl Default for ExpertSchedule {
    fn default() -> Self {
        Self {
            t5_steps: 2000,
            t5_crop: 64,
            mamba_steps: 1000,
            mamba_crop: 128,
            batch: 16,
            lr: 1e-3,
            lora_rank: 8,
            lora_steps: 60,
            lora_lr: 1e-3,
            pool_size: 2000,
            pool_long_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: DataSource,
    pub domains: DomainMap,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_state: usize,
    pub hidden: usize,
    pub l_max: usize,
    pub granularity: Granularity,
    pub weights: LossWeights,
    pub router: RouterTrainConfig,
    pub experts: ExpertSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: DataSource::Synthetic { n: 2000, spec: SyntheticSpec::default() },
            domains: DomainMap::default(),
            d_model: 64,
            num_heads: 4,
            d_state: 16,
            hidden: 16,
            l_max: 1024,
            granularity: Granularity::Sequence,
            weights: LossWeights::default(),
            router: RouterTrainConfig::default(),
            experts: ExpertSchedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.router.validate()?;
        self.domains.validate()?;
        if let DataSource::Synthetic { n, spec } = &self.source {
            spec.validate()?;
            if *n < 10 {
                return Err(Error::config("synthetic_n", "need at least 10 sequences for an 80/10/10 split"));
            }
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if self.l_max < 8 {
            return Err(Error::config("l_max", "must be at least 8"));
        }
        self.attention_config().validate()?;
        self.ssm_config().validate()?;
        let e = &self.experts;
        if e.batch == 0 || e.t5_crop == 0 || e.mamba_crop == 0 || !(e.lr > 0.0) || !(e.lora_lr > 0.0) {
            return Err(Error::config("experts", "batch, crops and learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&e.pool_long_frac) || e.pool_size == 0 {
            return Err(Error::config("experts.pool", "pool size must be positive and its long fraction in [0, 1]"));
        }
        Ok(())
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, num_heads: self.num_heads, d_ff: 4 * self.d_model, ..Default::default() }
    }

    pub fn ssm_config(&self) -> SsmConfig {
        SsmConfig { d_model: self.d_model, channels: self.d_model, d_state: self.d_state, ..Default::default() }
    }

    pub fn route_context(&self) -> RouteContext {
        RouteContext { granularity: self.granularity, input: RouterInput::Concat, domain_feature: true, l_max: self.l_max }
    }

    pub fn view(&self) -> RouterView {
        RouterView { input: RouterInput::Concat, domain_feature: true }
    }

    /// Position table length: inputs up to `l_max`, profiling up to 2048.
    pub fn max_positions(&self) -> usize {
        self.l_max.max(2048)
    }

    fn rng(&self) -> SeededRng {
        SeededRng::new(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<QAPair>,
    pub encoded: Vec<Encoded>,
    pub splits: DatasetSplits,
}

impl Corpus {
    pub fn from_pairs(pairs: Vec<QAPair>, cfg: &ExperimentConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("dataset", "the dataset is empty"));
        }
        let encoded = pairs.iter().map(|p| encode(p, &cfg.domains, cfg.l_max)).collect::<Result<Vec<_>>>()?;
        let splits = split_dataset(pairs.len(), cfg.seed)?;
        Ok(Self { pairs, encoded, splits })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&Encoded> {
        idx.iter().map(|&i| &self.encoded[i]).collect()
    }
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let pairs = match &cfg.source {
        DataSource::Synthetic { n, spec } => gen_synthetic(&SyntheticSpec { seed: cfg.seed, ..spec.clone() }, *n)?,
        DataSource::Jsonl { path } => load_jsonl(path, &cfg.domains)?,
    };
    Corpus::from_pairs(pairs, cfg)
}

/// Sequences the experts are customized on. Synthetic runs draw a
/// separate regime-balanced pool so the rare short regime is seen often
/// enough to be learned rather than memorized; JSONL runs use the train
/// split.
pub fn customization_pool(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<Encoded>> {
    match &cfg.source {
        DataSource::Synthetic { spec, .. } => {
            let spec = SyntheticSpec {
                long_frac: cfg.experts.pool_long_frac,
                seed: cfg.rng().fork(TAG_POOL).next_u64(),
                ..spec.clone()
            };
            gen_synthetic(&spec, cfg.experts.pool_size)?
                .iter()
                .map(|p| encode(p, &cfg.domains, cfg.l_max))
                .collect()
        }
        DataSource::Jsonl { .. } => Ok(corpus.subset(&corpus.splits.train).into_iter().cloned().collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHistories {
    pub mamba: TrainHistory,
    pub t5: TrainHistory,
}

pub fn train_experts(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(ExpertBank, ExpertHistories)> {
    cfg.validate()?;
    let root = cfg.rng();
    let n_domains = cfg.domains.0.values().copied().max().map_or(1, |m| m + 1);
    let adaptation = EmbeddingAdaptation::init(crate::data::VOCAB, cfg.d_model, cfg.max_positions(), n_domains, &mut root.fork(TAG_EMBED));
    let mut mamba = Expert::Mamba(SSMExpertParams::init(cfg.ssm_config(), &mut root.fork(TAG_MAMBA))?);
    let mut t5 = Expert::T5(AttentionExpertParams::init(cfg.attention_config(), &mut root.fork(TAG_T5))?);
    let pool = customization_pool(cfg, corpus)?;
    let e = &cfg.experts;
    let base = ExpertTrainConfig {
        steps: 0,
        batch: e.batch,
        lr: e.lr,
        lora_rank: e.lora_rank,
        lora_steps: e.lora_steps,
        lora_lr: e.lora_lr,
        lm_weight: cfg.weights.lm_weight,
        stability_weight: cfg.weights.stability_weight,
        ..Default::default()
    };
    let items = |crop: usize| pool.iter().map(|p| p.tail_window(crop)).collect::<Vec<_>>();
    let mamba_hist = customize(
        &mut mamba,
        &adaptation,
        &items(e.mamba_crop),
        &ExpertTrainConfig { steps: e.mamba_steps, ..base },
        &mut root.fork(TAG_FIT_MAMBA),
    )?;
    let t5_hist = customize(&mut t5, &adaptation, &items(e.t5_crop), &ExpertTrainConfig { steps: e.t5_steps, ..base }, &mut root.fork(TAG_FIT_T5))?;
    Ok((ExpertBank::new(adaptation, mamba, t5)?, ExpertHistories { mamba: mamba_hist, t5: t5_hist }))
}

pub fn record_split(bank: &ExpertBank, seqs: &[&Encoded], ctx: &RouteContext) -> Result<Vec<SeqRecord>> {
    seqs.iter().map(|e| record(bank, e, ctx)).collect()
}

#[derive(Debug, Clone)]
pub struct Records {
    pub train: Vec<SeqRecord>,
    pub valid: Vec<SeqRecord>,
    pub test: Vec<SeqRecord>,
}

pub fn record_all(bank: &ExpertBank, corpus: &Corpus, ctx: &RouteContext) -> Result<Records> {
    Ok(Records {
        train: record_split(bank, &corpus.subset(&corpus.splits.train), ctx)?,
        valid: record_split(bank, &corpus.subset(&corpus.splits.valid), ctx)?,
        test: record_split(bank, &corpus.subset(&corpus.splits.test), ctx)?,
    })
}

/// A fresh router trained under `weights` and `view`.
pub fn fit_router(cfg: &ExperimentConfig, records: &Records, weights: &LossWeights, view: RouterView) -> Result<(RouterMLP, TrainState)> {
    let root = cfg.rng();
    let mut router = RouterMLP::init(view.input.width(cfg.d_model), cfg.hidden, view.input, &mut root.fork(TAG_ROUTER))?;
    let mut state = TrainState::new(cfg.router);
    train_router(&mut router, &records.train, &records.valid, view, weights, &mut state, &mut root.fork(TAG_ROUTER_TRAIN))?;
    Ok((router, state))
}

pub fn expert_params(bank: &ExpertBank) -> [usize; 2] {
    [bank.mamba.param_count(), bank.t5.param_count()]
}

/// Trains (unless bypassed) and evaluates one ablation variant on the
/// test records.
pub fn run_ablation(cfg: &ExperimentConfig, bank: &ExpertBank, records: &Records, variant: AblationVariant) -> Result<(MetricReport, Option<TrainState>)> {
    match variant.apply(&cfg.weights, cfg.view()) {
        None => Ok((evaluate_policy(&records.test, Policy::AlwaysMamba, None, expert_params(bank))?.report, None)),
        Some((weights, view)) => {
            let (router, state) = fit_router(cfg, records, &weights, view)?;
            let eval = evaluate_policy(&records.test, Policy::Learned, Some((&router, view)), expert_params(bank))?;
            Ok((eval.report, Some(state)))
        }
    }
}

/// Evaluates `policy` on the test records.
pub fn evaluate(bank: &ExpertBank, records: &Records, policy: Policy, router: Option<(&RouterMLP, RouterView)>) -> Result<PolicyEval> {
    evaluate_policy(&records.test, policy, router, expert_params(bank))
}
