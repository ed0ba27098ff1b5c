use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use moeroute::bench::{AblationVariant, Policy};
use moeroute::data::{DomainMap, SyntheticSpec};
use moeroute::experiment::{DataSource, ExperimentConfig, ExpertSchedule};
use moeroute::moe::Granularity;
use moeroute::objective::{LossWeights, RouterTrainConfig};
use moeroute::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub n: usize,
    /// `spec.seed` is always replaced by the run seed.
    pub spec: SyntheticSpec,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { n: 2000, spec: SyntheticSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_state: usize,
    pub hidden: usize,
    pub l_max: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self { d_model: e.d_model, num_heads: e.num_heads, d_state: e.d_state, hidden: e.hidden, l_max: e.l_max }
    }
}

/// Settings of the `bench` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    /// Also time full expert forward passes (slow, informational).
    pub experts: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { lengths: vec![256, 512, 1024, 2048], trials: 21, warmup: 2, experts: false }
    }
}

/// Everything a run depends on. Serialized into every run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub synthetic: Option<SyntheticSource>,
    pub jsonl: Option<PathBuf>,
    pub domains: DomainMap,
    pub model: ModelDims,
    pub weights: LossWeights,
    pub router: RouterTrainConfig,
    pub granularity: Granularity,
    pub experts: ExpertSchedule,
    pub bench: BenchSettings,
    pub policy: Policy,
    /// `None` runs every variant.
    pub variant: Option<AblationVariant>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            command: String::new(),
            seed: 0,
            synthetic: None,
            jsonl: None,
            domains: e.domains,
            model: ModelDims::default(),
            weights: e.weights,
            router: e.router,
            granularity: e.granularity,
            experts: e.experts,
            bench: BenchSettings::default(),
            policy: Policy::Learned,
            variant: None,
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// The library view of a validated config.
    pub fn experiment(&self) -> ExperimentConfig {
        let source = match (&self.synthetic, &self.jsonl) {
            (_, Some(path)) => DataSource::Jsonl { path: path.clone() },
            (Some(s), None) => DataSource::Synthetic { n: s.n, spec: s.spec.clone() },
            (None, None) => DataSource::Synthetic { n: 2000, spec: SyntheticSpec { seed: self.seed, ..Default::default() } },
        };
        ExperimentConfig {
            seed: self.seed,
            source,
            domains: self.domains.clone(),
            d_model: self.model.d_model,
            num_heads: self.model.num_heads,
            d_state: self.model.d_state,
            hidden: self.model.hidden,
            l_max: self.model.l_max,
            granularity: self.granularity,
            weights: self.weights,
            router: self.router,
            experts: self.experts,
        }
    }
}

/// Fills defaults and rejects contradictory or out-of-range settings.
pub fn validate_config(mut cfg: RunConfig) -> Result<RunConfig> {
    match (&mut cfg.synthetic, &cfg.jsonl) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "jsonl",
                "both a synthetic source and a JSONL path are set; choose one",
            ))
        }
        (None, None) => cfg.synthetic = Some(SyntheticSource::default()),
        _ => {}
    }
    if let Some(s) = &mut cfg.synthetic {
        s.spec.seed = cfg.seed;
        if s.n == 0 {
            return Err(Error::config("synthetic.n", "the dataset is empty"));
        }
    }
    if let Some(p) = &cfg.jsonl {
        if !p.is_file() {
            return Err(Error::config("jsonl", format!("{} is not a readable file", p.display())));
        }
    }
    if cfg.out.as_os_str().is_empty() {
        return Err(Error::config("out", "output directory must be set"));
    }
    let b = &cfg.bench;
    if b.trials == 0 || b.lengths.len() < 3 || b.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("bench", "need positive trials and at least three strictly ascending lengths"));
    }
    cfg.experiment().validate()?;
    Ok(cfg)
}
