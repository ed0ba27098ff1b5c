//! Command-line harness: every subcommand writes its artifacts under the
//! run directory and prints one summary line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error. On
//! failure a single JSON error record goes to stderr.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use moeroute::bench::{AblationVariant, Policy};
use moeroute::moe::Granularity;

pub use config::{validate_config, BenchSettings, ModelDims, RunConfig, SyntheticSource};

pub const SEED_ENV: &str = "MOEROUTE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const AFTER_HELP: &str = "\
Precedence: flags, then the --config file, then MOEROUTE_SEED (seed only), then defaults.

The --config file is a JSON object with any subset of the RunConfig fields, e.g.
  {\"seed\": 7, \"synthetic\": {\"n\": 500, \"spec\": {\"long_frac\": 0.9}},
   \"weights\": {\"lambda1\": 1.0, \"lambda2\": 0.5, \"t_u\": 0.08},
   \"experts\": {\"t5_steps\": 200, \"mamba_steps\": 100},
   \"bench\": {\"lengths\": [256, 512, 1024, 2048], \"trials\": 21}}
The normalized config of every run is written to <out>/config.json and can be fed back with --config.

Artifacts: data.jsonl, manifest.json, *.ckpt, expert_loss.csv, epochs.csv, eval-<policy>.csv,
ablation.csv, pareto.csv, frontier.csv, policies.csv, bench_ops.csv and <command>.json.
Wall-clock measurements go to timing.log only, so CSV and JSON artifacts are reproducible.";

#[derive(Debug, Parser)]
#[command(name = "moeroute", version, about = "Two-expert routing experiments", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate or import the dataset.
    GenData,
    /// Customize both experts and save their checkpoints.
    TrainExperts,
    /// Train the router with the expert outputs held fixed.
    TrainRouter,
    /// Evaluate one routing policy on the test split.
    Eval,
    /// Profile the attention and scan kernels across lengths.
    Bench,
    /// Train and evaluate ablation variants.
    Ablate,
    /// Evaluate the four standard policies and their accuracy/cost frontier.
    Pareto,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainExperts => "train-experts",
            Command::TrainRouter => "train-router",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Ablate => "ablate",
            Command::Pareto => "pareto",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Token,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Learned,
    AlwaysMamba,
    AlwaysT5,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoGate,
    NoSpeedPenalty,
    NoDomainFeature,
    LengthOnly,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file with RunConfig fields; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub synthetic_n: Option<usize>,
    /// Fraction of long-regime sequences in the synthetic corpus.
    #[arg(long, global = true)]
    pub long_frac: Option<f64>,
    /// JSONL dataset with question, answer and domain fields.
    #[arg(long, global = true)]
    pub jsonl: Option<PathBuf>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    /// Router hidden width.
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Balance loss weight.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lambda1: Option<f64>,
    /// Speed penalty weight.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lambda2: Option<f64>,
    /// Maximum soft T5 usage before the speed penalty applies.
    #[arg(long = "t-u", global = true, allow_negative_numbers = true)]
    pub t_u: Option<f64>,
    /// Router learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Router batch size in sequences.
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long, global = true, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Ablation variant; all variants when absent.
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
}

/// Merges the config file and flags into a validated config.
pub fn resolve(command: Command, flags: &Flags) -> moeroute::Result<RunConfig> {
    let (mut cfg, file_has_seed) = match &flags.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let value: serde_json::Value = if text.trim().is_empty() { json!({}) } else { serde_json::from_str(&text)? };
            let has_seed = value.get("seed").is_some();
            (serde_json::from_value::<RunConfig>(value)?, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    cfg.command = command.name().to_string();
    if let Some(s) = flags.seed {
        cfg.seed = s;
    } else if !file_has_seed {
        if let Some(v) = std::env::var_os(SEED_ENV) {
            cfg.seed = v
                .to_str()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| moeroute::Error::config(SEED_ENV, "must be an unsigned integer"))?;
        }
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if flags.synthetic_n.is_some() || flags.long_frac.is_some() {
        let s = cfg.synthetic.get_or_insert_with(Default::default);
        if let Some(n) = flags.synthetic_n {
            s.n = n;
        }
        if let Some(f) = flags.long_frac {
            s.spec.long_frac = f;
        }
    }
    if let Some(p) = &flags.jsonl {
        cfg.jsonl = Some(p.clone());
    }
    if let Some(d) = flags.d_model {
        cfg.model.d_model = d;
    }
    if let Some(h) = flags.hidden {
        cfg.model.hidden = h;
    }
    if let Some(v) = flags.lambda1 {
        cfg.weights.lambda1 = v;
    }
    if let Some(v) = flags.lambda2 {
        cfg.weights.lambda2 = v;
    }
    if let Some(v) = flags.t_u {
        cfg.weights.t_u = v;
    }
    if let Some(v) = flags.lr {
        cfg.router.lr = v;
    }
    if let Some(v) = flags.batch {
        cfg.router.batch = v;
    }
    if let Some(v) = flags.epochs {
        cfg.router.epochs = v;
    }
    if let Some(g) = flags.granularity {
        cfg.granularity = match g {
            GranularityArg::Token => Granularity::Token,
            GranularityArg::Sequence => Granularity::Sequence,
        };
    }
    if let Some(p) = flags.policy {
        cfg.policy = match p {
            PolicyArg::Learned => Policy::Learned,
            PolicyArg::AlwaysMamba => Policy::AlwaysMamba,
            PolicyArg::AlwaysT5 => Policy::AlwaysT5,
            PolicyArg::Oracle => Policy::Oracle,
        };
    }
    if let Some(v) = flags.variant {
        cfg.variant = Some(match v {
            VariantArg::Full => AblationVariant::Full,
            VariantArg::NoGate => AblationVariant::NoGate,
            VariantArg::NoSpeedPenalty => AblationVariant::NoSpeedPenalty,
            VariantArg::NoDomainFeature => AblationVariant::NoDomainFeature,
            VariantArg::LengthOnly => AblationVariant::LengthOnly,
        });
    }
    validate_config(cfg)
}

fn error_record(kind: &str, message: &str, field: Option<&str>) -> String {
    let mut v = json!({ "error": kind, "message": message });
    if let Some(f) = field {
        v["field"] = json!(f);
    }
    v.to_string()
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let _ = e.print();
            eprintln!("{}", error_record("usage", &e.kind().to_string(), None));
            return EXIT_USAGE;
        }
    };
    let cfg = match resolve(cli.command, &cli.flags) {
        Ok(c) => c,
        Err(e) => {
            let field = match &e {
                moeroute::Error::Config { field, .. } => Some(field.as_str()),
                _ => None,
            };
            eprintln!("{}", error_record("config", &e.to_string(), field));
            return EXIT_USAGE;
        }
    };
    match commands::run(&cfg) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string(), None));
            EXIT_RUNTIME
        }
    }
}
