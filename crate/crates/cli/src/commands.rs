//! Subcommand bodies. Each stage reuses the artifacts of an earlier stage
//! in the run directory when their stamp matches the current config and
//! rebuilds them otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use moeroute::bench::{
    expert_latency, latency_profile, report_csv_row, AblationVariant, MetricReport, Policy, ProfileTarget,
    REPORT_CSV_HEADER,
};
use moeroute::checkpoint::Checkpoint;
use moeroute::data::{load_jsonl, manifest, write_jsonl, QAPair};
use moeroute::experiment::{self, Corpus, DataSource, ExperimentConfig, ExpertHistories, Records};
use moeroute::expert::{AttentionExpertParams, EmbeddingAdaptation, Expert, SSMExpertParams};
use moeroute::metrics::{pareto_frontier, ParetoPoint};
use moeroute::moe::{expected_cost, ExpertBank, MixMode, MoEConfig};
use moeroute::objective::{epoch_csv, EpochRecord};
use moeroute::router::RouterMLP;
use moeroute::{Result, SeededRng};

use crate::config::RunConfig;

pub struct Outcome {
    pub summary: String,
    pub results: Value,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    exp: ExperimentConfig,
    timing: String,
}

impl<'a> Run<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    fn stamp_matches(&self, name: &str, key: &Value) -> bool {
        fs::read_to_string(self.path(name)).is_ok_and(|s| s == *key)
    }

    fn data_key(&self) -> Value {
        json!({ "seed": self.cfg.seed, "synthetic": self.cfg.synthetic, "jsonl": self.cfg.jsonl, "domains": self.cfg.domains, "l_max": self.cfg.model.l_max })
    }

    fn experts_key(&self) -> Value {
        json!({
            "data": self.data_key(),
            "model": self.cfg.model,
            "experts": self.cfg.experts,
            "lm_weight": self.cfg.weights.lm_weight,
            "stability_weight": self.cfg.weights.stability_weight,
        })
    }

    fn router_key(&self) -> Value {
        json!({ "experts": self.experts_key(), "weights": self.cfg.weights, "router": self.cfg.router, "granularity": self.cfg.granularity })
    }

    fn corpus(&self) -> Result<Corpus> {
        let key = self.data_key();
        let data = self.path("data.jsonl");
        if self.stamp_matches("data.stamp", &key) && data.is_file() {
            return Corpus::from_pairs(load_jsonl(&data, &self.exp.domains)?, &self.exp);
        }
        let corpus = experiment::load_corpus(&self.exp)?;
        self.save_data(&corpus.pairs)?;
        self.write("data.stamp", key.to_string())?;
        Ok(corpus)
    }

    fn save_data(&self, pairs: &[QAPair]) -> Result<()> {
        write_jsonl(self.path("data.jsonl"), pairs)?;
        let (source, spec) = match &self.exp.source {
            DataSource::Synthetic { spec, .. } => ("synthetic".to_string(), Some(spec)),
            DataSource::Jsonl { path } => (path.display().to_string(), None),
        };
        self.write_json("manifest.json", &manifest(pairs, self.cfg.seed, &source, spec)?)
    }

    fn bank(&mut self, corpus: &Corpus) -> Result<ExpertBank> {
        let key = self.experts_key();
        if self.stamp_matches("experts.stamp", &key) {
            if let Ok(bank) = self.load_bank() {
                return Ok(bank);
            }
        }
        let (bank, hist) = experiment::train_experts(&self.exp, corpus)?;
        Checkpoint::save(&bank.adaptation.to_checkpoint(), self.path("embedding.ckpt"))?;
        Checkpoint::save(&bank.mamba.to_checkpoint(), self.path("mamba.ckpt"))?;
        Checkpoint::save(&bank.t5.to_checkpoint(), self.path("t5.ckpt"))?;
        self.write("expert_loss.csv", expert_loss_csv(&hist))?;
        self.write("experts.stamp", key.to_string())?;
        Ok(bank)
    }

    fn load_bank(&self) -> Result<ExpertBank> {
        let adaptation = EmbeddingAdaptation::from_checkpoint(&Checkpoint::load(self.path("embedding.ckpt"))?)?;
        let mamba = Expert::from_checkpoint(&Checkpoint::load(self.path("mamba.ckpt"))?)?;
        let t5 = Expert::from_checkpoint(&Checkpoint::load(self.path("t5.ckpt"))?)?;
        ExpertBank::new(adaptation, mamba, t5)
    }

    fn records(&mut self) -> Result<(ExpertBank, Records)> {
        let corpus = self.corpus()?;
        let bank = self.bank(&corpus)?;
        let records = experiment::record_all(&bank, &corpus, &self.exp.route_context())?;
        Ok((bank, records))
    }

    /// The full-model router, trained under the current loss weights.
    fn router(&mut self, records: &Records) -> Result<(RouterMLP, Vec<EpochRecord>)> {
        let key = self.router_key();
        if self.stamp_matches("router.stamp", &key) {
            if let Ok(r) = Checkpoint::load(self.path("router.ckpt")).and_then(|c| RouterMLP::from_checkpoint(&c)) {
                let history = serde_json::from_str(&fs::read_to_string(self.path("router_history.json"))?)?;
                return Ok((r, history));
            }
        }
        let (router, state) = experiment::fit_router(&self.exp, records, &self.exp.weights, self.exp.view())?;
        Checkpoint::save(&router.to_checkpoint(), self.path("router.ckpt"))?;
        self.write_json("router_history.json", &state.history)?;
        self.write("epochs.csv", epoch_csv(&state.history))?;
        self.write("router.stamp", key.to_string())?;
        Ok((router, state.history))
    }

    fn log_timing(&mut self, label: &str, r: &MetricReport) {
        let t = r.timing;
        let _ = writeln!(
            self.timing,
            "{label}: total_seconds={:.6} mean_latency_s={:.6} throughput={:.3}",
            t.total_seconds, t.mean_latency_s, t.throughput
        );
    }
}

fn expert_loss_csv(h: &ExpertHistories) -> String {
    let mut s = String::from("expert,phase,step,loss\n");
    for (name, hist) in [("mamba", &h.mamba), ("t5", &h.t5)] {
        for (phase, losses) in [("base", &hist.base), ("lora", &hist.lora)] {
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(s, "{name},{phase},{i},{l}");
            }
        }
    }
    s
}

fn report_csv(rows: &[(String, &MetricReport)]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for (label, r) in rows {
        s.push_str(&report_csv_row(label, r));
        s.push('\n');
    }
    s
}

fn one_line(label: &str, r: &MetricReport) -> String {
    format!(
        "{label}: accuracy {:.4}, T5 utilization {:.2}%, mean flops {:.4e}",
        r.accuracy(),
        100.0 * r.utilization[1],
        r.mean_flops
    )
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out)?;
    let mut run = Run { cfg, exp: cfg.experiment(), timing: String::new() };
    let outcome = match cfg.command.as_str() {
        "gen-data" => gen_data(&mut run),
        "train-experts" => train_experts(&mut run),
        "train-router" => train_router(&mut run),
        "eval" => eval(&mut run),
        "bench" => bench(&mut run),
        "ablate" => ablate(&mut run),
        "pareto" => pareto(&mut run),
        other => Err(moeroute::Error::config("command", format!("unknown command `{other}`"))),
    }?;
    run.write_json("config.json", cfg)?;
    let config_hash = hex::encode(Sha256::digest(serde_json::to_string(cfg)?.as_bytes()));
    let summary = json!({
        "run_id": format!("{}-{}", cfg.command, &config_hash[..12]),
        "seed": cfg.seed,
        "config_hash": config_hash,
        "command": cfg.command,
        "config": cfg,
        "results": outcome.results,
    });
    run.write_json(&format!("{}.json", cfg.command), &summary)?;
    if !run.timing.is_empty() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(run.path("timing.log"))
            .and_then(|mut f| std::io::Write::write_all(&mut f, run.timing.as_bytes()))?;
    }
    Ok(outcome)
}

fn gen_data(run: &mut Run) -> Result<Outcome> {
    let _ = fs::remove_file(run.path("data.stamp"));
    let corpus = run.corpus()?;
    let m = manifest(&corpus.pairs, run.cfg.seed, "", None)?;
    let splits = json!({ "train": corpus.splits.train.len(), "valid": corpus.splits.valid.len(), "test": corpus.splits.test.len() });
    let per_domain: Vec<String> = m.per_domain.iter().map(|(d, n)| format!("{d} {n}")).collect();
    Ok(Outcome {
        summary: format!("gen-data: {} pairs ({}) -> {}", m.count, per_domain.join(", "), run.path("data.jsonl").display()),
        results: json!({ "count": m.count, "per_domain": m.per_domain, "sha256": m.sha256, "splits": splits }),
    })
}

fn train_experts(run: &mut Run) -> Result<Outcome> {
    let corpus = run.corpus()?;
    let _ = fs::remove_file(run.path("experts.stamp"));
    let bank = run.bank(&corpus)?;
    let params = experiment::expert_params(&bank);
    Ok(Outcome {
        summary: format!("train-experts: mamba {} params, t5 {} params -> {}", params[0], params[1], run.cfg.out.display()),
        results: json!({ "params": { "mamba": params[0], "t5": params[1] } }),
    })
}

fn train_router(run: &mut Run) -> Result<Outcome> {
    let (_, records) = run.records()?;
    let _ = fs::remove_file(run.path("router.stamp"));
    let (router, history) = run.router(&records)?;
    let last = history.last().copied();
    Ok(Outcome {
        summary: match last {
            Some(e) => format!(
                "train-router: {} epochs, L_total {:.4}, val accuracy {:.4}, hard T5 utilization {:.2}%",
                history.len(),
                e.total,
                e.val_accuracy,
                100.0 * e.hard_util_t5
            ),
            None => "train-router: no epochs".to_string(),
        },
        results: json!({ "params": router.param_count(), "epochs": history }),
    })
}

fn evaluate(run: &mut Run, bank: &ExpertBank, records: &Records, policy: Policy) -> Result<MetricReport> {
    let eval = if policy == Policy::Learned {
        let (router, _) = run.router(records)?;
        experiment::evaluate(bank, records, policy, Some((&router, run.exp.view())))?
    } else {
        experiment::evaluate(bank, records, policy, None)?
    };
    run.log_timing(policy.name(), &eval.report);
    Ok(eval.report)
}

fn eval(run: &mut Run) -> Result<Outcome> {
    let (bank, records) = run.records()?;
    let policy = run.cfg.policy;
    let r = evaluate(run, &bank, &records, policy)?;
    let fractions = (r.utilization[0], r.utilization[1]);
    let cost = expected_cost(1000, &MoEConfig::new(run.exp.granularity, MixMode::Hard, fractions)?)?;
    run.write(&format!("eval-{policy}.csv"), report_csv(&[(policy.to_string(), &r)]))?;
    Ok(Outcome { summary: format!("eval {}", one_line(policy.name(), &r)), results: json!({ "policy": policy, "report": r, "expected_cost_1000": cost }) })
}

fn ablate(run: &mut Run) -> Result<Outcome> {
    let (bank, records) = run.records()?;
    let variants = run.cfg.variant.map_or(AblationVariant::ALL.to_vec(), |v| vec![v]);
    let mut reports = Vec::new();
    for v in &variants {
        let (r, state) = experiment::run_ablation(&run.exp, &bank, &records, *v)?;
        if let Some(s) = state {
            run.write(&format!("ablate-{v}-epochs.csv"), epoch_csv(&s.history))?;
        }
        run.log_timing(&format!("ablate {v}"), &r);
        reports.push((v.to_string(), r));
    }
    let rows: Vec<(String, &MetricReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    run.write("ablation.csv", report_csv(&rows))?;
    let summary = reports.iter().map(|(l, r)| format!("{l} {:.4}/{:.1}%", r.accuracy(), 100.0 * r.utilization[1])).collect::<Vec<_>>();
    let results: serde_json::Map<String, Value> = reports.iter().map(|(l, r)| (l.clone(), json!(r))).collect();
    Ok(Outcome { summary: format!("ablate (accuracy/T5 utilization): {}", summary.join(", ")), results: Value::Object(results) })
}

fn pareto(run: &mut Run) -> Result<Outcome> {
    let (bank, records) = run.records()?;
    let mut points = Vec::new();
    let mut reports = Vec::new();
    for policy in Policy::ALL {
        let r = evaluate(run, &bank, &records, policy)?;
        points.push(ParetoPoint::new(policy.name(), r.accuracy(), r.mean_flops));
        reports.push((policy.to_string(), r));
    }
    let front = pareto_frontier(&mut points);
    let mut csv = String::from("label,accuracy,mean_flops,dominated\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{},{}", p.label, p.accuracy, p.latency, p.dominated);
    }
    run.write("pareto.csv", csv)?;
    let mut fcsv = String::from("label,accuracy,mean_flops\n");
    for p in &front {
        let _ = writeln!(fcsv, "{},{},{}", p.label, p.accuracy, p.latency);
    }
    run.write("frontier.csv", fcsv)?;
    let rows: Vec<(String, &MetricReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    run.write("policies.csv", report_csv(&rows))?;
    let labels: Vec<&str> = front.iter().map(|p| p.label.as_str()).collect();
    Ok(Outcome {
        summary: format!("pareto: frontier {}", labels.join(" < ")),
        results: json!({ "points": points, "frontier": front }),
    })
}

fn bench(run: &mut Run) -> Result<Outcome> {
    let b = run.cfg.bench.clone();
    let targets = [
        ProfileTarget::AttentionKernel { d_model: run.exp.d_model, num_heads: run.exp.num_heads },
        ProfileTarget::ScanKernel { channels: run.exp.d_model, d_state: run.exp.d_state },
    ];
    let mut ops_csv = String::from("target,len,abstract_ops,ratio_to_previous\n");
    let mut results = serde_json::Map::new();
    let mut summary = Vec::new();
    for target in targets {
        let mut prev: Option<u64> = None;
        for &len in &b.lengths {
            let ops = target.abstract_ops(len);
            let ratio = prev.map_or(String::new(), |p| (ops as f64 / p as f64).to_string());
            let _ = writeln!(ops_csv, "{},{len},{ops},{ratio}", target.name());
            prev = Some(ops);
        }
        let profile = latency_profile(target, &b.lengths, b.trials, b.warmup, run.cfg.seed)?;
        for row in &profile.rows {
            let _ = writeln!(run.timing, "bench {} len={} median_seconds={:.9}", target.name(), row.len, row.median_seconds);
        }
        let _ = writeln!(run.timing, "bench {} slope={:.4}", target.name(), profile.slope);
        summary.push(format!("{} slope {:.3}", target.name(), profile.slope));
        results.insert(target.name().to_string(), json!({ "target": target, "lengths": b.lengths }));
    }
    if b.experts {
        let rng = SeededRng::new(run.cfg.seed);
        let adaptation = EmbeddingAdaptation::init(256, run.exp.d_model, run.exp.max_positions(), 2, &mut rng.fork(1));
        let experts = [
            Expert::Mamba(SSMExpertParams::init(run.exp.ssm_config(), &mut rng.fork(2))?),
            Expert::T5(AttentionExpertParams::init(run.exp.attention_config(), &mut rng.fork(3))?),
        ];
        for e in &experts {
            let (rows, slope) = expert_latency(e, &adaptation, &b.lengths, b.trials, run.cfg.seed)?;
            for row in rows {
                let _ = writeln!(run.timing, "bench expert-{} len={} median_seconds={:.9}", e.kind().name(), row.len, row.median_seconds);
            }
            let _ = writeln!(run.timing, "bench expert-{} slope={:.4}", e.kind().name(), slope);
        }
    }
    run.write("bench_ops.csv", ops_csv)?;
    print!("{}", run.timing);
    Ok(Outcome { summary: format!("bench: {} (wall clock in timing.log)", summary.join(", ")), results: Value::Object(results) })
}
