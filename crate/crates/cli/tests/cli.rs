use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moeroute_cli::{resolve, validate_config, Flags, RunConfig, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use serde_json::{json, Value};

const SMALL: &str = r#"{
 "seed": 5,
 "synthetic": {"n": 120, "spec": {"long_range": [48, 96], "short_range": [8, 24]}},
 "model": {"d_model": 16, "num_heads": 2, "d_state": 4, "hidden": 8, "l_max": 128},
 "experts": {"t5_steps": 15, "mamba_steps": 15, "t5_crop": 32, "mamba_crop": 32, "batch": 4, "lora_rank": 2, "lora_steps": 3, "pool_size": 40},
 "router": {"epochs": 3, "batch": 16},
 "bench": {"lengths": [16, 32, 64], "trials": 3, "warmup": 1}
}"#;

fn moeroute(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moeroute"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOEROUTE_SEED")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("no JSON error record in {text}"))
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn empty_config_takes_defaults() {
    let cfg = validate_config(serde_json::from_str::<RunConfig>("{}").unwrap()).unwrap();
    assert_eq!((cfg.weights.lambda1, cfg.weights.lambda2, cfg.weights.t_u), (1.0, 0.5, 0.08));
    assert_eq!(cfg.model.hidden, 16);
    assert_eq!((cfg.router.lr, cfg.router.batch), (1e-3, 64));
    assert_eq!(cfg.synthetic.as_ref().unwrap().n, 2000);
    assert_eq!(cfg.synthetic.as_ref().unwrap().spec.long_frac, 0.95);
}

#[test]
fn config_errors_name_the_field() {
    let neg: RunConfig = serde_json::from_value(json!({ "weights": { "lambda2": -1.0 } })).unwrap();
    assert!(matches!(validate_config(neg), Err(moeroute::Error::Config { field, .. }) if field == "lambda2"));
    let both: RunConfig = serde_json::from_value(json!({ "synthetic": {}, "jsonl": "x.jsonl" })).unwrap();
    assert!(matches!(validate_config(both), Err(moeroute::Error::Config { field, .. }) if field == "jsonl"));
    let empty: RunConfig = serde_json::from_value(json!({ "synthetic": { "n": 0 } })).unwrap();
    let err = validate_config(empty).unwrap_err().to_string();
    assert!(err.contains("empty"), "{err}");
    let bench: RunConfig = serde_json::from_value(json!({ "bench": { "lengths": [64, 32, 128] } })).unwrap();
    assert!(validate_config(bench).is_err());
    assert!(serde_json::from_value::<RunConfig>(json!({ "lamda1": 1.0 })).is_err());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let flags = Flags { config: Some(small_config(dir.path())), seed: Some(9), lambda2: Some(2.0), ..Default::default() };
    let cfg = resolve(moeroute_cli::Command::Eval, &flags).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.synthetic.unwrap().spec.seed, 9);
    assert_eq!(cfg.weights.lambda2, 2.0);
    assert_eq!(cfg.model.d_model, 16);
    assert_eq!(cfg.command, "eval");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(moeroute(&["--help"], d).status.code(), Some(EXIT_OK));

    let o = moeroute(&["frobnicate"], d);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert_eq!(stderr_json(&o)["error"], "usage");

    let o = moeroute(&["eval", "--lambda2", "-1"], d);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert_eq!(stderr_json(&o)["field"], "lambda2");

    let o = moeroute(&["gen-data", "--jsonl", "missing.jsonl"], d);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert_eq!(stderr_json(&o)["field"], "jsonl");

    let o = moeroute(&["gen-data", "--synthetic-n", "0"], d);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));

    std::fs::write(d.join("bad.jsonl"), "{\"question\":\"q\",\"answer\":\"a\",\"domain\":\"dental\"}\nnot json\n").unwrap();
    let o = moeroute(&["gen-data", "--jsonl", "bad.jsonl", "--out", "r"], d);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    let e = stderr_json(&o);
    assert!(e["message"].as_str().unwrap().contains("line 2"), "{e}");
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let seed_of = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_moeroute"));
        c.args(args).args(["--synthetic-n", "20", "--out", "s"]).current_dir(d).env_remove("MOEROUTE_SEED");
        if let Some(e) = env {
            c.env("MOEROUTE_SEED", e);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read_json(d.join("s/config.json"))["seed"].as_u64().unwrap()
    };
    std::fs::write(d.join("seeded.json"), r#"{"seed": 4}"#).unwrap();
    assert_eq!(seed_of(&["gen-data"], None), 0);
    assert_eq!(seed_of(&["gen-data"], Some("3")), 3);
    assert_eq!(seed_of(&["gen-data", "--config", "seeded.json"], Some("3")), 4);
    assert_eq!(seed_of(&["gen-data", "--config", "seeded.json", "--seed", "8"], Some("3")), 8);
    let o = Command::new(env!("CARGO_BIN_EXE_moeroute"))
        .args(["gen-data", "--out", "s"])
        .current_dir(d)
        .env("MOEROUTE_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn jsonl_source_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lines: Vec<String> = (0..30)
        .map(|i| json!({ "question": format!("question number {i}"), "answer": "yes", "domain": if i % 2 == 0 { "pubmed" } else { "dental" } }).to_string())
        .collect();
    std::fs::write(d.join("in.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = moeroute(&["gen-data", "--jsonl", "in.jsonl", "--out", "j"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(d.join("j/gen-data.json"));
    assert_eq!(r["results"]["count"], 30);
    assert_eq!(r["results"]["per_domain"]["dental"], 15);
    let written: Vec<Value> = std::fs::read_to_string(d.join("j/data.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let given: Vec<Value> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(written, given);
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json" | "jsonl")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn pipeline_runs_and_repeats_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    let steps: [&[&str]; 3] = [
        &["train-router", "--config", "small.json", "--out", "run"],
        &["eval", "--config", "small.json", "--out", "run", "--policy", "always-mamba"],
        &["ablate", "--config", "small.json", "--out", "run", "--variant", "no-gate"],
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(d.join("run"));
        for args in steps {
            let o = moeroute(args, d);
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
            assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1);
        }
        snapshots.push(artifacts(&d.join("run")));
    }
    assert_eq!(snapshots[0], snapshots[1]);
    for name in ["config.json", "epochs.csv", "expert_loss.csv", "eval-always-mamba.csv", "ablation.csv", "manifest.json"] {
        assert!(snapshots[0].contains_key(name), "missing {name}");
    }

    let eval = read_json(d.join("run/eval.json"));
    assert_eq!(eval["seed"], 5);
    let hash = eval["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(eval["run_id"], format!("eval-{}", &hash[..12]));
    let ablate = read_json(d.join("run/ablate.json"));
    assert_eq!(eval["results"]["report"], ablate["results"]["no-gate"]);
    let u = eval["results"]["report"]["utilization"][0].as_f64().unwrap();
    assert_eq!(eval["results"]["expected_cost_1000"].as_f64().unwrap(), u * 1000.0);

    let epochs = std::fs::read_to_string(d.join("run/epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 4);
}

#[test]
fn bench_writes_op_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    let o = moeroute(&["bench", "--config", "small.json", "--out", "b"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("b/bench_ops.csv")).unwrap();
    let ratios: Vec<(String, f64)> = csv
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[3].parse().ok().map(|r| (f[0].to_string(), r))
        })
        .collect();
    assert_eq!(ratios.len(), 4);
    for (target, r) in ratios {
        assert_eq!(r, if target == "attention" { 4.0 } else { 2.0 }, "{target}");
    }
    let log = std::fs::read_to_string(d.join("b/timing.log")).unwrap();
    assert!(log.contains("attention slope=") && log.contains("ssm slope="));
}
