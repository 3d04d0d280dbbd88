use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mjoda_cli::pipeline::{self, Method};
use mjoda_cli::ExperimentConfig;

/// A few cycles of a small ensemble; enough for every stage to run in seconds.
const SMALL: &str = "\
ensemble_size = 4
spinup_days = 6
run_days = 24
rl_epochs = 2
rl_hidden = 8,8
eval_days = 12
";

fn mjoda(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mjoda"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// CSV rows after the metadata lines.
fn body(path: &Path) -> Vec<String> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn meta(path: &Path, key: &str) -> Option<String> {
    let prefix = format!("# {key}=");
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
}

#[test]
fn same_seed_gives_identical_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "small.cfg", SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&mjoda(&a, &cfg, &["simulate-truth"]));
    ok(&mjoda(&b, &cfg, &["simulate-truth"]));
    ok(&mjoda(&c, &cfg, &["simulate-truth", "--seed", "2"]));
    for f in [pipeline::TRUTH_CSV, pipeline::TRUTH_BIN] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
        assert_ne!(read(&a.join(f)), read(&c.join(f)), "{f}");
    }
    let hashes = |d: &Path| {
        let m: serde_json::Value = serde_json::from_slice(&read(&d.join("manifest.json"))).unwrap();
        m["stages"]["simulate-truth"]["artifacts"].clone()
    };
    assert_eq!(hashes(&a), hashes(&b));
    assert_ne!(hashes(&a), hashes(&c));
}

#[test]
fn zero_cycles_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "zero.cfg", "spinup_days = 6\nrun_days = 6\n");
    let out = dir.path().join("run");
    ok(&mjoda(&out, &cfg, &["simulate-truth"]));
    assert_eq!(body(&out.join(pipeline::TRUTH_CSV)), vec!["time,grid_index,K,R,Q,A"]);
}

#[test]
fn warm_pool_header_records_forcing_and_sources() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "small.cfg", SMALL);
    let (warm, flat) = (dir.path().join("warm"), dir.path().join("flat"));
    ok(&mjoda(&warm, &cfg, &["simulate-truth", "--forcing", "warm-pool"]));
    ok(&mjoda(&flat, &cfg, &["simulate-truth"]));
    let truth = |d: &Path| d.join(pipeline::TRUTH_CSV);
    assert_eq!(meta(&truth(&warm), "forcing").as_deref(), Some("warm_pool"));
    assert_eq!(meta(&truth(&flat), "forcing").as_deref(), Some("homogeneous"));
    let (hw, hf) = (
        meta(&truth(&warm), "source_hash").unwrap(),
        meta(&truth(&flat), "source_hash").unwrap(),
    );
    assert_eq!(hw.len(), 64);
    assert_ne!(hw, hf);
}

#[test]
fn config_and_input_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let bad = config(dir.path(), "bad.cfg", "ensemble_sise = 4\n");
    let o = mjoda(&out, &bad, &["simulate-truth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ensemble_sise"));

    let cfg = config(dir.path(), "small.cfg", SMALL);
    assert_eq!(
        mjoda(&out, &cfg, &["run-filter", "--method", "kf"]).status.code(),
        Some(2)
    );
    let o = mjoda(&out, &cfg, &["run-filter"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate-truth"));
}

#[test]
fn vacuous_constrained_filter_reproduces_enkf() {
    let dir = tempfile::tempdir().unwrap();
    // A fresh start keeps the unconstrained filter positive over these cycles.
    let cfg = ExperimentConfig::parse(
        "ensemble_size = 6\nspinup_days = 0\nrun_days = 12\n\
         energy_min = -inf\nenergy_max = inf\nactivity_floor = -inf\n",
    )
    .unwrap();
    let out = dir.path();
    pipeline::simulate_truth(&cfg, out).unwrap();
    pipeline::observe_truth(&cfg, out).unwrap();
    let e = pipeline::run_filter(&cfg, out, Method::Enkf).unwrap();
    let c = pipeline::run_filter(&cfg, out, Method::Cenkf).unwrap();
    assert_eq!(e.cycles_completed, 10);
    assert_eq!(c.cycles_completed, 10);
    for what in ["mean", "spread"] {
        let (fe, fc) = (
            pipeline::filter_file(Method::Enkf, what),
            pipeline::filter_file(Method::Cenkf, what),
        );
        assert_eq!(body(&out.join(fe)), body(&out.join(fc)), "{what}");
    }
    let (ae, ac) = (
        pipeline::read_archive(&out.join(pipeline::filter_file(Method::Enkf, "ensemble"))).unwrap(),
        pipeline::read_archive(&out.join(pipeline::filter_file(Method::Cenkf, "ensemble"))).unwrap(),
    );
    assert_eq!(ae, ac);
}

#[test]
fn pipeline_stages_chain_resume_and_check_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run");
    for stage in [&["simulate-truth"][..], &["observe"], &["run-filter"], &["train-rl"]] {
        ok(&mjoda(&out, &cfg, stage));
    }
    let lambda = out.join(pipeline::LAMBDA_TRACE_CSV);
    let first = body(&lambda);
    assert_eq!(first[0], "agent,epoch,lambda");
    assert_eq!(first.len(), 1 + 4 * 2);

    // Two more epochs on top of the checkpoints: old rows kept, epochs continue.
    ok(&mjoda(&out, &cfg, &["train-rl", "--resume"]));
    let resumed = body(&lambda);
    assert_eq!(resumed.len(), 1 + 4 * 4);
    for agent in 0..4 {
        let rows: Vec<&String> = resumed.iter().filter(|r| r.starts_with(&format!("{agent},"))).collect();
        let epochs: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
        assert_eq!(epochs, ["0", "1", "2", "3"]);
        let old: Vec<&String> = first.iter().filter(|r| r.starts_with(&format!("{agent},"))).collect();
        assert_eq!(&rows[..2], &old[..]);
    }

    // Resuming reproduces an uninterrupted run of the same total length.
    let straight = dir.path().join("straight");
    std::fs::create_dir_all(&straight).unwrap();
    for f in [
        pipeline::TRUTH_CSV,
        pipeline::TRUTH_BIN,
        pipeline::OBS_CSV,
        pipeline::DATASET_CSV,
    ] {
        std::fs::copy(out.join(f), straight.join(f)).unwrap();
    }
    let cenkf = pipeline::filter_file(Method::Cenkf, "ensemble");
    std::fs::copy(out.join(&cenkf), straight.join(&cenkf)).unwrap();
    let four = config(dir.path(), "four.cfg", &SMALL.replace("rl_epochs = 2", "rl_epochs = 4"));
    ok(&mjoda(&straight, &four, &["train-rl"]));
    assert_eq!(body(&straight.join(pipeline::LAMBDA_TRACE_CSV)), resumed);

    // A checkpoint trained on other model constants is refused.
    let other = config(
        dir.path(),
        "other.cfg",
        &format!("{SMALL}h_bar = 0.23\nsource = 0.023\n"),
    );
    let o = mjoda(&out, &other, &["infer-rl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));

    ok(&mjoda(&out, &cfg, &["infer-rl"]));
    let rl_files = [
        pipeline::RL_INFERENCE_CSV,
        pipeline::RL_ENERGY_CSV,
        pipeline::RL_MEMBERS_BIN,
    ];
    let outputs: Vec<Vec<u8>> = rl_files.iter().map(|f| read(&out.join(f))).collect();
    ok(&mjoda(&out, &cfg, &["infer-rl"]));
    for (f, before) in rl_files.iter().zip(&outputs) {
        assert_eq!(&read(&out.join(f)), before, "{f}");
    }
    let energies = pipeline::read_energies(&out.join(pipeline::RL_ENERGY_CSV)).unwrap();
    assert!(!energies.is_empty());
    assert!(energies.iter().all(|r| r.3 >= 1e-6), "activity floor");

    let late = config(
        dir.path(),
        "late.cfg",
        &SMALL.replace("eval_days = 12", "eval_days = 950"),
    );
    let o = mjoda(&out, &late, &["evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("day 950"));
    ok(&mjoda(&out, &cfg, &["evaluate", "--common-times"]));
    let summary = body(&out.join(pipeline::SKILL_DIR).join("summary.csv"));
    assert!(summary.iter().any(|r| r.starts_with("rl,MJO,12,")));

    ok(&mjoda(&out, &cfg, &["export-plots-data"]));
    for f in ["timeseries.csv", "hovmoller.csv", "energy.csv"] {
        assert!(out.join(pipeline::PLOTS_DIR).join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&read(&out.join("manifest.json"))).unwrap();
    for stage in [
        "simulate-truth",
        "observe",
        "run-filter-cenkf",
        "train-rl",
        "infer-rl",
        "evaluate",
        "export-plots-data",
    ] {
        assert_eq!(m["stages"][stage]["status"], "complete", "{stage}");
    }
}

#[test]
fn no_constraint_holds_multiplier_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run");
    for stage in [
        &["simulate-truth"][..],
        &["observe"],
        &["run-filter"],
        &["train-rl", "--no-constraint"],
    ] {
        ok(&mjoda(&out, &cfg, stage));
    }
    let rows = body(&out.join(pipeline::LAMBDA_TRACE_CSV));
    assert_eq!(rows.len(), 1 + 4 * 2);
    assert!(rows[1..].iter().all(|r| r.ends_with(",0")), "{rows:?}");
}
