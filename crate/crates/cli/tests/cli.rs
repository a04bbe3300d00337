//! End-to-end tests driving the `planlm` binary as a subprocess.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_planlm")
}

/// Settings small enough that a full pipeline runs in a few seconds.
fn tiny_sets() -> Vec<String> {
    [
        ("seed", "11"),
        ("corpus.synthetic_docs", "30"),
        ("corpus.min_sentences", "4"),
        ("corpus.max_sentences", "8"),
        ("corpus.window", "32"),
        ("corpus.val_fraction", "0.2"),
        ("corpus.test_fraction", "0.2"),
        ("actions.k", "4"),
        ("actions.hash_dim", "64"),
        ("actions.embed_dim", "8"),
        ("planner.dim", "16"),
        ("planner.heads", "2"),
        ("planner.layers", "1"),
        ("planner.pretrain_steps", "3"),
        ("planner.pretrain_batch", "2"),
        ("lm.dim", "16"),
        ("lm.heads", "2"),
        ("lm.layers", "2"),
        ("lm.context", "32"),
        ("lm.adapter_layers", "1"),
        ("trainer.total_steps", "3"),
        ("trainer.batch_size", "2"),
        ("trainer.log_interval", "1"),
        ("trainer.lr", "1e-6"),
        ("eval.gen_lengths", "8"),
        ("eval.prefix_bytes", "8"),
        ("eval.docs", "2"),
        ("eval.uncond_samples", "2"),
        ("eval.uncond_tokens", "24"),
        ("eval.critic_states", "2"),
        ("probe.distances", "1"),
        ("probe.train_steps", "5"),
        ("sweep.fractions", "0,1"),
    ]
    .iter()
    .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
    .collect()
}

fn run_cmd(run_dir: &Path, args: &[&str], extra_env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.arg("--run").arg(run_dir);
    cmd.args(args);
    cmd.args(tiny_sets());
    // Drop any ambient PLM_ overrides so tests are hermetic.
    for (name, _) in std::env::vars() {
        if name.starts_with("PLM_") {
            cmd.env_remove(name);
        }
    }
    for (k, v) in extra_env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_lists_all_subcommands() {
    let out = Command::new(bin()).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "prepare",
        "cluster",
        "pretrain-planner",
        "finetune",
        "eval",
        "generate",
        "probe",
        "sweep",
    ] {
        assert!(text.contains(sub), "help is missing {sub}");
    }
}

#[test]
fn full_pipeline_then_eval_reports_near_uniform_ppl() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");

    assert_ok(&run_cmd(&run, &["prepare"], &[]), "prepare");
    assert_ok(&run_cmd(&run, &["cluster"], &[]), "cluster");
    assert_ok(&run_cmd(&run, &["pretrain-planner"], &[]), "pretrain-planner");
    assert_ok(&run_cmd(&run, &["finetune"], &[]), "finetune");

    let eval = run_cmd(&run, &["eval"], &[]);
    assert_ok(&eval, "eval");
    let report: serde_json::Value =
        serde_json::from_slice(&eval.stdout).expect("eval prints a JSON report");
    let ppl = report["ppl"].as_f64().unwrap();
    // Three steps at lr 1e-6 leave the model essentially at initialization,
    // where byte-level perplexity sits near the vocabulary size (258).
    assert!(ppl > 100.0 && ppl < 600.0, "ppl = {ppl}");

    assert!(run.join("config.json").exists());
    assert!(run.join("corpus.jsonl").exists());
    assert!(run.join("metrics.jsonl").exists());
    assert!(run.join("checkpoints/finetune.plm").exists());
    assert!(run.join("reports/eval.json").exists());
}

#[test]
fn generate_and_probe_work_after_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert_ok(&run_cmd(&run, &["prepare"], &[]), "prepare");
    assert_ok(&run_cmd(&run, &["cluster"], &[]), "cluster");
    assert_ok(&run_cmd(&run, &["pretrain-planner"], &[]), "pretrain-planner");
    assert_ok(&run_cmd(&run, &["finetune"], &[]), "finetune");

    let gen = run_cmd(
        &run,
        &["generate", "--prompt", "One thing. ", "--tokens", "12"],
        &[],
    );
    assert_ok(&gen, "generate");
    assert!(!gen.stdout.is_empty());

    let probe = run_cmd(&run, &["probe"], &[]);
    assert_ok(&probe, "probe");
    let report: serde_json::Value = serde_json::from_slice(&probe.stdout).unwrap();
    assert!(report["entries"].as_array().is_some());
    assert!(run.join("reports/probe.json").exists());
}

#[test]
fn sweep_emits_one_report_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert_ok(&run_cmd(&run, &["prepare"], &[]), "prepare");
    assert_ok(&run_cmd(&run, &["cluster"], &[]), "cluster");
    assert_ok(&run_cmd(&run, &["pretrain-planner"], &[]), "pretrain-planner");

    let sweep = run_cmd(&run, &["sweep"], &[]);
    assert_ok(&sweep, "sweep");
    let text = String::from_utf8_lossy(&sweep.stdout);
    assert_eq!(text.lines().count(), 2, "one summary line per grid point");
    assert!(run.join("reports/sweep-0.json").exists());
    assert!(run.join("reports/sweep-1.json").exists());
    assert!(run.join("reports/sweep.json").exists());
}

#[test]
fn missing_stage_is_actionable_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");

    let out = run_cmd(&run, &["eval"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`prepare`"), "stderr: {err}");

    assert_ok(&run_cmd(&run, &["prepare"], &[]), "prepare");
    let out = run_cmd(&run, &["finetune"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`cluster`"), "stderr: {err}");
    assert!(err.contains("hint:"), "stderr: {err}");
}

#[test]
fn config_errors_exit_2_and_checkpoint_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");

    let out = run_cmd(&run, &["prepare", "--set", "no.such.key=1"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    let out = run_cmd(&run, &["prepare", "--set", "malformed"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // A corrupt checkpoint is a data-class failure.
    assert_ok(&run_cmd(&run, &["prepare"], &[]), "prepare");
    assert_ok(&run_cmd(&run, &["cluster"], &[]), "cluster");
    std::fs::write(run.join("checkpoints/cluster.plm"), b"not a checkpoint").unwrap();
    let out = run_cmd(&run, &["pretrain-planner"], &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn env_overrides_beat_file_and_flags_beat_env() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"trainer.nap_weight": 0.25, "eval.edit_base": 16}"#).unwrap();

    let out = Command::new(bin())
        .arg("--run")
        .arg(&run)
        .arg("--config")
        .arg(&cfg_path)
        .args(["prepare"])
        .args(tiny_sets())
        .args(["--set", "eval.edit_base=48"])
        .env("PLM_TRAINER_NAP_WEIGHT", "0.5")
        .env("PLM_EVAL_EDIT_BASE", "32")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["trainer.nap_weight"], "0.5", "env beats file");
    assert_eq!(cfg["eval.edit_base"], "48", "flag beats env");
}

#[test]
fn unknown_plm_environment_variable_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let out = run_cmd(&run, &["prepare"], &[("PLM_BOGUS_KEY", "1")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PLM_BOGUS_KEY"));
}

#[test]
fn lock_file_blocks_concurrent_use() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "held\n").unwrap();

    let out = run_cmd(&run, &["prepare"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut snaps = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        assert_ok(&run_cmd(&run, &["prepare"], &[]), "prepare");
        assert_ok(&run_cmd(&run, &["cluster"], &[]), "cluster");
        assert_ok(&run_cmd(&run, &["pretrain-planner"], &[]), "pretrain");
        assert_ok(&run_cmd(&run, &["finetune"], &[]), "finetune");
        snaps.push((
            std::fs::read(run.join("checkpoints/finetune.plm")).unwrap(),
            std::fs::read(run.join("metrics.jsonl")).unwrap(),
        ));
    }
    assert_eq!(snaps[0].0, snaps[1].0, "checkpoints differ between runs");
    assert_eq!(snaps[0].1, snaps[1].1, "metrics logs differ between runs");
}
