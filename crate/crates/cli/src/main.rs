//! `planlm`: drive the experiment pipeline against a run directory.
//!
//! Configuration resolves in three tiers: an optional JSON file of flat
//! dotted keys (`--config`), then `PLM_*` environment variables, then
//! command-line overrides (`--set key=value` plus the subcommand shorthand
//! flags). The resolved config is written into the run directory and every
//! checkpoint, so artifacts are self-describing.

use clap::{Parser, Subcommand};
use planlm_core::experiment::{
    stage_cluster, stage_eval, stage_finetune, stage_generate, stage_prepare,
    stage_pretrain_planner, stage_probe, stage_sweep,
};
use planlm_core::{Error, ExperimentConfig, Result, RunDir};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "planlm", version, about = "Planner-conditioned language modeling pipeline")]
struct Cli {
    /// Run directory holding config, corpus cache, checkpoints, and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    run: PathBuf,

    /// JSON config file with flat dotted keys, e.g. {"trainer.mode": "soft"}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable. Applied after file and env.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cache documents into the run directory (synthetic unless --input).
    Prepare {
        /// File with one JSON-encoded document string per line.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit the action vocabulary by clustering train-split sentences.
    Cluster,
    /// Pretrain the planner (requires prepare and cluster).
    PretrainPlanner,
    /// Jointly fine-tune the planner and conditioned LM.
    Finetune {
        /// Shorthand for trainer.mode (hard|st|soft|uniform|oracle).
        #[arg(long)]
        mode: Option<String>,
        /// Shorthand for trainer.unfreeze (immediate|halfway|never).
        #[arg(long)]
        unfreeze: Option<String>,
        /// Shorthand for trainer.predicted_fraction (0..1 or "linear").
        #[arg(long)]
        predicted_fraction: Option<String>,
        /// Shorthand for trainer.total_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate the fine-tuned model; writes reports/eval.json.
    Eval,
    /// Sample a continuation from the fine-tuned model.
    Generate {
        /// Byte prefix to continue from (may be empty).
        #[arg(long, default_value = "")]
        prompt: String,
        /// Number of tokens to sample.
        #[arg(long, default_value_t = 128)]
        tokens: usize,
        /// Shorthand for eval.temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Shorthand for eval.top_p.
        #[arg(long)]
        top_p: Option<f64>,
    },
    /// Train linear action probes on frozen representations.
    Probe,
    /// Fine-tune and evaluate once per sweep.fractions grid point.
    Sweep,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        if let Error::MissingStage { required, .. } = &e {
            eprintln!("hint: run `planlm {required}` against the same --run directory first");
        }
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Vec::new();
    for entry in &cli.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    match &cli.command {
        Command::Finetune { mode, unfreeze, predicted_fraction, steps } => {
            push_opt(&mut overrides, "trainer.mode", mode.clone());
            push_opt(&mut overrides, "trainer.unfreeze", unfreeze.clone());
            push_opt(&mut overrides, "trainer.predicted_fraction", predicted_fraction.clone());
            push_opt(&mut overrides, "trainer.total_steps", steps.map(|s| s.to_string()));
        }
        Command::Generate { temperature, top_p, .. } => {
            push_opt(&mut overrides, "eval.temperature", temperature.map(|t| t.to_string()));
            push_opt(&mut overrides, "eval.top_p", top_p.map(|p| p.to_string()));
        }
        _ => {}
    }

    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), std::env::vars(), &overrides)?;
    let run = RunDir::open(&cli.run)?;
    let _lock = run.lock()?;

    match cli.command {
        Command::Prepare { input } => {
            let summary = stage_prepare(&run, &cfg, input.as_deref())?;
            println!(
                "prepared {} documents ({} skipped): {} train / {} val / {} test windows",
                summary.documents,
                summary.skipped,
                summary.train_windows,
                summary.val_windows,
                summary.test_windows
            );
        }
        Command::Cluster => {
            let summary = stage_cluster(&run, &cfg)?;
            println!(
                "clustered {} sentences into {} actions in {} iterations (objective {:.6})",
                summary.sentences, cfg.actions_k, summary.iterations, summary.objective
            );
        }
        Command::PretrainPlanner => {
            stage_pretrain_planner(&run, &cfg)?;
            println!(
                "pretrained planner for {} steps ({})",
                cfg.planner_pretrain_steps, cfg.planner_pretrain_objective
            );
        }
        Command::Finetune { .. } => {
            stage_finetune(&run, &cfg)?;
            println!(
                "fine-tuned for {} steps (mode {}, unfreeze {}, f {})",
                cfg.trainer_total_steps,
                cfg.trainer_mode,
                cfg.trainer_unfreeze,
                cfg.trainer_predicted_fraction
            );
        }
        Command::Eval => {
            let report = stage_eval(&run, &cfg)?;
            println!("{}", to_pretty(&report)?);
        }
        Command::Generate { prompt, tokens, .. } => {
            let gen = stage_generate(&run, &cfg, &prompt, tokens)?;
            println!("{}", String::from_utf8_lossy(&gen.text));
            eprintln!("planned actions: {:?}", gen.planned);
        }
        Command::Probe => {
            let report = stage_probe(&run, &cfg)?;
            println!("{}", to_pretty(&report)?);
        }
        Command::Sweep => {
            let points = stage_sweep(&run, &cfg)?;
            for p in &points {
                println!(
                    "f={:.2} ppl={:.4} plan_match={:.4} latent_ppl={:.4}",
                    p.fraction, p.report.ppl, p.report.plan_match_acc, p.report.latent_ppl
                );
            }
        }
    }
    Ok(())
}

fn push_opt(overrides: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v));
    }
}

fn to_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("cannot encode report: {e}")))
}
