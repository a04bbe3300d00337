//! Run-directory layout and stage orchestration.
//!
//! A run directory holds everything one experiment produces:
//!
//! ```text
//! runs/<name>/
//!   config.json      resolved flat config of the last stage that ran
//!   corpus.jsonl     cached documents, one JSON string per line
//!   metrics.jsonl    training metrics, one JSON object per line
//!   checkpoints/     <stage>.plm model snapshots
//!   reports/         eval/probe/sweep reports as JSON
//! ```
//!
//! Stages check for their upstream artifacts and fail with an error naming
//! the stage that must run first. All randomness derives from the master
//! seed, so rerunning a stage with the same config reproduces its outputs
//! byte for byte.

use crate::actions::{
    encode_corpus_sentences, fit_kmeans, oracle_actions, ActionVocabulary, SentenceEncoder,
};
use crate::checkpoint::Checkpoint;
use crate::condlm::ConditionedLM;
use crate::config::{ExperimentConfig, PretrainObjective};
use crate::corpus::{generate_synthetic, SegmentedCorpus, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate, EvalReport, Generated};
use crate::planner::{pretrain_planner, PlannerModel};
use crate::probe::{run_probes, ProbeReport};
use crate::rng::{derive_seed, stream};
use crate::trainer::{
    pretrain_planner_e2e_lm_frozen, train_joint, GroupGates, MetricsRecord, PredictedFraction,
};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

const LOCK_FILE: &str = ".lock";

/// Handle to a run directory. Acquire [`RunDir::lock`] before any stage that
/// writes; stages themselves assume the caller holds the lock.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

/// Exclusive marker for a run directory, removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl RunDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Take the run-directory lock. Fails if another process holds it.
    pub fn lock(&self) -> Result<RunLock> {
        let path = self.root.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.plm"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let json = serde_json::to_string_pretty(&cfg.to_flat())
            .map_err(|e| Error::config(format!("cannot encode config: {e}")))?;
        std::fs::write(self.config_path(), json + "\n")?;
        Ok(())
    }

    pub fn read_config(&self) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(self.config_path()).map_err(|e| {
            Error::config(format!("cannot read {}: {e}", self.config_path().display()))
        })?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_flat(&crate::config::parse_config_file(&text)?)?;
        Ok(cfg)
    }

    pub fn write_report<T: Serialize>(&self, name: &str, report: &T) -> Result<()> {
        let json = serde_json::to_string_pretty(report)
            .map_err(|e| Error::data(format!("cannot encode report {name}: {e}")))?;
        std::fs::write(self.report_path(name), json + "\n")?;
        Ok(())
    }

    /// Append metric records, each tagged with the stage that produced it.
    pub fn append_metrics(&self, stage: &str, records: &[serde_json::Value]) -> Result<()> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.metrics_path())?;
        for rec in records {
            let mut obj = rec
                .as_object()
                .cloned()
                .ok_or_else(|| Error::data("metrics record must be a JSON object"))?;
            obj.insert("stage".to_string(), serde_json::Value::String(stage.to_string()));
            writeln!(file, "{}", serde_json::Value::Object(obj))?;
        }
        Ok(())
    }
}

fn metric_value(rec: &MetricsRecord) -> serde_json::Value {
    serde_json::to_value(rec).expect("metrics record serializes")
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareSummary {
    pub documents: usize,
    pub skipped: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub sentences: usize,
    pub iterations: usize,
    pub objective: f64,
}

/// Cache documents in the run directory: synthetic by default, or read from
/// `input` (one JSON-encoded string per line).
pub fn stage_prepare(
    run: &RunDir,
    cfg: &ExperimentConfig,
    input: Option<&Path>,
) -> Result<PrepareSummary> {
    let texts: Vec<String> = match input {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
            let mut texts = Vec::new();
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let text: String = serde_json::from_str(line).map_err(|e| {
                    Error::data(format!("{}:{}: not a JSON string: {e}", path.display(), i + 1))
                })?;
                texts.push(text);
            }
            texts
        }
        None => generate_synthetic(&cfg.synthetic_config(), &mut stream(cfg.seed, "synthetic")),
    };
    if texts.is_empty() {
        return Err(Error::data("prepare: no documents"));
    }

    let mut out = String::new();
    for t in &texts {
        out.push_str(&serde_json::to_string(t).expect("string encodes"));
        out.push('\n');
    }
    std::fs::write(run.corpus_path(), out)?;
    run.write_config(cfg)?;

    let corpus = load_corpus(run, cfg, "prepare")?;
    Ok(PrepareSummary {
        documents: corpus.documents.len(),
        skipped: corpus.skipped_docs,
        train_windows: corpus.windows(Split::Train).len(),
        val_windows: corpus.windows(Split::Val).len(),
        test_windows: corpus.windows(Split::Test).len(),
    })
}

/// Rebuild the segmented corpus from the cached documents.
pub fn load_corpus(run: &RunDir, cfg: &ExperimentConfig, stage: &str) -> Result<SegmentedCorpus> {
    let path = run.corpus_path();
    if !path.exists() {
        return Err(Error::missing_stage(stage, "prepare"));
    }
    let raw = std::fs::read_to_string(&path)?;
    let mut texts = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let text: String = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("{}:{}: corrupt corpus cache: {e}", path.display(), i + 1))
        })?;
        texts.push(text);
    }
    SegmentedCorpus::build(
        &texts,
        cfg.corpus_window,
        derive_seed(cfg.seed, "split"),
        cfg.corpus_val_fraction,
        cfg.corpus_test_fraction,
    )
}

fn encoder_from(cfg: &ExperimentConfig) -> SentenceEncoder {
    SentenceEncoder::new(cfg.actions_hash_dim, cfg.actions_embed_dim, cfg.actions_encoder_seed)
}

/// Cluster train-split sentence embeddings into the action vocabulary.
pub fn stage_cluster(run: &RunDir, cfg: &ExperimentConfig) -> Result<ClusterSummary> {
    let corpus = load_corpus(run, cfg, "cluster")?;
    let encoder = encoder_from(cfg);
    let train_docs: Vec<&crate::corpus::Document> = corpus
        .doc_indices(Split::Train)
        .iter()
        .map(|&i| &corpus.documents[i])
        .collect();
    let (embeddings, _) =
        encode_corpus_sentences(&train_docs, &encoder, cfg.actions_max_sentences)?;
    let fit = fit_kmeans(
        &embeddings,
        cfg.actions_k,
        derive_seed(cfg.seed, "cluster"),
        encoder.fingerprint(),
    )?;

    let mut ckpt = Checkpoint::new("cluster", cfg.to_flat());
    ckpt.insert("actions.centroids", fit.vocab.centroids.clone())?;
    ckpt.extra
        .insert("encoder_fingerprint".to_string(), fit.vocab.encoder_fingerprint.to_string());
    ckpt.extra.insert("iterations".to_string(), fit.iterations.to_string());
    let objective = *fit.objective_trace.last().unwrap_or(&f64::NAN);
    ckpt.extra.insert("objective".to_string(), objective.to_string());
    ckpt.save(&run.checkpoint_path("cluster"))?;
    run.write_config(cfg)?;

    Ok(ClusterSummary {
        sentences: embeddings.rows(),
        iterations: fit.iterations,
        objective,
    })
}

fn load_vocab(run: &RunDir, cfg: &ExperimentConfig, stage: &str) -> Result<ActionVocabulary> {
    let path = run.checkpoint_path("cluster");
    if !path.exists() {
        return Err(Error::missing_stage(stage, "cluster"));
    }
    let ckpt = Checkpoint::load(&path)?;
    vocab_from_checkpoint(&ckpt, cfg)
}

fn vocab_from_checkpoint(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<ActionVocabulary> {
    let centroids = ckpt.get("actions.centroids")?.clone();
    let fingerprint: u64 = ckpt
        .extra
        .get("encoder_fingerprint")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::checkpoint("checkpoint lacks encoder_fingerprint"))?;
    if fingerprint != encoder_from(cfg).fingerprint() {
        return Err(Error::config(
            "actions.* settings differ from the ones used at cluster time; \
             re-run cluster or restore the original encoder settings",
        ));
    }
    if centroids.rows() != cfg.actions_k {
        return Err(Error::config(format!(
            "checkpoint has {} actions, config asks for {}",
            centroids.rows(),
            cfg.actions_k
        )));
    }
    Ok(ActionVocabulary {
        k: cfg.actions_k,
        centroids,
        encoder_fingerprint: fingerprint,
    })
}

/// Oracle action sequence for every document, in corpus order.
pub fn oracle_for_corpus(
    corpus: &SegmentedCorpus,
    encoder: &SentenceEncoder,
    vocab: &ActionVocabulary,
) -> Result<Vec<Vec<usize>>> {
    corpus
        .documents
        .iter()
        .map(|d| oracle_actions(d, encoder, vocab))
        .collect()
}

fn fresh_models(
    cfg: &ExperimentConfig,
    vocab: &ActionVocabulary,
) -> Result<(PlannerModel<f32>, ConditionedLM<f32>)> {
    let planner = PlannerModel::new(cfg.planner_config(), &mut stream(cfg.seed, "planner-init"))?;
    let mut lm = ConditionedLM::new(cfg.lm_config(), &mut stream(cfg.seed, "lm-init"))?;
    lm.init_action_embeddings(&vocab.centroids)?;
    Ok((planner, lm))
}

fn store_planner(ckpt: &mut Checkpoint, planner: &PlannerModel<f32>) -> Result<()> {
    for (name, t) in planner.param_names().into_iter().zip(planner.params()) {
        ckpt.insert(name, t.clone())?;
    }
    Ok(())
}

fn store_lm(ckpt: &mut Checkpoint, lm: &ConditionedLM<f32>, body: bool) -> Result<()> {
    if body {
        for (name, t) in lm.lm_param_names().into_iter().zip(lm.lm_params()) {
            ckpt.insert(name, t.clone())?;
        }
    }
    for (name, t) in lm.adapter_param_names().into_iter().zip(lm.adapter_params()) {
        ckpt.insert(name, t.clone())?;
    }
    Ok(())
}

fn load_planner(ckpt: &Checkpoint, planner: &mut PlannerModel<f32>) -> Result<()> {
    for (name, t) in planner.param_names().into_iter().zip(planner.params_mut()) {
        ckpt.load_into(&name, t)?;
    }
    Ok(())
}

fn has_adapters(ckpt: &Checkpoint, lm: &ConditionedLM<f32>) -> bool {
    lm.adapter_param_names().first().is_some_and(|n| ckpt.contains(n))
}

fn load_lm(ckpt: &Checkpoint, lm: &mut ConditionedLM<f32>, body: bool) -> Result<()> {
    if body {
        for (name, t) in lm.lm_param_names().into_iter().zip(lm.lm_params_mut()) {
            ckpt.load_into(&name, t)?;
        }
    }
    for (name, t) in lm.adapter_param_names().into_iter().zip(lm.adapter_params_mut()) {
        ckpt.load_into(&name, t)?;
    }
    Ok(())
}

/// Pretrain the planner: next-action prediction by default, or end to end
/// through the frozen LM for the no-NAP variant.
pub fn stage_pretrain_planner(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(run, cfg, "pretrain-planner")?;
    let vocab = load_vocab(run, cfg, "pretrain-planner")?;
    let encoder = encoder_from(cfg);
    let oracle = oracle_for_corpus(&corpus, &encoder, &vocab)?;
    let (mut planner, mut lm) = fresh_models(cfg, &vocab)?;

    let mut records = Vec::new();
    match cfg.planner_pretrain_objective {
        PretrainObjective::Nap => {
            pretrain_planner(
                &mut planner,
                &corpus,
                &oracle,
                cfg.planner_pretrain_steps,
                cfg.planner_pretrain_batch,
                cfg.planner_pretrain_lr,
                derive_seed(cfg.seed, "pretrain-planner"),
                |s| {
                    if log_due(s.step, cfg.planner_pretrain_steps, cfg.trainer_log_interval) {
                        records.push(serde_json::json!({"step": s.step, "nap": s.nap}));
                    }
                },
            )?;
        }
        PretrainObjective::NtpFrozenLm => {
            pretrain_planner_e2e_lm_frozen(
                &mut planner,
                &mut lm,
                &corpus,
                &oracle,
                cfg.planner_pretrain_steps,
                cfg.planner_pretrain_lr,
                cfg.planner_pretrain_batch,
                derive_seed(cfg.seed, "pretrain-planner"),
                cfg.trainer_log_interval,
                |r| records.push(metric_value(r)),
            )?;
        }
    }
    run.append_metrics("pretrain-planner", &records)?;

    let mut ckpt = Checkpoint::new("pretrain-planner", cfg.to_flat());
    ckpt.extra
        .insert("objective".to_string(), cfg.planner_pretrain_objective.to_string());
    store_planner(&mut ckpt, &planner)?;
    if cfg.planner_pretrain_objective == PretrainObjective::NtpFrozenLm {
        // The e2e variant trains the adapter projections too; carry them.
        store_lm(&mut ckpt, &lm, false)?;
    }
    ckpt.save(&run.checkpoint_path("planner"))?;
    run.write_config(cfg)?;
    Ok(())
}

fn log_due(step: usize, total: usize, interval: usize) -> bool {
    interval > 0 && (step.is_multiple_of(interval) || step == total)
}

/// Joint fine-tuning. Requires the cluster checkpoint, and the planner
/// checkpoint unless `planner.pretrain_steps` is zero (train from scratch).
pub fn stage_finetune(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(run, cfg, "finetune")?;
    let vocab = load_vocab(run, cfg, "finetune")?;
    let encoder = encoder_from(cfg);
    let oracle = oracle_for_corpus(&corpus, &encoder, &vocab)?;
    let (mut planner, mut lm) = fresh_models(cfg, &vocab)?;

    let planner_path = run.checkpoint_path("planner");
    if planner_path.exists() {
        let pckpt = Checkpoint::load(&planner_path)?;
        load_planner(&pckpt, &mut planner)?;
        if has_adapters(&pckpt, &lm) {
            load_lm(&pckpt, &mut lm, false)?;
        }
    } else if cfg.planner_pretrain_steps > 0 {
        return Err(Error::missing_stage("finetune", "pretrain-planner"));
    }

    let schedule = cfg.schedule();
    let mut records = Vec::new();
    train_joint(
        &mut planner,
        &mut lm,
        &corpus,
        &oracle,
        &schedule,
        GroupGates::default(),
        cfg.trainer_log_interval,
        |r| records.push(metric_value(r)),
    )?;
    run.append_metrics("finetune", &records)?;

    let mut ckpt = Checkpoint::new("finetune", cfg.to_flat());
    store_planner(&mut ckpt, &planner)?;
    store_lm(&mut ckpt, &lm, true)?;
    ckpt.insert("actions.centroids", vocab.centroids.clone())?;
    ckpt.extra
        .insert("encoder_fingerprint".to_string(), vocab.encoder_fingerprint.to_string());
    ckpt.save(&run.checkpoint_path("finetune"))?;
    run.write_config(cfg)?;
    Ok(())
}

/// Load the fine-tuned model triple from a run directory.
pub fn load_finetuned(
    run: &RunDir,
    cfg: &ExperimentConfig,
    stage: &str,
) -> Result<(PlannerModel<f32>, ConditionedLM<f32>, ActionVocabulary)> {
    let path = run.checkpoint_path("finetune");
    if !path.exists() {
        return Err(Error::missing_stage(stage, "finetune"));
    }
    let ckpt = Checkpoint::load(&path)?;
    let vocab = vocab_from_checkpoint(&ckpt, cfg)?;
    let (mut planner, mut lm) = fresh_models(cfg, &vocab)?;
    load_planner(&ckpt, &mut planner)?;
    load_lm(&ckpt, &mut lm, true)?;
    Ok((planner, lm, vocab))
}

/// Evaluate the fine-tuned model and write `reports/eval.json`.
pub fn stage_eval(run: &RunDir, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let corpus = load_corpus(run, cfg, "eval")?;
    let (planner, lm, vocab) = load_finetuned(run, cfg, "eval")?;
    let encoder = encoder_from(cfg);
    let oracle = oracle_for_corpus(&corpus, &encoder, &vocab)?;
    let report = evaluate(
        &planner,
        &lm,
        &corpus,
        &oracle,
        cfg.eval_split,
        cfg.trainer_mode,
        &encoder,
        &vocab,
        &cfg.eval_config(),
    )?;
    run.write_report("eval", &report)?;
    run.write_config(cfg)?;
    Ok(report)
}

/// Sample a continuation from the fine-tuned model.
pub fn stage_generate(
    run: &RunDir,
    cfg: &ExperimentConfig,
    prompt: &str,
    n_tokens: usize,
) -> Result<Generated> {
    let (planner, lm, _) = load_finetuned(run, cfg, "generate")?;
    generate(
        &planner,
        &lm,
        cfg.trainer_mode,
        prompt.as_bytes(),
        n_tokens,
        cfg.eval_temperature,
        cfg.eval_top_p,
        derive_seed(cfg.seed, "generate-cli"),
    )
}

/// Train linear probes against the fine-tuned model and write
/// `reports/probe.json`.
pub fn stage_probe(run: &RunDir, cfg: &ExperimentConfig) -> Result<ProbeReport> {
    let corpus = load_corpus(run, cfg, "probe")?;
    let (planner, lm, _) = load_finetuned(run, cfg, "probe")?;
    let report = run_probes(
        &planner,
        &lm,
        &corpus,
        cfg.probe_split,
        cfg.trainer_mode,
        &cfg.probe_distances,
        cfg.probe_train_steps,
        cfg.probe_lr,
        derive_seed(cfg.seed, "probe"),
    )?;
    run.write_report("probe", &report)?;
    run.write_config(cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub report: EvalReport,
}

/// Fine-tune and evaluate once per predicted-fraction grid point, writing
/// `reports/sweep-<i>.json` for each point plus an aggregate
/// `reports/sweep.json`.
pub fn stage_sweep(run: &RunDir, cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let corpus = load_corpus(run, cfg, "sweep")?;
    let vocab = load_vocab(run, cfg, "sweep")?;
    let encoder = encoder_from(cfg);
    let oracle = oracle_for_corpus(&corpus, &encoder, &vocab)?;

    let planner_path = run.checkpoint_path("planner");
    if !planner_path.exists() && cfg.planner_pretrain_steps > 0 {
        return Err(Error::missing_stage("sweep", "pretrain-planner"));
    }

    let mut points = Vec::new();
    for (i, &fraction) in cfg.sweep_fractions.iter().enumerate() {
        let (mut planner, mut lm) = fresh_models(cfg, &vocab)?;
        if planner_path.exists() {
            let pckpt = Checkpoint::load(&planner_path)?;
            load_planner(&pckpt, &mut planner)?;
            if has_adapters(&pckpt, &lm) {
                load_lm(&pckpt, &mut lm, false)?;
            }
        }
        let mut schedule = cfg.schedule();
        schedule.predicted_fraction = PredictedFraction::Fixed(fraction);
        schedule.seed = derive_seed(cfg.seed, &format!("sweep/{i}"));

        let mut records = Vec::new();
        train_joint(
            &mut planner,
            &mut lm,
            &corpus,
            &oracle,
            &schedule,
            GroupGates::default(),
            cfg.trainer_log_interval,
            |r| {
                let mut v = metric_value(r);
                v.as_object_mut()
                    .expect("object")
                    .insert("fraction".to_string(), serde_json::json!(fraction));
                records.push(v);
            },
        )?;
        run.append_metrics("sweep", &records)?;

        let mut eval_cfg = cfg.eval_config();
        eval_cfg.seed = derive_seed(cfg.seed, &format!("sweep-eval/{i}"));
        let report = evaluate(
            &planner,
            &lm,
            &corpus,
            &oracle,
            cfg.eval_split,
            cfg.trainer_mode,
            &encoder,
            &vocab,
            &eval_cfg,
        )?;
        run.write_report(&format!("sweep-{i}"), &report)?;
        points.push(SweepPoint { fraction, report });
    }
    run.write_report("sweep", &points)?;
    run.write_config(cfg)?;
    Ok(points)
}
