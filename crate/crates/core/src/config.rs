//! Experiment configuration: a flat set of dotted keys with typed defaults.
//! Values resolve in order file < `PLM_` environment overrides < explicit
//! command-line overrides, and unknown keys are rejected everywhere.

use crate::condlm::{ConditioningMode, LmConfig};
use crate::corpus::{Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::planner::PlannerConfig;
use crate::rng::derive_seed;
use crate::trainer::{PredictedFraction, TrainingSchedule, UnfreezePolicy};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// How the planner pretraining stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainObjective {
    /// Next-action prediction against oracle actions.
    Nap,
    /// End to end through the NTP loss with the LM body frozen.
    NtpFrozenLm,
}

impl FromStr for PretrainObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nap" => Ok(PretrainObjective::Nap),
            "ntp-frozen-lm" => Ok(PretrainObjective::NtpFrozenLm),
            other => Err(Error::config(format!("unknown pretrain objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for PretrainObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PretrainObjective::Nap => "nap",
            PretrainObjective::NtpFrozenLm => "ntp-frozen-lm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stages: Vec<String>,

    pub corpus_window: usize,
    pub corpus_val_fraction: f64,
    pub corpus_test_fraction: f64,
    pub corpus_synthetic_docs: usize,
    pub corpus_min_sentences: usize,
    pub corpus_max_sentences: usize,

    pub actions_k: usize,
    pub actions_hash_dim: usize,
    pub actions_embed_dim: usize,
    pub actions_encoder_seed: u64,
    pub actions_max_sentences: usize,

    pub planner_dim: usize,
    pub planner_heads: usize,
    pub planner_layers: usize,
    pub planner_max_sentences: usize,
    pub planner_pretrain_steps: usize,
    pub planner_pretrain_batch: usize,
    pub planner_pretrain_lr: f64,
    pub planner_pretrain_objective: PretrainObjective,

    pub lm_dim: usize,
    pub lm_heads: usize,
    pub lm_layers: usize,
    pub lm_context: usize,
    pub lm_adapter_layers: Vec<usize>,

    pub trainer_total_steps: usize,
    pub trainer_lr: f64,
    pub trainer_batch_size: usize,
    pub trainer_unfreeze: UnfreezePolicy,
    pub trainer_mode: ConditioningMode,
    pub trainer_predicted_fraction: PredictedFraction,
    pub trainer_nap_weight: f64,
    pub trainer_log_interval: usize,

    pub eval_split: Split,
    pub eval_gen_lengths: Vec<usize>,
    pub eval_edit_base: usize,
    pub eval_prefix_bytes: usize,
    pub eval_docs: usize,
    pub eval_uncond_samples: usize,
    pub eval_uncond_tokens: usize,
    pub eval_temperature: f64,
    pub eval_top_p: f64,
    pub eval_critic_states: usize,

    pub probe_split: Split,
    pub probe_distances: Vec<usize>,
    pub probe_train_steps: usize,
    pub probe_lr: f64,

    pub sweep_fractions: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            stages: ["prepare", "cluster", "pretrain-planner", "finetune", "eval"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            corpus_window: 128,
            corpus_val_fraction: 0.05,
            corpus_test_fraction: 0.05,
            corpus_synthetic_docs: 5000,
            corpus_min_sentences: 8,
            corpus_max_sentences: 32,
            actions_k: 32,
            actions_hash_dim: 4096,
            actions_embed_dim: 64,
            actions_encoder_seed: 0,
            actions_max_sentences: 100_000,
            planner_dim: 128,
            planner_heads: 4,
            planner_layers: 2,
            planner_max_sentences: 64,
            planner_pretrain_steps: 1000,
            planner_pretrain_batch: 8,
            planner_pretrain_lr: 1e-3,
            planner_pretrain_objective: PretrainObjective::Nap,
            lm_dim: 128,
            lm_heads: 4,
            lm_layers: 4,
            lm_context: 128,
            lm_adapter_layers: vec![2, 3],
            trainer_total_steps: 2000,
            trainer_lr: 1e-4,
            trainer_batch_size: 32,
            trainer_unfreeze: UnfreezePolicy::Halfway,
            trainer_mode: ConditioningMode::Soft,
            trainer_predicted_fraction: PredictedFraction::Fixed(1.0),
            trainer_nap_weight: 0.0,
            trainer_log_interval: 10,
            eval_split: Split::Test,
            eval_gen_lengths: vec![64, 128, 256],
            eval_edit_base: 64,
            eval_prefix_bytes: 32,
            eval_docs: 8,
            eval_uncond_samples: 8,
            eval_uncond_tokens: 192,
            eval_temperature: 1.0,
            eval_top_p: 1.0,
            eval_critic_states: 8,
            probe_split: Split::Train,
            probe_distances: vec![1, 2, 4, 8],
            probe_train_steps: 2000,
            probe_lr: 1e-3,
            sweep_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::config(format!("key {key}: cannot parse {raw:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed.split(',').map(|part| parse(key, part)).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "stages",
        "corpus.window",
        "corpus.val_fraction",
        "corpus.test_fraction",
        "corpus.synthetic_docs",
        "corpus.min_sentences",
        "corpus.max_sentences",
        "actions.k",
        "actions.hash_dim",
        "actions.embed_dim",
        "actions.encoder_seed",
        "actions.max_sentences",
        "planner.dim",
        "planner.heads",
        "planner.layers",
        "planner.max_sentences",
        "planner.pretrain_steps",
        "planner.pretrain_batch",
        "planner.pretrain_lr",
        "planner.pretrain_objective",
        "lm.dim",
        "lm.heads",
        "lm.layers",
        "lm.context",
        "lm.adapter_layers",
        "trainer.total_steps",
        "trainer.lr",
        "trainer.batch_size",
        "trainer.unfreeze",
        "trainer.mode",
        "trainer.predicted_fraction",
        "trainer.nap_weight",
        "trainer.log_interval",
        "eval.split",
        "eval.gen_lengths",
        "eval.edit_base",
        "eval.prefix_bytes",
        "eval.docs",
        "eval.uncond_samples",
        "eval.uncond_tokens",
        "eval.temperature",
        "eval.top_p",
        "eval.critic_states",
        "probe.split",
        "probe.distances",
        "probe.train_steps",
        "probe.lr",
        "sweep.fractions",
    ];

    /// Set one key from its string form.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, raw)?,
            "stages" => self.stages = parse_list(key, raw)?,
            "corpus.window" => self.corpus_window = parse(key, raw)?,
            "corpus.val_fraction" => self.corpus_val_fraction = parse(key, raw)?,
            "corpus.test_fraction" => self.corpus_test_fraction = parse(key, raw)?,
            "corpus.synthetic_docs" => self.corpus_synthetic_docs = parse(key, raw)?,
            "corpus.min_sentences" => self.corpus_min_sentences = parse(key, raw)?,
            "corpus.max_sentences" => self.corpus_max_sentences = parse(key, raw)?,
            "actions.k" => self.actions_k = parse(key, raw)?,
            "actions.hash_dim" => self.actions_hash_dim = parse(key, raw)?,
            "actions.embed_dim" => self.actions_embed_dim = parse(key, raw)?,
            "actions.encoder_seed" => self.actions_encoder_seed = parse(key, raw)?,
            "actions.max_sentences" => self.actions_max_sentences = parse(key, raw)?,
            "planner.dim" => self.planner_dim = parse(key, raw)?,
            "planner.heads" => self.planner_heads = parse(key, raw)?,
            "planner.layers" => self.planner_layers = parse(key, raw)?,
            "planner.max_sentences" => self.planner_max_sentences = parse(key, raw)?,
            "planner.pretrain_steps" => self.planner_pretrain_steps = parse(key, raw)?,
            "planner.pretrain_batch" => self.planner_pretrain_batch = parse(key, raw)?,
            "planner.pretrain_lr" => self.planner_pretrain_lr = parse(key, raw)?,
            "planner.pretrain_objective" => {
                self.planner_pretrain_objective = raw.trim().parse()?
            }
            "lm.dim" => self.lm_dim = parse(key, raw)?,
            "lm.heads" => self.lm_heads = parse(key, raw)?,
            "lm.layers" => self.lm_layers = parse(key, raw)?,
            "lm.context" => self.lm_context = parse(key, raw)?,
            "lm.adapter_layers" => self.lm_adapter_layers = parse_list(key, raw)?,
            "trainer.total_steps" => self.trainer_total_steps = parse(key, raw)?,
            "trainer.lr" => self.trainer_lr = parse(key, raw)?,
            "trainer.batch_size" => self.trainer_batch_size = parse(key, raw)?,
            "trainer.unfreeze" => self.trainer_unfreeze = raw.trim().parse()?,
            "trainer.mode" => self.trainer_mode = raw.trim().parse()?,
            "trainer.predicted_fraction" => {
                self.trainer_predicted_fraction = raw.trim().parse()?
            }
            "trainer.nap_weight" => self.trainer_nap_weight = parse(key, raw)?,
            "trainer.log_interval" => self.trainer_log_interval = parse(key, raw)?,
            "eval.split" => self.eval_split = raw.trim().parse()?,
            "eval.gen_lengths" => self.eval_gen_lengths = parse_list(key, raw)?,
            "eval.edit_base" => self.eval_edit_base = parse(key, raw)?,
            "eval.prefix_bytes" => self.eval_prefix_bytes = parse(key, raw)?,
            "eval.docs" => self.eval_docs = parse(key, raw)?,
            "eval.uncond_samples" => self.eval_uncond_samples = parse(key, raw)?,
            "eval.uncond_tokens" => self.eval_uncond_tokens = parse(key, raw)?,
            "eval.temperature" => self.eval_temperature = parse(key, raw)?,
            "eval.top_p" => self.eval_top_p = parse(key, raw)?,
            "eval.critic_states" => self.eval_critic_states = parse(key, raw)?,
            "probe.split" => self.probe_split = raw.trim().parse()?,
            "probe.distances" => self.probe_distances = parse_list(key, raw)?,
            "probe.train_steps" => self.probe_train_steps = parse(key, raw)?,
            "probe.lr" => self.probe_lr = parse(key, raw)?,
            "sweep.fractions" => self.sweep_fractions = parse_list(key, raw)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// The full flat key/value view; every value round-trips through
    /// [`ExperimentConfig::set_str`].
    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("stages", self.stages.join(","));
        put("corpus.window", self.corpus_window.to_string());
        put("corpus.val_fraction", self.corpus_val_fraction.to_string());
        put("corpus.test_fraction", self.corpus_test_fraction.to_string());
        put("corpus.synthetic_docs", self.corpus_synthetic_docs.to_string());
        put("corpus.min_sentences", self.corpus_min_sentences.to_string());
        put("corpus.max_sentences", self.corpus_max_sentences.to_string());
        put("actions.k", self.actions_k.to_string());
        put("actions.hash_dim", self.actions_hash_dim.to_string());
        put("actions.embed_dim", self.actions_embed_dim.to_string());
        put("actions.encoder_seed", self.actions_encoder_seed.to_string());
        put("actions.max_sentences", self.actions_max_sentences.to_string());
        put("planner.dim", self.planner_dim.to_string());
        put("planner.heads", self.planner_heads.to_string());
        put("planner.layers", self.planner_layers.to_string());
        put("planner.max_sentences", self.planner_max_sentences.to_string());
        put("planner.pretrain_steps", self.planner_pretrain_steps.to_string());
        put("planner.pretrain_batch", self.planner_pretrain_batch.to_string());
        put("planner.pretrain_lr", self.planner_pretrain_lr.to_string());
        put(
            "planner.pretrain_objective",
            self.planner_pretrain_objective.to_string(),
        );
        put("lm.dim", self.lm_dim.to_string());
        put("lm.heads", self.lm_heads.to_string());
        put("lm.layers", self.lm_layers.to_string());
        put("lm.context", self.lm_context.to_string());
        put("lm.adapter_layers", join(&self.lm_adapter_layers));
        put("trainer.total_steps", self.trainer_total_steps.to_string());
        put("trainer.lr", self.trainer_lr.to_string());
        put("trainer.batch_size", self.trainer_batch_size.to_string());
        put("trainer.unfreeze", self.trainer_unfreeze.to_string());
        put("trainer.mode", self.trainer_mode.to_string());
        put(
            "trainer.predicted_fraction",
            self.trainer_predicted_fraction.to_string(),
        );
        put("trainer.nap_weight", self.trainer_nap_weight.to_string());
        put("trainer.log_interval", self.trainer_log_interval.to_string());
        put("eval.split", self.eval_split.to_string());
        put("eval.gen_lengths", join(&self.eval_gen_lengths));
        put("eval.edit_base", self.eval_edit_base.to_string());
        put("eval.prefix_bytes", self.eval_prefix_bytes.to_string());
        put("eval.docs", self.eval_docs.to_string());
        put("eval.uncond_samples", self.eval_uncond_samples.to_string());
        put("eval.uncond_tokens", self.eval_uncond_tokens.to_string());
        put("eval.temperature", self.eval_temperature.to_string());
        put("eval.top_p", self.eval_top_p.to_string());
        put("eval.critic_states", self.eval_critic_states.to_string());
        put("probe.split", self.probe_split.to_string());
        put("probe.distances", join(&self.probe_distances));
        put("probe.train_steps", self.probe_train_steps.to_string());
        put("probe.lr", self.probe_lr.to_string());
        put("sweep.fractions", join(&self.sweep_fractions));
        map
    }

    /// Apply a flat map (e.g. a parsed config file), rejecting unknown keys.
    pub fn apply_flat(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            self.set_str(k, v)?;
        }
        Ok(())
    }

    /// Read overrides from the process environment: `PLM_TRAINER_MODE`
    /// overrides `trainer.mode`. Unknown `PLM_` variables are rejected.
    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<()> {
        let known: BTreeMap<String, &str> = Self::KEYS
            .iter()
            .map(|&k| (format!("PLM_{}", k.to_uppercase().replace('.', "_")), k))
            .collect();
        for (name, value) in vars {
            if !name.starts_with("PLM_") {
                continue;
            }
            match known.get(&name) {
                Some(&key) => self.set_str(key, &value)?,
                None => {
                    return Err(Error::config(format!(
                        "environment variable {name} matches no config key"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Full resolution: defaults, then file, then environment, then explicit
    /// `key=value` overrides.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Iterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_flat(&parse_config_file(&text)?)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set_str(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.planner_config().validate()?;
        self.lm_config().validate()?;
        if self.corpus_window < 2 {
            return Err(Error::config("corpus.window must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.corpus_val_fraction)
            || !(0.0..1.0).contains(&self.corpus_test_fraction)
            || self.corpus_val_fraction + self.corpus_test_fraction >= 1.0
        {
            return Err(Error::config("corpus split fractions must fit in [0, 1)"));
        }
        for &f in &self.sweep_fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("sweep.fractions entries must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            vocab: crate::corpus::VOCAB_SIZE,
            dim: self.planner_dim,
            heads: self.planner_heads,
            layers: self.planner_layers,
            k: self.actions_k,
            max_sentences: self.planner_max_sentences,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab: crate::corpus::VOCAB_SIZE,
            dim: self.lm_dim,
            heads: self.lm_heads,
            layers: self.lm_layers,
            context: self.lm_context,
            adapter_layers: self.lm_adapter_layers.clone(),
            k: self.actions_k,
            embed_dim: self.actions_embed_dim,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            docs: self.corpus_synthetic_docs,
            min_sentences: self.corpus_min_sentences,
            max_sentences: self.corpus_max_sentences,
        }
    }

    pub fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            total_steps: self.trainer_total_steps,
            lr: self.trainer_lr,
            batch_size: self.trainer_batch_size,
            unfreeze: self.trainer_unfreeze,
            predicted_fraction: self.trainer_predicted_fraction,
            nap_weight: self.trainer_nap_weight,
            mode: self.trainer_mode,
            seed: derive_seed(self.seed, "finetune"),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            gen_lengths: self.eval_gen_lengths.clone(),
            edit_base: self.eval_edit_base,
            prefix_bytes: self.eval_prefix_bytes,
            eval_docs: self.eval_docs,
            uncond_samples: self.eval_uncond_samples,
            uncond_tokens: self.eval_uncond_tokens,
            temperature: self.eval_temperature,
            top_p: self.eval_top_p,
            critic_states: self.eval_critic_states,
            seed: derive_seed(self.seed, "eval"),
        }
    }
}

/// Parse a JSON config file: one flat object, string/number/bool values.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::config("config must be a JSON object"))?;
    let mut map = BTreeMap::new();
    for (k, v) in obj {
        let s = match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            serde_json::Value::Array(items) => {
                let parts: Result<Vec<String>> = items
                    .iter()
                    .map(|i| match i {
                        serde_json::Value::String(s) => Ok(s.clone()),
                        serde_json::Value::Number(n) => Ok(n.to_string()),
                        other => Err(Error::config(format!(
                            "key {k}: unsupported array element {other}"
                        ))),
                    })
                    .collect();
                parts?.join(",")
            }
            other => {
                return Err(Error::config(format!("key {k}: unsupported value {other}")))
            }
        };
        map.insert(k.clone(), s);
    }
    Ok(map)
}
