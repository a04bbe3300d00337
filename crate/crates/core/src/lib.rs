//! Planner-conditioned language modeling on byte-level corpora.
//!
//! The crate covers the full pipeline: corpus segmentation and windowing,
//! sentence encoding and action clustering, planner pretraining, conditioned
//! LM training with differentiable action selection, joint fine-tuning,
//! evaluation (perplexity, generation metrics, latent critic), linear
//! probing, and deterministic experiment orchestration.

// Numeric kernels index by position on purpose.
#![allow(clippy::needless_range_loop)]

pub mod actions;
pub mod checkpoint;
pub mod condlm;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod hmm;
mod nn;
pub mod optim;
pub mod planner;
pub mod probe;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use actions::{ActionVocabulary, SentenceEncoder};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use condlm::{ConditionedLM, ConditioningMode, LmConfig};
pub use config::{ExperimentConfig, PretrainObjective};
pub use corpus::{Document, SegmentedCorpus, Split, Window, BOS, EOS, VOCAB_SIZE};
pub use error::{Error, Result};
pub use eval::{evaluate, generate, perplexity, EvalConfig, EvalReport, Generated};
pub use experiment::RunDir;
pub use hmm::{fit_hmm, HmmCritic, HmmFit};
pub use planner::{PlannerConfig, PlannerModel};
pub use probe::{run_probes, ProbeLocation, ProbeReport, ProbeSpec};
pub use tape::{Tape, Var, IGNORE_TARGET};
pub use tensor::{Elem, Tensor};
pub use trainer::{
    GroupGates, MetricsRecord, PredictedFraction, TrainingSchedule, UnfreezePolicy,
};
