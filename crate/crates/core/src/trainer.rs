//! Joint fine-tuning: conditioned NTP loss plus optional NAP loss, planner
//! unfreeze schedules, and per-sentence mixing of oracle and
//! planner-predicted actions.
//!
//! All per-step randomness (batch choice, mixing draws) is derived from the
//! schedule seed and the step index, so training is stateless across steps
//! and exactly reproducible.

use crate::condlm::{one_hot_rows, selection_weights, ConditionedLM, WindowConditioning};
use crate::condlm::ConditioningMode;
use crate::corpus::{SegmentedCorpus, Split, Window};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamParams};
use crate::planner::PlannerModel;
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Elem;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnfreezePolicy {
    Immediate,
    Halfway,
    Never,
}

impl std::str::FromStr for UnfreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "immediate" => Ok(UnfreezePolicy::Immediate),
            "halfway" => Ok(UnfreezePolicy::Halfway),
            "never" => Ok(UnfreezePolicy::Never),
            other => Err(Error::config(format!("unknown unfreeze policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for UnfreezePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UnfreezePolicy::Immediate => "immediate",
            UnfreezePolicy::Halfway => "halfway",
            UnfreezePolicy::Never => "never",
        })
    }
}

/// Fraction of sentences conditioned on planner-predicted actions (the rest
/// use the oracle): a constant, or a schedule rising linearly to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PredictedFraction {
    Fixed(f64),
    Linear,
}

impl std::str::FromStr for PredictedFraction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(PredictedFraction::Linear);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::config(format!("predicted fraction {s:?} is neither a number nor \"linear\"")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config("predicted fraction must lie in [0, 1]"));
        }
        Ok(PredictedFraction::Fixed(v))
    }
}

impl std::fmt::Display for PredictedFraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PredictedFraction::Fixed(v) => write!(f, "{v}"),
            PredictedFraction::Linear => f.write_str("linear"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub total_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub unfreeze: UnfreezePolicy,
    pub predicted_fraction: PredictedFraction,
    /// Weight of the NAP loss during fine-tuning; 0 disables it.
    pub nap_weight: f64,
    pub mode: ConditioningMode,
    pub seed: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            total_steps: 2000,
            lr: 1e-4,
            batch_size: 32,
            unfreeze: UnfreezePolicy::Halfway,
            predicted_fraction: PredictedFraction::Fixed(1.0),
            nap_weight: 0.0,
            mode: ConditioningMode::Soft,
            seed: 0,
        }
    }
}

impl TrainingSchedule {
    /// Whether planner gradients are applied at a (1-indexed) step.
    pub fn planner_unfrozen(&self, step: usize) -> bool {
        match self.unfreeze {
            UnfreezePolicy::Immediate => true,
            UnfreezePolicy::Never => false,
            UnfreezePolicy::Halfway => step >= self.total_steps.div_ceil(2),
        }
    }

    /// Predicted-action fraction in effect at a (1-indexed) step. The linear
    /// schedule evaluates f(t) = t / total_steps at t = step, so it ends at
    /// exactly 1.
    pub fn fraction_at(&self, step: usize) -> f64 {
        match self.predicted_fraction {
            PredictedFraction::Fixed(v) => v,
            PredictedFraction::Linear => step as f64 / self.total_steps as f64,
        }
    }
}

/// Which parameter groups a stage trains. The planner gate combines with the
/// unfreeze policy; LM and adapters are usually always on, except the no-NAP
/// planner pretraining stage, which freezes the LM body.
#[derive(Debug, Clone, Copy)]
pub struct GroupGates {
    pub planner: bool,
    pub lm: bool,
    pub adapters: bool,
}

impl Default for GroupGates {
    fn default() -> Self {
        GroupGates {
            planner: true,
            lm: true,
            adapters: true,
        }
    }
}

/// Per-sentence choice between predicted and oracle conditioning: one draw
/// per sentence, in sentence order.
pub fn mix_masks<R: Rng>(m: usize, f: f64, rng: &mut R) -> Vec<bool> {
    (0..m).map(|_| rng.random::<f64>() < f).collect()
}

/// Combine predicted selection weights with oracle one-hot rows according to
/// a per-sentence mask (true = keep predicted).
pub fn mix_weights<E: Elem>(
    tape: &mut Tape<E>,
    predicted: Var,
    oracle_ids: &[usize],
    k: usize,
    mask: &[bool],
) -> Result<Var> {
    if mask.iter().all(|&b| b) {
        return Ok(predicted);
    }
    let pred_factors: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let oracle_factors: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let oracle = tape.constant(one_hot_rows(oracle_ids, k)?);
    let kept = tape.row_scale(predicted, &pred_factors)?;
    let filled = tape.row_scale(oracle, &oracle_factors)?;
    tape.add(kept, filled)
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub ntp: f64,
    pub nap: f64,
    pub total: f64,
}

/// One metrics-log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub ntp: f64,
    pub nap: f64,
    pub f: f64,
    pub lr: f64,
    pub split: String,
}

/// Build the conditioning for one window on the tape, invoking the planner
/// when the mode (or the NAP loss) requires it. Returns the conditioning and
/// the planner logits rows for the window's sentences, if computed.
#[allow(clippy::too_many_arguments)]
fn window_conditioning<E: Elem, R: Rng>(
    tape: &mut Tape<E>,
    planner: &PlannerModel<E>,
    planner_bind: Option<&crate::planner::PlannerBinding>,
    lm_k: usize,
    corpus: &SegmentedCorpus,
    oracle: &[Vec<usize>],
    window: &Window,
    mode: ConditioningMode,
    f: f64,
    mix_rng: &mut R,
) -> Result<(WindowConditioning, Option<Var>)> {
    let doc = &corpus.documents[window.doc_index];
    let (lo, hi) = window.sentence_range;
    let m = hi - lo;
    let oracle_ids = &oracle[window.doc_index][lo..hi];

    let plan_rows = match planner_bind {
        Some(bind) => {
            let all = planner.plan_logits(tape, bind, &doc.tokens, &doc.sentence_spans[..hi - 1])?;
            Some(if lo == 0 && tape.value(all).rows() == m {
                all
            } else {
                tape.slice_rows(all, lo, hi)?
            })
        }
        None => None,
    };

    let predicted = selection_weights(tape, mode, plan_rows, Some(oracle_ids), m, lm_k)?;
    let mask = mix_masks(m, f, mix_rng);
    let weights = mix_weights(tape, predicted, oracle_ids, lm_k, &mask)?;
    let position_rows: Vec<usize> = window.sentence_ids.iter().map(|&s| s - lo).collect();
    Ok((
        WindowConditioning {
            weights,
            position_rows,
        },
        plan_rows,
    ))
}

/// One optimization step over a batch of windows.
///
/// Loss is ntp + nap_weight * nap; gradients are applied per the gates and
/// the unfreeze policy. Aborts on non-finite loss.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    planner: &mut PlannerModel<f32>,
    lm: &mut ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    oracle: &[Vec<usize>],
    batch: &[&Window],
    schedule: &TrainingSchedule,
    gates: GroupGates,
    step: usize,
    opt: &mut Adam,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::data("joint_step: empty batch"));
    }
    let need_planner = schedule.mode.uses_planner() || schedule.nap_weight > 0.0;
    let f = schedule.fraction_at(step);
    let mut mix_rng = stream(schedule.seed, &format!("mix/{step}"));

    let mut tape: Tape<f32> = Tape::new();
    let planner_bind = need_planner.then(|| planner.bind(&mut tape));
    let lm_bind = lm.bind(&mut tape);

    let mut ntp_sums = Vec::with_capacity(batch.len());
    let mut nap_sums = Vec::new();
    let mut ntp_count = 0usize;
    let mut nap_count = 0usize;
    for window in batch {
        let (cond, plan_rows) = window_conditioning(
            &mut tape,
            planner,
            planner_bind.as_ref(),
            lm.cfg.k,
            corpus,
            oracle,
            window,
            schedule.mode,
            f,
            &mut mix_rng,
        )?;
        let (sum, valid) =
            lm.ntp_loss_window(&mut tape, &lm_bind, &window.tokens, &window.targets, Some(&cond))?;
        ntp_sums.push(sum);
        ntp_count += valid;
        if schedule.nap_weight > 0.0 {
            let rows = plan_rows.expect("planner bound when nap_weight > 0");
            let (lo, hi) = window.sentence_range;
            let ids = &oracle[window.doc_index][lo..hi];
            let sum = tape.cross_entropy_sum(rows, ids)?;
            nap_sums.push(sum);
            nap_count += hi - lo;
        }
    }

    let sum_all = |tape: &mut Tape<f32>, parts: &[Var]| -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p)?;
        }
        Ok(acc)
    };
    let ntp_total = sum_all(&mut tape, &ntp_sums)?;
    let ntp_loss = tape.scale(ntp_total, 1.0 / ntp_count as f64);
    let loss = if nap_sums.is_empty() {
        ntp_loss
    } else {
        let nap_total = sum_all(&mut tape, &nap_sums)?;
        let nap_loss = tape.scale(nap_total, 1.0 / nap_count as f64);
        let weighted = tape.scale(nap_loss, schedule.nap_weight);
        tape.add(ntp_loss, weighted)?
    };

    let ntp = tape.scalar_value(ntp_loss) as f64;
    let nap = if nap_sums.is_empty() {
        0.0
    } else {
        let s: f64 = nap_sums.iter().map(|&v| tape.scalar_value(v) as f64).sum();
        s / nap_count as f64
    };
    let total = ntp + schedule.nap_weight * nap;
    if !total.is_finite() {
        return Err(Error::numeric(format!(
            "joint_step: non-finite loss at step {step} (ntp {ntp}, nap {nap})"
        )));
    }

    tape.backward(loss);

    let planner_on = gates.planner && need_planner && schedule.planner_unfrozen(step);
    if planner_on {
        let bind = planner_bind.as_ref().unwrap();
        let grads: Vec<Vec<f32>> = bind.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        opt.step("planner", &mut planner.params_mut(), &grads)?;
    }
    if gates.lm {
        let grads: Vec<Vec<f32>> = lm_bind.lm_vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        opt.step("lm", &mut lm.lm_params_mut(), &grads)?;
    }
    if gates.adapters {
        let grads: Vec<Vec<f32>> = lm_bind
            .adapter_vars
            .iter()
            .map(|&v| tape.grad_or_zeros(v))
            .collect();
        opt.step("adapters", &mut lm.adapter_params_mut(), &grads)?;
    }

    Ok(StepLosses { ntp, nap, total })
}

/// Sample `count` distinct indices from 0..n (or all of them if n <= count),
/// deterministically in the given stream.
fn sample_indices<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let take = count.min(n);
    for i in 0..take {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Register the three optimizer groups for a planner + LM pair.
pub fn make_optimizer(planner: &PlannerModel<f32>, lm: &ConditionedLM<f32>, lr: f64) -> Adam {
    let mut opt = Adam::new(AdamParams::with_lr(lr));
    let sizes = |ts: Vec<&crate::tensor::Tensor<f32>>| -> Vec<usize> {
        ts.iter().map(|t| t.numel()).collect()
    };
    opt.register("planner", &sizes(planner.params()));
    opt.register("lm", &sizes(lm.lm_params()));
    opt.register("adapters", &sizes(lm.adapter_params()));
    opt
}

/// Full fine-tuning loop over the train split.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    planner: &mut PlannerModel<f32>,
    lm: &mut ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    oracle: &[Vec<usize>],
    schedule: &TrainingSchedule,
    gates: GroupGates,
    log_interval: usize,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<()> {
    let windows = corpus.windows(Split::Train);
    if windows.is_empty() {
        return Err(Error::data("train_joint: no training windows"));
    }
    let mut opt = make_optimizer(planner, lm, schedule.lr);
    for step in 1..=schedule.total_steps {
        let mut batch_rng = stream(schedule.seed, &format!("batch/{step}"));
        let picks = sample_indices(windows.len(), schedule.batch_size, &mut batch_rng);
        let batch: Vec<&Window> = picks.iter().map(|&i| &windows[i]).collect();
        let losses = joint_step(
            planner, lm, corpus, oracle, &batch, schedule, gates, step, &mut opt,
        )?;
        if log_interval > 0 && (step % log_interval == 0 || step == schedule.total_steps) {
            on_record(&MetricsRecord {
                step,
                ntp: losses.ntp,
                nap: losses.nap,
                f: schedule.fraction_at(step),
                lr: schedule.lr,
                split: "train".to_string(),
            });
        }
    }
    Ok(())
}

/// No-NAP planner pretraining: train the planner end-to-end through the NTP
/// loss in soft mode with the LM body frozen. Adapter projections train too,
/// else the zero-initialized projection blocks every planner gradient.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_planner_e2e_lm_frozen(
    planner: &mut PlannerModel<f32>,
    lm: &mut ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    oracle: &[Vec<usize>],
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    log_interval: usize,
    on_record: impl FnMut(&MetricsRecord),
) -> Result<()> {
    let schedule = TrainingSchedule {
        total_steps: steps,
        lr,
        batch_size,
        unfreeze: UnfreezePolicy::Immediate,
        predicted_fraction: PredictedFraction::Fixed(1.0),
        nap_weight: 0.0,
        mode: ConditioningMode::Soft,
        seed,
    };
    let gates = GroupGates {
        planner: true,
        lm: false,
        adapters: true,
    };
    train_joint(planner, lm, corpus, oracle, &schedule, gates, log_interval, on_record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{fit_kmeans, SentenceEncoder};
    use crate::condlm::LmConfig;
    use crate::corpus::{generate_synthetic, SyntheticConfig, VOCAB_SIZE};
    use crate::planner::{corpus_oracle_actions, PlannerConfig};
    use crate::rng::stream;

    fn tiny_setup(
        docs: usize,
        k: usize,
    ) -> (SegmentedCorpus, Vec<Vec<usize>>, PlannerModel<f32>, ConditionedLM<f32>) {
        let cfg = SyntheticConfig {
            docs,
            min_sentences: 4,
            max_sentences: 8,
        };
        let texts = generate_synthetic(&cfg, &mut stream(21, "trainer-corpus"));
        let corpus = SegmentedCorpus::build(&texts, 32, 5, 0.0, 0.0).unwrap();
        let encoder = SentenceEncoder::new(512, 16, 0);
        let docs_ref: Vec<&crate::corpus::Document> = corpus.documents.iter().collect();
        let (emb, _) =
            crate::actions::encode_corpus_sentences(&docs_ref, &encoder, 2000).unwrap();
        let fit = fit_kmeans(&emb, k, 3, encoder.fingerprint()).unwrap();
        let oracle = corpus_oracle_actions(&corpus, &encoder, &fit.vocab).unwrap();

        let pcfg = PlannerConfig {
            vocab: VOCAB_SIZE,
            dim: 16,
            heads: 2,
            layers: 1,
            k,
            max_sentences: 16,
        };
        let planner = PlannerModel::new(pcfg, &mut stream(22, "planner")).unwrap();
        let lcfg = LmConfig {
            vocab: VOCAB_SIZE,
            dim: 16,
            heads: 2,
            layers: 2,
            context: 32,
            adapter_layers: vec![1],
            k,
            embed_dim: 16,
        };
        let mut lm = ConditionedLM::new(lcfg, &mut stream(23, "lm")).unwrap();
        lm.init_action_embeddings(&fit.vocab.centroids).unwrap();
        (corpus, oracle, planner, lm)
    }

    fn flat_params(ts: Vec<&crate::tensor::Tensor<f32>>) -> Vec<f32> {
        ts.iter().flat_map(|t| t.data().to_vec()).collect()
    }

    #[test]
    fn halfway_unfreeze_boundary_is_the_ceiling_of_half() {
        let mut s = TrainingSchedule {
            total_steps: 100,
            unfreeze: UnfreezePolicy::Halfway,
            ..TrainingSchedule::default()
        };
        assert!(!s.planner_unfrozen(49));
        assert!(s.planner_unfrozen(50));
        assert!(s.planner_unfrozen(51));
        s.total_steps = 7;
        assert!(!s.planner_unfrozen(3));
        assert!(s.planner_unfrozen(4));
    }

    #[test]
    fn linear_fraction_hits_both_endpoints() {
        let s = TrainingSchedule {
            total_steps: 200,
            predicted_fraction: PredictedFraction::Linear,
            ..TrainingSchedule::default()
        };
        assert_eq!(s.fraction_at(0), 0.0);
        assert_eq!(s.fraction_at(200), 1.0);
        assert!((s.fraction_at(100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mix_masks_respect_the_endpoints_and_the_binomial_bound() {
        let mut rng = stream(1, "mix");
        assert!(mix_masks(100, 0.0, &mut rng).iter().all(|&b| !b));
        assert!(mix_masks(100, 1.0, &mut rng).iter().all(|&b| b));
        let draws = mix_masks(10_000, 0.5, &mut rng);
        let share = draws.iter().filter(|&&b| b).count() as f64 / 10_000.0;
        assert!((share - 0.5).abs() <= 0.02, "share {share}");
    }

    #[test]
    fn lambda_zero_total_equals_ntp_exactly() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
        let windows = corpus.windows(Split::Train);
        let batch: Vec<&Window> = windows.iter().take(2).collect();
        let schedule = TrainingSchedule {
            total_steps: 10,
            batch_size: 2,
            nap_weight: 0.0,
            ..TrainingSchedule::default()
        };
        let mut opt = make_optimizer(&planner, &lm, schedule.lr);
        let losses = joint_step(
            &mut planner, &mut lm, &corpus, &oracle, &batch, &schedule,
            GroupGates::default(), 1, &mut opt,
        )
        .unwrap();
        assert_eq!(losses.total, losses.ntp);
        assert_eq!(losses.nap, 0.0);
    }

    #[test]
    fn loss_decomposition_is_exact_with_nap() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
        let windows = corpus.windows(Split::Train);
        let batch: Vec<&Window> = windows.iter().take(2).collect();
        let schedule = TrainingSchedule {
            total_steps: 10,
            batch_size: 2,
            nap_weight: 0.7,
            ..TrainingSchedule::default()
        };
        let mut opt = make_optimizer(&planner, &lm, schedule.lr);
        let losses = joint_step(
            &mut planner, &mut lm, &corpus, &oracle, &batch, &schedule,
            GroupGates::default(), 1, &mut opt,
        )
        .unwrap();
        assert_eq!(losses.total - (losses.ntp + 0.7 * losses.nap), 0.0);
        assert!(losses.nap > 0.0);
    }

    #[test]
    fn never_policy_keeps_planner_bitwise_unchanged() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
        let schedule = TrainingSchedule {
            total_steps: 8,
            batch_size: 2,
            unfreeze: UnfreezePolicy::Never,
            ..TrainingSchedule::default()
        };
        let before = flat_params(planner.params());
        train_joint(
            &mut planner, &mut lm, &corpus, &oracle, &schedule,
            GroupGates::default(), 0, |_| {},
        )
        .unwrap();
        assert_eq!(flat_params(planner.params()), before);
        // The LM and adapters did train.
        assert!(lm.adapter_params()[1].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn halfway_policy_touches_planner_only_after_the_midpoint() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
        let windows = corpus.windows(Split::Train);
        let schedule = TrainingSchedule {
            total_steps: 100,
            batch_size: 2,
            unfreeze: UnfreezePolicy::Halfway,
            ..TrainingSchedule::default()
        };
        let mut opt = make_optimizer(&planner, &lm, schedule.lr);
        let before = flat_params(planner.params());
        for step in 1..=49 {
            let batch: Vec<&Window> = windows.iter().skip(step % 3).take(2).collect();
            joint_step(
                &mut planner, &mut lm, &corpus, &oracle, &batch, &schedule,
                GroupGates::default(), step, &mut opt,
            )
            .unwrap();
        }
        assert_eq!(flat_params(planner.params()), before, "planner moved while frozen");
        assert_eq!(opt.group("planner").unwrap().t, 0);
        for step in 50..=51 {
            let batch: Vec<&Window> = windows.iter().take(2).collect();
            joint_step(
                &mut planner, &mut lm, &corpus, &oracle, &batch, &schedule,
                GroupGates::default(), step, &mut opt,
            )
            .unwrap();
        }
        assert_ne!(flat_params(planner.params()), before, "planner never unfroze");
    }

    #[test]
    fn oracle_mode_with_all_oracle_draws_gives_planner_zero_gradient() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
        let windows = corpus.windows(Split::Train);
        let batch: Vec<&Window> = windows.iter().take(2).collect();
        let schedule = TrainingSchedule {
            total_steps: 10,
            batch_size: 2,
            mode: ConditioningMode::OracleOneHot,
            predicted_fraction: PredictedFraction::Fixed(0.0),
            unfreeze: UnfreezePolicy::Immediate,
            ..TrainingSchedule::default()
        };
        let before = flat_params(planner.params());
        let mut opt = make_optimizer(&planner, &lm, schedule.lr);
        joint_step(
            &mut planner, &mut lm, &corpus, &oracle, &batch, &schedule,
            GroupGates::default(), 1, &mut opt,
        )
        .unwrap();
        // No differentiable path: parameters survive the applied step.
        assert_eq!(flat_params(planner.params()), before);
    }

    #[test]
    fn training_is_deterministic_given_config_and_seed() {
        let run = || {
            let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
            let schedule = TrainingSchedule {
                total_steps: 6,
                batch_size: 2,
                nap_weight: 0.5,
                predicted_fraction: PredictedFraction::Fixed(0.5),
                ..TrainingSchedule::default()
            };
            let mut records = Vec::new();
            train_joint(
                &mut planner, &mut lm, &corpus, &oracle, &schedule,
                GroupGates::default(), 1, |r| records.push((r.step, r.ntp, r.nap)),
            )
            .unwrap();
            (flat_params(planner.params()), flat_params(lm.lm_params()), records)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_nap_stage_trains_planner_but_not_the_lm_body() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(8, 4);
        let planner_before = flat_params(planner.params());
        let lm_before = flat_params(lm.lm_params());

        // Base-path logits on a fixed window, before.
        let windows = corpus.windows(Split::Train);
        let probe_window = &windows[0];
        let base_logits = |lm: &ConditionedLM<f32>| -> Vec<f32> {
            let mut tape = Tape::new();
            let bind = lm.bind(&mut tape);
            let fwd = lm.forward(&mut tape, &bind, &probe_window.tokens, None).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        let logits_before = base_logits(&lm);

        pretrain_planner_e2e_lm_frozen(
            &mut planner, &mut lm, &corpus, &oracle, 30, 3e-3, 2, 9, 0, |_| {},
        )
        .unwrap();

        assert_eq!(flat_params(lm.lm_params()), lm_before, "frozen LM body moved");
        assert_eq!(base_logits(&lm), logits_before);
        assert_ne!(flat_params(planner.params()), planner_before, "planner untouched");
        // Projections left zero init behind, breaking the deadlock.
        assert!(lm.adapter_params()[1].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn first_step_planner_gradient_is_blocked_by_zero_projections() {
        let (corpus, oracle, mut planner, mut lm) = tiny_setup(6, 4);
        let windows = corpus.windows(Split::Train);
        let batch: Vec<&Window> = windows.iter().take(2).collect();
        let schedule = TrainingSchedule {
            total_steps: 10,
            batch_size: 2,
            mode: ConditioningMode::Soft,
            unfreeze: UnfreezePolicy::Immediate,
            ..TrainingSchedule::default()
        };
        let before = flat_params(planner.params());
        let mut opt = make_optimizer(&planner, &lm, schedule.lr);
        joint_step(
            &mut planner, &mut lm, &corpus, &oracle, &batch, &schedule,
            GroupGates { planner: true, lm: false, adapters: true }, 1, &mut opt,
        )
        .unwrap();
        // Chain rule through the zero projection: planner grads are zero on
        // the very first step, so parameters stay put even though unfrozen.
        assert_eq!(flat_params(planner.params()), before);
    }
}
