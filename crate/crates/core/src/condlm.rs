//! Decoder-only byte LM with adapter layers that inject a per-sentence
//! conditioning vector derived from action probabilities.
//!
//! Every selection mode reduces to a weight matrix over actions multiplied
//! into the layer's action-embedding table: soft uses the softmax, hard and
//! straight-through a one-hot argmax (differing only in backward), uniform
//! the constant 1/K row, and oracle a one-hot at the labeled action. The
//! weighted embedding is projected and added to the attention-value
//! aggregate, before the output projection, at every position predicting a
//! token of that sentence.

use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::nn::{
    embedding_init, transformer_block, BlockParams, BlockVars, BLOCK_TENSORS, LN_EPS,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    Hard,
    StraightThrough,
    Soft,
    Uniform,
    OracleOneHot,
}

impl ConditioningMode {
    /// Whether gradient reaches the planner logits through selection.
    pub fn differentiable(self) -> bool {
        matches!(self, ConditioningMode::Soft | ConditioningMode::StraightThrough)
    }

    /// Whether selection consults the planner at all.
    pub fn uses_planner(self) -> bool {
        !matches!(self, ConditioningMode::Uniform | ConditioningMode::OracleOneHot)
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConditioningMode::Hard => "hard",
            ConditioningMode::StraightThrough => "st",
            ConditioningMode::Soft => "soft",
            ConditioningMode::Uniform => "uniform",
            ConditioningMode::OracleOneHot => "oracle",
        })
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ConditioningMode::Hard),
            "st" | "straight-through" => Ok(ConditioningMode::StraightThrough),
            "soft" => Ok(ConditioningMode::Soft),
            "uniform" => Ok(ConditioningMode::Uniform),
            "oracle" => Ok(ConditioningMode::OracleOneHot),
            other => Err(Error::config(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub context: usize,
    /// Block indices carrying adapters.
    pub adapter_layers: Vec<usize>,
    pub k: usize,
    /// Action embedding width d_e.
    pub embed_dim: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab: VOCAB_SIZE,
            dim: 128,
            heads: 4,
            layers: 4,
            context: 128,
            adapter_layers: vec![2, 3],
            k: 32,
            embed_dim: 64,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config("lm dim must be divisible by heads"));
        }
        if self.k < 2 {
            return Err(Error::config("lm needs K >= 2 actions"));
        }
        let mut seen = std::collections::HashSet::new();
        for &l in &self.adapter_layers {
            if l >= self.layers {
                return Err(Error::config(format!(
                    "adapter layer {l} out of range for {} layers",
                    self.layers
                )));
            }
            if !seen.insert(l) {
                return Err(Error::config(format!("duplicate adapter layer {l}")));
            }
        }
        Ok(())
    }
}

/// Per-adapter parameters: the layer's action-embedding table and the
/// zero-initialized projection into the model width.
#[derive(Debug, Clone)]
pub struct AdapterParams<E> {
    pub e_a: Tensor<E>,
    pub proj: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct ConditionedLM<E> {
    pub cfg: LmConfig,
    token_embed: Tensor<E>,
    pos_embed: Tensor<E>,
    blocks: Vec<BlockParams<E>>,
    ln_f_g: Tensor<E>,
    ln_f_b: Tensor<E>,
    out_head: Tensor<E>,
    /// Parallel to cfg.adapter_layers.
    adapters: Vec<AdapterParams<E>>,
}

pub struct LmBinding {
    /// Base-LM parameter handles, `lm_params()` order.
    pub lm_vars: Vec<Var>,
    /// Adapter parameter handles, `adapter_params()` order.
    pub adapter_vars: Vec<Var>,
    token_embed: Var,
    pos_embed: Var,
    blocks: Vec<BlockVars>,
    ln_f_g: Var,
    ln_f_b: Var,
    out_head: Var,
    adapters: Vec<(Var, Var)>,
}

impl LmBinding {
    /// Assemble a binding from vars created elsewhere, in `lm_params()` and
    /// `adapter_params()` order respectively.
    pub fn from_vars(cfg: &LmConfig, lm_vars: Vec<Var>, adapter_vars: Vec<Var>) -> Result<Self> {
        let want_lm = 2 + cfg.layers * BLOCK_TENSORS + 3;
        if lm_vars.len() != want_lm {
            return Err(Error::config(format!(
                "lm binding needs {want_lm} vars, got {}",
                lm_vars.len()
            )));
        }
        if adapter_vars.len() != 2 * cfg.adapter_layers.len() {
            return Err(Error::config(format!(
                "lm binding needs {} adapter vars, got {}",
                2 * cfg.adapter_layers.len(),
                adapter_vars.len()
            )));
        }
        let blocks = (0..cfg.layers)
            .map(|i| {
                BlockVars::from_slice(&lm_vars[2 + i * BLOCK_TENSORS..2 + (i + 1) * BLOCK_TENSORS])
            })
            .collect();
        let tail = 2 + cfg.layers * BLOCK_TENSORS;
        let adapters = adapter_vars.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(LmBinding {
            token_embed: lm_vars[0],
            pos_embed: lm_vars[1],
            blocks,
            ln_f_g: lm_vars[tail],
            ln_f_b: lm_vars[tail + 1],
            out_head: lm_vars[tail + 2],
            adapters,
            lm_vars,
            adapter_vars,
        })
    }
}

/// Window-local conditioning: one weight row per sentence present in the
/// window, and the row each position reads (the sentence whose token it
/// predicts).
pub struct WindowConditioning {
    pub weights: Var,
    pub position_rows: Vec<usize>,
}

/// Forward outputs plus probe capture points.
pub struct LmForward {
    pub logits: Var,
    /// Per adapter: the weighted action embedding rows r^l (one per window
    /// sentence, d_e wide).
    pub pre_merge: Vec<Var>,
    /// Per adapter: the hidden state right after the adapter addition
    /// (n x dim).
    pub post_merge: Vec<Var>,
}

impl<E: Elem> ConditionedLM<E> {
    pub fn new<R: Rng>(cfg: LmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let blocks = (0..cfg.layers).map(|_| BlockParams::new(d, rng)).collect();
        let adapters = cfg
            .adapter_layers
            .iter()
            .map(|_| AdapterParams {
                e_a: embedding_init(cfg.k, cfg.embed_dim, rng),
                proj: Tensor::param_zeros(&[cfg.embed_dim, d]),
            })
            .collect();
        Ok(ConditionedLM {
            token_embed: embedding_init(cfg.vocab, d, rng),
            pos_embed: embedding_init(cfg.context, d, rng),
            ln_f_g: Tensor::from_vec(&[1, d], vec![E::ONE; d])?.with_requires_grad(true),
            ln_f_b: Tensor::param_zeros(&[1, d]),
            out_head: embedding_init(d, cfg.vocab, rng),
            blocks,
            adapters,
            cfg,
        })
    }

    /// Seed every adapter's action embeddings from the clustering centroids.
    pub fn init_action_embeddings(&mut self, centroids: &Tensor<f32>) -> Result<()> {
        let want = [self.cfg.k, self.cfg.embed_dim];
        if centroids.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "init_action_embeddings",
                lhs: centroids.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        for adapter in &mut self.adapters {
            adapter.e_a = Tensor::from_vec(
                &want,
                centroids.data().iter().map(|&x| E::from_f64(x as f64)).collect(),
            )?
            .with_requires_grad(true);
        }
        Ok(())
    }

    pub fn lm_param_names(&self) -> Vec<String> {
        let mut names = vec!["lm.token_embed".to_string(), "lm.pos_embed".to_string()];
        for i in 0..self.cfg.layers {
            names.extend(BlockParams::<E>::tensor_names(&format!("lm.block{i}")));
        }
        names.push("lm.ln_f.g".to_string());
        names.push("lm.ln_f.b".to_string());
        names.push("lm.out_head".to_string());
        names
    }

    pub fn adapter_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for &l in &self.cfg.adapter_layers {
            names.push(format!("adapter{l}.e_a"));
            names.push(format!("adapter{l}.proj"));
        }
        names
    }

    pub fn lm_params(&self) -> Vec<&Tensor<E>> {
        let mut out = vec![&self.token_embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.ln_f_g);
        out.push(&self.ln_f_b);
        out.push(&self.out_head);
        out
    }

    pub fn lm_params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = Vec::new();
        out.push(&mut self.token_embed);
        out.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.ln_f_g);
        out.push(&mut self.ln_f_b);
        out.push(&mut self.out_head);
        out
    }

    pub fn adapter_params(&self) -> Vec<&Tensor<E>> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.push(&a.e_a);
            out.push(&a.proj);
        }
        out
    }

    pub fn adapter_params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = Vec::new();
        for a in &mut self.adapters {
            out.push(&mut a.e_a);
            out.push(&mut a.proj);
        }
        out
    }

    /// Randomize adapter projections (tests and the no-NAP warm-up need a
    /// nonzero path through the adapters).
    pub fn randomize_projections<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for a in &mut self.adapters {
            a.proj = Tensor::randn(&[self.cfg.embed_dim, self.cfg.dim], std, rng)
                .with_requires_grad(true);
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> LmBinding {
        let lm_vars: Vec<Var> = self.lm_params().into_iter().map(|t| tape.leaf(t)).collect();
        let adapter_vars: Vec<Var> = self
            .adapter_params()
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect();
        LmBinding::from_vars(&self.cfg, lm_vars, adapter_vars)
            .expect("params() lengths match config")
    }

    /// Next-token logits for one window, with optional conditioning.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bind: &LmBinding,
        tokens: &[u32],
        cond: Option<&WindowConditioning>,
    ) -> Result<LmForward> {
        let n = tokens.len();
        if n == 0 || n > self.cfg.context {
            return Err(Error::data(format!(
                "forward: window length {n} outside 1..={}",
                self.cfg.context
            )));
        }
        let mut sentence_rows = 0;
        if let Some(c) = cond {
            sentence_rows = tape.value(c.weights).rows();
            if c.position_rows.len() != n {
                return Err(Error::data(
                    "forward: conditioning must cover every position".to_string(),
                ));
            }
            if let Some(&bad) = c.position_rows.iter().find(|&&r| r >= sentence_rows) {
                return Err(Error::IndexOutOfRange {
                    op: "forward conditioning",
                    index: bad,
                    size: sentence_rows,
                });
            }
        }
        let _ = sentence_rows;

        let indices: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.embed_lookup(bind.token_embed, &indices)?;
        let pos_ids: Vec<usize> = (0..n).collect();
        let pos = tape.embed_lookup(bind.pos_embed, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        let mut pre_merge = Vec::new();
        let mut post_merge = Vec::new();
        for (layer, block) in bind.blocks.iter().enumerate() {
            let adapter_idx = self.cfg.adapter_layers.iter().position(|&l| l == layer);
            let inject = match (adapter_idx, cond) {
                (Some(ai), Some(c)) => {
                    let (e_a, proj) = bind.adapters[ai];
                    // Weighted action embedding per window sentence, then
                    // projected and spread to positions.
                    let r = tape.matmul(c.weights, e_a)?;
                    pre_merge.push(r);
                    let projected = tape.matmul(r, proj)?;
                    Some(tape.gather_rows(projected, &c.position_rows)?)
                }
                _ => None,
            };
            let (out, merged) = transformer_block(tape, x, block, self.cfg.heads, inject)?;
            x = out;
            if let Some(m) = merged {
                post_merge.push(m);
            }
        }
        let normed = tape.layer_norm(x, bind.ln_f_g, bind.ln_f_b, LN_EPS)?;
        let logits = tape.matmul(normed, bind.out_head)?;
        Ok(LmForward {
            logits,
            pre_merge,
            post_merge,
        })
    }

    /// Cross-entropy sum and valid-position count for one window.
    pub fn ntp_loss_window(
        &self,
        tape: &mut Tape<E>,
        bind: &LmBinding,
        tokens: &[u32],
        targets: &[usize],
        cond: Option<&WindowConditioning>,
    ) -> Result<(Var, usize)> {
        let fwd = self.forward(tape, bind, tokens, cond)?;
        let sum = tape.cross_entropy_sum(fwd.logits, targets)?;
        Ok((sum, crate::tape::valid_target_count(targets)))
    }
}

/// Build per-sentence selection weights for a mode.
///
/// `logits` is required for Hard/StraightThrough/Soft; `oracle` (one action
/// id per sentence) for OracleOneHot; `m` rows are produced in every mode.
pub fn selection_weights<E: Elem>(
    tape: &mut Tape<E>,
    mode: ConditioningMode,
    logits: Option<Var>,
    oracle: Option<&[usize]>,
    m: usize,
    k: usize,
) -> Result<Var> {
    let need_logits = || -> Result<Var> {
        let l = logits.ok_or_else(|| {
            Error::config(format!("mode {mode} requires planner logits"))
        })?;
        let shape = tape.value(l).shape().to_vec();
        if shape != [m, k] {
            return Err(Error::ShapeMismatch {
                op: "selection_weights",
                lhs: shape,
                rhs: vec![m, k],
            });
        }
        Ok(l)
    };
    match mode {
        ConditioningMode::Soft => {
            let l = need_logits()?;
            Ok(tape.softmax(l))
        }
        ConditioningMode::Hard => {
            let l = need_logits()?;
            Ok(tape.hard_select(l))
        }
        ConditioningMode::StraightThrough => {
            let l = need_logits()?;
            Ok(tape.straight_through(l))
        }
        ConditioningMode::Uniform => {
            let w = E::from_f64(1.0 / k as f64);
            Ok(tape.constant(Tensor::from_vec(&[m, k], vec![w; m * k])?))
        }
        ConditioningMode::OracleOneHot => {
            let ids = oracle
                .ok_or_else(|| Error::config("oracle mode requires action ids"))?;
            if ids.len() != m {
                return Err(Error::data(format!(
                    "oracle ids: expected {m} sentences, got {}",
                    ids.len()
                )));
            }
            Ok(tape.constant(one_hot_rows(ids, k)?))
        }
    }
}

/// One-hot rows for a list of action ids.
pub fn one_hot_rows<E: Elem>(ids: &[usize], k: usize) -> Result<Tensor<E>> {
    let mut data = vec![E::ZERO; ids.len() * k];
    for (i, &a) in ids.iter().enumerate() {
        if a >= k {
            return Err(Error::IndexOutOfRange {
                op: "one_hot_rows",
                index: a,
                size: k,
            });
        }
        data[i * k + a] = E::ONE;
    }
    Tensor::from_vec(&[ids.len(), k], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grads;
    use crate::rng::stream;
    use crate::tape::IGNORE_TARGET;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            vocab: VOCAB_SIZE,
            dim: 16,
            heads: 2,
            layers: 2,
            context: 24,
            adapter_layers: vec![1],
            k: 4,
            embed_dim: 8,
        }
    }

    fn window() -> (Vec<u32>, Vec<usize>, Vec<usize>) {
        // 12 positions over 3 sentences (rows 0, 1, 2).
        let tokens: Vec<u32> = b"abcd efg hij ".iter().map(|&b| b as u32).collect();
        let rows = vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let mut targets = targets;
        targets.push(IGNORE_TARGET);
        (tokens, targets, rows)
    }

    #[test]
    fn zero_init_projection_matches_base_forward_exactly() {
        let model = ConditionedLM::<f32>::new(tiny_cfg(), &mut stream(1, "lm")).unwrap();
        let (tokens, _, rows) = window();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let logits = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut stream(2, "lg")));
        let weights = selection_weights(&mut tape, ConditioningMode::Soft, Some(logits), None, 3, 4)
            .unwrap();
        let cond = WindowConditioning {
            weights,
            position_rows: rows,
        };
        let with = model.forward(&mut tape, &bind, &tokens, Some(&cond)).unwrap();
        let without = model.forward(&mut tape, &bind, &tokens, None).unwrap();
        let a = tape.value(with.logits).data();
        let b = tape.value(without.logits).data();
        assert_eq!(a, b);
    }

    #[test]
    fn soft_weights_recover_embedding_rows_and_uniform_mean() {
        let mut tape = Tape::<f64>::new();
        let e_a = Tensor::randn(&[4, 8], 1.0, &mut stream(3, "ea"));
        let ea_var = tape.constant(e_a.clone());

        // One-hot weights pick out exactly one row.
        let onehot = tape.constant(one_hot_rows(&[2], 4).unwrap());
        let r = tape.matmul(onehot, ea_var).unwrap();
        assert_eq!(tape.value(r).data(), e_a.row(2));

        // Zero logits under soft equal the uniform mean of all rows.
        let zeros = tape.constant(Tensor::zeros(&[1, 4]));
        let soft = selection_weights(&mut tape, ConditioningMode::Soft, Some(zeros), None, 1, 4)
            .unwrap();
        let r_soft = tape.matmul(soft, ea_var).unwrap();
        let uni = selection_weights::<f64>(&mut tape, ConditioningMode::Uniform, None, None, 1, 4)
            .unwrap();
        let r_uni = tape.matmul(uni, ea_var).unwrap();
        for (a, b) in tape.value(r_soft).data().iter().zip(tape.value(r_uni).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_selection_matches_bruteforce_weighted_sum() {
        let k = 8;
        let d = 8;
        let mut tape = Tape::<f64>::new();
        let logits_t = Tensor::randn(&[3, k], 1.5, &mut stream(4, "bf"));
        let e_a_t = Tensor::randn(&[k, d], 1.0, &mut stream(5, "bf"));
        let logits = tape.constant(logits_t.clone());
        let e_a = tape.constant(e_a_t.clone());
        let w = selection_weights(&mut tape, ConditioningMode::Soft, Some(logits), None, 3, k)
            .unwrap();
        let r = tape.matmul(w, e_a).unwrap();

        for row in 0..3 {
            let mut p = logits_t.row(row).to_vec();
            crate::tensor::softmax_row_in_place(&mut p);
            for j in 0..d {
                let mut expect = 0.0;
                for a in 0..k {
                    expect += p[a] * e_a_t.data()[a * d + j];
                }
                let got = tape.value(r).data()[row * d + j];
                assert!((got - expect).abs() < 1e-6, "({row},{j}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn hard_and_straight_through_forwards_are_bitwise_equal() {
        let model = ConditionedLM::<f32>::new(tiny_cfg(), &mut stream(6, "lm")).unwrap();
        let mut model = model;
        model.randomize_projections(0.1, &mut stream(7, "pj"));
        let (tokens, _, rows) = window();
        let logits_t = Tensor::<f32>::randn(&[3, 4], 1.0, &mut stream(8, "lg"));

        let run = |mode: ConditioningMode| -> Vec<f32> {
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape);
            let logits = tape.constant(logits_t.clone());
            let weights = selection_weights(&mut tape, mode, Some(logits), None, 3, 4).unwrap();
            let cond = WindowConditioning {
                weights,
                position_rows: rows.clone(),
            };
            let fwd = model.forward(&mut tape, &bind, &tokens, Some(&cond)).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        assert_eq!(run(ConditioningMode::Hard), run(ConditioningMode::StraightThrough));
    }

    fn planner_logit_grad(mode: ConditioningMode) -> Vec<f32> {
        let mut model = ConditionedLM::<f32>::new(tiny_cfg(), &mut stream(9, "lm")).unwrap();
        model.randomize_projections(0.1, &mut stream(10, "pj"));
        let (tokens, targets, rows) = window();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let logits_leaf = tape.leaf(
            &Tensor::<f32>::randn(&[3, 4], 1.0, &mut stream(11, "lg")).with_requires_grad(true),
        );
        let oracle = [1usize, 0, 3];
        let weights = selection_weights(
            &mut tape,
            mode,
            mode.uses_planner().then_some(logits_leaf),
            Some(&oracle),
            3,
            4,
        )
        .unwrap();
        let cond = WindowConditioning {
            weights,
            position_rows: rows,
        };
        let (sum, n) = model
            .ntp_loss_window(&mut tape, &bind, &tokens, &targets, Some(&cond))
            .unwrap();
        let loss = tape.scale(sum, 1.0 / n as f64);
        tape.backward(loss);
        tape.grad_or_zeros(logits_leaf)
    }

    #[test]
    fn planner_gradient_flows_only_in_differentiable_modes() {
        for mode in [
            ConditioningMode::Hard,
            ConditioningMode::Uniform,
            ConditioningMode::OracleOneHot,
        ] {
            let g = planner_logit_grad(mode);
            assert!(g.iter().all(|&x| x == 0.0), "{mode}: expected zero grad");
        }
        for mode in [ConditioningMode::Soft, ConditioningMode::StraightThrough] {
            let g = planner_logit_grad(mode);
            assert!(g.iter().any(|&x| x != 0.0), "{mode}: expected nonzero grad");
        }
    }

    #[test]
    fn conditioning_perturbation_respects_causality() {
        let mut model = ConditionedLM::<f32>::new(tiny_cfg(), &mut stream(12, "lm")).unwrap();
        model.randomize_projections(0.2, &mut stream(13, "pj"));
        let (tokens, _, rows) = window();
        // Perturb the conditioning of sentence 1 only.
        let base = Tensor::<f32>::randn(&[3, 4], 1.0, &mut stream(14, "lg"));
        let mut shifted = base.clone();
        // A single-element shift; a whole-row shift would vanish under the
        // softmax's shift invariance.
        shifted.data_mut()[5] += 2.0;

        let run = |l: &Tensor<f32>| -> Vec<f32> {
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape);
            let logits = tape.constant(l.clone());
            let weights =
                selection_weights(&mut tape, ConditioningMode::Soft, Some(logits), None, 3, 4)
                    .unwrap();
            let cond = WindowConditioning {
                weights,
                position_rows: rows.clone(),
            };
            let fwd = model.forward(&mut tape, &bind, &tokens, Some(&cond)).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        let a = run(&base);
        let b = run(&shifted);
        let vocab = model.cfg.vocab;
        let first_p1 = rows.iter().position(|&r| r == 1).unwrap();
        for p in 0..first_p1 {
            assert_eq!(
                &a[p * vocab..(p + 1) * vocab],
                &b[p * vocab..(p + 1) * vocab],
                "position {p} before sentence 1 moved"
            );
        }
        assert_ne!(a, b, "perturbation had no effect at all");
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let model = ConditionedLM::<f32>::new(tiny_cfg(), &mut stream(15, "lm")).unwrap();
        let (tokens, targets, _) = window();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let (sum, n) = model
            .ntp_loss_window(&mut tape, &bind, &tokens, &targets, None)
            .unwrap();
        let loss = tape.scalar_value(sum) as f64 / n as f64;
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn conditioning_must_cover_every_position() {
        let model = ConditionedLM::<f32>::new(tiny_cfg(), &mut stream(16, "lm")).unwrap();
        let (tokens, _, _) = window();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let weights =
            selection_weights(&mut tape, ConditioningMode::Soft, Some(logits), None, 3, 4).unwrap();
        let cond = WindowConditioning {
            weights,
            position_rows: vec![0, 1], // too short
        };
        assert!(model.forward(&mut tape, &bind, &tokens, Some(&cond)).is_err());
        let cond = WindowConditioning {
            weights,
            position_rows: vec![7; tokens.len()], // out of range
        };
        assert!(model.forward(&mut tape, &bind, &tokens, Some(&cond)).is_err());
    }

    #[test]
    fn invalid_oracle_id_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let err = selection_weights(
            &mut tape,
            ConditioningMode::OracleOneHot,
            None,
            Some(&[5]),
            1,
            4,
        );
        assert!(err.is_err());
    }

    #[test]
    fn soft_gradients_through_full_model_match_finite_differences() {
        // 64-bit model; differentiate w.r.t. the planner logits.
        let cfg = LmConfig {
            vocab: 12,
            dim: 8,
            heads: 2,
            layers: 2,
            context: 10,
            adapter_layers: vec![0, 1],
            k: 3,
            embed_dim: 4,
        };
        let mut model = ConditionedLM::<f64>::new(cfg, &mut stream(17, "lm")).unwrap();
        model.randomize_projections(0.3, &mut stream(18, "pj"));
        let tokens: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
        let targets: Vec<usize> = vec![2, 3, 4, 5, 6, 7];
        let rows = vec![0, 0, 1, 1, 1, 1];
        let logits0 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut stream(19, "lg"));

        let max_rel = check_grads(&[logits0], 1e-5, |tape, vars| {
            let bind = model.bind(tape);
            let weights =
                selection_weights(tape, ConditioningMode::Soft, Some(vars[0]), None, 2, 3)?;
            let cond = WindowConditioning {
                weights,
                position_rows: rows.clone(),
            };
            let (sum, n) = model.ntp_loss_window(tape, &bind, &tokens, &targets, Some(&cond))?;
            Ok(tape.scale(sum, 1.0 / n as f64))
        })
        .unwrap();
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }
}
