//! Linear probes over frozen LM representations. A probe reads either the
//! adapter's conditioning vector before it is merged (constant within a
//! sentence) or the hidden state right after the merge, and predicts the
//! token `distance` positions ahead.

use crate::condlm::{ConditionedLM, ConditioningMode};
use crate::corpus::{SegmentedCorpus, Split};
use crate::error::{Error, Result};
use crate::eval::predicted_window_conditioning;
use crate::optim::{Adam, AdamParams};
use crate::planner::PlannerModel;
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const PROBE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeLocation {
    PreMerge,
    PostMerge,
}

impl std::fmt::Display for ProbeLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeLocation::PreMerge => "pre-merge",
            ProbeLocation::PostMerge => "post-merge",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub location: ProbeLocation,
    /// Transformer layer index; must carry an adapter.
    pub layer: usize,
    /// Tokens ahead to predict.
    pub distance: usize,
    pub train_steps: usize,
    pub lr: f64,
}

impl ProbeSpec {
    pub fn new(location: ProbeLocation, layer: usize, distance: usize) -> Self {
        ProbeSpec {
            location,
            layer,
            distance,
            train_steps: 2000,
            lr: 1e-3,
        }
    }
}

/// Representation/target pairs, ordered by (window, position).
#[derive(Debug, Clone)]
pub struct ProbeData {
    /// N x dim matrix of representations.
    pub x: Tensor<f32>,
    /// Target token per row.
    pub y: Vec<usize>,
    pub classes: usize,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Accuracy of always predicting the most frequent target.
    pub fn majority_baseline(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for &t in &self.y {
            counts[t] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.y.len().max(1) as f64
    }
}

/// Forward every window of the split under planner-predicted conditioning
/// and collect (representation, token at p + distance) pairs. Positions
/// whose target would fall beyond the window are skipped.
pub fn extract_representations(
    planner: &PlannerModel<f32>,
    lm: &ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    split: Split,
    mode: ConditioningMode,
    spec: &ProbeSpec,
) -> Result<ProbeData> {
    if spec.distance == 0 {
        return Err(Error::config("probe distance must be at least 1"));
    }
    let adapter_slot = lm
        .cfg
        .adapter_layers
        .iter()
        .position(|&l| l == spec.layer)
        .ok_or_else(|| {
            Error::config(format!("layer {} carries no adapter", spec.layer))
        })?;
    let dim = match spec.location {
        ProbeLocation::PreMerge => lm.cfg.embed_dim,
        ProbeLocation::PostMerge => lm.cfg.dim,
    };
    let windows = corpus.windows(split);
    if windows.is_empty() {
        return Err(Error::data(format!("no windows in split {split}")));
    }
    let mut rows: Vec<f32> = Vec::new();
    let mut y = Vec::new();
    for window in &windows {
        let n = window.tokens.len();
        if n <= spec.distance {
            continue;
        }
        let mut tape: Tape<f32> = Tape::new();
        let emode = mode;
        let pbind = emode.uses_planner().then(|| planner.bind(&mut tape));
        let cond = predicted_window_conditioning(
            &mut tape, planner, pbind.as_ref(), lm.cfg.k, corpus, window, emode,
        )?;
        let bind = lm.bind(&mut tape);
        let fwd = lm.forward(&mut tape, &bind, &window.tokens, Some(&cond))?;
        let rep = match spec.location {
            ProbeLocation::PreMerge => tape.value(fwd.pre_merge[adapter_slot]),
            ProbeLocation::PostMerge => tape.value(fwd.post_merge[adapter_slot]),
        };
        for p in 0..n - spec.distance {
            let row = match spec.location {
                ProbeLocation::PreMerge => rep.row(cond.position_rows[p]),
                ProbeLocation::PostMerge => rep.row(p),
            };
            rows.extend_from_slice(row);
            y.push(window.tokens[p + spec.distance] as usize);
        }
    }
    let n = y.len();
    Ok(ProbeData {
        x: Tensor::from_vec(&[n, dim], rows)?,
        y,
        classes: lm.cfg.vocab,
    })
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub weights: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub accuracy: f64,
}

/// Train a linear classifier (weights + bias) on the pairs with
/// cross-entropy and report accuracy over the full pair set.
pub fn train_probe(data: &ProbeData, steps: usize, lr: f64, seed: u64) -> Result<ProbeFit> {
    if data.is_empty() {
        return Err(Error::data("train_probe: empty pair set"));
    }
    let dim = data.x.cols();
    let mut weights = Tensor::<f32>::param_zeros(&[dim, data.classes]);
    let mut bias = Tensor::<f32>::param_zeros(&[1, data.classes]);
    let mut opt = Adam::new(AdamParams::with_lr(lr));
    opt.register("probe", &[weights.numel(), bias.numel()]);
    let mut rng = stream(seed, "probe-train");
    let n = data.len();
    let batch = PROBE_BATCH.min(n);
    for _ in 0..steps {
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let mut xb = Tensor::zeros(&[batch, dim]);
        let mut yb = Vec::with_capacity(batch);
        for (r, &i) in picks.iter().enumerate() {
            xb.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(data.x.row(i));
            yb.push(data.y[i]);
        }
        let mut tape: Tape<f32> = Tape::new();
        let w = tape.leaf(&weights);
        let b = tape.leaf(&bias);
        let x = tape.constant(xb);
        let wx = tape.matmul(x, w)?;
        let logits = tape.add_broadcast_row(wx, b)?;
        let loss = tape.cross_entropy_mean(logits, &yb)?;
        tape.backward(loss);
        let grads = vec![tape.grad_or_zeros(w), tape.grad_or_zeros(b)];
        opt.step("probe", &mut [&mut weights, &mut bias], &grads)?;
    }

    let mut hits = 0usize;
    for i in 0..n {
        let row = data.x.row(i);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..data.classes {
            let mut v = bias.data()[c] as f64;
            for (j, &xj) in row.iter().enumerate() {
                v += xj as f64 * weights.data()[j * data.classes + c] as f64;
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        hits += usize::from(best == data.y[i]);
    }
    Ok(ProbeFit {
        weights,
        bias,
        accuracy: hits as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub location: ProbeLocation,
    pub layer: usize,
    pub distance: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub entries: Vec<ProbeEntry>,
    /// Majority baseline per distance.
    pub chance: BTreeMap<usize, f64>,
}

impl ProbeReport {
    pub fn accuracy(&self, location: ProbeLocation, layer: usize, distance: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.location == location && e.layer == layer && e.distance == distance)
            .map(|e| e.accuracy)
    }
}

/// Probe both locations at every adapter layer across the distance grid.
#[allow(clippy::too_many_arguments)]
pub fn run_probes(
    planner: &PlannerModel<f32>,
    lm: &ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    split: Split,
    mode: ConditioningMode,
    distances: &[usize],
    train_steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeReport> {
    let mut entries = Vec::new();
    let mut chance = BTreeMap::new();
    for &layer in &lm.cfg.adapter_layers {
        for &distance in distances {
            for location in [ProbeLocation::PreMerge, ProbeLocation::PostMerge] {
                let spec = ProbeSpec {
                    location,
                    layer,
                    distance,
                    train_steps,
                    lr,
                };
                let data = extract_representations(planner, lm, corpus, split, mode, &spec)?;
                let fit = train_probe(&data, train_steps, lr, seed)?;
                chance.entry(distance).or_insert_with(|| data.majority_baseline());
                entries.push(ProbeEntry {
                    location,
                    layer,
                    distance,
                    accuracy: fit.accuracy,
                });
            }
        }
    }
    Ok(ProbeReport { entries, chance })
}
