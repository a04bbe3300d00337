//! Evaluation: perplexity under planner-predicted conditioning, sampling
//! with online sentence-boundary re-planning, and the abstract-level
//! generation metrics (ROUGE-2, normalized action edit distance, latent
//! perplexity under an HMM critic, plan-matching accuracy).

use crate::actions::{ActionVocabulary, SentenceEncoder};
use crate::condlm::{selection_weights, ConditionedLM, ConditioningMode, WindowConditioning};
use crate::corpus::{
    detokenize, is_terminator, segment_bytes, SegmentedCorpus, Split, Window, BOS, EOS,
};
use crate::error::{Error, Result};
use crate::hmm::{fit_hmm, HmmCritic};
use crate::planner::{PlannerBinding, PlannerModel};
use crate::rng::{derive_seed, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Conditioning used at evaluation time: always planner-predicted, so
/// oracle-trained models are scored with hard predicted selection.
fn eval_conditioning(mode: ConditioningMode) -> ConditioningMode {
    match mode {
        ConditioningMode::OracleOneHot => ConditioningMode::Hard,
        m => m,
    }
}

/// f64 negative log-likelihood sum over valid target positions.
fn nll_sum_f64(logits: &Tensor<f32>, targets: &[usize]) -> (f64, usize) {
    let cols = logits.cols();
    let mut total = 0.0;
    let mut count = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == crate::tape::IGNORE_TARGET {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let mut sum = 0.0;
        for &x in row.iter().take(cols) {
            sum += ((x as f64) - max).exp();
        }
        total += max + sum.ln() - row[t] as f64;
        count += 1;
    }
    (total, count)
}

/// Planner-predicted conditioning for one window.
pub(crate) fn predicted_window_conditioning(
    tape: &mut Tape<f32>,
    planner: &PlannerModel<f32>,
    pbind: Option<&PlannerBinding>,
    k: usize,
    corpus: &SegmentedCorpus,
    window: &Window,
    emode: ConditioningMode,
) -> Result<WindowConditioning> {
    let doc = &corpus.documents[window.doc_index];
    let (lo, hi) = window.sentence_range;
    let m = hi - lo;
    let rows = match pbind {
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
    let weights = selection_weights(tape, emode, rows, None, m, k)?;
    let position_rows: Vec<usize> = window.sentence_ids.iter().map(|&s| s - lo).collect();
    Ok(WindowConditioning {
        weights,
        position_rows,
    })
}

/// exp(mean per-token NLL) over every window of the split, conditioning on
/// planner-predicted actions.
pub fn perplexity(
    planner: &PlannerModel<f32>,
    lm: &ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    split: Split,
    mode: ConditioningMode,
) -> Result<f64> {
    let windows = corpus.windows(split);
    if windows.is_empty() {
        return Err(Error::data(format!("perplexity: no windows in split {split}")));
    }
    let emode = eval_conditioning(mode);
    let mut total = 0.0;
    let mut count = 0usize;
    for window in &windows {
        let mut tape: Tape<f32> = Tape::new();
        let pbind = emode.uses_planner().then(|| planner.bind(&mut tape));
        let cond = predicted_window_conditioning(
            &mut tape, planner, pbind.as_ref(), lm.cfg.k, corpus, window, emode,
        )?;
        let bind = lm.bind(&mut tape);
        let fwd = lm.forward(&mut tape, &bind, &window.tokens, Some(&cond))?;
        let (s, c) = nll_sum_f64(tape.value(fwd.logits), &window.targets);
        total += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::data("perplexity: no valid target positions"));
    }
    Ok((total / count as f64).exp())
}

/// Online sentence-boundary detector mirroring the offline segmentation
/// rules: a terminator (or blank line) opens a whitespace run, and the first
/// non-whitespace byte after the run starts a new sentence.
#[derive(Debug, Clone, Default)]
pub struct BoundaryTracker {
    prev: Option<u8>,
    pending: bool,
}

impl BoundaryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed one byte; true iff this byte starts a new sentence.
    pub fn push(&mut self, b: u8) -> bool {
        let mut boundary = false;
        if self.pending {
            if b.is_ascii_whitespace() {
                self.prev = Some(b);
                return false;
            }
            boundary = true;
            self.pending = false;
        }
        if let Some(p) = self.prev {
            let terminated = is_terminator(p) && b.is_ascii_whitespace();
            let blank_line = p == b'\n' && b == b'\n';
            if terminated || blank_line {
                self.pending = true;
            }
        }
        self.prev = Some(b);
        boundary
    }
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Conditioning weights implied by one planner logits row under a mode.
fn weights_from_row(mode: ConditioningMode, row: &[f32]) -> Vec<f32> {
    match mode {
        ConditioningMode::Soft => {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let exps: Vec<f64> = row.iter().map(|&x| ((x as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|&e| (e / sum) as f32).collect()
        }
        ConditioningMode::Uniform => vec![1.0 / row.len() as f32; row.len()],
        _ => {
            let mut w = vec![0.0; row.len()];
            w[argmax_f32(row)] = 1.0;
            w
        }
    }
}

fn sample_from_logits<R: Rng>(row: &[f32], temperature: f64, top_p: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return argmax_f32(row);
    }
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let mut probs: Vec<f64> = row
        .iter()
        .map(|&x| (((x as f64) - max) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if top_p < 1.0 {
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (rank, &i) in order.iter().enumerate() {
            cum += probs[i];
            if cum >= top_p {
                keep = rank + 1;
                break;
            }
        }
        order.truncate(keep);
        let kept: f64 = order.iter().map(|&i| probs[i]).sum();
        let u: f64 = rng.random::<f64>() * kept;
        let mut acc = 0.0;
        for &i in &order {
            acc += probs[i];
            if u < acc {
                return i;
            }
        }
        return *order.last().unwrap();
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Output of [`generate`]: sampled continuation tokens, the full text bytes
/// (prefix included), and the planned action per sentence written during
/// generation. `first_planned_sentence` is the index, in the full text's
/// segmentation, of the sentence `planned[0]` refers to.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub text: Vec<u8>,
    pub planned: Vec<usize>,
    pub first_planned_sentence: usize,
}

fn plan_rows_for(
    planner: &PlannerModel<f32>,
    tokens: &[u32],
    starts: &[usize],
) -> Result<Tensor<f32>> {
    let spans: Vec<(usize, usize)> = starts.windows(2).map(|w| (w[0], w[1])).collect();
    let mut tape: Tape<f32> = Tape::new();
    let bind = planner.bind(&mut tape);
    let logits = planner.plan_logits(&mut tape, &bind, tokens, &spans)?;
    Ok(tape.value(logits).clone())
}

/// Autoregressive sampling. The planner is re-invoked whenever a sentence
/// boundary appears in the sampled bytes; each sentence is conditioned on
/// the weights its planner row implies under `mode`. Stops after `n_tokens`
/// tokens or an end-of-sequence sample.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    planner: &PlannerModel<f32>,
    lm: &ConditionedLM<f32>,
    mode: ConditioningMode,
    prefix: &[u8],
    n_tokens: usize,
    temperature: f64,
    top_p: f64,
    seed: u64,
) -> Result<Generated> {
    let emode = eval_conditioning(mode);
    let k = lm.cfg.k;
    let ctx = lm.cfg.context;
    let mut tokens: Vec<u32> = Vec::with_capacity(prefix.len() + n_tokens + 1);
    tokens.push(BOS);
    let mut starts = vec![0usize];
    let mut tracker = BoundaryTracker::new();
    for (i, &b) in prefix.iter().enumerate() {
        tokens.push(u32::from(b));
        if tracker.push(b) {
            starts.push(i + 1);
        }
    }

    // One planner pass covers every prefix sentence plus the open one.
    let initial = plan_rows_for(planner, &tokens, &starts)?;
    let mut weight_rows: Vec<Vec<f32>> = (0..starts.len())
        .map(|j| weights_from_row(emode, initial.row(j)))
        .collect();
    let mut planned = vec![argmax_f32(initial.row(starts.len() - 1))];
    let first_planned_sentence = starts.len() - 1;

    let mut rng = stream(seed, "generate");
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let len = tokens.len();
        let lo_tok = len.saturating_sub(ctx);
        let fed = &tokens[lo_tok..];
        let sid = |t: usize| starts.partition_point(|&s| s <= t) - 1;
        let lo_sid = sid(lo_tok + 1);
        let m = starts.len() - lo_sid;
        let mut w = Tensor::zeros(&[m, k]);
        for (r, row) in weight_rows[lo_sid..].iter().enumerate() {
            w.data_mut()[r * k..(r + 1) * k].copy_from_slice(row);
        }
        let position_rows: Vec<usize> = (lo_tok..len).map(|g| sid(g + 1) - lo_sid).collect();

        let mut tape: Tape<f32> = Tape::new();
        let bind = lm.bind(&mut tape);
        let cond = WindowConditioning {
            weights: tape.constant(w),
            position_rows,
        };
        let fwd = lm.forward(&mut tape, &bind, fed, Some(&cond))?;
        let logits = tape.value(fwd.logits);
        let next = sample_from_logits(logits.row(fed.len() - 1), temperature, top_p, &mut rng);

        tokens.push(next as u32);
        out.push(next as u32);
        if next as u32 == EOS {
            break;
        }
        if next < 256 && tracker.push(next as u8) {
            starts.push(len);
            let rows = plan_rows_for(planner, &tokens, &starts)?;
            let row = rows.row(rows.rows() - 1);
            weight_rows.push(weights_from_row(emode, row));
            planned.push(argmax_f32(row));
        }
    }

    Ok(Generated {
        text: detokenize(&tokens),
        tokens: out,
        planned,
        first_planned_sentence,
    })
}

/// Clipped-bigram F1. Anything shorter than a bigram scores 0.
pub fn rouge2_f1(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.len() < 2 || reference.len() < 2 {
        return 0.0;
    }
    let counts = |seq: &[u32]| {
        let mut map: HashMap<(u32, u32), usize> = HashMap::new();
        for w in seq.windows(2) {
            *map.entry((w[0], w[1])).or_insert(0) += 1;
        }
        map
    };
    let cand = counts(candidate);
    let refc = counts(reference);
    let overlap: usize = cand
        .iter()
        .map(|(bg, &c)| c.min(*refc.get(bg).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / (candidate.len() - 1) as f64;
    let recall = overlap as f64 / (reference.len() - 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by n_tokens/base, so scores are comparable across
/// generation lengths.
pub fn edit_distance_norm(a: &[usize], b: &[usize], n_tokens: usize, base: usize) -> f64 {
    edit_distance(a, b) as f64 / (n_tokens as f64 / base as f64)
}

/// Action sequence realized by a byte text: segment, then assign each
/// sentence to its nearest action. Empty text maps to the empty sequence.
pub fn realized_actions(
    bytes: &[u8],
    encoder: &SentenceEncoder,
    vocab: &ActionVocabulary,
) -> Result<Vec<usize>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let doc = segment_bytes(bytes)?;
    let mut out = Vec::with_capacity(doc.num_sentences());
    for s in 0..doc.num_sentences() {
        let sb = doc.sentence_bytes(s);
        out.push(vocab.assign_action(&encoder.encode(&sb)?)?);
    }
    Ok(out)
}

/// Fraction of generated sentences whose realized action matches the
/// planned one.
pub fn plan_matching_accuracy(
    samples: &[Generated],
    encoder: &SentenceEncoder,
    vocab: &ActionVocabulary,
) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for g in samples {
        if g.text.is_empty() {
            continue;
        }
        let doc = segment_bytes(&g.text)?;
        for (j, &planned) in g.planned.iter().enumerate() {
            let s = g.first_planned_sentence + j;
            if s >= doc.num_sentences() {
                break;
            }
            let sb = doc.sentence_bytes(s);
            if sb.is_empty() {
                continue;
            }
            let realized = vocab.assign_action(&encoder.encode(&sb)?)?;
            total += 1;
            hits += usize::from(realized == planned);
        }
    }
    if total == 0 {
        return Err(Error::data("plan matching: zero generated sentences"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Continuation lengths for ROUGE-2 and edit distance.
    pub gen_lengths: Vec<usize>,
    /// Edit distances are divided by length/base.
    pub edit_base: usize,
    /// Prefix bytes taken from each reference document.
    pub prefix_bytes: usize,
    /// Reference documents drawn from the evaluated split.
    pub eval_docs: usize,
    /// Unconditional samples for latent perplexity and plan matching.
    pub uncond_samples: usize,
    pub uncond_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub critic_states: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gen_lengths: vec![64, 128, 256],
            edit_base: 64,
            prefix_bytes: 32,
            eval_docs: 8,
            uncond_samples: 8,
            uncond_tokens: 192,
            temperature: 1.0,
            top_p: 1.0,
            critic_states: crate::hmm::DEFAULT_STATES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub rouge2: BTreeMap<usize, f64>,
    pub rouge2_mean: f64,
    pub edit_norm: BTreeMap<usize, f64>,
    pub edit_norm_mean: f64,
    pub latent_ppl: f64,
    pub plan_match_acc: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::numeric(format!("eval report violates {what}")))
            }
        };
        check(self.ppl >= 1.0, "ppl >= 1")?;
        for v in self.rouge2.values().chain(std::iter::once(&self.rouge2_mean)) {
            check((0.0..=1.0).contains(v), "rouge2 in [0,1]")?;
        }
        for v in self.edit_norm.values().chain(std::iter::once(&self.edit_norm_mean)) {
            check(*v >= 0.0, "edit_norm >= 0")?;
        }
        check(self.latent_ppl >= 1.0, "latent_ppl >= 1")?;
        check((0.0..=1.0).contains(&self.plan_match_acc), "plan_match_acc in [0,1]")
    }
}

/// Full evaluation for one model pair on one split. The critic is fit on
/// oracle action sequences from the train split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    planner: &PlannerModel<f32>,
    lm: &ConditionedLM<f32>,
    corpus: &SegmentedCorpus,
    oracle: &[Vec<usize>],
    split: Split,
    mode: ConditioningMode,
    encoder: &SentenceEncoder,
    vocab: &ActionVocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let ppl = perplexity(planner, lm, corpus, split, mode)?;

    let train_seqs: Vec<Vec<usize>> = corpus
        .doc_indices(Split::Train)
        .into_iter()
        .map(|i| oracle[i].clone())
        .collect();
    let critic: HmmCritic = fit_hmm(
        &train_seqs,
        cfg.critic_states,
        vocab.k,
        derive_seed(cfg.seed, "critic"),
    )?
    .critic;

    // Prefix-conditioned continuations against reference docs.
    let min_len = cfg.prefix_bytes + 8;
    let refs: Vec<usize> = corpus
        .doc_indices(split)
        .into_iter()
        .filter(|&i| detokenize(&corpus.documents[i].tokens).len() >= min_len)
        .take(cfg.eval_docs)
        .collect();
    if refs.is_empty() {
        return Err(Error::data("evaluate: no reference documents long enough"));
    }
    let mut rouge2 = BTreeMap::new();
    let mut edit_norm = BTreeMap::new();
    for &len in &cfg.gen_lengths {
        let mut r_sum = 0.0;
        let mut e_sum = 0.0;
        for &di in &refs {
            let bytes = detokenize(&corpus.documents[di].tokens);
            let prefix = &bytes[..cfg.prefix_bytes];
            let reference = &bytes[cfg.prefix_bytes..(cfg.prefix_bytes + len).min(bytes.len())];
            let gen = generate(
                planner,
                lm,
                mode,
                prefix,
                len,
                cfg.temperature,
                cfg.top_p,
                derive_seed(cfg.seed, &format!("gen/{di}/{len}")),
            )?;
            let cand = detokenize(&gen.tokens);
            let cand_u32: Vec<u32> = cand.iter().map(|&b| u32::from(b)).collect();
            let ref_u32: Vec<u32> = reference.iter().map(|&b| u32::from(b)).collect();
            r_sum += rouge2_f1(&cand_u32, &ref_u32);
            let gen_actions = realized_actions(&cand, encoder, vocab)?;
            let ref_actions = realized_actions(reference, encoder, vocab)?;
            e_sum += edit_distance_norm(&gen_actions, &ref_actions, len, cfg.edit_base);
        }
        rouge2.insert(len, r_sum / refs.len() as f64);
        edit_norm.insert(len, e_sum / refs.len() as f64);
    }
    let mean = |m: &BTreeMap<usize, f64>| m.values().sum::<f64>() / m.len() as f64;
    let rouge2_mean = mean(&rouge2);
    let edit_norm_mean = mean(&edit_norm);

    // Unconditional samples for the latent metrics.
    let mut samples = Vec::with_capacity(cfg.uncond_samples);
    let mut seqs = Vec::new();
    for s in 0..cfg.uncond_samples {
        let gen = generate(
            planner,
            lm,
            mode,
            &[],
            cfg.uncond_tokens,
            cfg.temperature,
            cfg.top_p,
            derive_seed(cfg.seed, &format!("uncond/{s}")),
        )?;
        let actions = realized_actions(&gen.text, encoder, vocab)?;
        if !actions.is_empty() {
            seqs.push(actions);
        }
        samples.push(gen);
    }
    if seqs.is_empty() {
        return Err(Error::data("evaluate: every unconditional sample was empty"));
    }
    let latent_ppl = critic.latent_perplexity(&seqs)?;
    let plan_match_acc = plan_matching_accuracy(&samples, encoder, vocab)?;

    let report = EvalReport {
        ppl,
        rouge2,
        rouge2_mean,
        edit_norm,
        edit_norm_mean,
        latent_ppl,
        plan_match_acc,
    };
    report.validate()?;
    Ok(report)
}
