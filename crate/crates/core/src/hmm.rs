//! Discrete HMM over action-index sequences, used as a latent critic: fit on
//! oracle action traces, then score generated traces by how predictable they
//! look under the fitted dynamics.
//!
//! Everything runs in f64 with per-step normalization, so sequences of a few
//! hundred symbols are safe from underflow.

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_STATES: usize = 8;
const SMOOTHING: f64 = 1e-6;
const LL_GAIN_TOL: f64 = 1e-4;
const MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmmCritic {
    pub states: usize,
    pub k: usize,
    /// Initial state distribution, length `states`.
    pub pi: Vec<f64>,
    /// Transition matrix, `states * states`, row-major.
    pub trans: Vec<f64>,
    /// Emission matrix, `states * k`, row-major.
    pub emit: Vec<f64>,
}

fn normalize(row: &mut [f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::numeric("cannot normalize a non-positive row"));
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
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

impl HmmCritic {
    /// Random valid critic: rows drawn uniform then normalized.
    pub fn random(states: usize, k: usize, seed: u64) -> Result<Self> {
        if states == 0 || k == 0 {
            return Err(Error::config("hmm needs at least one state and one symbol"));
        }
        let mut rng = stream(seed, "hmm-init");
        let mut draw = |n: usize| -> Result<Vec<f64>> {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            normalize(&mut row)?;
            Ok(row)
        };
        let pi = draw(states)?;
        let mut trans = Vec::with_capacity(states * states);
        for _ in 0..states {
            trans.extend(draw(states)?);
        }
        let mut emit = Vec::with_capacity(states * k);
        for _ in 0..states {
            emit.extend(draw(k)?);
        }
        Ok(HmmCritic {
            states,
            k,
            pi,
            trans,
            emit,
        })
    }

    fn check_seq(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::data("hmm: empty sequence"));
        }
        if let Some(&bad) = seq.iter().find(|&&o| o >= self.k) {
            return Err(Error::data(format!(
                "hmm: symbol {bad} out of range for k = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Log-likelihood of one sequence under the forward algorithm.
    pub fn sequence_log_likelihood(&self, seq: &[usize]) -> Result<f64> {
        self.check_seq(seq)?;
        let s = self.states;
        let mut alpha: Vec<f64> = (0..s).map(|i| self.pi[i] * self.emit[i * self.k + seq[0]]).collect();
        let mut ll = 0.0;
        let c0: f64 = alpha.iter().sum();
        if c0 <= 0.0 {
            return Err(Error::numeric("hmm forward: zero-probability prefix"));
        }
        ll += c0.ln();
        for a in alpha.iter_mut() {
            *a /= c0;
        }
        for &o in &seq[1..] {
            let mut next = vec![0.0; s];
            for (j, n) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..s {
                    acc += alpha[i] * self.trans[i * s + j];
                }
                *n = acc * self.emit[j * self.k + o];
            }
            let c: f64 = next.iter().sum();
            if c <= 0.0 {
                return Err(Error::numeric("hmm forward: zero-probability prefix"));
            }
            ll += c.ln();
            for v in next.iter_mut() {
                *v /= c;
            }
            alpha = next;
        }
        Ok(ll)
    }

    /// Mean per-symbol log-likelihood over a set of sequences.
    pub fn mean_symbol_log_likelihood(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::data("hmm: no sequences"));
        }
        let mut total = 0.0;
        let mut symbols = 0usize;
        for seq in seqs {
            total += self.sequence_log_likelihood(seq)?;
            symbols += seq.len();
        }
        Ok(total / symbols as f64)
    }

    /// exp(-mean per-symbol log-likelihood); lower = more predictable.
    pub fn latent_perplexity(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        Ok((-self.mean_symbol_log_likelihood(seqs)?).exp())
    }

    /// Sample a sequence of the given length.
    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut state = categorical(&self.pi, rng);
        out.push(categorical(&self.emit[state * self.k..(state + 1) * self.k], rng));
        for _ in 1..len {
            state = categorical(&self.trans[state * self.states..(state + 1) * self.states], rng);
            out.push(categorical(&self.emit[state * self.k..(state + 1) * self.k], rng));
        }
        out
    }

    /// State posteriors for one sequence: gamma (T x S) and summed xi (S x S).
    fn posteriors(&self, seq: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.states;
        let t_len = seq.len();
        // Scaled forward and backward passes; each row normalized to sum 1,
        // which cancels when gamma and xi are normalized below.
        let mut alpha = vec![0.0; t_len * s];
        for i in 0..s {
            alpha[i] = self.pi[i] * self.emit[i * self.k + seq[0]];
        }
        normalize(&mut alpha[0..s])?;
        for t in 1..t_len {
            let (prev, cur) = alpha.split_at_mut(t * s);
            let prev = &prev[(t - 1) * s..];
            for j in 0..s {
                let mut acc = 0.0;
                for i in 0..s {
                    acc += prev[i] * self.trans[i * s + j];
                }
                cur[j] = acc * self.emit[j * self.k + seq[t]];
            }
            normalize(&mut cur[0..s])?;
        }
        let mut beta = vec![0.0; t_len * s];
        for i in 0..s {
            beta[(t_len - 1) * s + i] = 1.0;
        }
        for t in (0..t_len - 1).rev() {
            for i in 0..s {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += self.trans[i * s + j]
                        * self.emit[j * self.k + seq[t + 1]]
                        * beta[(t + 1) * s + j];
                }
                beta[t * s + i] = acc;
            }
            normalize(&mut beta[t * s..(t + 1) * s])?;
        }

        let mut gamma = vec![0.0; t_len * s];
        for t in 0..t_len {
            for i in 0..s {
                gamma[t * s + i] = alpha[t * s + i] * beta[t * s + i];
            }
            normalize(&mut gamma[t * s..(t + 1) * s])?;
        }
        let mut xi_sum = vec![0.0; s * s];
        for t in 0..t_len - 1 {
            let mut xi = vec![0.0; s * s];
            for i in 0..s {
                for j in 0..s {
                    xi[i * s + j] = alpha[t * s + i]
                        * self.trans[i * s + j]
                        * self.emit[j * self.k + seq[t + 1]]
                        * beta[(t + 1) * s + j];
                }
            }
            normalize(&mut xi)?;
            for (acc, v) in xi_sum.iter_mut().zip(&xi) {
                *acc += v;
            }
        }
        Ok((gamma, xi_sum))
    }
}

#[derive(Debug, Clone)]
pub struct HmmFit {
    pub critic: HmmCritic,
    /// Per-symbol log-likelihood before each update, one entry per iteration.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
}

/// Baum-Welch. Stops when the per-symbol log-likelihood gain drops below
/// 1e-4 or after 100 iterations. Re-estimated rows get 1e-6 additive
/// smoothing before normalization, so no probability ever hits zero.
pub fn fit_hmm(seqs: &[Vec<usize>], states: usize, k: usize, seed: u64) -> Result<HmmFit> {
    if seqs.is_empty() {
        return Err(Error::data("fit_hmm: no sequences"));
    }
    let mut critic = HmmCritic::random(states, k, seed)?;
    for seq in seqs {
        critic.check_seq(seq)?;
    }
    let s = states;
    let mut ll_trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        let ll = critic.mean_symbol_log_likelihood(seqs)?;
        ll_trace.push(ll);
        iterations += 1;
        if ll - prev_ll < LL_GAIN_TOL && iterations > 1 {
            break;
        }
        prev_ll = ll;

        let mut pi_acc = vec![0.0; s];
        let mut trans_acc = vec![0.0; s * s];
        let mut emit_acc = vec![0.0; s * k];
        for seq in seqs {
            let (gamma, xi_sum) = critic.posteriors(seq)?;
            for i in 0..s {
                pi_acc[i] += gamma[i];
            }
            for (acc, v) in trans_acc.iter_mut().zip(&xi_sum) {
                *acc += v;
            }
            for (t, &o) in seq.iter().enumerate() {
                for i in 0..s {
                    emit_acc[i * k + o] += gamma[t * s + i];
                }
            }
        }
        for v in pi_acc.iter_mut() {
            *v += SMOOTHING;
        }
        normalize(&mut pi_acc)?;
        critic.pi = pi_acc;
        for row in 0..s {
            let tr = &mut trans_acc[row * s..(row + 1) * s];
            for v in tr.iter_mut() {
                *v += SMOOTHING;
            }
            normalize(tr)?;
            let em = &mut emit_acc[row * k..(row + 1) * k];
            for v in em.iter_mut() {
                *v += SMOOTHING;
            }
            normalize(em)?;
        }
        critic.trans = trans_acc;
        critic.emit = emit_acc;
    }
    Ok(HmmFit {
        critic,
        ll_trace,
        iterations,
    })
}
