//! Shared transformer pieces: pre-norm causal blocks with multi-head
//! attention and a GELU MLP, plus parameter plumbing used by both the
//! planner and the conditioned LM.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub(crate) struct BlockParams<E> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

pub(crate) const BLOCK_TENSORS: usize = 12;

impl<E: Elem> BlockParams<E> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let ones = Tensor::from_vec(&[1, dim], vec![E::ONE; dim])
            .unwrap()
            .with_requires_grad(true);
        let hidden = 4 * dim;
        BlockParams {
            ln1_g: ones.clone(),
            ln1_b: Tensor::param_zeros(&[1, dim]),
            wq: Tensor::randn(&[dim, dim], INIT_STD, rng).with_requires_grad(true),
            wk: Tensor::randn(&[dim, dim], INIT_STD, rng).with_requires_grad(true),
            wv: Tensor::randn(&[dim, dim], INIT_STD, rng).with_requires_grad(true),
            wo: Tensor::randn(&[dim, dim], INIT_STD, rng).with_requires_grad(true),
            ln2_g: ones,
            ln2_b: Tensor::param_zeros(&[1, dim]),
            w1: Tensor::randn(&[dim, hidden], INIT_STD, rng).with_requires_grad(true),
            b1: Tensor::param_zeros(&[1, hidden]),
            w2: Tensor::randn(&[hidden, dim], INIT_STD, rng).with_requires_grad(true),
            b2: Tensor::param_zeros(&[1, dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<E>; BLOCK_TENSORS] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo,
            &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<E>; BLOCK_TENSORS] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.wk,
            &mut self.wv, &mut self.wo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }

    pub fn tensor_names(prefix: &str) -> Vec<String> {
        ["ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]
            .iter()
            .map(|t| format!("{prefix}.{t}"))
            .collect()
    }
}

/// Tape handles for one block, in the same order as `BlockParams::tensors`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        BlockVars {
            ln1_g: vars[0],
            ln1_b: vars[1],
            wq: vars[2],
            wk: vars[3],
            wv: vars[4],
            wo: vars[5],
            ln2_g: vars[6],
            ln2_b: vars[7],
            w1: vars[8],
            b1: vars[9],
            w2: vars[10],
            b2: vars[11],
        }
    }
}

/// One pre-norm block: x + attn(ln(x)) then x + mlp(ln(x)).
///
/// `inject` is added to the concatenated attention-value aggregate before
/// the output projection; the returned second value is that post-addition
/// hidden state (present only when an injection was supplied).
pub(crate) fn transformer_block<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    b: &BlockVars,
    heads: usize,
    inject: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let dim = tape.value(x).cols();
    if !dim.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "model dim {dim} not divisible by {heads} heads"
        )));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let normed = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    let q = tape.matmul(normed, b.wq)?;
    let k = tape.matmul(normed, b.wk)?;
    let v = tape.matmul(normed, b.wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.causal_softmax(scaled)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let mut agg = tape.concat_cols(&head_outs)?;
    let mut post_merge = None;
    if let Some(cond) = inject {
        agg = tape.add(agg, cond)?;
        post_merge = Some(agg);
    }
    let proj = tape.matmul(agg, b.wo)?;
    let x = tape.add(x, proj)?;

    let normed2 = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
    let h1 = tape.matmul(normed2, b.w1)?;
    let h1 = tape.add_broadcast_row(h1, b.b1)?;
    let act = tape.gelu(h1);
    let h2 = tape.matmul(act, b.w2)?;
    let h2 = tape.add_broadcast_row(h2, b.b2)?;
    let out = tape.add(x, h2)?;
    Ok((out, post_merge))
}

pub(crate) fn embedding_init<E: Elem, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<E> {
    Tensor::randn(&[rows, cols], INIT_STD, rng).with_requires_grad(true)
}
