//! Reverse-mode automatic differentiation over a linear tape of recorded ops.
//!
//! Every forward op appends a node holding its output tensor; `backward`
//! replays the tape in exact reverse execution order, accumulating gradients
//! additively across fan-out. Includes a custom-gradient node for the
//! straight-through estimator: hard selection forward, softmax Jacobian
//! backward.

use crate::error::{Error, Result};
use crate::tensor::{
    argmax, gelu_grad, gelu_value, matmul_into, matmul_ta_into, matmul_tb_into,
    softmax_row_in_place, Elem, Tensor,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Target marker for positions excluded from a cross-entropy reduction.
pub const IGNORE_TARGET: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a (m x k) @ b (k x n)
    Matmul { a: Var, b: Var },
    /// a (m x k) @ b^T (b: n x k)
    MatmulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// out[i,j] = a[i,j] + bias[j]
    AddBroadcastRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    /// out[i,:] = a[i,:] * factors[i]
    RowScale { a: Var, factors: Vec<f64> },
    Gelu { a: Var },
    /// Row-wise layer norm with affine parameters.
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: f64 },
    /// Row-wise max-shifted softmax.
    Softmax { a: Var },
    /// Square score matrix; row i is softmaxed over columns 0..=i, rest zero.
    CausalSoftmax { a: Var },
    /// Row-wise one-hot argmax; no gradient path.
    HardSelect,
    /// Row-wise one-hot argmax forward; softmax Jacobian backward.
    StraightThrough { a: Var },
    /// out[p,:] = table[indices[p],:]
    EmbedLookup { table: Var, indices: Vec<usize> },
    /// out[p,:] = a[indices[p],:]
    GatherRows { a: Var, indices: Vec<usize> },
    /// out[i,:] = mean of a rows in ranges[i]
    MeanPoolRows { a: Var, ranges: Vec<(usize, usize)> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize, total_cols: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    /// Scalar sum of per-row negative log-likelihoods under a fused
    /// log-softmax; rows with target == IGNORE_TARGET contribute nothing.
    CrossEntropySum { logits: Var, targets: Vec<usize> },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed ops with per-node gradient accumulators.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_all_finite(), "non-finite forward output");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input tensor, cloning its data onto the tape.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        let rg = t.requires_grad();
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Register a constant (no gradient) tensor by value.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> E {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient, if any flowed to this node.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulated gradient, or zeros of the node's size.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![E::ZERO; self.nodes[v.0].value.numel()],
        }
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        debug_assert_eq!(s.len(), 2, "expected 2-D node");
        (s[0], s[1])
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].value.shape().to_vec(),
            rhs: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    // -- forward ops --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_into(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::from_vec(&[m, n], out)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Matmul { a, b }, rg))
    }

    /// a (m x k) @ b^T where b is (n x k).
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(self.mismatch("matmul_tb", a, b));
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_tb_into(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::from_vec(&[m, n], out)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(t, Op::MatmulTb { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(self.mismatch("add", a, b));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a.0].value.shape(), data)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn add_broadcast_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape2(a);
        if self.nodes[bias.0].value.numel() != c {
            return Err(self.mismatch("add_broadcast_row", a, bias));
        }
        let bias_data = self.nodes[bias.0].value.data().to_vec();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for i in 0..r {
            for (v, &bv) in data[i * c..(i + 1) * c].iter_mut().zip(&bias_data) {
                *v += bv;
            }
        }
        let t = Tensor::from_vec(&[r, c], data)?;
        let rg = self.req(a) || self.req(bias);
        Ok(self.push(t, Op::AddBroadcastRow { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a.0].value.shape(), data)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = E::from_f64(factor);
        let data = self.nodes[a.0].value.data().iter().map(|&x| x * f).collect();
        let t = Tensor::from_vec(self.nodes[a.0].value.shape(), data).unwrap();
        let rg = self.req(a);
        self.push(t, Op::Scale { a, factor }, rg)
    }

    /// Scale each row of a 2-D node by a per-row constant factor.
    pub fn row_scale(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (r, c) = self.shape2(a);
        if factors.len() != r {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: vec![r, c],
                rhs: vec![factors.len()],
            });
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        for (i, &f) in factors.iter().enumerate() {
            let fe = E::from_f64(f);
            for v in data[i * c..(i + 1) * c].iter_mut() {
                *v *= fe;
            }
        }
        let t = Tensor::from_vec(&[r, c], data)?;
        let rg = self.req(a);
        Ok(self.push(
            t,
            Op::RowScale {
                a,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| gelu_value(x))
            .collect();
        let t = Tensor::from_vec(self.nodes[a.0].value.shape(), data).unwrap();
        let rg = self.req(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape2(a);
        if self.nodes[gamma.0].value.numel() != c || self.nodes[beta.0].value.numel() != c {
            return Err(self.mismatch("layer_norm", a, gamma));
        }
        let x = self.nodes[a.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let inv_c = E::from_f64(1.0 / c as f64);
        let eps_e = E::from_f64(eps);
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let rstd = E::ONE / (var + eps_e).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * rstd * g[j] + bt[j];
            }
        }
        let t = Tensor::from_vec(&[r, c], data)?;
        let rg = self.req(a) || self.req(gamma) || self.req(beta);
        Ok(self.push(t, Op::LayerNorm { a, gamma, beta, eps }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let mut data = self.nodes[a.0].value.data().to_vec();
        for i in 0..r {
            softmax_row_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_vec(&[r, c], data).unwrap();
        let rg = self.req(a);
        self.push(t, Op::Softmax { a }, rg)
    }

    /// Softmax of a square score matrix where row i sees only columns 0..=i.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape2(a);
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let x = self.nodes[a.0].value.data();
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &x[i * c..i * c + i + 1];
            let out = &mut data[i * c..i * c + i + 1];
            out.copy_from_slice(row);
            softmax_row_in_place(out);
        }
        let t = Tensor::from_vec(&[r, c], data)?;
        let rg = self.req(a);
        Ok(self.push(t, Op::CausalSoftmax { a }, rg))
    }

    fn onehot_rows(&self, a: Var) -> Tensor<E> {
        let (r, c) = self.shape2(a);
        let x = self.nodes[a.0].value.data();
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            let j = argmax(&x[i * c..(i + 1) * c]);
            data[i * c + j] = E::ONE;
        }
        Tensor::from_vec(&[r, c], data).unwrap()
    }

    /// Row-wise one-hot of the argmax. No gradient flows to the input.
    pub fn hard_select(&mut self, a: Var) -> Var {
        let t = self.onehot_rows(a);
        self.push(t, Op::HardSelect, false)
    }

    /// Row-wise one-hot of the argmax forward; backward behaves as if the
    /// forward had been `softmax`.
    pub fn straight_through(&mut self, a: Var) -> Var {
        let t = self.onehot_rows(a);
        let rg = self.req(a);
        self.push(t, Op::StraightThrough { a }, rg)
    }

    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.shape2(table);
        for &ix in indices {
            if ix >= v {
                return Err(Error::IndexOutOfRange {
                    op: "embed_lookup",
                    index: ix,
                    size: v,
                });
            }
        }
        let tb = self.nodes[table.0].value.data();
        let mut data = vec![E::ZERO; indices.len() * d];
        for (p, &ix) in indices.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(&tb[ix * d..(ix + 1) * d]);
        }
        let t = Tensor::from_vec(&[indices.len(), d], data)?;
        let rg = self.req(table);
        Ok(self.push(
            t,
            Op::EmbedLookup {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Gather rows of a 2-D node by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, d) = self.shape2(a);
        for &ix in indices {
            if ix >= m {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: ix,
                    size: m,
                });
            }
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![E::ZERO; indices.len() * d];
        for (p, &ix) in indices.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let t = Tensor::from_vec(&[indices.len(), d], data)?;
        let rg = self.req(a);
        Ok(self.push(
            t,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of each half-open row range of a 2-D node.
    pub fn mean_pool_rows(&mut self, a: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.shape2(a);
        for &(s, e) in ranges {
            if s >= e || e > n {
                return Err(Error::Data(format!(
                    "mean_pool_rows: bad range {s}..{e} for {n} rows"
                )));
            }
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![E::ZERO; ranges.len() * d];
        for (i, &(s, e)) in ranges.iter().enumerate() {
            let inv = E::from_f64(1.0 / (e - s) as f64);
            let out = &mut data[i * d..(i + 1) * d];
            for r in s..e {
                for (o, &v) in out.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::from_vec(&[ranges.len(), d], data)?;
        let rg = self.req(a);
        Ok(self.push(
            t,
            Op::MeanPoolRows {
                a,
                ranges: ranges.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape2(a);
        if start >= end || end > r {
            return Err(Error::Data(format!(
                "slice_rows: bad range {start}..{end} for {r} rows"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let data = src[start * c..end * c].to_vec();
        let t = Tensor::from_vec(&[end - start, c], data)?;
        let rg = self.req(a);
        Ok(self.push(t, Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape2(a);
        if start >= end || end > c {
            return Err(Error::Data(format!(
                "slice_cols: bad range {start}..{end} for {c} cols"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let w = end - start;
        let mut data = vec![E::ZERO; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::from_vec(&[r, w], data)?;
        let rg = self.req(a);
        Ok(self.push(
            t,
            Op::SliceCols {
                a,
                start,
                total_cols: c,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, c) = self.shape2(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, pc) = self.shape2(p);
            if pc != c {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let t = Tensor::from_vec(&[total, c], data)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (r, _) = self.shape2(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape2(p);
            if pr != r {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += pc;
        }
        let mut data = vec![E::ZERO; r * total];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.shape2(p);
            let src = self.nodes[p.0].value.data();
            for i in 0..r {
                data[i * total + off..i * total + off + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let t = Tensor::from_vec(&[r, total], data)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of per-row cross-entropy losses against integer targets, as a
    /// scalar node. Rows whose target is `IGNORE_TARGET` are skipped. Use
    /// `valid_target_count` for the matching denominator.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape2(logits);
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t != IGNORE_TARGET && t >= c {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: c,
                });
            }
        }
        let x = self.nodes[logits.0].value.data();
        let mut total = 0.0f64;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == IGNORE_TARGET {
                continue;
            }
            let row = &x[i * c..(i + 1) * c];
            let mut max = row[0];
            for &v in row {
                max = max.maximum(v);
            }
            let mut sum = 0.0f64;
            for &v in row {
                sum += (v - max).to_f64().exp();
            }
            total += sum.ln() + max.to_f64() - row[tgt].to_f64();
        }
        let t = Tensor::scalar(E::from_f64(total));
        let rg = self.req(logits);
        Ok(self.push(
            t,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy over valid rows.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = valid_target_count(targets);
        if n == 0 {
            return Err(Error::data("cross_entropy: no valid targets"));
        }
        let sum = self.cross_entropy_sum(logits, targets)?;
        Ok(self.scale(sum, 1.0 / n as f64))
    }

    // -- backward -----------------------------------------------------------

    /// Run the backward pass from a scalar loss node, seeding it with 1.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward seeds a scalar loss"
        );
        self.grads[loss.0] = Some(vec![E::ONE]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op);
        }
    }

    fn acc(&mut self, v: Var, contrib: &[E]) {
        // Skip accumulation into subgraphs that cannot reach a parameter.
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op) {
        let d_out = self.grads[out_idx].clone().unwrap();
        match *op {
            Op::Leaf | Op::HardSelect => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.shape2(a);
                let (_, n) = self.shape2(b);
                if self.req(a) {
                    let mut d_a = vec![E::ZERO; m * k];
                    matmul_tb_into(&d_out, self.nodes[b.0].value.data(), &mut d_a, m, n, k);
                    self.acc(a, &d_a);
                }
                if self.req(b) {
                    let mut d_b = vec![E::ZERO; k * n];
                    matmul_ta_into(self.nodes[a.0].value.data(), &d_out, &mut d_b, m, k, n);
                    self.acc(b, &d_b);
                }
            }

            Op::MatmulTb { a, b } => {
                let (m, k) = self.shape2(a);
                let (n, _) = self.shape2(b);
                if self.req(a) {
                    let mut d_a = vec![E::ZERO; m * k];
                    matmul_into(&d_out, self.nodes[b.0].value.data(), &mut d_a, m, n, k);
                    self.acc(a, &d_a);
                }
                if self.req(b) {
                    let mut d_b = vec![E::ZERO; n * k];
                    matmul_ta_into(&d_out, self.nodes[a.0].value.data(), &mut d_b, m, n, k);
                    self.acc(b, &d_b);
                }
            }

            Op::Add { a, b } => {
                self.acc(a, &d_out);
                self.acc(b, &d_out);
            }

            Op::AddBroadcastRow { a, bias } => {
                self.acc(a, &d_out);
                if self.req(bias) {
                    let (r, c) = self.shape2(a);
                    let mut d_b = vec![E::ZERO; c];
                    for i in 0..r {
                        for (db, &dv) in d_b.iter_mut().zip(&d_out[i * c..(i + 1) * c]) {
                            *db += dv;
                        }
                    }
                    self.acc(bias, &d_b);
                }
            }

            Op::Mul { a, b } => {
                if self.req(a) {
                    let d_a: Vec<E> = d_out
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.acc(a, &d_a);
                }
                if self.req(b) {
                    let d_b: Vec<E> = d_out
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.acc(b, &d_b);
                }
            }

            Op::Scale { a, factor } => {
                let f = E::from_f64(factor);
                let d_a: Vec<E> = d_out.iter().map(|&d| d * f).collect();
                self.acc(a, &d_a);
            }

            Op::RowScale { a, ref factors } => {
                let (_, c) = self.shape2(a);
                let mut d_a = d_out.clone();
                for (i, &f) in factors.iter().enumerate() {
                    let fe = E::from_f64(f);
                    for v in d_a[i * c..(i + 1) * c].iter_mut() {
                        *v *= fe;
                    }
                }
                self.acc(a, &d_a);
            }

            Op::Gelu { a } => {
                let d_a: Vec<E> = d_out
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&d, &x)| d * gelu_grad(x))
                    .collect();
                self.acc(a, &d_a);
            }

            Op::LayerNorm { a, gamma, beta, eps } => {
                let (r, c) = self.shape2(a);
                let x = self.nodes[a.0].value.data();
                let g = self.nodes[gamma.0].value.data();
                let inv_c = E::from_f64(1.0 / c as f64);
                let eps_e = E::from_f64(eps);
                let mut d_a = vec![E::ZERO; r * c];
                let mut d_g = vec![E::ZERO; c];
                let mut d_bt = vec![E::ZERO; c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let dor = &d_out[i * c..(i + 1) * c];
                    let mut mean = E::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_c;
                    let mut var = E::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_c;
                    let rstd = E::ONE / (var + eps_e).sqrt();
                    // xhat and the two row means the gradient needs.
                    let mut m1 = E::ZERO;
                    let mut m2 = E::ZERO;
                    let mut xhat = vec![E::ZERO; c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        let gd = g[j] * dor[j];
                        m1 += gd;
                        m2 += gd * xhat[j];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        d_g[j] += dor[j] * xhat[j];
                        d_bt[j] += dor[j];
                        d_a[i * c + j] = (g[j] * dor[j] - m1 - xhat[j] * m2) * rstd;
                    }
                }
                self.acc(a, &d_a);
                self.acc(gamma, &d_g);
                self.acc(beta, &d_bt);
            }

            Op::Softmax { a } => {
                let (r, c) = self.shape2(a);
                let y = self.nodes[out_idx].value.data();
                let mut d_a = vec![E::ZERO; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dor = &d_out[i * c..(i + 1) * c];
                    let mut dot = E::ZERO;
                    for (&yv, &dv) in yr.iter().zip(dor) {
                        dot += yv * dv;
                    }
                    for j in 0..c {
                        d_a[i * c + j] = yr[j] * (dor[j] - dot);
                    }
                }
                self.acc(a, &d_a);
            }

            Op::CausalSoftmax { a } => {
                let (r, c) = self.shape2(a);
                let y = self.nodes[out_idx].value.data();
                let mut d_a = vec![E::ZERO; r * c];
                for i in 0..r {
                    let yr = &y[i * c..i * c + i + 1];
                    let dor = &d_out[i * c..i * c + i + 1];
                    let mut dot = E::ZERO;
                    for (&yv, &dv) in yr.iter().zip(dor) {
                        dot += yv * dv;
                    }
                    for j in 0..=i {
                        d_a[i * c + j] = yr[j] * (dor[j] - dot);
                    }
                }
                self.acc(a, &d_a);
            }

            Op::StraightThrough { a } => {
                // Gradient as if the forward had been softmax(a).
                let (r, c) = self.shape2(a);
                let x = self.nodes[a.0].value.data();
                let mut d_a = vec![E::ZERO; r * c];
                for i in 0..r {
                    let mut p = x[i * c..(i + 1) * c].to_vec();
                    softmax_row_in_place(&mut p);
                    let dor = &d_out[i * c..(i + 1) * c];
                    let mut dot = E::ZERO;
                    for (&pv, &dv) in p.iter().zip(dor) {
                        dot += pv * dv;
                    }
                    for j in 0..c {
                        d_a[i * c + j] = p[j] * (dor[j] - dot);
                    }
                }
                self.acc(a, &d_a);
            }

            Op::EmbedLookup { table, ref indices } => {
                let (v, d) = self.shape2(table);
                let mut d_t = vec![E::ZERO; v * d];
                for (p, &ix) in indices.iter().enumerate() {
                    for (dst, &src) in d_t[ix * d..(ix + 1) * d]
                        .iter_mut()
                        .zip(&d_out[p * d..(p + 1) * d])
                    {
                        *dst += src;
                    }
                }
                self.acc(table, &d_t);
            }

            Op::GatherRows { a, ref indices } => {
                let (m, d) = self.shape2(a);
                let mut d_a = vec![E::ZERO; m * d];
                for (p, &ix) in indices.iter().enumerate() {
                    for (dst, &src) in d_a[ix * d..(ix + 1) * d]
                        .iter_mut()
                        .zip(&d_out[p * d..(p + 1) * d])
                    {
                        *dst += src;
                    }
                }
                self.acc(a, &d_a);
            }

            Op::MeanPoolRows { a, ref ranges } => {
                let (n, d) = self.shape2(a);
                let mut d_a = vec![E::ZERO; n * d];
                for (i, &(s, e)) in ranges.iter().enumerate() {
                    let inv = E::from_f64(1.0 / (e - s) as f64);
                    let dor = &d_out[i * d..(i + 1) * d];
                    for r in s..e {
                        for (dst, &src) in d_a[r * d..(r + 1) * d].iter_mut().zip(dor) {
                            *dst += src * inv;
                        }
                    }
                }
                self.acc(a, &d_a);
            }

            Op::SliceRows { a, start } => {
                let (r, c) = self.shape2(a);
                let rows = d_out.len() / c;
                let mut d_a = vec![E::ZERO; r * c];
                d_a[start * c..(start + rows) * c].copy_from_slice(&d_out);
                self.acc(a, &d_a);
            }

            Op::SliceCols { a, start, total_cols } => {
                let (r, _) = self.shape2(a);
                let w = d_out.len() / r;
                let mut d_a = vec![E::ZERO; r * total_cols];
                for i in 0..r {
                    d_a[i * total_cols + start..i * total_cols + start + w]
                        .copy_from_slice(&d_out[i * w..(i + 1) * w]);
                }
                self.acc(a, &d_a);
            }

            Op::ConcatRows { ref parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let slice = d_out[off..off + n].to_vec();
                    self.acc(p, &slice);
                    off += n;
                }
            }

            Op::ConcatCols { ref parts } => {
                let (r, total) = self.shape2(Var(out_idx));
                let mut off = 0;
                for &p in parts {
                    let (_, pc) = self.shape2(p);
                    let mut d_p = vec![E::ZERO; r * pc];
                    for i in 0..r {
                        d_p[i * pc..(i + 1) * pc]
                            .copy_from_slice(&d_out[i * total + off..i * total + off + pc]);
                    }
                    self.acc(p, &d_p);
                    off += pc;
                }
            }

            Op::CrossEntropySum { logits, ref targets } => {
                let (r, c) = self.shape2(logits);
                let x = self.nodes[logits.0].value.data();
                let upstream = d_out[0];
                let mut d_l = vec![E::ZERO; r * c];
                for (i, &tgt) in targets.iter().enumerate() {
                    if tgt == IGNORE_TARGET {
                        continue;
                    }
                    let mut p = x[i * c..(i + 1) * c].to_vec();
                    softmax_row_in_place(&mut p);
                    p[tgt] -= E::ONE;
                    for (dst, &pv) in d_l[i * c..(i + 1) * c].iter_mut().zip(&p) {
                        *dst = pv * upstream;
                    }
                }
                self.acc(logits, &d_l);
            }
        }
    }
}

/// Number of targets that participate in a cross-entropy reduction.
pub fn valid_target_count(targets: &[usize]) -> usize {
    targets.iter().filter(|&&t| t != IGNORE_TARGET).count()
}
