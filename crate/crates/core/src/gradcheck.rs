//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward graph from scratch for every probe, so it
//! exercises the same code path training uses rather than a simplified copy.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Relative error with the denominator clamped so near-zero pairs do not
/// blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-5);
    (a - b).abs() / denom
}

fn eval_scalar(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss))
}

fn analytic_grads(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss);
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

fn central_diff(
    inputs: &[Tensor<f64>],
    input_idx: usize,
    elem_idx: usize,
    step: f64,
    build: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut plus = inputs.to_vec();
    plus[input_idx].data_mut()[elem_idx] += step;
    let f_plus = eval_scalar(&plus, build)?;
    let mut minus = inputs.to_vec();
    minus[input_idx].data_mut()[elem_idx] -= step;
    let f_minus = eval_scalar(&minus, build)?;
    Ok((f_plus - f_minus) / (2.0 * step))
}

/// Compare analytic gradients against central differences for every element
/// of every input. Inputs are treated as differentiable regardless of their
/// `requires_grad` flag. Returns the maximum relative error observed.
pub fn check_grads(
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let inputs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let grads = analytic_grads(&inputs, &build)?;
    let mut max_rel = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let fd = central_diff(&inputs, i, e, step, &build)?;
            max_rel = max_rel.max(rel_err(g[e], fd));
        }
    }
    Ok(max_rel)
}

/// Like `check_grads` but probes only `n_coords` uniformly sampled
/// coordinates across all inputs. Intended for large parameter sets where
/// exhaustive probing is too slow.
pub fn check_grads_sampled<R: Rng>(
    inputs: &[Tensor<f64>],
    step: f64,
    n_coords: usize,
    rng: &mut R,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let inputs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let grads = analytic_grads(&inputs, &build)?;
    let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let mut flat = rng.random_range(0..total);
        let mut input_idx = 0;
        while flat >= sizes[input_idx] {
            flat -= sizes[input_idx];
            input_idx += 1;
        }
        let fd = central_diff(&inputs, input_idx, flat, step, &build)?;
        max_rel = max_rel.max(rel_err(grads[input_idx][flat], fd));
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = sum(x * x); d/dx = 2x.
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let max_rel = check_grads(&[x], 1e-5, |tape, vars| {
            let v = vars[0];
            let sq = tape.mul(v, v)?;
            let pooled = tape.mean_pool_rows(sq, &[(0, 1)])?;
            let ones = tape.constant(Tensor::from_vec(&[3, 1], vec![1.0; 3]).unwrap());
            tape.matmul(pooled, ones)
        })
        .unwrap();
        assert!(max_rel < 1e-8, "max rel err {max_rel}");
    }

    #[test]
    fn sampled_checker_covers_multiple_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let max_rel = check_grads_sampled(&[a, b], 1e-5, 12, &mut rng, |tape, vars| {
            let mm = tape.matmul(vars[0], vars[1])?;
            tape.cross_entropy_mean(mm, &[0, 1])
        })
        .unwrap();
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale's backward is correct, so a deliberately mismatched forward
        // (scale by 3 in analytic path vs 2 in FD path) must be caught.
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let calls = std::cell::Cell::new(0usize);
        let max_rel = check_grads(&[x], 1e-5, |tape, vars| {
            let n = calls.get();
            calls.set(n + 1);
            let factor = if n == 0 { 3.0 } else { 2.0 };
            let s = tape.scale(vars[0], factor);
            let pooled = tape.mean_pool_rows(s, &[(0, 1)])?;
            let ones = tape.constant(Tensor::from_vec(&[2, 1], vec![1.0; 2]).unwrap());
            tape.matmul(pooled, ones)
        })
        .unwrap();
        assert!(max_rel > 1e-2, "checker failed to flag mismatch: {max_rel}");
    }
}
