use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh tape plus one gradient leaf per entry of
/// `inputs` (same order) and must return a scalar loss node. The whole graph
/// is rebuilt for every perturbed coordinate, so any internal randomness has
/// to be re-seeded inside `build` to keep the function deterministic.
///
/// Returns the maximum over all coordinates of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F, B>(build: B, inputs: &[Tensor<F>], eps: f64) -> Result<f64>
where
    F: Real,
    B: Fn(&mut Tape<F>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::contract(format!("finite-difference eps {eps} outside [1e-7, 1e-4]")));
    }

    let eval = |tensors: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::contract("gradient check needs a scalar loss"));
        }
        Ok(tape.data(loss)[0].as_f64())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for (ci, &a) in analytic[pi].iter().enumerate().take(input.numel()) {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + F::of(eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - F::of(eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
