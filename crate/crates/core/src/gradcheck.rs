//! Central finite-difference gradient checking.
//!
//! Used by the verification suites; runs with whatever scalar type you
//! instantiate (f64 is the intended precision for checks).

use crate::error::Result;
use crate::graph::{ComputeGraph, Var};
use crate::tensor::Tensor;

/// Compares analytic gradients of a scalar-valued graph function against
/// central finite differences. `build` must construct the loss from the
/// given leaves every time it is called (the graph is rebuilt per probe).
///
/// Returns the maximum relative error over every element of every input.
/// The relative denominator is floored at `denom_floor` so near-zero
/// gradients do not blow the ratio up on roundoff noise.
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], build: F, h: f64, denom_floor: f64) -> Result<f64>
where
    F: Fn(&mut ComputeGraph<f64>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut g = ComputeGraph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(&t)
        })
        .collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_default()).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = ComputeGraph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[ti].data_mut()[ei] += h;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[ti].data_mut()[ei] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let an = analytic[ti].get(ei).copied().unwrap_or(0.0);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(denom_floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Convenience wrapper: asserts the max relative error is within `tol`.
pub fn assert_gradients<F>(inputs: &[Tensor<f64>], build: F, tol: f64)
where
    F: Fn(&mut ComputeGraph<f64>, &[Var]) -> Result<Var>,
{
    let err = max_rel_error(inputs, build, 1e-5, 1e-3).expect("gradient check failed to evaluate");
    assert!(err <= tol, "gradient relative error {} exceeds {}", err, tol);
}
