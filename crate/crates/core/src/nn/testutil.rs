//! Finite-difference helpers shared by unit tests.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Compares tape gradients of a scalar built by `build` against central
/// differences, for every `stride`-th element of every input.
pub(crate) fn grad_check(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    stride: usize,
    rel_tol: f64,
) {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let out = build(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.param(v.clone())).collect();
    let out = build(&mut t, &vars);
    let grads = t.backward(out);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for idx in (0..input.len()).step_by(stride.max(1)) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / scale < rel_tol,
                "input {i}[{idx}]: analytic {a}, numeric {numeric}"
            );
        }
    }
}

/// Deterministic pseudo-random tensor in [-1, 1).
pub(crate) fn wavy(shape: &[usize], seed: usize) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|i| ((i * 31 + seed * 17) as f64 * 0.377).sin()).collect())
}
