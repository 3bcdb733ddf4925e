//! Shared helpers for integration tests: random tensors and the central
//! finite-difference gradient oracle.

// each test binary uses its own subset of these helpers
#![allow(dead_code)]

use edgeear_core::tensor::{GradTape, Var};
use edgeear_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Uniform random tensor in [-1, 1).
pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct a scalar loss from the given leaf variables; it is
/// re-invoked on a fresh tape for every perturbed evaluation, so it has to be
/// deterministic. Each element of each input is perturbed by ±h. An element
/// passes when |analytic - numeric| <= atol + tol * max(|analytic|, |numeric|).
pub fn finite_diff_check(
    inputs: &[Tensor],
    build: &dyn Fn(&mut GradTape, &[Var]) -> Var,
    tol: f64,
) -> FdReport {
    let h = 1e-5;
    let atol = 1e-9;

    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward failed");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = GradTape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x)).collect();
        let l = build(&mut t, &vs);
        t.value(l).item().expect("loss must be scalar")
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let lp = eval(&plus);
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let lm = eval(&minus);
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i][e];
            let denom = a.abs().max(numeric.abs()).max(atol / tol);
            let rel = (a - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
            checked += 1;
            assert!(
                (a - numeric).abs() <= atol + tol * a.abs().max(numeric.abs()),
                "gradient mismatch: input {} element {}: analytic {} vs numeric {} (rel {})",
                i,
                e,
                a,
                numeric,
                rel
            );
        }
    }
    FdReport {
        max_rel_err: max_rel,
        checked,
    }
}

/// Seeded RNG for reproducible fixtures.
pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
