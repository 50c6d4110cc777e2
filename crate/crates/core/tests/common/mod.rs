//! Shared test oracles. Nothing here calls into the code paths under test
//! except to evaluate the loss being differentiated.
#![allow(dead_code)]

use duallab::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradients;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so components that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero by at least `gap`, for kinked ops.
pub fn random_away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.gen_range(gap..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares tape gradients against central finite differences for every
/// scalar of every input. Returns the maximum relative error.
pub fn max_fd_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        for j in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Finite-difference check of a loss over a parameter vector given as a
/// plain closure `f(theta) -> loss` against an analytic gradient.
pub fn max_fd_error_fn(theta: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut p = theta.to_vec();
    for j in 0..theta.len() {
        p[j] = theta[j] + FD_STEP;
        let up = f(&p);
        p[j] = theta[j] - FD_STEP;
        let down = f(&p);
        p[j] = theta[j];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[j], numeric));
    }
    worst
}

pub fn flatten_store(store: &duallab::tensor::ParamStore) -> Vec<f64> {
    store
        .values()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect()
}

pub fn set_store(store: &mut duallab::tensor::ParamStore, flat: &[f64]) {
    let mut off = 0;
    for t in store.values_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Finite-difference check of every parameter of `store` for the scalar
/// loss built by `f`.
pub fn max_fd_error_store<F>(store: &duallab::tensor::ParamStore, f: F) -> f64
where
    F: Fn(&mut Tape, &duallab::tensor::ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = grads
        .for_store(store)
        .into_iter()
        .zip(store.values())
        .flat_map(|(g, v)| match g {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; v.numel()],
        })
        .collect();
    let theta = flatten_store(store);
    let scratch = std::cell::RefCell::new(store.clone());
    max_fd_error_fn(&theta, &analytic, |p| {
        let mut s = scratch.borrow_mut();
        set_store(&mut s, p);
        let mut t = Tape::new();
        let l = f(&mut t, &s);
        t.value(l).item()
    })
}
