//! Shared helpers: a central-difference gradient oracle, random tensors and
//! small fixtures.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seg_forge_core::tensor::{Tape, Tensor, Var};

pub mod clahe_oracle;
pub mod grad_cases;
pub mod metric_oracle;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

pub fn random_coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, with a small floor so
/// that two vanishing gradients compare as equal.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(a.iter().copied()).max(norm(b.iter().copied())).max(1e-7);
    diff / scale
}

/// Compares tape gradients of `f` with central differences for every input.
/// `f` records a scalar loss from leaves holding `inputs` (in order).
/// Returns the worst relative error over all inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut vals = inputs.to_vec();
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&vals);
            vals[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&vals);
            vals[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}
