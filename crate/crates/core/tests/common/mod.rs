//! Finite-difference gradient checking and random instance helpers.

#![allow(dead_code)]

use loopvox::nn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values whose magnitude is at least `gap`, so a relu never sees a kink
/// within one finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values spaced by at least 0.05, in random order, so every max-pool
/// window has a clear winner.
pub fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    v
}

pub fn unit_rows(v: &mut [f64], d: usize) {
    for r in v.chunks_mut(d) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors; zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares an analytic gradient with central differences of `f` at `x`.
pub fn check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    rel_error(analytic, &numeric_grad(f, x))
}
