//! Power-iteration estimates of the largest singular value of a weight
//! viewed as a `(rows, cols)` matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest admissible singular-value estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SIGMA_FLOOR);
    v.iter_mut().for_each(|x| *x /= n);
}

/// `W^T u`, normalized.
pub fn right_vector(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        for (vj, wij) in v.iter_mut().zip(row) {
            *vj += u[i] * wij;
        }
    }
    normalize(&mut v);
    v
}

/// `W v`, normalized.
pub fn left_vector(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();
    normalize(&mut u);
    u
}

/// `u^T W v`.
pub fn bilinear(w: &[f64], cols: usize, u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .enumerate()
        .map(|(i, ui)| ui * w[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Advances the left singular-vector estimate `u` by `iters` power iterations.
pub fn power_iterate(w: &[f64], rows: usize, cols: usize, u: &mut Vec<f64>, iters: usize) {
    for _ in 0..iters {
        let v = right_vector(w, rows, cols, u);
        *u = left_vector(w, rows, cols, &v);
    }
}

/// Current estimate `(v, sigma)` from `u`, with `sigma` floored at [`SIGMA_FLOOR`].
pub fn sigma_from(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> (Vec<f64>, f64) {
    let v = right_vector(w, rows, cols, u);
    (v.clone(), bilinear(w, cols, u, &v).max(SIGMA_FLOOR))
}

/// Deterministic random unit start vector.
pub fn initial_u(rows: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut u);
    u
}

/// Fresh estimate of the top singular value after `iters` iterations.
pub fn estimate_sigma(w: &[f64], rows: usize, cols: usize, iters: usize) -> f64 {
    let mut u = initial_u(rows, 0x5eed);
    power_iterate(w, rows, cols, &mut u, iters);
    sigma_from(w, rows, cols, &u).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_three_one() {
        let w = [3.0, 0.0, 0.0, 1.0];
        let s = estimate_sigma(&w, 2, 2, 20);
        assert!((s - 3.0).abs() < 0.03);
        let normalized: Vec<f64> = w.iter().map(|x| x / s).collect();
        assert!((estimate_sigma(&normalized, 2, 2, 20) - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_weight_hits_floor() {
        assert_eq!(estimate_sigma(&[0.0; 6], 2, 3, 5), SIGMA_FLOOR);
    }
}
