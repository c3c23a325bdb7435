//! Shared generators and finite-difference helpers for the integration
//! suites.  Everything is seeded; no test below draws from entropy.

use marginfit::{Coding, CountVector, MllpSpec, TableSchema, VarSet};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Table over 2 or 3 variables, each with 2 or 3 levels.
pub fn random_schema(rng: &mut ChaCha8Rng) -> TableSchema {
    let d = if rng.random::<bool>() { 2 } else { 3 };
    let dims: Vec<usize> = (0..d).map(|_| rng.random_range(2..=3)).collect();
    TableSchema::new(&dims).unwrap()
}

/// Random complete hierarchical spec: a random family of margins that
/// always includes the full set, ordered by cardinality with a shuffled
/// order inside each size class.  First-containing-margin assignment then
/// covers every effect, so the spec is complete and hierarchical by
/// construction.
pub fn random_hierarchical_spec(d: usize, rng: &mut ChaCha8Rng) -> MllpSpec {
    let mut keyed: Vec<(usize, u32, VarSet)> = Vec::new();
    for s in VarSet::full(d).nonempty_subsets() {
        if s.cardinality() == d || rng.random::<bool>() {
            keyed.push((s.cardinality(), rng.random::<u32>(), s));
        }
    }
    keyed.sort_by_key(|(card, tie, _)| (*card, *tie));
    MllpSpec::hierarchical(keyed.into_iter().map(|(_, _, s)| s).collect(), Coding::Baseline)
}

pub fn random_interior_theta(p: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0))
}

/// Strictly positive integer counts.
pub fn random_counts(t: usize, rng: &mut ChaCha8Rng) -> CountVector {
    CountVector::new(DVector::from_fn(t, |_, _| {
        rng.random_range(1..=60) as f64
    }))
    .unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Symmetric positive definite with a bounded condition number.
pub fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = random_matrix(n, n, rng);
    a.transpose() * a + DMatrix::identity(n, n) * 0.3
}

/// Independence MLE for a two-way table in last-variable-fastest order:
/// the product of the empirical margins (the IPF limit for this model).
pub fn independence_pi(counts: &CountVector, rows: usize, cols: usize) -> DVector<f64> {
    let y = counts.values();
    let n = counts.total();
    let mut row = vec![0.0; rows];
    let mut col = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            row[i] += y[i * cols + j];
            col[j] += y[i * cols + j];
        }
    }
    DVector::from_fn(rows * cols, |k, _| {
        (row[k / cols] / n) * (col[k % cols] / n)
    })
}

pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let mut up = x.clone();
        up[j] += h;
        let mut dn = x.clone();
        dn[j] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let probe = f(x);
    let mut jac = DMatrix::zeros(probe.len(), x.len());
    for j in 0..x.len() {
        let mut up = x.clone();
        up[j] += h;
        let mut dn = x.clone();
        dn[j] -= h;
        let col = (f(&up) - f(&dn)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Frobenius distance relative to the reference, floored so that
/// near-zero references compare absolutely.
pub fn rel_frobenius(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1.0)
}

pub fn rel_norm(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1.0)
}
