//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use hamsi::harness::{load_ratings, Delimiter, IdOrder, RatingsFile};
use hamsi::model::{objective, Entry, FactorModel, ParamLayout, SparseObservations};
use hamsi::partition::Cover;
use rand::Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `H g` by the standard two-loop recursion with `H0 = (sᵀy / yᵀy) I` from
/// the newest pair. `pairs` are oldest first.
pub fn two_loop(pairs: &[(Vec<f64>, Vec<f64>)], g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; pairs.len()];
    for (i, (s, y)) in pairs.iter().enumerate().rev() {
        let rho = 1.0 / dot(y, s);
        alpha[i] = rho * dot(s, &q);
        for (qj, yj) in q.iter_mut().zip(y) {
            *qj -= alpha[i] * yj;
        }
    }
    let (s, y) = pairs.last().expect("at least one pair");
    let gamma = dot(s, y) / dot(y, y);
    let mut r: Vec<f64> = q.iter().map(|v| gamma * v).collect();
    for (i, (s, y)) in pairs.iter().enumerate() {
        let rho = 1.0 / dot(y, s);
        let b = rho * dot(y, &r);
        for (rj, sj) in r.iter_mut().zip(s) {
            *rj += (alpha[i] - b) * sj;
        }
    }
    r
}

/// Dense inverse-Hessian by applying the two-loop recursion to unit
/// vectors; row-major.
pub fn two_loop_dense(pairs: &[(Vec<f64>, Vec<f64>)], dim: usize) -> Vec<f64> {
    let mut h = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let col = two_loop(pairs, &e);
        for i in 0..dim {
            h[i * dim + j] = col[i];
        }
    }
    h
}

/// Random pair with `sᵀy > 0`: `y` is `s` under a random positive diagonal
/// scaling plus small noise.
pub fn random_pair<R: Rng>(rng: &mut R, dim: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = s
            .iter()
            .map(|v| v * rng.random_range(0.5..3.0) + rng.random_range(-0.1..0.1))
            .collect();
        if dot(&s, &y) > 1e-3 {
            return (s, y);
        }
    }
}

/// Central-difference gradient of the objective restricted to `entries`.
pub fn finite_difference_gradient(model: &FactorModel, entries: &[Entry], h: f64) -> Vec<f64> {
    let layout = model.layout();
    let base = model.params().to_vec();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = objective(&FactorModel::from_params(layout, plus).unwrap(), entries);
            let fm = objective(&FactorModel::from_params(layout, minus).unwrap(), entries);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Simulated unit-cost parallel schedule: within each subset, block `b` goes
/// to worker `b mod threads` (singleton blocks are dealt round-robin). The
/// subset costs its busiest worker's load.
pub fn simulate_par_work(cover: &Cover, threads: usize) -> usize {
    cover
        .subsets()
        .iter()
        .map(|s| {
            let mut load = vec![0usize; threads];
            if cover.scheme().is_stratified() {
                for (b, size) in s.block_sizes().into_iter().enumerate() {
                    load[b % threads] += size;
                }
            } else {
                for i in 0..s.len() {
                    load[i % threads] += 1;
                }
            }
            load.into_iter().max().unwrap_or(0)
        })
        .sum()
}

/// Fully observed `m × n` matrix `A B` with entries of `A` (`m × r`) and
/// `B` (`r × n`) uniform in `[-1, 1)`.
pub fn synthetic_low_rank<R: Rng>(rng: &mut R, m: usize, n: usize, r: usize) -> SparseObservations {
    let a: Vec<f64> = (0..m * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..r * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let truth = FactorModel::from_factors(ParamLayout::new(m, n, r), &a, &b).unwrap();
    let entries = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| Entry::new(i, j, truth.predict(i, j)))
        .collect();
    SparseObservations::new(m, n, entries).unwrap()
}

/// Random sparse observation set with every cell present with
/// probability `density`; at least one entry.
pub fn random_sparse<R: Rng>(rng: &mut R, m: usize, n: usize, density: f64) -> SparseObservations {
    let mut entries = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if rng.random_bool(density) {
                entries.push(Entry::new(i, j, rng.random_range(1.0..5.0)));
            }
        }
    }
    if entries.is_empty() {
        entries.push(Entry::new(rng.random_range(0..m), rng.random_range(0..n), 3.0));
    }
    SparseObservations::new(m, n, entries).unwrap()
}

/// Location of MovieLens 100K `u.data`: `$HAMSI_ML100K` or
/// `<workspace>/data/ml-100k/u.data`.
pub fn ml100k_path() -> Option<PathBuf> {
    let path = std::env::var_os("HAMSI_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data"));
    path.exists().then_some(path)
}

pub fn load_ml100k(order: IdOrder) -> Option<SparseObservations> {
    let path = ml100k_path()?;
    let loaded = load_ratings(&RatingsFile::new(path, Delimiter::Tab), order).expect("u.data parses");
    Some(loaded.obs)
}
