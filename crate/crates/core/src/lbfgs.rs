//! Compact limited-memory BFGS inverse-Hessian approximation.
//!
//! With correction pairs `S = [s_1 … s_m]`, `Y = [y_1 … y_m]` (oldest first),
//! `σ = sᵀy / yᵀy` for the newest pair and `W = [S, σY]`, the inverse
//! Hessian estimate is `σI + W N Wᵀ` where
//!
//! ```text
//! N = | R⁻ᵀ (D + σ C) R⁻¹   −R⁻ᵀ |      R = triu(SᵀY), C = YᵀY, D = diag(R)
//!     | −R⁻¹                  0  |
//! ```
//!
//! Pairs are stored in slots written round-robin, so the physical slot
//! order differs from the chronological order once the memory wraps.
//! `SᵀY` and `YᵀY` are cached per slot; an accepted pair only refreshes the
//! row and column of its own slot, and `N` is rebuilt from the cache.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{dot, REDUCE_CHUNK};

#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    dim: usize,
    capacity: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    cursor: usize,
    filled: usize,
    sigma: f64,
    min_cosine: f64,
    // slot-indexed caches, capacity × capacity row-major: sty[i][j] = s_iᵀ y_j
    sty: Vec<f64>,
    yty: Vec<f64>,
    // chronological factors for the `filled` stored pairs
    order: Vec<usize>,
    r: Vec<f64>,
    r_inv: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    n: Vec<f64>,
}

impl LbfgsMemory {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory size must be at least 1"));
        }
        Ok(Self {
            dim,
            capacity,
            s: vec![Vec::new(); capacity],
            y: vec![Vec::new(); capacity],
            cursor: 0,
            filled: 0,
            sigma: 1.0,
            min_cosine: 0.0,
            sty: vec![0.0; capacity * capacity],
            yty: vec![0.0; capacity * capacity],
            order: Vec::new(),
            r: Vec::new(),
            r_inv: Vec::new(),
            c: Vec::new(),
            d: Vec::new(),
            n: Vec::new(),
        })
    }

    /// Accept a pair only when `sᵀy > c·‖s‖·‖y‖`. The default `c = 0` is
    /// the plain `sᵀy > 0` guard.
    pub fn with_min_cosine(mut self, c: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&c) {
            return Err(Error::invalid(format!(
                "curvature cosine threshold must lie in [0, 1), got {c}"
            )));
        }
        self.min_cosine = c;
        Ok(self)
    }

    pub fn min_cosine(&self) -> f64 {
        self.min_cosine
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    /// Next slot to be overwritten.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Stored pair in physical slot `slot`, if any.
    pub fn slot(&self, slot: usize) -> Option<(&[f64], &[f64])> {
        if self.s[slot].is_empty() {
            None
        } else {
            Some((&self.s[slot], &self.y[slot]))
        }
    }

    /// Physical slots from oldest to newest pair.
    pub fn chronological_slots(&self) -> &[usize] {
        &self.order
    }

    /// `triu(SᵀY)` in chronological order, `filled × filled` row-major.
    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// `YᵀY` in chronological order.
    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// Diagonal of `R`.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Middle matrix, `2·filled × 2·filled` row-major.
    pub fn n(&self) -> &[f64] {
        &self.n
    }

    /// `SᵀY` entry between physical slots (`s_iᵀ y_j`).
    pub fn sty_slot(&self, i: usize, j: usize) -> f64 {
        self.sty[i * self.capacity + j]
    }

    /// `YᵀY` entry between physical slots.
    pub fn yty_slot(&self, i: usize, j: usize) -> f64 {
        self.yty[i * self.capacity + j]
    }

    /// Offers a correction pair. Returns `Ok(false)` and leaves the memory
    /// untouched when `sᵀy ≤ 0`.
    pub fn update_memory(&mut self, s: &[f64], y: &[f64]) -> Result<bool> {
        if s.len() != self.dim || y.len() != self.dim {
            return Err(Error::invalid(format!(
                "correction pair length {}/{} does not match dimension {}",
                s.len(),
                y.len(),
                self.dim
            )));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("correction vector s"));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("correction vector y"));
        }
        let sy = par_dot(s, y);
        let yy = par_dot(y, y);
        if !sy.is_finite() || !yy.is_finite() {
            return Err(Error::NonFinite("curvature products of the correction pair"));
        }
        if sy <= 0.0 || yy <= 0.0 {
            return Ok(false);
        }
        if self.min_cosine > 0.0 && sy <= self.min_cosine * (par_dot(s, s) * yy).sqrt() {
            return Ok(false);
        }

        let slot = self.cursor;
        self.s[slot].clear();
        self.s[slot].extend_from_slice(s);
        self.y[slot].clear();
        self.y[slot].extend_from_slice(y);
        self.filled = (self.filled + 1).min(self.capacity);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.sigma = sy / yy;

        let m = self.capacity;
        let stored: Vec<usize> = (0..m).filter(|&j| !self.s[j].is_empty()).collect();
        for &j in &stored {
            let (s_new_y_j, s_j_y_new, y_new_y_j) = if j == slot {
                (sy, sy, yy)
            } else {
                (
                    par_dot(&self.s[slot], &self.y[j]),
                    par_dot(&self.s[j], &self.y[slot]),
                    par_dot(&self.y[slot], &self.y[j]),
                )
            };
            self.sty[slot * m + j] = s_new_y_j;
            self.sty[j * m + slot] = s_j_y_new;
            self.yty[slot * m + j] = y_new_y_j;
            self.yty[j * m + slot] = y_new_y_j;
        }
        self.rebuild()?;
        Ok(true)
    }

    fn rebuild(&mut self) -> Result<()> {
        let cap = self.capacity;
        self.order = if self.filled < cap {
            (0..self.filled).collect()
        } else {
            (0..cap).map(|i| (self.cursor + i) % cap).collect()
        };
        let m = self.order.len();
        self.r = vec![0.0; m * m];
        self.c = vec![0.0; m * m];
        for (i, &oi) in self.order.iter().enumerate() {
            for (j, &oj) in self.order.iter().enumerate() {
                if i <= j {
                    self.r[i * m + j] = self.sty[oi * cap + oj];
                }
                self.c[i * m + j] = self.yty[oi * cap + oj];
            }
        }
        self.d = (0..m).map(|i| self.r[i * m + i]).collect();
        self.r_inv = upper_triangular_inverse(&self.r, m)?;

        // N11 = R⁻ᵀ (D + σC) R⁻¹
        let sigma = self.sigma;
        let mut inner = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                inner[i * m + j] = sigma * self.c[i * m + j] + if i == j { self.d[i] } else { 0.0 };
            }
        }
        let ri = &self.r_inv;
        // tmp = inner · R⁻¹
        let mut tmp = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                tmp[i * m + j] = (0..=j).map(|k| inner[i * m + k] * ri[k * m + j]).sum();
            }
        }
        let w = 2 * m;
        let mut n = vec![0.0; w * w];
        for i in 0..m {
            for j in 0..m {
                // (R⁻ᵀ)[i][k] = R⁻¹[k][i], nonzero for k ≤ i
                n[i * w + j] = (0..=i).map(|k| ri[k * m + i] * tmp[k * m + j]).sum();
                n[i * w + m + j] = -ri[j * m + i];
                n[(m + i) * w + j] = -ri[i * m + j];
            }
        }
        self.n = n;
        Ok(())
    }

    /// `out = σg + W N Wᵀ g`, evaluated right to left. Requires at least one
    /// stored pair.
    pub fn inverse_hessian_product(&self, g: &[f64], out: &mut [f64]) -> Result<()> {
        if self.filled == 0 {
            return Err(Error::invalid("no correction pairs stored"));
        }
        self.check_factor()?;
        assert_eq!(g.len(), self.dim);
        assert_eq!(out.len(), self.dim);
        let v = self.middle_times(&self.wt_times(g));
        let m = self.order.len();
        let sigma = self.sigma;
        let s_cols: Vec<&[f64]> = self.order.iter().map(|&o| self.s[o].as_slice()).collect();
        let y_cols: Vec<&[f64]> = self.order.iter().map(|&o| self.y[o].as_slice()).collect();
        out.par_chunks_mut(REDUCE_CHUNK)
            .zip(g.par_chunks(REDUCE_CHUNK))
            .enumerate()
            .for_each(|(chunk, (out, g))| {
                let base = chunk * REDUCE_CHUNK;
                for (o, gv) in out.iter_mut().zip(g) {
                    *o = sigma * gv;
                }
                for i in 0..m {
                    let (a, b) = (v[i], sigma * v[m + i]);
                    let s = &s_cols[i][base..base + out.len()];
                    let y = &y_cols[i][base..base + out.len()];
                    for ((o, sv), yv) in out.iter_mut().zip(s).zip(y) {
                        *o += a * sv + b * yv;
                    }
                }
            });
        Ok(())
    }

    /// Step `(1/β)(σg + W N Wᵀ g)` once the memory is full, `(1/β) g`
    /// before that.
    pub fn apply_direction(&self, g: &[f64], beta: f64, out: &mut [f64]) -> Result<()> {
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        let inv = 1.0 / beta;
        if !self.is_full() {
            out.par_chunks_mut(REDUCE_CHUNK)
                .zip(g.par_chunks(REDUCE_CHUNK))
                .for_each(|(o, g)| {
                    for (o, gv) in o.iter_mut().zip(g) {
                        *o = inv * gv;
                    }
                });
            return Ok(());
        }
        self.inverse_hessian_product(g, out)?;
        out.par_chunks_mut(REDUCE_CHUNK).for_each(|o| {
            for v in o {
                *v *= inv;
            }
        });
        Ok(())
    }

    /// Allocating form of [`LbfgsMemory::apply_direction`].
    pub fn direction(&self, g: &[f64], beta: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; g.len()];
        self.apply_direction(g, beta, &mut out)?;
        Ok(out)
    }

    /// Step restricted to the coordinates in `ranges`:
    /// `(1/β)(σ g_α + W_α N W_αᵀ g_α)`, or `(1/β) g_α` before the memory is
    /// full. The result is laid out as the concatenation of the ranges.
    /// Runs serially; callers parallelize over blocks.
    pub fn restricted_direction(&self, g: &[f64], beta: f64, ranges: &[Range<usize>]) -> Result<Vec<f64>> {
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        let inv = 1.0 / beta;
        let len: usize = ranges.iter().map(|r| r.len()).sum();
        let mut out = Vec::with_capacity(len);
        if !self.is_full() {
            for r in ranges {
                out.extend(g[r.clone()].iter().map(|v| inv * v));
            }
            return Ok(out);
        }
        self.check_factor()?;
        let m = self.order.len();
        let sigma = self.sigma;
        let mut u = vec![0.0; 2 * m];
        for (i, &o) in self.order.iter().enumerate() {
            for r in ranges {
                u[i] += dot(&self.s[o][r.clone()], &g[r.clone()]);
                u[m + i] += sigma * dot(&self.y[o][r.clone()], &g[r.clone()]);
            }
        }
        let v = self.middle_times(&u);
        for r in ranges {
            for j in r.clone() {
                let mut acc = sigma * g[j];
                for (i, &o) in self.order.iter().enumerate() {
                    acc += v[i] * self.s[o][j] + sigma * v[m + i] * self.y[o][j];
                }
                out.push(inv * acc);
            }
        }
        Ok(out)
    }

    fn check_factor(&self) -> Result<()> {
        match self.d.iter().position(|&d| d.is_nan() || d <= 0.0) {
            Some(i) => Err(Error::SingularFactor(i)),
            None => Ok(()),
        }
    }

    /// `Wᵀg` with a fixed-chunk reduction.
    fn wt_times(&self, g: &[f64]) -> Vec<f64> {
        let m = self.order.len();
        let sigma = self.sigma;
        let partials: Vec<Vec<f64>> = g
            .par_chunks(REDUCE_CHUNK)
            .enumerate()
            .map(|(chunk, g)| {
                let r = chunk * REDUCE_CHUNK..chunk * REDUCE_CHUNK + g.len();
                let mut u = vec![0.0; 2 * m];
                for (i, &o) in self.order.iter().enumerate() {
                    u[i] = dot(&self.s[o][r.clone()], g);
                    u[m + i] = dot(&self.y[o][r.clone()], g);
                }
                u
            })
            .collect();
        let mut u = vec![0.0; 2 * m];
        for p in partials {
            for (a, b) in u.iter_mut().zip(p) {
                *a += b;
            }
        }
        for v in &mut u[m..] {
            *v *= sigma;
        }
        u
    }

    fn middle_times(&self, u: &[f64]) -> Vec<f64> {
        let w = u.len();
        (0..w).map(|i| dot(&self.n[i * w..(i + 1) * w], u)).collect()
    }
}

/// Inverse of an upper-triangular `m × m` matrix by back substitution on
/// the identity columns.
fn upper_triangular_inverse(r: &[f64], m: usize) -> Result<Vec<f64>> {
    if let Some(i) = (0..m).find(|&i| r[i * m + i] == 0.0 || !r[i * m + i].is_finite()) {
        return Err(Error::SingularFactor(i));
    }
    let mut inv = vec![0.0; m * m];
    for col in 0..m {
        for i in (0..=col).rev() {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let acc: f64 = (i + 1..=col).map(|k| r[i * m + k] * inv[k * m + col]).sum();
            inv[i * m + col] = (rhs - acc) / r[i * m + i];
        }
    }
    Ok(inv)
}

fn par_dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(a, b)| dot(a, b))
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Minimizer `x̂ − (H + βI)⁻¹ g` of the damped quadratic model
/// `(z−x̂)ᵀg + ½(z−x̂)ᵀH(z−x̂) + ½β‖z−x̂‖²`. Dense; for small test
/// instances. `h` is `n × n` row-major.
pub fn quadratic_min_oracle(x_hat: &[f64], g: &[f64], h: &[f64], beta: f64) -> Result<Vec<f64>> {
    let n = x_hat.len();
    if g.len() != n || h.len() != n * n {
        return Err(Error::invalid("dimension mismatch in quadratic model"));
    }
    let a = DMatrix::from_row_slice(n, n, h) + DMatrix::identity(n, n) * beta;
    let chol = a.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let d = chol.solve(&DVector::from_column_slice(g));
    Ok(x_hat.iter().zip(d.iter()).map(|(x, d)| x - d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
        // y = A s with A SPD keeps sᵀy > 0
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = s
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + i as f64 * 0.3) + 0.05 * rng.random_range(-1.0..1.0) * v.abs())
            .collect();
        (s, y)
    }

    fn dense_compact(mem: &LbfgsMemory) -> DMatrix<f64> {
        let n = mem.dim();
        let m = mem.filled();
        let mut w = DMatrix::zeros(n, 2 * m);
        for (i, &o) in mem.chronological_slots().iter().enumerate() {
            let (s, y) = mem.slot(o).unwrap();
            for j in 0..n {
                w[(j, i)] = s[j];
                w[(j, m + i)] = mem.sigma() * y[j];
            }
        }
        let nm = DMatrix::from_row_slice(2 * m, 2 * m, mem.n());
        DMatrix::identity(n, n) * mem.sigma() + &w * nm * w.transpose()
    }

    #[test]
    fn unit_pair_gives_unit_sigma() {
        let mut mem = LbfgsMemory::new(3, 2).unwrap();
        assert!(mem.update_memory(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap());
        assert_eq!(mem.sigma(), 1.0);
        assert_eq!(mem.filled(), 1);
    }

    #[test]
    fn negative_curvature_is_rejected_without_side_effects() {
        let mut mem = LbfgsMemory::new(2, 2).unwrap();
        mem.update_memory(&[1.0, 1.0], &[2.0, 1.0]).unwrap();
        let before = format!("{mem:?}");
        // sᵀy = -0.5
        assert!(!mem.update_memory(&[1.0, 0.0], &[-0.5, 3.0]).unwrap());
        assert!(!mem.update_memory(&[0.0, 0.0], &[1.0, 3.0]).unwrap());
        assert_eq!(format!("{mem:?}"), before);
    }

    #[test]
    fn non_finite_pairs_are_errors() {
        let mut mem = LbfgsMemory::new(2, 2).unwrap();
        assert!(matches!(
            mem.update_memory(&[f64::NAN, 0.0], &[1.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            mem.update_memory(&[1.0, 0.0], &[f64::INFINITY, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(mem.update_memory(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn round_robin_overwrites_oldest_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mem = LbfgsMemory::new(5, 3).unwrap();
        let pairs: Vec<_> = (0..4).map(|_| random_pair(&mut rng, 5)).collect();
        for (s, y) in &pairs {
            assert!(mem.update_memory(s, y).unwrap());
        }
        let (s0, y0) = mem.slot(0).unwrap();
        assert_eq!(s0, pairs[3].0.as_slice());
        assert_eq!(y0, pairs[3].1.as_slice());
        assert_eq!(mem.cursor(), 1);
        assert_eq!(mem.chronological_slots(), &[1, 2, 0]);

        // oracle: R = triu(SᵀY), C = YᵀY over the last three pairs, recomputed
        let last = &pairs[1..];
        let m = 3;
        for i in 0..m {
            for j in 0..m {
                let sty = dot(&last[i].0, &last[j].1);
                let yty = dot(&last[i].1, &last[j].1);
                let expected_r = if i <= j { sty } else { 0.0 };
                assert_abs_diff_eq!(mem.r()[i * m + j], expected_r, epsilon = 1e-14);
                assert_abs_diff_eq!(mem.c()[i * m + j], yty, epsilon = 1e-14);
            }
        }
        // slot 0 row/column of the slot cache reflects the newest pair
        for j in 0..3 {
            let (sj, yj) = mem.slot(j).unwrap();
            assert_abs_diff_eq!(mem.sty_slot(0, j), dot(&pairs[3].0, yj), epsilon = 1e-14);
            assert_abs_diff_eq!(mem.sty_slot(j, 0), dot(sj, &pairs[3].1), epsilon = 1e-14);
        }
        assert_eq!(mem.d(), &[mem.r()[0], mem.r()[4], mem.r()[8]]);
    }

    #[test]
    fn empty_memory_falls_back_to_scaled_gradient() {
        let mem = LbfgsMemory::new(3, 2).unwrap();
        let g = [2.0, -4.0, 1.0];
        assert_eq!(mem.direction(&g, 2.0).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(mem.direction(&g, 0.0).is_err());
    }

    #[test]
    fn partial_memory_still_uses_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mem = LbfgsMemory::new(4, 3).unwrap();
        let (s, y) = random_pair(&mut rng, 4);
        mem.update_memory(&s, &y).unwrap();
        let g = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mem.direction(&g, 4.0).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn full_memory_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mem = LbfgsMemory::new(6, 2).unwrap();
        for _ in 0..2 {
            let (s, y) = random_pair(&mut rng, 6);
            mem.update_memory(&s, &y).unwrap();
        }
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = 1.7;
        let dense = dense_compact(&mem) * DVector::from_column_slice(&g) / beta;
        let step = mem.direction(&g, beta).unwrap();
        for (a, b) in step.iter().zip(dense.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn compact_form_satisfies_secant_equation() {
        // H y_newest = s_newest holds for the BFGS inverse update
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mem = LbfgsMemory::new(7, 3).unwrap();
        let mut last = None;
        for _ in 0..5 {
            let (s, y) = random_pair(&mut rng, 7);
            mem.update_memory(&s, &y).unwrap();
            last = Some((s, y));
        }
        let (s, y) = last.unwrap();
        let mut hy = vec![0.0; 7];
        mem.inverse_hessian_product(&y, &mut hy).unwrap();
        for (a, b) in hy.iter().zip(&s) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn huge_beta_damps_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mem = LbfgsMemory::new(6, 2).unwrap();
        for _ in 0..2 {
            let (s, y) = random_pair(&mut rng, 6);
            mem.update_memory(&s, &y).unwrap();
        }
        let g = vec![1.0; 6];
        let step = mem.direction(&g, 1e9).unwrap();
        assert!(step.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-7);
    }

    #[test]
    fn restricted_direction_matches_dense_submatrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut mem = LbfgsMemory::new(8, 2).unwrap();
        for _ in 0..3 {
            let (s, y) = random_pair(&mut rng, 8);
            mem.update_memory(&s, &y).unwrap();
        }
        let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ranges = [1..3, 5..7];
        let idx: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let h = dense_compact(&mem);
        let got = mem.restricted_direction(&g, 2.0, &ranges).unwrap();
        for (a, &i) in idx.iter().enumerate() {
            let expected: f64 = idx.iter().map(|&j| h[(i, j)] * g[j]).sum::<f64>() / 2.0;
            assert_abs_diff_eq!(got[a], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn triangular_inverse() {
        let r = [2.0, 1.0, 0.5, 0.0, 4.0, -1.0, 0.0, 0.0, 0.25];
        let inv = upper_triangular_inverse(&r, 3).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &r);
        let b = DMatrix::from_row_slice(3, 3, &inv);
        let prod = a * b;
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(prod[(i, j)], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-14);
            }
        }
        assert!(matches!(
            upper_triangular_inverse(&[1.0, 2.0, 0.0, 0.0], 2),
            Err(Error::SingularFactor(1))
        ));
    }

    #[test]
    fn quadratic_oracle_examples() {
        let x = quadratic_min_oracle(&[1.0, 2.0], &[0.5, -1.0], &[0.0; 4], 1.0).unwrap();
        assert_eq!(x, vec![0.5, 3.0]);
        let x = quadratic_min_oracle(&[1.0, 2.0], &[0.0, 0.0], &[2.0, 0.0, 0.0, 2.0], 1.0).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        let x = quadratic_min_oracle(&[0.0, 0.0], &[2.0, 8.0], &[1.0, 0.0, 0.0, 3.0], 1.0).unwrap();
        assert_abs_diff_eq!(x[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], -2.0, epsilon = 1e-15);
        assert!(matches!(
            quadratic_min_oracle(&[0.0, 0.0], &[1.0, 1.0], &[-3.0, 0.0, 0.0, 1.0], 1.0),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn quadratic_oracle_zeroes_model_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // H = BᵀB is PSD
        let bm = DMatrix::from_row_slice(n, n, &b);
        let h = bm.transpose() * &bm;
        let h_rows: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| h[(i, j)])
            .collect();
        let xh: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = 0.3;
        let z = quadratic_min_oracle(&xh, &g, &h_rows, beta).unwrap();
        for i in 0..n {
            let grad_q = g[i]
                + (0..n)
                    .map(|j| (h[(i, j)] + if i == j { beta } else { 0.0 }) * (z[j] - xh[j]))
                    .sum::<f64>();
            assert_abs_diff_eq!(grad_q, 0.0, epsilon = 1e-12);
        }
    }
}
