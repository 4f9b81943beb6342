//! Matrix-factorization objective.
//!
//! The objective is `f(x) = Σ_{(a,b) observed} (y_ab − Σ_k X1[a,k]·X2[k,b])²`,
//! a sum of terms that each touch one row of `X1` and one column of `X2`.
//!
//! All parameters live in one flat vector: `X1` row-major first, then `X2`
//! column-major. Every observed entry therefore depends on exactly two
//! contiguous ranges of length `rank`.

use std::collections::HashSet;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Chunk length for parallel reductions. Fixed so that reduction order does
/// not depend on the number of worker threads.
pub(crate) const REDUCE_CHUNK: usize = 4096;

/// One observed entry `(row, col, value)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Self { row, col, value }
    }
}

/// Coordinate-form list of observed entries with matrix dimensions.
#[derive(Debug, Clone)]
pub struct SparseObservations {
    entries: Vec<Entry>,
    num_rows: usize,
    num_cols: usize,
}

impl SparseObservations {
    /// Validates bounds, uniqueness and non-emptiness.
    pub fn new(num_rows: usize, num_cols: usize, entries: Vec<Entry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyObservations);
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= num_rows {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: e.row,
                    bound: num_rows,
                });
            }
            if e.col >= num_cols {
                return Err(Error::IndexOutOfRange {
                    what: "col",
                    index: e.col,
                    bound: num_cols,
                });
            }
            if !e.value.is_finite() {
                return Err(Error::NonFinite("observation value"));
            }
            if !seen.insert((e.row, e.col)) {
                return Err(Error::DuplicateEntry { row: e.row, col: e.col });
            }
        }
        Ok(Self {
            entries,
            num_rows,
            num_cols,
        })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    /// Number of entries in each row.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_rows];
        for e in &self.entries {
            counts[e.row] += 1;
        }
        counts
    }

    /// Number of entries in each column.
    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_cols];
        for e in &self.entries {
            counts[e.col] += 1;
        }
        counts
    }
}

/// Shape of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub num_rows: usize,
    pub num_cols: usize,
    pub rank: usize,
}

impl ParamLayout {
    pub fn new(num_rows: usize, num_cols: usize, rank: usize) -> Self {
        Self {
            num_rows,
            num_cols,
            rank,
        }
    }

    /// Total parameter count `rank · (rows + cols)`.
    pub fn num_params(&self) -> usize {
        self.rank * (self.num_rows + self.num_cols)
    }

    /// Offset of the first `X2` parameter.
    pub fn x2_offset(&self) -> usize {
        self.rank * self.num_rows
    }

    #[inline]
    pub fn row_range(&self, row: usize) -> Range<usize> {
        let start = row * self.rank;
        start..start + self.rank
    }

    #[inline]
    pub fn col_range(&self, col: usize) -> Range<usize> {
        let start = self.x2_offset() + col * self.rank;
        start..start + self.rank
    }

    /// Parameter range covering the contiguous row interval `rows` of `X1`.
    pub fn row_block_range(&self, rows: Range<usize>) -> Range<usize> {
        rows.start * self.rank..rows.end * self.rank
    }

    /// Parameter range covering the contiguous column interval `cols` of `X2`.
    pub fn col_block_range(&self, cols: Range<usize>) -> Range<usize> {
        let off = self.x2_offset();
        off + cols.start * self.rank..off + cols.end * self.rank
    }

    /// Parameter indices touched by the entry at `(row, col)`.
    pub fn alpha_of(&self, row: usize, col: usize) -> Result<AlphaSet> {
        if row >= self.num_rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                bound: self.num_rows,
            });
        }
        if col >= self.num_cols {
            return Err(Error::IndexOutOfRange {
                what: "col",
                index: col,
                bound: self.num_cols,
            });
        }
        Ok(AlphaSet {
            x1: self.row_range(row),
            x2: self.col_range(col),
        })
    }
}

/// Parameter indices a single entry depends on: one `X1` row range followed
/// by one `X2` column range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlphaSet {
    x1: Range<usize>,
    x2: Range<usize>,
}

impl AlphaSet {
    pub fn len(&self) -> usize {
        self.x1.len() + self.x2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ranges(&self) -> [Range<usize>; 2] {
        [self.x1.clone(), self.x2.clone()]
    }

    /// Indices in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.x1.clone().chain(self.x2.clone())
    }

    pub fn contains(&self, index: usize) -> bool {
        self.x1.contains(&index) || self.x2.contains(&index)
    }

    pub fn is_disjoint(&self, other: &AlphaSet) -> bool {
        !ranges_overlap(&self.x1, &other.x1) && !ranges_overlap(&self.x2, &other.x2)
    }
}

fn ranges_overlap(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Free-function form of [`ParamLayout::alpha_of`].
pub fn alpha_of(row: usize, col: usize, rank: usize, num_rows: usize, num_cols: usize) -> Result<AlphaSet> {
    ParamLayout::new(num_rows, num_cols, rank).alpha_of(row, col)
}

/// The two factor matrices, stored in one flat vector (see module docs).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    layout: ParamLayout,
    params: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            layout,
            params: vec![0.0; layout.num_params()],
        }
    }

    /// Entries drawn uniformly from `[0, 1/√rank)`.
    pub fn random(layout: ParamLayout, seed: u64) -> Self {
        Self::random_scaled(layout, seed, 1.0)
    }

    /// Entries drawn uniformly from `[0, scale/√rank)`.
    pub fn random_scaled(layout: ParamLayout, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = scale / (layout.rank as f64).sqrt();
        let params = (0..layout.num_params()).map(|_| rng.random::<f64>() * bound).collect();
        Self { layout, params }
    }

    /// Builds a model from `x1` (rows × rank, row-major) and `x2`
    /// (rank × cols, row-major, i.e. the usual matrix layout).
    pub fn from_factors(layout: ParamLayout, x1: &[f64], x2: &[f64]) -> Result<Self> {
        let ParamLayout {
            num_rows,
            num_cols,
            rank,
        } = layout;
        if x1.len() != num_rows * rank || x2.len() != rank * num_cols {
            return Err(Error::invalid("factor sizes do not match layout"));
        }
        let mut params = Vec::with_capacity(layout.num_params());
        params.extend_from_slice(x1);
        for b in 0..num_cols {
            params.extend((0..rank).map(|k| x2[k * num_cols + b]));
        }
        Self::from_params(layout, params)
    }

    pub fn from_params(layout: ParamLayout, params: Vec<f64>) -> Result<Self> {
        if params.len() != layout.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.num_params(),
                params.len()
            )));
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn rank(&self) -> usize {
        self.layout.rank
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    #[inline]
    pub fn x1_row(&self, row: usize) -> &[f64] {
        &self.params[self.layout.row_range(row)]
    }

    #[inline]
    pub fn x2_col(&self, col: usize) -> &[f64] {
        &self.params[self.layout.col_range(col)]
    }

    /// `X1` as rows × rank, row-major.
    pub fn x1(&self) -> &[f64] {
        &self.params[..self.layout.x2_offset()]
    }

    /// `X2` as rank × cols, row-major.
    pub fn x2_row_major(&self) -> Vec<f64> {
        let ParamLayout { num_cols, rank, .. } = self.layout;
        let mut out = vec![0.0; rank * num_cols];
        for b in 0..num_cols {
            for (k, v) in self.x2_col(b).iter().enumerate() {
                out[k * num_cols + b] = *v;
            }
        }
        out
    }

    #[inline]
    pub fn predict(&self, row: usize, col: usize) -> f64 {
        dot(self.x1_row(row), self.x2_col(col))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `value − ⟨X1[row,:], X2[:,col]⟩`.
#[inline]
pub fn residual(model: &FactorModel, entry: &Entry) -> f64 {
    entry.value - model.predict(entry.row, entry.col)
}

/// Adds the scaled gradient of one squared residual to the row/column
/// gradient slices. `scale = 1` gives the plain derivative
/// `−2·r·x2` (resp. `−2·r·x1`).
#[inline]
pub fn accumulate_entry(x1_row: &[f64], x2_col: &[f64], value: f64, scale: f64, g1: &mut [f64], g2: &mut [f64]) {
    let r = value - dot(x1_row, x2_col);
    let c = -2.0 * r * scale;
    for (g, x) in g1.iter_mut().zip(x2_col) {
        *g += c * x;
    }
    for (g, x) in g2.iter_mut().zip(x1_row) {
        *g += c * x;
    }
}

/// Accumulates `∇ Σ_{i ∈ block} f_i` into `grad` (full parameter length).
/// Coordinates outside the block's parameter set are left untouched.
pub fn block_gradient<'a>(model: &FactorModel, block: impl IntoIterator<Item = &'a Entry>, grad: &mut [f64]) {
    let layout = model.layout;
    assert_eq!(grad.len(), layout.num_params(), "gradient length mismatch");
    let (g1_all, g2_all) = grad.split_at_mut(layout.x2_offset());
    for e in block {
        let g1 = &mut g1_all[e.row * layout.rank..(e.row + 1) * layout.rank];
        let g2 = &mut g2_all[e.col * layout.rank..(e.col + 1) * layout.rank];
        accumulate_entry(model.x1_row(e.row), model.x2_col(e.col), e.value, 1.0, g1, g2);
    }
}

/// Full gradient of the objective over `entries`.
pub fn full_gradient(model: &FactorModel, entries: &[Entry]) -> Vec<f64> {
    let mut grad = vec![0.0; model.layout.num_params()];
    block_gradient(model, entries, &mut grad);
    grad
}

/// Sum of squared residuals.
pub fn objective(model: &FactorModel, entries: &[Entry]) -> f64 {
    entries
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|e| {
                    let r = residual(model, e);
                    r * r
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Root-mean-square residual over `entries`.
///
/// Evaluated in parallel on the current rayon pool; the reduction order is
/// fixed, so the result does not depend on the thread count.
pub fn rmse(model: &FactorModel, entries: &[Entry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyObservations);
    }
    Ok((objective(model, entries) / entries.len() as f64).sqrt())
}
