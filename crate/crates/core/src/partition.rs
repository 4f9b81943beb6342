//! Covers of the observation set.
//!
//! A cover splits the entry indices into `K` subsets, each made of blocks.
//! Five schemes are provided:
//!
//! * `Hogwild`: random balanced subsets of single-entry blocks, no
//!   disjointness guarantee.
//! * `Color` / `ColorB`: greedy coloring of the conflict graph (two entries
//!   conflict iff they share a row or a column), first-fit or random
//!   available color, then color classes packed into `K` bins.
//! * `Strata` / `StrataB`: rows and columns cut into `K` intervals
//!   (equal length, or balanced by entry count); subset `k` holds the
//!   blocks `(row interval r, col interval (r + k) mod K)`.
//!
//! Within a subset, blocks are grouped into *phases*. Blocks inside one
//! phase have pairwise-disjoint parameter sets (except for `Hogwild`). A
//! strata subset is a single phase; a packed color bin has one phase per
//! color class it received.

use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::SparseObservations;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Hogwild,
    Color,
    ColorB,
    Strata,
    StrataB,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Hogwild,
        Scheme::Color,
        Scheme::ColorB,
        Scheme::Strata,
        Scheme::StrataB,
    ];

    pub fn is_stratified(self) -> bool {
        matches!(self, Scheme::Strata | Scheme::StrataB)
    }

    /// False only for `Hogwild`.
    pub fn guarantees_disjoint_blocks(self) -> bool {
        !matches!(self, Scheme::Hogwild)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Hogwild => "hogwild",
            Scheme::Color => "color",
            Scheme::ColorB => "color-b",
            Scheme::Strata => "strata",
            Scheme::StrataB => "strata-b",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|scheme| scheme.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheme `{s}`")))
    }
}

/// Row interval × column interval of a strata block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrataSpan {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum BlockLayout {
    /// Every entry is its own block.
    Singletons,
    /// CSR offsets into the entry list, `num_blocks + 1` long.
    Offsets(Vec<usize>),
}

/// One subset `S_k` of a cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subset {
    entries: Vec<usize>,
    blocks: BlockLayout,
    phases: Vec<Range<usize>>,
    spans: Vec<StrataSpan>,
}

impl Subset {
    fn singletons(entries: Vec<usize>, phase_sizes: &[usize]) -> Self {
        let mut phases = Vec::with_capacity(phase_sizes.len());
        let mut start = 0;
        for &len in phase_sizes {
            phases.push(start..start + len);
            start += len;
        }
        debug_assert_eq!(start, entries.len());
        Self {
            entries,
            blocks: BlockLayout::Singletons,
            phases,
            spans: Vec::new(),
        }
    }

    fn strata(entries: Vec<usize>, offsets: Vec<usize>, spans: Vec<StrataSpan>) -> Self {
        let num_blocks = spans.len();
        Self {
            entries,
            blocks: BlockLayout::Offsets(offsets),
            phases: std::iter::once(0..num_blocks).collect(),
            spans,
        }
    }

    /// Entry indices, grouped by block.
    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        match &self.blocks {
            BlockLayout::Singletons => self.entries.len(),
            BlockLayout::Offsets(off) => off.len() - 1,
        }
    }

    pub fn has_singleton_blocks(&self) -> bool {
        matches!(self.blocks, BlockLayout::Singletons)
    }

    /// Range into [`Subset::entries`] for block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        match &self.blocks {
            BlockLayout::Singletons => b..b + 1,
            BlockLayout::Offsets(off) => off[b]..off[b + 1],
        }
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.entries[self.block_range(b)]
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        (0..self.num_blocks()).map(|b| self.block_range(b).len()).collect()
    }

    /// Block ranges; blocks in the same phase may run concurrently.
    pub fn phases(&self) -> &[Range<usize>] {
        &self.phases
    }

    /// Entry range covered by the blocks of phase `p`.
    pub fn phase_entry_range(&self, p: usize) -> Range<usize> {
        let blocks = &self.phases[p];
        if blocks.is_empty() {
            return 0..0;
        }
        self.block_range(blocks.start).start..self.block_range(blocks.end - 1).end
    }

    /// Strata spans, one per block (empty for non-strata covers).
    pub fn spans(&self) -> &[StrataSpan] {
        &self.spans
    }
}

/// A cover `S = {S_1, …, S_K}` of the entry indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cover {
    scheme: Scheme,
    subsets: Vec<Subset>,
}

impl Cover {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn subsets(&self) -> &[Subset] {
        &self.subsets
    }

    pub fn num_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn subset_sizes(&self) -> Vec<usize> {
        self.subsets.iter().map(Subset::len).collect()
    }

    pub fn num_entries(&self) -> usize {
        self.subsets.iter().map(Subset::len).sum()
    }

    /// Checks that every index in `0..num_entries` occurs in exactly one block.
    pub fn check_partition(&self, num_entries: usize) -> Result<()> {
        let mut seen = vec![false; num_entries];
        for subset in &self.subsets {
            for &i in subset.entries() {
                if i >= num_entries {
                    return Err(Error::IndexOutOfRange {
                        what: "entry",
                        index: i,
                        bound: num_entries,
                    });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("entry {i} appears twice in cover")));
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::invalid(format!("entry {i} missing from cover"))),
            None => Ok(()),
        }
    }

    /// Checks that, within every phase, distinct blocks share no row and no
    /// column. Always fails for a `Hogwild` cover with conflicts.
    pub fn check_disjoint(&self, obs: &SparseObservations) -> Result<()> {
        let entries = obs.entries();
        let mut row_owner = vec![usize::MAX; obs.num_rows()];
        let mut col_owner = vec![usize::MAX; obs.num_cols()];
        // owners are stamped with a global block id so buffers never need clearing
        let mut stamp = 0usize;
        for (k, subset) in self.subsets.iter().enumerate() {
            for (p, phase) in subset.phases().iter().enumerate() {
                let phase_base = stamp;
                for b in phase.clone() {
                    let id = stamp;
                    stamp += 1;
                    for &i in subset.block(b) {
                        let e = entries.get(i).ok_or(Error::IndexOutOfRange {
                            what: "entry",
                            index: i,
                            bound: entries.len(),
                        })?;
                        for owner in [&mut row_owner[e.row], &mut col_owner[e.col]] {
                            if *owner != usize::MAX && *owner >= phase_base && *owner != id {
                                return Err(Error::invalid(format!(
                                    "subset {k} phase {p}: blocks share parameters at entry {i}"
                                )));
                            }
                            *owner = id;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Human-readable listing of per-subset block sizes and the parallel
    /// work estimate for `threads` workers.
    pub fn summary(&self, threads: usize) -> Result<String> {
        let mut out = String::new();
        let work = par_work(self, threads)?;
        writeln!(out, "scheme {}", self.scheme).unwrap();
        writeln!(out, "subsets {}", self.num_subsets()).unwrap();
        writeln!(out, "entries {}", self.num_entries()).unwrap();
        writeln!(out, "parwork {work} (threads {threads})").unwrap();
        for (k, s) in self.subsets.iter().enumerate() {
            if s.has_singleton_blocks() {
                writeln!(
                    out,
                    "subset {k}: {} entries, {} single-entry blocks, {} phases",
                    s.len(),
                    s.num_blocks(),
                    s.phases().len()
                )
                .unwrap();
            } else {
                let sizes = s
                    .block_sizes()
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(" ");
                writeln!(out, "subset {k}: {} entries, block sizes {sizes}", s.len()).unwrap();
            }
        }
        Ok(out)
    }
}

/// Splits `len` items into `parts` contiguous ranges whose lengths differ by
/// at most one (longer ranges first).
pub fn even_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let n = base + usize::from(p < extra);
        out.push(start..start + n);
        start += n;
    }
    out
}

/// Random balanced cover with single-entry blocks.
pub fn hogwild_cover<R: Rng + ?Sized>(num_entries: usize, k: usize, rng: &mut R) -> Result<Cover> {
    if k == 0 {
        return Err(Error::invalid("number of subsets must be at least 1"));
    }
    if k > num_entries {
        return Err(Error::invalid(format!(
            "{k} subsets requested for {num_entries} entries"
        )));
    }
    let mut perm: Vec<usize> = (0..num_entries).collect();
    perm.shuffle(rng);
    let subsets = even_ranges(num_entries, k)
        .into_iter()
        .map(|r| {
            let n = r.len();
            Subset::singletons(perm[r].to_vec(), &[n])
        })
        .collect();
    Ok(Cover {
        scheme: Scheme::Hogwild,
        subsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorPolicy {
    /// Smallest feasible color index.
    FirstFit,
    /// Uniform among feasible colors already in use; a new color only when
    /// none is feasible.
    RandomAvailable,
}

/// Color per entry, with class sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring {
    colors: Vec<usize>,
    class_sizes: Vec<usize>,
    policy: Option<ColorPolicy>,
}

impl Coloring {
    /// Wraps an arbitrary color assignment. Validity against a particular
    /// observation set is not checked here.
    pub fn from_colors(colors: Vec<usize>) -> Self {
        let num = colors.iter().max().map_or(0, |c| c + 1);
        let mut class_sizes = vec![0; num];
        for &c in &colors {
            class_sizes[c] += 1;
        }
        Self {
            colors,
            class_sizes,
            policy: None,
        }
    }

    pub fn colors(&self) -> &[usize] {
        &self.colors
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.class_sizes
    }

    pub fn num_colors(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn policy(&self) -> Option<ColorPolicy> {
        self.policy
    }

    /// Entry indices of each color class, in input order.
    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut classes: Vec<Vec<usize>> = self.class_sizes.iter().map(|&n| Vec::with_capacity(n)).collect();
        for (i, &c) in self.colors.iter().enumerate() {
            classes[c].push(i);
        }
        classes
    }

    /// True iff no two entries sharing a row or column have the same color.
    pub fn is_valid_for(&self, obs: &SparseObservations) -> bool {
        if self.colors.len() != obs.len() {
            return false;
        }
        let mut rows = ColorSets::new(obs.num_rows());
        let mut cols = ColorSets::new(obs.num_cols());
        for (e, &c) in obs.entries().iter().zip(&self.colors) {
            if rows.contains(e.row, c) || cols.contains(e.col, c) {
                return false;
            }
            rows.insert(e.row, c);
            cols.insert(e.col, c);
        }
        true
    }
}

/// Per-vertex bitsets of used colors.
struct ColorSets {
    words: Vec<Vec<u64>>,
}

impl ColorSets {
    fn new(n: usize) -> Self {
        Self {
            words: vec![Vec::new(); n],
        }
    }

    #[inline]
    fn word(&self, v: usize, w: usize) -> u64 {
        self.words[v].get(w).copied().unwrap_or(0)
    }

    fn contains(&self, v: usize, c: usize) -> bool {
        self.word(v, c / 64) >> (c % 64) & 1 == 1
    }

    fn insert(&mut self, v: usize, c: usize) {
        let w = c / 64;
        let bits = &mut self.words[v];
        if bits.len() <= w {
            bits.resize(w + 1, 0);
        }
        bits[w] |= 1 << (c % 64);
    }
}

/// Greedy coloring of the implicit conflict graph, visiting entries in
/// input order.
pub fn greedy_color<R: Rng + ?Sized>(obs: &SparseObservations, policy: ColorPolicy, rng: &mut R) -> Coloring {
    let mut rows = ColorSets::new(obs.num_rows());
    let mut cols = ColorSets::new(obs.num_cols());
    let mut colors = Vec::with_capacity(obs.len());
    let mut num_colors = 0usize;

    for e in obs.entries() {
        let used_word = |w: usize| rows.word(e.row, w) | cols.word(e.col, w);
        let color = match policy {
            ColorPolicy::FirstFit => {
                let mut w = 0;
                loop {
                    let u = used_word(w);
                    if u != u64::MAX {
                        break w * 64 + u.trailing_ones() as usize;
                    }
                    w += 1;
                }
            }
            ColorPolicy::RandomAvailable => {
                let nwords = num_colors.div_ceil(64);
                let mut blocked = 0usize;
                for w in 0..nwords {
                    blocked += (used_word(w) & valid_mask(w, num_colors)).count_ones() as usize;
                }
                let feasible = num_colors - blocked;
                if feasible == 0 {
                    num_colors
                } else {
                    let mut rank = rng.random_range(0..feasible);
                    let mut found = num_colors;
                    for w in 0..nwords {
                        let mut free = !used_word(w) & valid_mask(w, num_colors);
                        let n = free.count_ones() as usize;
                        if rank >= n {
                            rank -= n;
                            continue;
                        }
                        for _ in 0..rank {
                            free &= free - 1;
                        }
                        found = w * 64 + free.trailing_zeros() as usize;
                        break;
                    }
                    found
                }
            }
        };
        rows.insert(e.row, color);
        cols.insert(e.col, color);
        num_colors = num_colors.max(color + 1);
        colors.push(color);
    }

    let mut coloring = Coloring::from_colors(colors);
    coloring.policy = Some(policy);
    coloring
}

/// Bits of word `w` that correspond to colors `< num_colors`.
#[inline]
fn valid_mask(w: usize, num_colors: usize) -> u64 {
    let lo = w * 64;
    if num_colors >= lo + 64 {
        u64::MAX
    } else {
        (1u64 << (num_colors - lo)) - 1
    }
}

/// Packs color classes into `k` bins, largest class first. A class goes to
/// the first bin currently holding fewer than `⌈|I|/k⌉` entries, or to the
/// last bin when every bin is full. Each bin becomes one subset whose
/// phases are its color classes.
pub fn pack_colors(coloring: &Coloring, k: usize) -> Result<Cover> {
    if k == 0 {
        return Err(Error::invalid("number of subsets must be at least 1"));
    }
    let capacity = coloring.len().div_ceil(k);
    let mut order: Vec<usize> = (0..coloring.num_colors())
        .filter(|&c| coloring.class_sizes[c] > 0)
        .collect();
    order.sort_by(|&a, &b| coloring.class_sizes[b].cmp(&coloring.class_sizes[a]).then(a.cmp(&b)));

    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut loads = vec![0usize; k];
    for c in order {
        let bin = loads.iter().position(|&l| l < capacity).unwrap_or(k - 1);
        loads[bin] += coloring.class_sizes[c];
        bins[bin].push(c);
    }

    let classes = coloring.classes();
    let scheme = match coloring.policy {
        Some(ColorPolicy::RandomAvailable) => Scheme::ColorB,
        _ => Scheme::Color,
    };
    let subsets = bins
        .into_iter()
        .map(|colors| {
            let sizes: Vec<usize> = colors.iter().map(|&c| classes[c].len()).collect();
            let entries = colors.iter().flat_map(|&c| classes[c].iter().copied()).collect();
            Subset::singletons(entries, &sizes)
        })
        .collect();
    Ok(Cover { scheme, subsets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrataMode {
    /// Intervals of length `⌈dim/K⌉`.
    EquiLength,
    /// Intervals grown until they hold at least `|I|/K` entries.
    Balanced,
}

/// Cuts `0..dim` into `k` contiguous intervals; `labels[j]` is the interval
/// of index `j`.
fn intervals(counts: &[usize], k: usize, total: usize, mode: StrataMode) -> Vec<Range<usize>> {
    let dim = counts.len();
    match mode {
        StrataMode::EquiLength => {
            let len = dim.div_ceil(k);
            (0..k).map(|r| (r * len).min(dim)..((r + 1) * len).min(dim)).collect()
        }
        StrataMode::Balanced => {
            let target = total as f64 / k as f64;
            let mut out = Vec::with_capacity(k);
            let mut start = 0;
            let mut load = 0usize;
            for (j, &c) in counts.iter().enumerate() {
                load += c;
                let remaining_intervals = k - out.len() - 1;
                if remaining_intervals == 0 {
                    continue;
                }
                let remaining_indices = dim - (j + 1);
                if load as f64 >= target || remaining_indices == remaining_intervals {
                    out.push(start..j + 1);
                    start = j + 1;
                    load = 0;
                }
            }
            out.push(start..dim);
            out
        }
    }
}

/// Stratified cover with `k` subsets of `k` blocks each.
pub fn stratify(obs: &SparseObservations, k: usize, mode: StrataMode) -> Result<Cover> {
    if k == 0 {
        return Err(Error::invalid("number of subsets must be at least 1"));
    }
    let limit = obs.num_rows().min(obs.num_cols());
    if k > limit {
        return Err(Error::invalid(format!(
            "{k} strata exceed the smaller matrix dimension {limit}"
        )));
    }
    let total = obs.len();
    let row_iv = intervals(&obs.row_counts(), k, total, mode);
    let col_iv = intervals(&obs.col_counts(), k, total, mode);
    let label = |ivs: &[Range<usize>], dim: usize| {
        let mut labels = vec![0usize; dim];
        for (r, iv) in ivs.iter().enumerate() {
            labels[iv.clone()].fill(r);
        }
        labels
    };
    let row_label = label(&row_iv, obs.num_rows());
    let col_label = label(&col_iv, obs.num_cols());

    // counting sort into (subset, block) cells, preserving input order
    let cell_of = |i: usize| {
        let e = &obs.entries()[i];
        let r = row_label[e.row];
        let c = col_label[e.col];
        let subset = (c + k - r) % k;
        subset * k + r
    };
    let mut cell_counts = vec![0usize; k * k];
    for i in 0..total {
        cell_counts[cell_of(i)] += 1;
    }
    let mut cell_start = vec![0usize; k * k + 1];
    for c in 0..k * k {
        cell_start[c + 1] = cell_start[c] + cell_counts[c];
    }
    let mut sorted = vec![0usize; total];
    let mut cursor = cell_start.clone();
    for i in 0..total {
        let c = cell_of(i);
        sorted[cursor[c]] = i;
        cursor[c] += 1;
    }

    let subsets = (0..k)
        .map(|s| {
            let base = cell_start[s * k];
            let entries = sorted[base..cell_start[(s + 1) * k]].to_vec();
            let offsets = (0..=k).map(|b| cell_start[s * k + b] - base).collect();
            let spans = (0..k)
                .map(|r| StrataSpan {
                    rows: row_iv[r].clone(),
                    cols: col_iv[(r + s) % k].clone(),
                })
                .collect();
            Subset::strata(entries, offsets, spans)
        })
        .collect();
    let scheme = match mode {
        StrataMode::EquiLength => Scheme::Strata,
        StrataMode::Balanced => Scheme::StrataB,
    };
    Ok(Cover { scheme, subsets })
}

/// Unit-cost parallel gradient work of one pass over the cover with
/// `threads` workers: `Σ_k ⌈|S_k|/P⌉` for single-entry-block schemes and
/// `Σ_k max_b |S_{k,b}|` for strata schemes.
pub fn par_work(cover: &Cover, threads: usize) -> Result<usize> {
    if threads == 0 {
        return Err(Error::invalid("thread count must be at least 1"));
    }
    let work = cover
        .subsets
        .iter()
        .map(|s| {
            if cover.scheme.is_stratified() {
                s.block_sizes().into_iter().max().unwrap_or(0)
            } else {
                s.len().div_ceil(threads)
            }
        })
        .sum();
    Ok(work)
}

/// Builds the cover for `scheme`. `Color` and `ColorB` pack into `k` bins;
/// strata schemes use `k` intervals per dimension.
pub fn build_cover<R: Rng + ?Sized>(obs: &SparseObservations, scheme: Scheme, k: usize, rng: &mut R) -> Result<Cover> {
    match scheme {
        Scheme::Hogwild => hogwild_cover(obs.len(), k, rng),
        Scheme::Color => pack_colors(&greedy_color(obs, ColorPolicy::FirstFit, rng), k),
        Scheme::ColorB => pack_colors(&greedy_color(obs, ColorPolicy::RandomAvailable, rng), k),
        Scheme::Strata => stratify(obs, k, StrataMode::EquiLength),
        Scheme::StrataB => stratify(obs, k, StrataMode::Balanced),
    }
}
