//! Ratings ingestion, trace CSV persistence and factor dumps.

use std::collections::hash_map::Entry as MapEntry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Entry, FactorModel, SparseObservations};
use crate::optimizer::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    /// `user\titem\trating\ttimestamp` (MovieLens 100K).
    Tab,
    /// `user::item::rating::timestamp` (MovieLens 1M and 10M).
    DoubleColon,
    /// `user,item,rating,timestamp` (MovieLens 20M and later).
    Comma,
}

impl Delimiter {
    fn split<'a>(self, line: &'a str) -> Box<dyn Iterator<Item = &'a str> + 'a> {
        match self {
            Delimiter::Tab => Box::new(line.split('\t')),
            Delimiter::DoubleColon => Box::new(line.split("::")),
            Delimiter::Comma => Box::new(line.split(',')),
        }
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" => Ok(Delimiter::Tab),
            "double-colon" => Ok(Delimiter::DoubleColon),
            "comma" => Ok(Delimiter::Comma),
            _ => Err(Error::invalid(format!("unknown format `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingsFile {
    pub path: PathBuf,
    pub delimiter: Delimiter,
    pub has_header: bool,
}

impl RatingsFile {
    pub fn new(path: impl Into<PathBuf>, delimiter: Delimiter) -> Self {
        Self {
            path: path.into(),
            delimiter,
            has_header: false,
        }
    }

    pub fn with_header(mut self, has_header: bool) -> Self {
        self.has_header = has_header;
        self
    }
}

/// Order in which dense indices are assigned to original ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdOrder {
    /// Index `i` is the `i`-th distinct id met while reading.
    #[default]
    FirstAppearance,
    /// Indices follow ascending original id.
    Sorted,
}

impl FromStr for IdOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-seen" => Ok(IdOrder::FirstAppearance),
            "sorted" => Ok(IdOrder::Sorted),
            _ => Err(Error::invalid(format!("unknown id order `{s}`"))),
        }
    }
}

/// Bijection between original ids and dense indices `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    original: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl IdMap {
    fn intern(&mut self, id: u64) -> usize {
        let next = self.original.len();
        match self.index.entry(id) {
            MapEntry::Occupied(e) => *e.get(),
            MapEntry::Vacant(e) => {
                e.insert(next);
                self.original.push(id);
                next
            }
        }
    }

    /// Renumbers by ascending id; returns `old index -> new index`.
    fn sort(&mut self) -> Vec<usize> {
        let mut by_id: Vec<usize> = (0..self.original.len()).collect();
        by_id.sort_unstable_by_key(|&i| self.original[i]);
        let mut perm = vec![0; by_id.len()];
        for (new, &old) in by_id.iter().enumerate() {
            perm[old] = new;
        }
        self.original.sort_unstable();
        for (i, id) in self.original.iter().enumerate() {
            self.index.insert(*id, i);
        }
        perm
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn original_of(&self, index: usize) -> Option<u64> {
        self.original.get(index).copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdRemap {
    pub rows: IdMap,
    pub cols: IdMap,
}

#[derive(Debug, Clone)]
pub struct LoadedRatings {
    pub obs: SparseObservations,
    pub remap: IdRemap,
}

fn parse_field<T: FromStr>(field: Option<&str>, name: &str, path: &Path, line: usize) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("missing {name} field"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse {name} from `{raw}`"),
    })
}

/// Reads `user, item, rating[, timestamp]` lines from any reader. `path` is
/// used for error messages only.
pub fn parse_ratings<R: BufRead>(reader: R, file: &RatingsFile, order: IdOrder) -> Result<LoadedRatings> {
    let path = file.path.as_path();
    let mut remap = IdRemap::default();
    let mut entries = Vec::new();
    let mut first_line = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let number = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 && file.has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = file.delimiter.split(line);
        let user: u64 = parse_field(fields.next(), "user id", path, number)?;
        let item: u64 = parse_field(fields.next(), "item id", path, number)?;
        let rating: f64 = parse_field(fields.next(), "rating", path, number)?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: number,
                msg: "rating is not finite".into(),
            });
        }
        if let Some(prev) = first_line.insert((user, item), number) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: number,
                msg: format!("duplicate rating for user {user}, item {item} (first on line {prev})"),
            });
        }
        let row = remap.rows.intern(user);
        let col = remap.cols.intern(item);
        entries.push(Entry::new(row, col, rating));
    }
    if entries.is_empty() {
        return Err(Error::EmptyObservations);
    }
    if order == IdOrder::Sorted {
        let rows = remap.rows.sort();
        let cols = remap.cols.sort();
        for e in &mut entries {
            e.row = rows[e.row];
            e.col = cols[e.col];
        }
    }
    let obs = SparseObservations::new(remap.rows.len(), remap.cols.len(), entries)?;
    Ok(LoadedRatings { obs, remap })
}

pub fn load_ratings(file: &RatingsFile, order: IdOrder) -> Result<LoadedRatings> {
    let f = File::open(&file.path).map_err(|e| Error::io(&file.path, e))?;
    parse_ratings(BufReader::new(f), file, order)
}

pub const TRACE_HEADER: &str = "epoch,seconds,rmse,beta";

pub fn write_trace_to<W: Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        // `{}` on f64 prints the shortest string that parses back exactly
        writeln!(out, "{},{},{},{}", r.epoch, r.seconds, r.rmse, r.beta)?;
    }
    out.flush()
}

pub fn write_trace(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_to(BufWriter::new(f), records).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == TRACE_HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(bad(1, format!("expected header `{TRACE_HEADER}`"))),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let number = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 4 {
            return Err(bad(number, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| bad(number, format!("cannot parse `{}`", fields[j])))
        };
        records.push(TraceRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| bad(number, format!("cannot parse epoch `{}`", fields[0])))?,
            seconds: num(1)?,
            rmse: num(2)?,
            beta: num(3)?,
        });
    }
    Ok(records)
}

/// Appends `scheme,threads,gradient_seconds` to a timings CSV, writing the
/// header when the file is new.
pub fn append_timing(path: impl AsRef<Path>, scheme: &str, threads: usize, gradient_seconds: f64) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("scheme,threads,gradient_seconds\n");
    }
    text.push_str(&format!("{scheme},{threads},{gradient_seconds}\n"));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub const FACTOR_MAGIC: u32 = 0x4846_4d31;

/// Dense row-major matrix with a 16-byte header `magic, rows, cols, rank`
/// (little-endian `u32`), followed by `rows * cols` little-endian `f64`.
pub fn write_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, rank: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(data.len(), rows * cols);
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(16 + 8 * data.len());
    for v in [FACTOR_MAGIC, dim(rows)?, dim(cols)?, dim(rank)?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_matrix`]: `(rows, cols, rank, data)`.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.into(),
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    if word(0) as u32 != FACTOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let (rows, cols, rank) = (word(1), word(2), word(3));
    if bytes.len() != 16 + 8 * rows * cols {
        return Err(bad("payload size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, rank, data))
}

/// Writes `X1` (`m × r`) to `<prefix>.x1.bin` and `X2` (`r × n`) to
/// `<prefix>.x2.bin`, both row-major. Returns the two paths.
pub fn dump_factors(model: &FactorModel, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref().as_os_str().to_owned();
    let with = |suffix: &str| {
        let mut p = prefix.clone();
        p.push(suffix);
        PathBuf::from(p)
    };
    let (p1, p2) = (with(".x1.bin"), with(".x2.bin"));
    let layout = model.layout();
    write_matrix(&p1, layout.num_rows, layout.rank, layout.rank, model.x1())?;
    write_matrix(&p2, layout.rank, layout.num_cols, layout.rank, &model.x2_row_major())?;
    Ok((p1, p2))
}
