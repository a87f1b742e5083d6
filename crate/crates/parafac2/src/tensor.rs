//! Irregular sparse tensor data model, text-format I/O and synthetic data.
//!
//! An [`IrregularTensor`] holds K coordinate-form sparse slices that share
//! their column count J but not their row counts I_k. Slices optionally carry
//! per-row visit days (integer offsets, strictly increasing) which drive the
//! gap-aware smoothness constraint.
//!
//! # File format
//!
//! Whitespace-delimited text, 0-indexed coordinates:
//!
//! ```text
//! %%IrregularTensor K J NNZ
//! %%rows k I_k          (optional, before any entry; otherwise I_k is
//!                        inferred as 1 + the slice's max row index)
//! k i j v               (NNZ entry lines)
//! ```
//!
//! A timestamp sidecar shares the tensor's stem with a `.days` extension and
//! holds `k i t` lines; it must cover every row of every slice or be absent
//! entirely.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::orthonormal_polar;
use crate::solver::Parafac2Model;

/// Values whose magnitude falls below this are dropped from sparse storage.
pub const SPARSE_DROP_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: {what} index {index} out of bounds (must be < {bound})")]
    OutOfBounds {
        line: usize,
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("line {line}: duplicate entry for slice {slice} at ({row}, {col})")]
    DuplicateEntry {
        line: usize,
        slice: usize,
        row: usize,
        col: usize,
    },
    #[error("header declared {declared} entries but the file holds {found}")]
    EntryCountMismatch { declared: usize, found: usize },
    #[error("line {line}: visit day for slice {slice} row {row} is not strictly increasing")]
    NonIncreasingDays {
        line: usize,
        slice: usize,
        row: usize,
    },
    #[error("line {line}: duplicate visit day assignment for slice {slice} row {row}")]
    DuplicateDay {
        line: usize,
        slice: usize,
        row: usize,
    },
    #[error("timestamp sidecar does not cover slice {slice} row {row}")]
    SidecarCoverage { slice: usize, row: usize },
    #[error("line {line}: %%rows directive after entry lines")]
    DirectiveAfterEntries { line: usize },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// One nonzero of a sparse slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// A sparse I_k × J matrix in coordinate form, with optional per-row visit
/// days.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSlice {
    pub n_rows: usize,
    pub entries: Vec<Entry>,
    /// Day offset of each row; strictly increasing when present.
    pub visit_days: Option<Vec<u32>>,
}

impl SparseSlice {
    fn validate(&self, n_cols: usize, slice_idx: usize) -> Result<(), TensorError> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.row >= self.n_rows {
                return Err(TensorError::Invalid(format!(
                    "slice {slice_idx}: row index {} >= {}",
                    e.row, self.n_rows
                )));
            }
            if e.col >= n_cols {
                return Err(TensorError::Invalid(format!(
                    "slice {slice_idx}: column index {} >= {}",
                    e.col, n_cols
                )));
            }
            if !e.value.is_finite() {
                return Err(TensorError::Invalid(format!(
                    "slice {slice_idx}: non-finite value at ({}, {})",
                    e.row, e.col
                )));
            }
            if !seen.insert((e.row, e.col)) {
                return Err(TensorError::Invalid(format!(
                    "slice {slice_idx}: duplicate entry at ({}, {})",
                    e.row, e.col
                )));
            }
        }
        if let Some(days) = &self.visit_days {
            if days.len() != self.n_rows {
                return Err(TensorError::Invalid(format!(
                    "slice {slice_idx}: {} visit days for {} rows",
                    days.len(),
                    self.n_rows
                )));
            }
            if days.windows(2).any(|w| w[1] <= w[0]) {
                return Err(TensorError::Invalid(format!(
                    "slice {slice_idx}: visit days not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Materializes the slice densely (I_k × J).
    pub fn to_dense(&self, n_cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, n_cols);
        for e in &self.entries {
            m[(e.row, e.col)] = e.value;
        }
        m
    }
}

/// K sparse slices sharing the column dimension J.
///
/// Immutable after construction; safe to share across threads read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularTensor {
    n_cols: usize,
    slices: Vec<SparseSlice>,
}

impl IrregularTensor {
    /// Validating constructor. Visit days must be present on every slice or
    /// on none, matching the all-or-nothing sidecar semantics.
    pub fn new(n_cols: usize, slices: Vec<SparseSlice>) -> Result<Self, TensorError> {
        for (k, s) in slices.iter().enumerate() {
            s.validate(n_cols, k)?;
        }
        let with_days = slices.iter().filter(|s| s.visit_days.is_some()).count();
        if with_days != 0 && with_days != slices.len() {
            return Err(TensorError::Invalid(format!(
                "visit days present on {with_days} of {} slices; must be all or none",
                slices.len()
            )));
        }
        Ok(Self { n_cols, slices })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn slices(&self) -> &[SparseSlice] {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> &SparseSlice {
        &self.slices[k]
    }

    pub fn total_nnz(&self) -> usize {
        self.slices.iter().map(SparseSlice::nnz).sum()
    }

    pub fn has_visit_days(&self) -> bool {
        self.slices.iter().all(|s| s.visit_days.is_some()) && !self.slices.is_empty()
    }

    /// Σ_k ‖X_k‖_F².
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.slices
            .iter()
            .map(|s| s.entries.iter().map(|e| e.value * e.value).sum::<f64>())
            .sum()
    }
}

fn parse_token<T: std::str::FromStr>(
    tok: &str,
    line: usize,
    what: &str,
) -> Result<T, TensorError> {
    tok.parse().map_err(|_| TensorError::Malformed {
        line,
        reason: format!("cannot parse {what} from {tok:?}"),
    })
}

/// Loads a tensor from the text format, attaching timestamps when the
/// `.days` sidecar next to `path` exists.
pub fn load_irregular_tensor<P: AsRef<Path>>(path: P) -> Result<IrregularTensor, TensorError> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    // header
    let (header_idx, header) = loop {
        match lines.next() {
            Some((idx, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break (idx + 1, line);
                }
            }
            None => {
                return Err(TensorError::MalformedHeader {
                    line: 1,
                    reason: "empty file".into(),
                })
            }
        }
    };
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "%%IrregularTensor" {
        return Err(TensorError::MalformedHeader {
            line: header_idx,
            reason: format!("expected \"%%IrregularTensor K J NNZ\", got {header:?}"),
        });
    }
    let n_slices: usize = parse_token(toks[1], header_idx, "slice count K")?;
    let n_cols: usize = parse_token(toks[2], header_idx, "column count J")?;
    let nnz: usize = parse_token(toks[3], header_idx, "entry count NNZ")?;

    let mut declared_rows: Vec<Option<usize>> = vec![None; n_slices];
    let mut entries: Vec<Vec<Entry>> = vec![Vec::new(); n_slices];
    let mut max_row: Vec<Option<usize>> = vec![None; n_slices];
    let mut seen: HashSet<(usize, usize, usize)> = HashSet::with_capacity(nnz);
    let mut found = 0usize;
    let mut entries_started = false;

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks[0] == "%%rows" {
            if entries_started {
                return Err(TensorError::DirectiveAfterEntries { line: line_no });
            }
            if toks.len() != 3 {
                return Err(TensorError::Malformed {
                    line: line_no,
                    reason: "expected \"%%rows k I_k\"".into(),
                });
            }
            let k: usize = parse_token(toks[1], line_no, "slice index")?;
            if k >= n_slices {
                return Err(TensorError::OutOfBounds {
                    line: line_no,
                    what: "slice",
                    index: k,
                    bound: n_slices,
                });
            }
            declared_rows[k] = Some(parse_token(toks[2], line_no, "row count")?);
            continue;
        }
        if toks.len() != 4 {
            return Err(TensorError::Malformed {
                line: line_no,
                reason: format!("expected \"k i j v\", got {trimmed:?}"),
            });
        }
        entries_started = true;
        let k: usize = parse_token(toks[0], line_no, "slice index")?;
        let i: usize = parse_token(toks[1], line_no, "row index")?;
        let j: usize = parse_token(toks[2], line_no, "column index")?;
        let v: f64 = parse_token(toks[3], line_no, "value")?;
        if k >= n_slices {
            return Err(TensorError::OutOfBounds {
                line: line_no,
                what: "slice",
                index: k,
                bound: n_slices,
            });
        }
        if j >= n_cols {
            return Err(TensorError::OutOfBounds {
                line: line_no,
                what: "column",
                index: j,
                bound: n_cols,
            });
        }
        if let Some(bound) = declared_rows[k] {
            if i >= bound {
                return Err(TensorError::OutOfBounds {
                    line: line_no,
                    what: "row",
                    index: i,
                    bound,
                });
            }
        }
        if !v.is_finite() {
            return Err(TensorError::Malformed {
                line: line_no,
                reason: format!("non-finite value {v}"),
            });
        }
        if !seen.insert((k, i, j)) {
            return Err(TensorError::DuplicateEntry {
                line: line_no,
                slice: k,
                row: i,
                col: j,
            });
        }
        max_row[k] = Some(max_row[k].map_or(i, |m: usize| m.max(i)));
        entries[k].push(Entry {
            row: i,
            col: j,
            value: v,
        });
        found += 1;
    }

    if found != nnz {
        return Err(TensorError::EntryCountMismatch {
            declared: nnz,
            found,
        });
    }

    let mut slices = Vec::with_capacity(n_slices);
    for k in 0..n_slices {
        let n_rows = declared_rows[k].unwrap_or_else(|| max_row[k].map_or(0, |m| m + 1));
        slices.push(SparseSlice {
            n_rows,
            entries: std::mem::take(&mut entries[k]),
            visit_days: None,
        });
    }
    let mut tensor = IrregularTensor::new(n_cols, slices)?;

    let sidecar = path.with_extension("days");
    if sidecar.exists() {
        load_sidecar(&sidecar, &mut tensor)?;
    }
    Ok(tensor)
}

/// Loads a `k i t` timestamp file and attaches it to the tensor, replacing
/// any previously attached days. Coverage and monotonicity rules match the
/// auto-loaded sidecar.
pub fn attach_timestamps<P: AsRef<Path>>(
    tensor: &mut IrregularTensor,
    path: P,
) -> Result<(), TensorError> {
    load_sidecar(path.as_ref(), tensor)
}

fn load_sidecar(path: &Path, tensor: &mut IrregularTensor) -> Result<(), TensorError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut days: Vec<Vec<Option<(u32, usize)>>> = tensor
        .slices
        .iter()
        .map(|s| vec![None; s.n_rows])
        .collect();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(TensorError::Malformed {
                line: line_no,
                reason: format!("expected \"k i t\", got {trimmed:?}"),
            });
        }
        let k: usize = parse_token(toks[0], line_no, "slice index")?;
        let i: usize = parse_token(toks[1], line_no, "row index")?;
        let t: i64 = parse_token(toks[2], line_no, "day offset")?;
        if k >= tensor.n_slices() {
            return Err(TensorError::OutOfBounds {
                line: line_no,
                what: "slice",
                index: k,
                bound: tensor.n_slices(),
            });
        }
        if i >= tensor.slices[k].n_rows {
            return Err(TensorError::OutOfBounds {
                line: line_no,
                what: "row",
                index: i,
                bound: tensor.slices[k].n_rows,
            });
        }
        if t < 0 {
            return Err(TensorError::Malformed {
                line: line_no,
                reason: format!("negative day offset {t}"),
            });
        }
        if days[k][i].is_some() {
            return Err(TensorError::DuplicateDay {
                line: line_no,
                slice: k,
                row: i,
            });
        }
        days[k][i] = Some((t as u32, line_no));
    }

    // validate everything before touching the tensor, so a failed attach
    // leaves it unchanged
    let mut resolved: Vec<Vec<u32>> = Vec::with_capacity(days.len());
    for (k, slice_days) in days.iter().enumerate() {
        let mut prev: Option<u32> = None;
        for (i, assigned) in slice_days.iter().enumerate() {
            let (t, line) = assigned.ok_or(TensorError::SidecarCoverage { slice: k, row: i })?;
            if let Some(p) = prev {
                if t <= p {
                    return Err(TensorError::NonIncreasingDays {
                        line,
                        slice: k,
                        row: i,
                    });
                }
            }
            prev = Some(t);
        }
        resolved.push(slice_days.iter().map(|d| d.unwrap().0).collect());
    }
    for (slice, days) in tensor.slices.iter_mut().zip(resolved) {
        slice.visit_days = Some(days);
    }
    Ok(())
}

/// Writes `tensor` in the text format, plus the `.days` sidecar when visit
/// days are present. `load(save(T)) == T` for every valid tensor.
pub fn save_irregular_tensor<P: AsRef<Path>>(
    tensor: &IrregularTensor,
    path: P,
) -> Result<(), TensorError> {
    let path = path.as_ref();
    let mut out = String::new();
    writeln!(
        out,
        "%%IrregularTensor {} {} {}",
        tensor.n_slices(),
        tensor.n_cols(),
        tensor.total_nnz()
    )
    .expect("string write");
    // Row counts are always written explicitly so empty trailing rows and
    // all-zero slices survive the round trip.
    for (k, s) in tensor.slices().iter().enumerate() {
        writeln!(out, "%%rows {k} {}", s.n_rows).expect("string write");
    }
    for (k, s) in tensor.slices().iter().enumerate() {
        for e in &s.entries {
            // Display prints the shortest string that parses back exactly.
            writeln!(out, "{k} {} {} {}", e.row, e.col, e.value).expect("string write");
        }
    }
    fs::write(path, out)?;

    if tensor.has_visit_days() {
        let mut out = String::new();
        for (k, s) in tensor.slices().iter().enumerate() {
            for (i, t) in s.visit_days.as_ref().expect("checked").iter().enumerate() {
                writeln!(out, "{k} {i} {t}").expect("string write");
            }
        }
        fs::write(path.with_extension("days"), out)?;
    }
    Ok(())
}

/// Ground-truth generator configuration.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_slices: usize,
    pub n_cols: usize,
    pub rank: usize,
    pub rows_min: usize,
    pub rows_max: usize,
    /// Fraction of V entries that are nonzero, in (0, 1].
    pub density: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slices: 20,
            n_cols: 30,
            rank: 4,
            rows_min: 8,
            rows_max: 16,
            density: 0.5,
            noise_level: 0.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.rank == 0 {
            return Err(TensorError::InvalidConfig("rank must be >= 1".into()));
        }
        if self.rows_min < self.rank {
            return Err(TensorError::InvalidConfig(format!(
                "rows_min ({}) must be >= rank ({}) to build orthonormal Q_k",
                self.rows_min, self.rank
            )));
        }
        if self.rows_max < self.rows_min {
            return Err(TensorError::InvalidConfig(format!(
                "rows_max ({}) < rows_min ({})",
                self.rows_max, self.rows_min
            )));
        }
        if self.density.is_nan() || self.density <= 0.0 || self.density > 1.0 {
            return Err(TensorError::InvalidConfig(format!(
                "density must be in (0, 1], got {}",
                self.density
            )));
        }
        if self.noise_level.is_nan() || self.noise_level < 0.0 {
            return Err(TensorError::InvalidConfig(format!(
                "noise_level must be >= 0, got {}",
                self.noise_level
            )));
        }
        if self.n_slices == 0 || self.n_cols == 0 {
            return Err(TensorError::InvalidConfig(
                "K and J must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a ground-truth PARAFAC2 model and emits the tensor it generates:
/// `X_k = Q_k H S_k Vᵀ` plus Gaussian noise on the nonzero support, values
/// below [`SPARSE_DROP_TOL`] dropped. Deterministic for a fixed seed.
pub fn generate_synthetic(
    cfg: &SynthConfig,
) -> Result<(IrregularTensor, Parafac2Model), TensorError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k_total, j, r) = (cfg.n_slices, cfg.n_cols, cfg.rank);

    let h = DMatrix::from_fn(r, r, |_, _| rng.random::<f64>());

    let mut v = DMatrix::zeros(j, r);
    let n_nonzero = ((cfg.density * (j * r) as f64).ceil() as usize).min(j * r);
    let positions = rand::seq::index::sample(&mut rng, j * r, n_nonzero);
    for p in positions {
        v[(p % j, p / j)] = rng.random::<f64>();
    }

    let mut w = DMatrix::zeros(k_total, r);
    let mut q_all = Vec::with_capacity(k_total);
    let mut slices = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let n_rows = rng.random_range(cfg.rows_min..=cfg.rows_max);
        let gauss = DMatrix::from_fn(n_rows, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = orthonormal_polar(&gauss)
            .map_err(|e| TensorError::Invalid(format!("orthonormalization failed: {e}")))?
            .q;

        for c in 0..r {
            w[(k, c)] = rng.random_range(0.5..1.5);
        }

        // X_k = Q_k H S_k Vᵀ, dense at generation scale
        let mut hs = &h * DMatrix::from_diagonal(&w.row(k).transpose());
        hs = &q * hs;
        let mut dense = hs * v.transpose();

        if cfg.noise_level > 0.0 {
            for x in dense.iter_mut() {
                if *x != 0.0 {
                    *x += cfg.noise_level * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }

        let mut entries = Vec::new();
        for col in 0..j {
            for row in 0..n_rows {
                let val = dense[(row, col)];
                if val.abs() >= SPARSE_DROP_TOL {
                    entries.push(Entry {
                        row,
                        col,
                        value: val,
                    });
                }
            }
        }

        let mut days = Vec::with_capacity(n_rows);
        let mut t = 0u32;
        for _ in 0..n_rows {
            t += rng.random_range(1..=30);
            days.push(t);
        }

        q_all.push(q);
        slices.push(SparseSlice {
            n_rows,
            entries,
            visit_days: Some(days),
        });
    }

    let tensor = IrregularTensor::new(j, slices)?;
    let model = Parafac2Model {
        q: q_all,
        h,
        w,
        v,
        smooth_projectors: None,
    };
    Ok((tensor, model))
}
