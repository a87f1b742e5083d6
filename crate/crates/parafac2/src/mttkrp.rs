//! Slice-wise MTTKRP for the implicit tensor `Y` with slices `Y_k = Q_kᵀ X_k`.
//!
//! The CP step of the PARAFAC2 fit needs `F = Y_(n) (⊙_{i≠n} Z_i)` for the
//! R × J × K tensor `Y`. Neither `Y` nor any Khatri-Rao product is ever
//! materialized: each slice contributes through small dense products that
//! multiply the sparse `X_k` first by the thinnest dense operand, so no
//! intermediate exceeds max(I_k, J) × R.
//!
//! Per-slice contributions are summed in ascending k order in deterministic
//! mode; the parallel path reduces in unspecified order and is reproducible
//! to about 1e-9 relative.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::IrregularTensor;

#[derive(Debug, Error)]
pub enum MttkrpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty slice set")]
    Empty,
    #[error("non-finite accumulation in mode {0:?}")]
    NonFiniteAccumulation(Mode),
}

/// The three PARAFAC2 factor modes of `Y ∈ R^{R×J×K}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Mode 1: the R × R factor `H`.
    H,
    /// Mode 2: the J × R feature factor `V`.
    V,
    /// Mode 3: the K × R slice-weight factor `W`.
    W,
}

/// The slices the fit runs on: the sparse input, or dense projections
/// `X′_k = C_kᵀ X_k` in smooth mode.
#[derive(Clone, Copy)]
pub enum SliceSet<'a> {
    Sparse(&'a IrregularTensor),
    Dense(&'a [DMatrix<f64>]),
}

impl<'a> SliceSet<'a> {
    pub fn n_slices(&self) -> usize {
        match self {
            SliceSet::Sparse(t) => t.n_slices(),
            SliceSet::Dense(s) => s.len(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            SliceSet::Sparse(t) => t.n_cols(),
            SliceSet::Dense(s) => s.first().map_or(0, |m| m.ncols()),
        }
    }

    pub fn rows(&self, k: usize) -> usize {
        match self {
            SliceSet::Sparse(t) => t.slice(k).n_rows,
            SliceSet::Dense(s) => s[k].nrows(),
        }
    }

    pub fn norm_sq(&self, k: usize) -> f64 {
        match self {
            SliceSet::Sparse(t) => t
                .slice(k)
                .entries
                .iter()
                .map(|e| e.value * e.value)
                .sum(),
            SliceSet::Dense(s) => s[k].iter().map(|x| x * x).sum(),
        }
    }

    pub fn total_norm_sq(&self) -> f64 {
        (0..self.n_slices()).map(|k| self.norm_sq(k)).sum()
    }

    /// `X_k · m` for a J-row dense operand.
    pub fn mul_dense(&self, k: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SliceSet::Sparse(t) => {
                let slice = t.slice(k);
                let mut out = DMatrix::zeros(slice.n_rows, m.ncols());
                for e in &slice.entries {
                    for r in 0..m.ncols() {
                        out[(e.row, r)] += e.value * m[(e.col, r)];
                    }
                }
                out
            }
            SliceSet::Dense(s) => &s[k] * m,
        }
    }

    /// Accumulates `X_kᵀ · p` into `acc` (J × R, with p sized I_k × R).
    pub fn add_tr_mul(&self, k: usize, p: &DMatrix<f64>, acc: &mut DMatrix<f64>) {
        match self {
            SliceSet::Sparse(t) => {
                for e in &t.slice(k).entries {
                    for r in 0..p.ncols() {
                        acc[(e.col, r)] += e.value * p[(e.row, r)];
                    }
                }
            }
            SliceSet::Dense(s) => {
                *acc += s[k].tr_mul(p);
            }
        }
    }

    /// `⟨X_k, a · bᵀ⟩` without forming the rank-R product densely
    /// (a: I_k × R, b: J × R).
    pub fn dot_low_rank(&self, k: usize, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        match self {
            SliceSet::Sparse(t) => {
                let mut acc = 0.0;
                for e in &t.slice(k).entries {
                    let mut d = 0.0;
                    for r in 0..a.ncols() {
                        d += a[(e.row, r)] * b[(e.col, r)];
                    }
                    acc += e.value * d;
                }
                acc
            }
            SliceSet::Dense(s) => {
                // ⟨X′, a bᵀ⟩ = ⟨X′ b, a⟩
                (&s[k] * b).dot(a)
            }
        }
    }
}

/// References to the slices and the per-slice orthonormal factors that define
/// `Y_k = Q_kᵀ X_k`.
pub struct ImplicitY<'a> {
    data: SliceSet<'a>,
    q: &'a [DMatrix<f64>],
}

impl<'a> ImplicitY<'a> {
    pub fn new(data: SliceSet<'a>, q: &'a [DMatrix<f64>]) -> Result<Self, MttkrpError> {
        let k = data.n_slices();
        if k == 0 {
            return Err(MttkrpError::Empty);
        }
        if q.len() != k {
            return Err(MttkrpError::ShapeMismatch(format!(
                "{} orthonormal factors for {k} slices",
                q.len()
            )));
        }
        let r = q[0].ncols();
        for (i, qk) in q.iter().enumerate() {
            if qk.ncols() != r {
                return Err(MttkrpError::ShapeMismatch(format!(
                    "Q_{i} has {} columns, expected {r}",
                    qk.ncols()
                )));
            }
            if qk.nrows() != data.rows(i) {
                return Err(MttkrpError::ShapeMismatch(format!(
                    "Q_{i} has {} rows but slice {i} has {}",
                    qk.nrows(),
                    data.rows(i)
                )));
            }
        }
        Ok(Self { data, q })
    }

    pub fn data(&self) -> SliceSet<'a> {
        self.data
    }

    pub fn q(&self) -> &'a [DMatrix<f64>] {
        self.q
    }

    pub fn rank(&self) -> usize {
        self.q[0].ncols()
    }

    /// Materializes `Y_k = Q_kᵀ X_k` densely (R × J). Oracle and debug use.
    pub fn dense_slice(&self, k: usize) -> DMatrix<f64> {
        match self.data {
            SliceSet::Sparse(t) => {
                let dense = t.slice(k).to_dense(t.n_cols());
                self.q[k].tr_mul(&dense)
            }
            SliceSet::Dense(s) => self.q[k].tr_mul(&s[k]),
        }
    }
}

fn check_shapes(
    y: &ImplicitY,
    h: &DMatrix<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<(), MttkrpError> {
    let r = y.rank();
    let (k, j) = (y.data.n_slices(), y.data.n_cols());
    if h.nrows() != r || h.ncols() != r {
        return Err(MttkrpError::ShapeMismatch(format!(
            "H is {}x{}, expected {r}x{r}",
            h.nrows(),
            h.ncols()
        )));
    }
    if v.nrows() != j || v.ncols() != r {
        return Err(MttkrpError::ShapeMismatch(format!(
            "V is {}x{}, expected {j}x{r}",
            v.nrows(),
            v.ncols()
        )));
    }
    if w.nrows() != k || w.ncols() != r {
        return Err(MttkrpError::ShapeMismatch(format!(
            "W is {}x{}, expected {k}x{r}",
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(())
}

/// Per-slice contribution of mode H: `Q_kᵀ (X_k V) diag(W(k,:))`.
fn mode_h_contrib(y: &ImplicitY, w: &DMatrix<f64>, v: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let xv = y.data.mul_dense(k, v);
    let mut m = y.q[k].tr_mul(&xv);
    for r in 0..m.ncols() {
        m.column_mut(r).scale_mut(w[(k, r)]);
    }
    m
}

/// Computes `F = Y_(n) (⊙_{i≠n} Z_i)` slice by slice, exactly matching the
/// materialized computation up to floating-point accumulation.
pub fn slicewise_mttkrp(
    y: &ImplicitY,
    mode: Mode,
    h: &DMatrix<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    deterministic: bool,
) -> Result<DMatrix<f64>, MttkrpError> {
    check_shapes(y, h, v, w)?;
    let r = y.rank();
    let (n_slices, j) = (y.data.n_slices(), y.data.n_cols());

    let f = match mode {
        // F(:, :) = Σ_k Q_kᵀ (X_k V) diag(W(k,:))
        Mode::H => {
            let zero = || DMatrix::zeros(r, r);
            if deterministic {
                (0..n_slices).fold(zero(), |acc, k| acc + mode_h_contrib(y, w, v, k))
            } else {
                (0..n_slices)
                    .into_par_iter()
                    .fold(zero, |acc, k| acc + mode_h_contrib(y, w, v, k))
                    .reduce(zero, |a, b| a + b)
            }
        }
        // F = Σ_k X_kᵀ (Q_k H) diag(W(k,:))
        Mode::V => {
            let contrib = |acc: &mut DMatrix<f64>, k: usize| {
                let mut p = &y.q[k] * h;
                for r_i in 0..r {
                    p.column_mut(r_i).scale_mut(w[(k, r_i)]);
                }
                y.data.add_tr_mul(k, &p, acc);
            };
            let zero = || DMatrix::zeros(j, r);
            if deterministic {
                let mut acc = zero();
                for k in 0..n_slices {
                    contrib(&mut acc, k);
                }
                acc
            } else {
                (0..n_slices)
                    .into_par_iter()
                    .fold(zero, |mut acc, k| {
                        contrib(&mut acc, k);
                        acc
                    })
                    .reduce(zero, |a, b| a + b)
            }
        }
        // F(k, r) = H(:,r)ᵀ (Q_kᵀ (X_k V(:,r))); rows are per-slice independent
        Mode::W => {
            let row = |k: usize| {
                let xv = y.data.mul_dense(k, v);
                let m = y.q[k].tr_mul(&xv);
                (0..r)
                    .map(|c| h.column(c).dot(&m.column(c)))
                    .collect::<Vec<f64>>()
            };
            let rows: Vec<Vec<f64>> = if deterministic {
                (0..n_slices).map(row).collect()
            } else {
                (0..n_slices).into_par_iter().map(row).collect()
            };
            DMatrix::from_fn(n_slices, r, |k, c| rows[k][c])
        }
    };

    if f.iter().all(|x| x.is_finite()) {
        Ok(f)
    } else {
        Err(MttkrpError::NonFiniteAccumulation(mode))
    }
}
