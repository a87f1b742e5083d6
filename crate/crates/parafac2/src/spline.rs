//! Gap-aware spline bases for the temporal smoothness constraint.
//!
//! Each slice gets a basis matrix `M_k` (I_k × l) whose row i evaluates l
//! locally-supported, non-negative piecewise polynomials at visit i. In
//! gap-aware mode the evaluation points are the actual visit days, so uneven
//! gaps stretch the basis support; otherwise the points are the visit
//! indices.
//!
//! The smoothness-constrained fit never touches `M_k` directly: slices are
//! projected through the orthonormal factor `C_k` of `M_k`'s SVD, which keeps
//! the fitted `U_k = C_k Q_k H` inside the basis column space.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{thin_svd, LinalgError};
use crate::tensor::SparseSlice;

/// Singular values of `M_k` below this fraction of σ_max are truncated;
/// rank-deficient bases would otherwise poison the Procrustes step.
pub const BASIS_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("slice has no rows")]
    EmptyVisits,
    #[error("{n_basis} basis functions need at least degree + 1 = {min}")]
    BasisBelowDegree { n_basis: usize, min: usize },
    #[error("{n_basis} basis functions exceed the {rows} rows of the slice")]
    TooManyBasisFunctions { n_basis: usize, rows: usize },
    #[error("visit days are all equal; the basis domain is degenerate")]
    DegenerateDays,
    #[error("visit days must be non-decreasing")]
    NonMonotoneDays,
    #[error("basis matrix has {basis_rows} rows but the slice has {slice_rows}")]
    ShapeMismatch {
        basis_rows: usize,
        slice_rows: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A knot vector with its degree: l = knots.len() − degree − 1 basis
/// functions, each non-negative with support in [β_i, β_{i+d+1}].
#[derive(Debug, Clone)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
    n_basis: usize,
}

impl SplineBasis {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self, SplineError> {
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(SplineError::NonMonotoneDays);
        }
        let n_basis = knots
            .len()
            .checked_sub(degree + 1)
            .filter(|&l| l >= 1)
            .ok_or(SplineError::BasisBelowDegree {
                n_basis: 0,
                min: degree + 1,
            })?;
        Ok(Self {
            knots,
            degree,
            n_basis,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// Basis function i at its native degree.
    pub fn eval(&self, i: usize, t: f64) -> f64 {
        eval_basis(self, i, self.degree, t)
    }
}

/// Evaluates basis function i of degree d by the knot recursion
///
/// ```text
/// m_{i,d}(t) = (t − β_i)/(β_{i+d} − β_i) · m_{i,d−1}(t)
///            + (β_{i+d+1} − t)/(β_{i+d+1} − β_{i+1}) · m_{i+1,d−1}(t)
/// ```
///
/// with the degree-0 base case an indicator of [β_i, β_{i+1}). Any term with
/// a zero denominator contributes zero (repeated-knot handling), and the
/// global right boundary belongs to the last interval so the final row of a
/// basis matrix is not all zero.
pub fn eval_basis(basis: &SplineBasis, i: usize, d: usize, t: f64) -> f64 {
    let knots = &basis.knots;
    assert!(
        i + d + 1 < knots.len(),
        "basis index {i} at degree {d} out of range for {} knots",
        knots.len()
    );
    if d == 0 {
        let right_end = *knots.last().expect("non-empty knot vector");
        let closed_right = t == right_end && knots[i + 1] == right_end && knots[i] < knots[i + 1];
        return if (knots[i] <= t && t < knots[i + 1]) || closed_right {
            1.0
        } else {
            0.0
        };
    }

    let mut acc = 0.0;
    let den_left = knots[i + d] - knots[i];
    if den_left > 0.0 {
        acc += (t - knots[i]) / den_left * eval_basis(basis, i, d - 1, t);
    }
    let den_right = knots[i + d + 1] - knots[i + 1];
    if den_right > 0.0 {
        acc += (knots[i + d + 1] - t) / den_right * eval_basis(basis, i + 1, d - 1, t);
    }
    acc
}

/// Per-slice basis matrix with the orthonormal projector from its SVD.
#[derive(Debug, Clone)]
pub struct SliceBasisMatrix {
    /// M_k, I_k × l.
    pub matrix: DMatrix<f64>,
    /// C_k: left singular vectors of M_k above the rank cutoff, I_k × rank.
    pub left_orthonormal: DMatrix<f64>,
    /// Numerical rank of M_k.
    pub rank: usize,
}

/// Builds the knot vector and basis matrix for one slice.
///
/// The knot vector repeats the boundary knot degree + 1 times at each end and
/// spaces the l − degree − 1 interior knots evenly over the day range
/// (gap-aware) or the index range. Row i of `M_k` evaluates every basis
/// function at `visit_days[i]` (gap-aware) or at i.
pub fn build_basis(
    visit_days: &[u32],
    n_basis: usize,
    degree: usize,
    gap_aware: bool,
) -> Result<(SplineBasis, SliceBasisMatrix), SplineError> {
    let n_rows = visit_days.len();
    if n_rows == 0 {
        return Err(SplineError::EmptyVisits);
    }
    if n_basis < degree + 1 {
        return Err(SplineError::BasisBelowDegree {
            n_basis,
            min: degree + 1,
        });
    }
    if n_basis > n_rows {
        return Err(SplineError::TooManyBasisFunctions {
            n_basis,
            rows: n_rows,
        });
    }
    if visit_days.windows(2).any(|w| w[1] < w[0]) {
        return Err(SplineError::NonMonotoneDays);
    }

    let points: Vec<f64> = if gap_aware {
        visit_days.iter().map(|&t| t as f64).collect()
    } else {
        (0..n_rows).map(|i| i as f64).collect()
    };
    let (a, b) = (points[0], points[n_rows - 1]);
    if a == b {
        return Err(SplineError::DegenerateDays);
    }

    let n_interior = n_basis - degree - 1;
    let mut knots = Vec::with_capacity(n_basis + degree + 1);
    knots.extend(std::iter::repeat_n(a, degree + 1));
    for i in 1..=n_interior {
        knots.push(a + (b - a) * i as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(b, degree + 1));
    let basis = SplineBasis::new(knots, degree)?;

    let matrix = DMatrix::from_fn(n_rows, n_basis, |i, j| basis.eval(j, points[i]));

    let svd = thin_svd(&matrix, n_basis.min(n_rows))?;
    let smax = svd.singular_values[0];
    let rank = svd
        .singular_values
        .iter()
        .take_while(|&&s| s > BASIS_RANK_TOL * smax)
        .count()
        .max(1);
    let left_orthonormal = svd.left.columns(0, rank).into_owned();

    Ok((
        basis,
        SliceBasisMatrix {
            matrix,
            left_orthonormal,
            rank,
        },
    ))
}

/// Projects a sparse slice onto the basis column space: `X′_k = C_kᵀ X_k`,
/// dense rank × J, in O(nnz · rank).
pub fn project_slice(
    sbm: &SliceBasisMatrix,
    slice: &SparseSlice,
    n_cols: usize,
) -> Result<DMatrix<f64>, SplineError> {
    let c = &sbm.left_orthonormal;
    if c.nrows() != slice.n_rows {
        return Err(SplineError::ShapeMismatch {
            basis_rows: c.nrows(),
            slice_rows: slice.n_rows,
        });
    }
    let mut out = DMatrix::zeros(sbm.rank, n_cols);
    for e in &slice.entries {
        for r in 0..sbm.rank {
            out[(r, e.col)] += e.value * c[(e.row, r)];
        }
    }
    Ok(out)
}
