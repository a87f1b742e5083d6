//! Dense linear-algebra kernels the solver composes.
//!
//! All inputs are small: tall I_k × R Procrustes targets, I_k × l spline
//! bases, or R × R Gram matrices. Everything is a pure function, safe to call
//! concurrently.
//!
//! Dense matrices are `nalgebra::DMatrix`, which is column-major; all index
//! arithmetic in this crate (Khatri-Rao rows, matricization columns) is
//! defined against that convention.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Singular values below `RANK_TOL * σ_max` count as zero.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("{0} contains a non-finite entry")]
    NonFinite(&'static str),
    #[error("target rank {rank} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange {
        rank: usize,
        rows: usize,
        cols: usize,
    },
    #[error("polar factor needs rows >= cols, got {rows}x{cols}")]
    NotTall { rows: usize, cols: usize },
    #[error("matrix is not positive definite: leading minor of order {order} is not positive")]
    NotPositiveDefinite { order: usize },
    #[error("column count mismatch: {left} vs {right}")]
    ColumnMismatch { left: usize, right: usize },
    #[error("empty factor list")]
    EmptyFactorList,
    #[error("right-hand side has {got} rows, expected {expected}")]
    RhsMismatch { got: usize, expected: usize },
}

/// Rank-r singular value decomposition `A ≈ left · diag(σ) · rightᵀ`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// m × r with orthonormal columns.
    pub left: DMatrix<f64>,
    /// The r largest singular values, non-increasing.
    pub singular_values: DVector<f64>,
    /// n × r with orthonormal columns.
    pub right: DMatrix<f64>,
}

impl ThinSvd {
    /// `left · diag(σ) · rightᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.left.clone();
        for (c, &s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(c).scale_mut(s);
        }
        scaled * self.right.transpose()
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix, reusable across solves.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Solves `(L Lᵀ) X = rhs` column by column.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        let n = self.lower.nrows();
        if rhs.nrows() != n {
            return Err(LinalgError::RhsMismatch {
                got: rhs.nrows(),
                expected: n,
            });
        }
        let mut x = rhs.clone();
        for mut col in x.column_iter_mut() {
            // forward substitution L y = b
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= self.lower[(i, k)] * col[k];
                }
                col[i] = s / self.lower[(i, i)];
            }
            // back substitution Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in i + 1..n {
                    s -= self.lower[(k, i)] * col[k];
                }
                col[i] = s / self.lower[(i, i)];
            }
        }
        Ok(x)
    }
}

fn ensure_finite(name: &'static str, m: &DMatrix<f64>) -> Result<(), LinalgError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite(name))
    }
}

/// Full-width SVD with singular values sorted in non-increasing order.
fn svd_sorted(m: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let k = m.nrows().min(m.ncols());
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd left vectors");
    let vt = svd.v_t.expect("svd right vectors");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite singular values"));

    let mut left = DMatrix::zeros(u.nrows(), k);
    let mut right = DMatrix::zeros(vt.ncols(), k);
    let mut vals = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        left.set_column(dst, &u.column(src));
        right.set_column(dst, &vt.row(src).transpose());
        vals[dst] = s[src];
    }
    (left, vals, right)
}

/// Thin SVD truncated to rank `r`.
///
/// Tall inputs (rows > cols) go through a Householder QR first and the SVD is
/// taken on the small triangular factor, so the cost is O(m n² + n³). This
/// keeps the factors orthonormal to machine precision at any conditioning, so
/// no condition-number fallback is needed.
pub fn thin_svd(a: &DMatrix<f64>, r: usize) -> Result<ThinSvd, LinalgError> {
    ensure_finite("thin_svd input", a)?;
    let (m, n) = a.shape();
    if r == 0 || r > m.min(n) {
        return Err(LinalgError::RankOutOfRange {
            rank: r,
            rows: m,
            cols: n,
        });
    }

    let (left, vals, right) = if m > n {
        let qr = a.clone().qr();
        let (q, rr) = (qr.q(), qr.r());
        let (ul, s, v) = svd_sorted(rr);
        (q * ul, s, v)
    } else {
        svd_sorted(a.clone())
    };

    Ok(ThinSvd {
        left: left.columns(0, r).into_owned(),
        singular_values: vals.rows(0, r).into_owned(),
        right: right.columns(0, r).into_owned(),
    })
}

/// Orthonormal polar factor of a tall matrix.
#[derive(Debug, Clone)]
pub struct PolarFactor {
    /// m × r with orthonormal columns; maximizes `trace(Aᵀ Q)`.
    pub q: DMatrix<f64>,
    /// Set when the smallest singular value fell below `RANK_TOL * σ_max`.
    /// The deficient directions are filled with an arbitrary orthonormal
    /// completion, which keeps iterations alive through transient
    /// degeneracies.
    pub rank_deficient: bool,
}

/// Solves the orthogonal Procrustes problem `min ‖A − Q‖_F` over matrices
/// with orthonormal columns: `Q = left · rightᵀ` from the thin SVD of `A`.
pub fn orthonormal_polar(a: &DMatrix<f64>) -> Result<PolarFactor, LinalgError> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::NotTall { rows: m, cols: n });
    }
    let svd = thin_svd(a, n)?;
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[n - 1];
    Ok(PolarFactor {
        q: &svd.left * svd.right.transpose(),
        rank_deficient: smin <= RANK_TOL * smax || smax == 0.0,
    })
}

/// Cholesky factorization of `G + rho·I`.
///
/// `G` must be symmetric PSD (only the lower triangle is read). Failure
/// reports the first non-positive leading minor.
pub fn spd_factor(g: &DMatrix<f64>, rho: f64) -> Result<CholeskyFactor, LinalgError> {
    ensure_finite("spd_factor input", g)?;
    let n = g.nrows();
    debug_assert_eq!(n, g.ncols(), "Gram matrix must be square");

    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)] + rho;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { order: j + 1 });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

/// Solves `(G + rho·I) X = rhs` through one Cholesky factorization.
///
/// Callers that solve repeatedly against the same matrix should hold on to
/// [`spd_factor`] instead.
pub fn spd_solve(
    g: &DMatrix<f64>,
    rho: f64,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    spd_factor(g, rho)?.solve(rhs)
}

/// Hadamard product of the Gram matrices `Z_iᵀ Z_i` over all `i != skip`.
///
/// The empty product is the all-ones matrix.
pub fn gram_hadamard(factors: &[&DMatrix<f64>], skip: usize) -> Result<DMatrix<f64>, LinalgError> {
    let first = factors.first().ok_or(LinalgError::EmptyFactorList)?;
    let r = first.ncols();
    let mut g = DMatrix::from_element(r, r, 1.0);
    for (i, z) in factors.iter().enumerate() {
        if i == skip {
            continue;
        }
        if z.ncols() != r {
            return Err(LinalgError::ColumnMismatch {
                left: r,
                right: z.ncols(),
            });
        }
        let gram = z.tr_mul(z);
        g.component_mul_assign(&gram);
    }
    Ok(g)
}

/// Column-wise Kronecker product: column r of the result is
/// `A(:,r) ⊗ B(:,r)`, laid out with B's row index fastest.
///
/// Quadratic in output size; it exists as an oracle for the slice-wise
/// MTTKRP, not as a production kernel.
pub fn naive_khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    if a.ncols() != b.ncols() {
        return Err(LinalgError::ColumnMismatch {
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    let (m, n, r) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = DMatrix::zeros(m * n, r);
    for c in 0..r {
        for i in 0..m {
            for j in 0..n {
                out[(i * n + j, c)] = a[(i, c)] * b[(j, c)];
            }
        }
    }
    Ok(out)
}
