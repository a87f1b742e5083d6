//! Shared test oracles. Everything here is deliberately naive and
//! independent of the implementation paths it checks.
#![allow(dead_code)]

use nalgebra::DMatrix;
use parafac2::linalg::naive_khatri_rao;
use parafac2::mttkrp::{ImplicitY, Mode};
use parafac2::prox::ConstraintKind;
use parafac2::tensor::{Entry, IrregularTensor, SparseSlice};
use rand::prelude::*;

/// Plain triple-loop matrix product; no BLAS kernels involved.
pub fn matmul_naive(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut acc = 0.0;
            for k in 0..a.ncols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Materialized MTTKRP oracle: stacks the dense `Y_k = Q_kᵀ X_k` into the
/// mode-n matricization of the R × J × K tensor and multiplies by the naive
/// Khatri-Rao product.
pub fn naive_mttkrp(
    y: &ImplicitY,
    mode: Mode,
    h: &DMatrix<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> DMatrix<f64> {
    let k_total = w.nrows();
    let r = h.nrows();
    let j = v.nrows();
    let slices: Vec<DMatrix<f64>> = (0..k_total).map(|k| y.dense_slice(k)).collect();

    let (mat, kr) = match mode {
        Mode::H => {
            // Y_(1): R × (J·K), column j + J·k
            let mut m = DMatrix::zeros(r, j * k_total);
            for (k, yk) in slices.iter().enumerate() {
                for col in 0..j {
                    for row in 0..r {
                        m[(row, col + j * k)] = yk[(row, col)];
                    }
                }
            }
            (m, naive_khatri_rao(w, v).unwrap())
        }
        Mode::V => {
            // Y_(2): J × (R·K), column r + R·k
            let mut m = DMatrix::zeros(j, r * k_total);
            for (k, yk) in slices.iter().enumerate() {
                for col in 0..j {
                    for row in 0..r {
                        m[(col, row + r * k)] = yk[(row, col)];
                    }
                }
            }
            (m, naive_khatri_rao(w, h).unwrap())
        }
        Mode::W => {
            // Y_(3): K × (R·J), column r + R·j
            let mut m = DMatrix::zeros(k_total, r * j);
            for (k, yk) in slices.iter().enumerate() {
                for col in 0..j {
                    for row in 0..r {
                        m[(k, row + r * col)] = yk[(row, col)];
                    }
                }
            }
            (m, naive_khatri_rao(v, h).unwrap())
        }
    };
    matmul_naive(&mat, &kr)
}

/// The exact grid used by the proximal-operator oracle: 1e6 + 1 points over
/// [-10, 10], step 2e-5, with 0 exactly on the grid.
pub const PROX_GRID_STEP: f64 = 2e-5;

/// Brute-force scalar proximal oracle: minimizes `c(z) + (ρ/2)(z − x)²` over
/// the dense grid. `c` matches the constraint menu: 0 for none, +∞ off the
/// non-negative half-line, (ρμ/2)·1[z ≠ 0] for l0 (so the keep/kill
/// threshold sits at x² = μ), λ|z| for l1.
pub fn grid_prox_scalar(kind: &ConstraintKind, x: f64, rho: f64) -> f64 {
    let mut best_z = f64::NAN;
    let mut best_f = f64::INFINITY;
    let n = 1_000_000usize;
    for i in 0..=n {
        let z = -10.0 + i as f64 * PROX_GRID_STEP;
        let cost = match *kind {
            ConstraintKind::None => 0.0,
            ConstraintKind::NonNegative => {
                if z < 0.0 {
                    continue;
                }
                0.0
            }
            ConstraintKind::L0 { mu } => {
                if z == 0.0 {
                    0.0
                } else {
                    rho * mu / 2.0
                }
            }
            ConstraintKind::L1 { lambda } => lambda * z.abs(),
        };
        let f = cost + rho / 2.0 * (z - x) * (z - x);
        if f < best_f {
            best_f = f;
            best_z = z;
        }
    }
    best_z
}

pub fn random_matrix(rng: &mut impl Rng, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_orthonormal(rng: &mut impl Rng, m: usize, n: usize) -> DMatrix<f64> {
    parafac2::linalg::orthonormal_polar(&random_matrix(rng, m, n))
        .unwrap()
        .q
}

/// Random sparse tensor with the given per-slice row range and density.
pub fn random_sparse_tensor(
    rng: &mut impl Rng,
    n_slices: usize,
    n_cols: usize,
    rows_min: usize,
    rows_max: usize,
    density: f64,
) -> IrregularTensor {
    let slices = (0..n_slices)
        .map(|_| {
            let n_rows = rng.random_range(rows_min..=rows_max);
            let mut entries = Vec::new();
            for row in 0..n_rows {
                for col in 0..n_cols {
                    if rng.random::<f64>() < density {
                        entries.push(Entry {
                            row,
                            col,
                            value: rng.random_range(-2.0..2.0),
                        });
                    }
                }
            }
            SparseSlice {
                n_rows,
                entries,
                visit_days: None,
            }
        })
        .collect();
    IrregularTensor::new(n_cols, slices).unwrap()
}
