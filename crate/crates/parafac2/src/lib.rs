//! Constrained PARAFAC2 factorization of irregular sparse tensors.
//!
//! An irregular tensor is a collection of K sparse matrices `X_k` (I_k × J)
//! that share their column dimension but not their row counts. The solver
//! fits the PARAFAC2 model `X_k ≈ U_k S_k Vᵀ` with `U_k = Q_k H` (orthonormal
//! `Q_k`, shared `H`) by alternating an exact Procrustes update for the
//! `Q_k` with inexact ADMM updates for `H`, the slice weights `W`
//! (row k is `diag(S_k)`) and `V`.
//!
//! Constraints are plugged in per factor through proximal operators:
//! non-negativity, hard (ℓ0) and soft (ℓ1) thresholding. Temporal smoothness
//! on the `U_k` is available through per-slice spline bases; slices are then
//! projected onto the basis column space and the fit runs on the projected
//! problem.
//!
//! ```
//! use parafac2::tensor::{generate_synthetic, SynthConfig};
//! use parafac2::{fit, ConstraintSpec, FitOptions};
//!
//! let (tensor, _truth) = generate_synthetic(&SynthConfig::default()).unwrap();
//! let opts = FitOptions {
//!     rank: 4,
//!     max_outer_iters: 40,
//!     seed: 7,
//!     ..FitOptions::default()
//! };
//! let (model, trace) = fit(&tensor, &ConstraintSpec::non_negative(), &opts).unwrap();
//! assert!(trace.final_fit().unwrap() > 0.9);
//! assert!(model.v.iter().all(|&x| x >= 0.0));
//! ```
//!
//! Modules:
//! - [`tensor`]: the irregular tensor data model, text-format I/O and a
//!   synthetic ground-truth generator.
//! - [`linalg`]: dense kernels (thin SVD, polar factor, SPD solves,
//!   Gram/Hadamard products, a naive Khatri-Rao used as a test oracle).
//! - [`mttkrp`]: slice-wise matricized-tensor-times-Khatri-Rao-product for
//!   the implicit tensor with slices `Q_kᵀ X_k`.
//! - [`prox`]: element-wise proximal operators.
//! - [`spline`]: gap-aware spline bases and slice projection.
//! - [`solver`]: the alternating fit loop, convergence logic and metrics.

pub mod linalg;
pub mod mttkrp;
pub mod prox;
pub mod solver;
pub mod spline;
pub mod tensor;

pub use prox::ConstraintKind;
pub use solver::{
    compute_fit, compute_sparsity, fit, ConstraintSpec, FitOptions, FitTrace, Parafac2Model,
    SmoothnessSpec, SolverError,
};
pub use tensor::{IrregularTensor, SparseSlice, SynthConfig, TensorError};
