//! The alternating PARAFAC2 fit: exact Procrustes updates for the
//! per-slice orthonormal factors, inexact ADMM updates for `H`, `W`, `V`.
//!
//! One outer iteration:
//! 1. `Q_k ← polar(X_k V diag(W(k,:)) Hᵀ)` for every slice (exact minimizer);
//! 2. for each mode in the order H, W, V: build the Gram/Hadamard matrix `G`,
//!    set `ρ = trace(G)/R`, factor `G + ρI` once, compute the slice-wise
//!    MTTKRP `F` once, then run the scaled ADMM inner loop with the mode's
//!    proximal operator. `F` and the Cholesky factor do not depend on the
//!    inner iterates, so both are cached across the inner loop.
//!
//! The auxiliary (constrained) variable is the factor of record, so hard
//! constraints hold exactly on the returned model. Auxiliary and dual
//! variables persist across outer iterations per mode.
//!
//! With smoothness enabled every slice is replaced by its projection
//! `X′_k = C_kᵀ X_k` for the whole fit and `U_k = C_k Q_k H` at output; the
//! discarded orthogonal-complement energy `Σ_k (‖X_k‖² − ‖X′_k‖²)` is a
//! constant of the data and is added back when reporting FIT.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{gram_hadamard, spd_factor, LinalgError};
use crate::mttkrp::{slicewise_mttkrp, ImplicitY, Mode, MttkrpError, SliceSet};
use crate::prox::{prox_apply, ConstraintKind, ProxError};
use crate::spline::{build_basis, project_slice, SplineError};
use crate::tensor::IrregularTensor;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("tensor has no slices")]
    EmptyTensor,
    #[error("tensor has zero Frobenius norm; FIT is undefined")]
    ZeroNormTensor,
    #[error("rank {rank} exceeds the row count of {count} slice(s): {details}")]
    SliceTooSmall {
        rank: usize,
        count: usize,
        details: String,
    },
    #[error("gap-aware smoothness requires visit-day timestamps on every slice")]
    MissingVisitDays,
    #[error("{n_basis} basis functions exceed the rows of {count} slice(s): {details}")]
    SmoothnessBasisTooLarge {
        n_basis: usize,
        count: usize,
        details: String,
    },
    #[error("projected rank below target rank {rank} for {count} slice(s): {details}")]
    ProjectedRankTooSmall {
        rank: usize,
        count: usize,
        details: String,
    },
    #[error("ADMM residual diverged to {residual:.3e} in mode {mode:?}")]
    AdmmDiverged { mode: Mode, residual: f64 },
    #[error("FIT became non-finite at outer iteration {iteration}")]
    NonFiniteFit { iteration: usize },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("slice index {index} out of range ({count} slices)")]
    SliceIndexOutOfRange { index: usize, count: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Mttkrp(#[from] MttkrpError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Smoothness configuration for the `U_k` factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothnessSpec {
    /// Number of basis functions l (per slice, l <= I_k required).
    pub n_basis: usize,
    /// Spline degree; cubic by default.
    pub degree: usize,
    /// Evaluate bases on visit days instead of visit indices.
    pub gap_aware: bool,
}

impl SmoothnessSpec {
    pub fn new(n_basis: usize) -> Self {
        Self {
            n_basis,
            degree: 3,
            gap_aware: false,
        }
    }
}

/// Per-factor constraint selection plus optional smoothness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSpec {
    pub on_h: ConstraintKind,
    pub on_w: ConstraintKind,
    pub on_v: ConstraintKind,
    pub smoothness: Option<SmoothnessSpec>,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            on_h: ConstraintKind::None,
            on_w: ConstraintKind::None,
            on_v: ConstraintKind::None,
            smoothness: None,
        }
    }
}

impl ConstraintSpec {
    pub fn non_negative() -> Self {
        Self {
            on_h: ConstraintKind::NonNegative,
            on_w: ConstraintKind::NonNegative,
            on_v: ConstraintKind::NonNegative,
            smoothness: None,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        for kind in [&self.on_h, &self.on_w, &self.on_v] {
            kind.validate()?;
        }
        if let Some(sm) = &self.smoothness {
            if sm.n_basis < sm.degree + 1 {
                return Err(SolverError::InvalidOptions(format!(
                    "smoothness needs n_basis >= degree + 1, got l={} d={}",
                    sm.n_basis, sm.degree
                )));
            }
        }
        Ok(())
    }
}

/// Solver settings. Defaults follow the module conventions: bounded inner
/// work (10 ADMM iterations at 1e-3) under an outer relative-FIT stop.
#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub rank: usize,
    pub max_outer_iters: usize,
    /// Relative FIT change below which the outer loop stops.
    pub outer_tol: f64,
    pub admm_max_iters: usize,
    /// Stop the inner loop when max(primal, dual) relative residual drops
    /// below this.
    pub admm_tol: f64,
    pub seed: u64,
    /// 0 = use the global thread pool.
    pub threads: usize,
    /// Serialize all reductions and zero out wall-time fields so repeated
    /// runs are byte-identical.
    pub deterministic: bool,
    /// Debug mode: recompute the MTTKRP and the Cholesky factor on every
    /// inner iteration instead of using the cached values.
    pub recompute_inner: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rank: 4,
            max_outer_iters: 100,
            outer_tol: 1e-4,
            admm_max_iters: 10,
            admm_tol: 1e-3,
            seed: 0,
            threads: 0,
            deterministic: false,
            recompute_inner: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.rank == 0 {
            return Err(SolverError::InvalidOptions("rank must be >= 1".into()));
        }
        if self.max_outer_iters == 0 || self.admm_max_iters == 0 {
            return Err(SolverError::InvalidOptions(
                "iteration caps must be >= 1".into(),
            ));
        }
        let bad = |t: f64| t.is_nan() || t <= 0.0;
        if bad(self.outer_tol) || bad(self.admm_tol) {
            return Err(SolverError::InvalidOptions(
                "tolerances must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// The fitted model: `X_k ≈ U_k S_k Vᵀ` with `U_k = Q_k H`
/// (or `C_k Q_k H` in smooth mode) and `S_k = diag(W(k,:))`.
#[derive(Debug, Clone)]
pub struct Parafac2Model {
    /// Orthonormal-column factors, one per slice (I_k × R, or rank_k × R in
    /// smooth mode).
    pub q: Vec<DMatrix<f64>>,
    pub h: DMatrix<f64>,
    /// K × R; row k is diag(S_k).
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// C_k projectors for reconstructing U_k in smooth mode.
    pub smooth_projectors: Option<Vec<DMatrix<f64>>>,
}

impl Parafac2Model {
    pub fn rank(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_slices(&self) -> usize {
        self.q.len()
    }

    /// `U_k = Q_k H`, or `C_k Q_k H` in smooth mode.
    pub fn u(&self, k: usize) -> DMatrix<f64> {
        let qh = &self.q[k] * &self.h;
        match &self.smooth_projectors {
            Some(c) => &c[k] * qh,
            None => qh,
        }
    }

    /// Dense `U_k diag(W(k,:)) Vᵀ`.
    pub fn reconstruct_slice(&self, k: usize) -> Result<DMatrix<f64>, SolverError> {
        if k >= self.q.len() {
            return Err(SolverError::SliceIndexOutOfRange {
                index: k,
                count: self.q.len(),
            });
        }
        let mut p = self.u(k);
        for r in 0..self.rank() {
            p.column_mut(r).scale_mut(self.w[(k, r)]);
        }
        Ok(p * self.v.transpose())
    }
}

/// One mode's ADMM carry-over: auxiliary factor, dual variable, step size.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub aux: DMatrix<f64>,
    pub dual: DMatrix<f64>,
    pub rho: f64,
}

impl AdmmState {
    pub fn empty() -> Self {
        Self {
            aux: DMatrix::zeros(0, 0),
            dual: DMatrix::zeros(0, 0),
            rho: 0.0,
        }
    }

    fn ensure_shape(&mut self, rows: usize, cols: usize) {
        if self.aux.shape() != (rows, cols) {
            self.aux = DMatrix::zeros(rows, cols);
            self.dual = DMatrix::zeros(rows, cols);
        }
    }
}

/// Inner-solve settings, derived from [`FitOptions`].
#[derive(Debug, Clone, Copy)]
pub struct AdmmOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub recompute_inner: bool,
    pub deterministic: bool,
}

/// Result of one mode update.
#[derive(Debug)]
pub struct AdmmOutcome {
    /// The constrained factor of record (the auxiliary variable).
    pub factor: DMatrix<f64>,
    pub inner_iters: usize,
    /// Final max(primal, dual) relative residual.
    pub residual: f64,
    /// Final relative primal residual `‖Z̄ − Z‖/max(‖Z̄‖, ‖Z‖)`, the
    /// feasibility gap between the constrained and unconstrained copies.
    pub primal_residual: f64,
}

/// Per-outer-iteration record.
///
/// `inner_iters` and `residuals` are in update order H, W, V.
#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub fit: f64,
    pub seconds: f64,
    pub inner_iters: [usize; 3],
    pub residuals: [f64; 3],
    pub primal_residuals: [f64; 3],
    pub rank_warnings: usize,
    pub max_q_ortho_error: f64,
    pub max_crossprod_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitTrace {
    pub iterations: Vec<IterRecord>,
    pub converged: bool,
    pub total_seconds: f64,
}

impl FitTrace {
    pub fn final_fit(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.fit)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serialization");
        s.push('\n');
        s
    }
}

fn itemize(offenders: &[(usize, usize)], label: &str) -> String {
    offenders
        .iter()
        .map(|(k, n)| format!("k={k} ({label}={n})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Solves the per-slice orthogonal Procrustes problems: for every k,
/// `A_k = (X_k V) diag(W(k,:)) Hᵀ` (sparse-first order) and
/// `Q_k = polar(A_k)`. Returns the factors and the count of rank-deficiency
/// warnings. The caller wraps the result in an [`ImplicitY`].
pub fn update_orthogonal_factors(
    data: SliceSet,
    h: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    deterministic: bool,
) -> Result<(Vec<DMatrix<f64>>, usize), SolverError> {
    let r = h.nrows();
    let one = |k: usize| -> Result<(DMatrix<f64>, bool), SolverError> {
        let mut xv = data.mul_dense(k, v);
        for c in 0..r {
            xv.column_mut(c).scale_mut(w[(k, c)]);
        }
        let a = xv * h.transpose();
        let polar = crate::linalg::orthonormal_polar(&a)?;
        Ok((polar.q, polar.rank_deficient))
    };
    let results: Vec<Result<(DMatrix<f64>, bool), SolverError>> = if deterministic {
        (0..data.n_slices()).map(one).collect()
    } else {
        (0..data.n_slices()).into_par_iter().map(one).collect()
    };
    let mut q = Vec::with_capacity(results.len());
    let mut warnings = 0;
    for res in results {
        let (qk, deficient) = res?;
        if deficient {
            warnings += 1;
        }
        q.push(qk);
    }
    Ok((q, warnings))
}

/// One AO-ADMM mode update.
///
/// Builds `G`, `ρ = trace(G)/R`, the Cholesky factor of `G + ρI` and the
/// MTTKRP `F` once, then iterates
///
/// ```text
/// Z  ← (G + ρI)⁻¹ (F + ρ(Z̄ + D))ᵀ   (transposed back to factor shape)
/// Z̄  ← prox(Z − D, ρ)
/// D  ← D + Z̄ − Z
/// ```
///
/// until `max(‖Z̄ − Z‖/max(‖Z̄‖, ‖Z‖), ρ‖Z̄ − Z̄_prev‖/‖D‖) < tol` or the
/// iteration cap.
#[allow(clippy::too_many_arguments)]
pub fn admm_update_mode(
    y: &ImplicitY,
    mode: Mode,
    h: &DMatrix<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    constraint: &ConstraintKind,
    state: &mut AdmmState,
    opts: &AdmmOptions,
) -> Result<AdmmOutcome, SolverError> {
    constraint.validate()?;
    let r = y.rank();
    let factors: [&DMatrix<f64>; 3] = [h, v, w];
    let skip = match mode {
        Mode::H => 0,
        Mode::V => 1,
        Mode::W => 2,
    };
    let g = gram_hadamard(&factors, skip)?;
    let rho = g.trace() / r as f64;
    let mut chol = spd_factor(&g, rho)?;
    let mut f = slicewise_mttkrp(y, mode, h, v, w, opts.deterministic)?;

    state.ensure_shape(f.nrows(), r);
    state.rho = rho;

    // Healthy iterates stay around ‖F‖/ρ; a 1e6-fold excess is divergence.
    let blowup = 1e6 * (f.norm() / rho).max(1.0);

    let mut inner_iters = 0;
    let mut residual = f64::INFINITY;
    let mut primal = f64::INFINITY;
    for t in 0..opts.max_iters {
        if opts.recompute_inner && t > 0 {
            f = slicewise_mttkrp(y, mode, h, v, w, opts.deterministic)?;
            chol = spd_factor(&g, rho)?;
        }
        let rhs = (&f + (&state.aux + &state.dual) * rho).transpose();
        let z = chol.solve(&rhs)?.transpose();
        let z_norm = z.norm();
        if !z_norm.is_finite() || z_norm > blowup {
            return Err(SolverError::AdmmDiverged {
                mode,
                residual: z_norm,
            });
        }

        let aux_prev = std::mem::replace(&mut state.aux, DMatrix::zeros(0, 0));
        state.aux = prox_apply(constraint, &(&z - &state.dual), rho)?;
        state.dual += &state.aux - &z;
        inner_iters = t + 1;

        // Denominators are floored by the factor scale: the aux variable is
        // all-zero under total thresholding and the dual is exactly zero
        // whenever the constraint is inactive, so the bare ‖Z̄‖ and ‖D‖
        // denominators both degenerate.
        let aux_norm = state.aux.norm();
        primal = (&state.aux - &z).norm() / aux_norm.max(z_norm).max(1e-30);
        let dual = rho * (&state.aux - &aux_prev).norm() / state.dual.norm().max(aux_norm).max(1e-30);
        residual = primal.max(dual);
        if residual < opts.tol {
            break;
        }
    }

    Ok(AdmmOutcome {
        factor: state.aux.clone(),
        inner_iters,
        residual,
        primal_residual: primal,
    })
}

/// Σ_k ‖X_k − U_k diag(W(k,:)) Vᵀ‖² with `U_k = u_fn(k)`, accumulated
/// slice-wise without densifying: the cross term runs over nonzeros only and
/// the model energy reduces to R × R Gram algebra.
fn residual_numerator<F>(
    data: SliceSet,
    u_fn: F,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    deterministic: bool,
) -> f64
where
    F: Fn(usize) -> DMatrix<f64> + Sync,
{
    let r = v.ncols();
    let gram_v = v.tr_mul(v);
    let per_slice = |k: usize| -> f64 {
        let u = u_fn(k);
        let mut p = u.clone();
        for c in 0..r {
            p.column_mut(c).scale_mut(w[(k, c)]);
        }
        let cross = data.dot_low_rank(k, &p, v);
        let gram_u = u.tr_mul(&u);
        let mut energy = 0.0;
        for a in 0..r {
            for b in 0..r {
                energy += gram_u[(a, b)] * w[(k, a)] * w[(k, b)] * gram_v[(a, b)];
            }
        }
        data.norm_sq(k) - 2.0 * cross + energy
    };
    if deterministic {
        (0..data.n_slices()).map(per_slice).sum()
    } else {
        (0..data.n_slices()).into_par_iter().map(per_slice).sum()
    }
}

/// FIT = 1 − Σ_k ‖X_k − U_k S_k Vᵀ‖² / Σ_k ‖X_k‖², in (−∞, 1].
pub fn compute_fit(model: &Parafac2Model, tensor: &IrregularTensor) -> Result<f64, SolverError> {
    let k_total = tensor.n_slices();
    if model.q.len() != k_total {
        return Err(SolverError::ShapeMismatch(format!(
            "model has {} slices, tensor has {k_total}",
            model.q.len()
        )));
    }
    let r = model.rank();
    if model.v.nrows() != tensor.n_cols() || model.v.ncols() != r {
        return Err(SolverError::ShapeMismatch(format!(
            "V is {}x{}, expected {}x{r}",
            model.v.nrows(),
            model.v.ncols(),
            tensor.n_cols()
        )));
    }
    if model.w.nrows() != k_total || model.w.ncols() != r {
        return Err(SolverError::ShapeMismatch(format!(
            "W is {}x{}, expected {k_total}x{r}",
            model.w.nrows(),
            model.w.ncols()
        )));
    }
    if let Some(c) = &model.smooth_projectors {
        if c.len() != k_total {
            return Err(SolverError::ShapeMismatch(format!(
                "model has {} smooth projectors for {k_total} slices",
                c.len()
            )));
        }
    }
    for k in 0..k_total {
        let u_rows = match &model.smooth_projectors {
            Some(c) => {
                if c[k].ncols() != model.q[k].nrows() {
                    return Err(SolverError::ShapeMismatch(format!(
                        "projector {k} has {} columns but Q_{k} has {} rows",
                        c[k].ncols(),
                        model.q[k].nrows()
                    )));
                }
                c[k].nrows()
            }
            None => model.q[k].nrows(),
        };
        if u_rows != tensor.slice(k).n_rows {
            return Err(SolverError::ShapeMismatch(format!(
                "U_{k} has {u_rows} rows but slice {k} has {}",
                tensor.slice(k).n_rows
            )));
        }
    }

    let denom = tensor.frobenius_norm_sq();
    if denom == 0.0 {
        return Err(SolverError::ZeroNormTensor);
    }
    let num = residual_numerator(
        SliceSet::Sparse(tensor),
        |k| model.u(k),
        &model.w,
        &model.v,
        true,
    );
    Ok(1.0 - num / denom)
}

/// Fraction of entries exactly equal to zero. Proximal outputs produce exact
/// zeros, so no epsilon is involved.
pub fn compute_sparsity(v: &DMatrix<f64>) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    v.iter().filter(|x| **x == 0.0).count() as f64 / v.len() as f64
}

/// Largest per-slice orthonormality error `‖Q_kᵀQ_k − I‖_F` and relative
/// cross-product error `‖U_kᵀU_k − HᵀH‖_F / ‖HᵀH‖_F`.
fn structural_errors(
    q: &[DMatrix<f64>],
    projectors: Option<&[DMatrix<f64>]>,
    h: &DMatrix<f64>,
    deterministic: bool,
) -> (f64, f64) {
    let r = h.nrows();
    let hth = h.tr_mul(h);
    let hth_norm = hth.norm().max(1e-30);
    let eye = DMatrix::identity(r, r);
    let per_slice = |k: usize| -> (f64, f64) {
        let qk = &q[k];
        let ortho = (qk.tr_mul(qk) - &eye).norm();
        let u = match projectors {
            Some(c) => &c[k] * (qk * h),
            None => qk * h,
        };
        let cross = (u.tr_mul(&u) - &hth).norm() / hth_norm;
        (ortho, cross)
    };
    let fold = |acc: (f64, f64), x: (f64, f64)| (acc.0.max(x.0), acc.1.max(x.1));
    if deterministic {
        (0..q.len()).map(per_slice).fold((0.0, 0.0), fold)
    } else {
        (0..q.len())
            .into_par_iter()
            .map(per_slice)
            .reduce(|| (0.0, 0.0), fold)
    }
}

struct SmoothSetup {
    projected: Vec<DMatrix<f64>>,
    projectors: Vec<DMatrix<f64>>,
    /// Σ_k (‖X_k‖² − ‖X′_k‖²), the energy outside the basis column spaces.
    fixed_energy: f64,
}

fn prepare_smoothness(
    tensor: &IrregularTensor,
    sm: &SmoothnessSpec,
    rank: usize,
    deterministic: bool,
) -> Result<SmoothSetup, SolverError> {
    let too_small: Vec<(usize, usize)> = tensor
        .slices()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.n_rows < sm.n_basis)
        .map(|(k, s)| (k, s.n_rows))
        .collect();
    if !too_small.is_empty() {
        return Err(SolverError::SmoothnessBasisTooLarge {
            n_basis: sm.n_basis,
            count: too_small.len(),
            details: itemize(&too_small, "rows"),
        });
    }
    if sm.gap_aware && !tensor.has_visit_days() {
        return Err(SolverError::MissingVisitDays);
    }

    type ProjectedSlice = (DMatrix<f64>, DMatrix<f64>);
    let build_one = |k: usize| -> Result<ProjectedSlice, SolverError> {
        let slice = tensor.slice(k);
        let indices: Vec<u32>;
        let days: &[u32] = match &slice.visit_days {
            Some(d) if sm.gap_aware => d,
            _ => {
                indices = (0..slice.n_rows as u32).collect();
                &indices
            }
        };
        let (_, sbm) = build_basis(days, sm.n_basis, sm.degree, sm.gap_aware)?;
        let projected = project_slice(&sbm, slice, tensor.n_cols())?;
        Ok((projected, sbm.left_orthonormal))
    };
    let results: Vec<Result<ProjectedSlice, SolverError>> = if deterministic {
        (0..tensor.n_slices()).map(build_one).collect()
    } else {
        (0..tensor.n_slices())
            .into_par_iter()
            .map(build_one)
            .collect()
    };

    let mut projected = Vec::with_capacity(results.len());
    let mut projectors = Vec::with_capacity(results.len());
    for res in results {
        let (p, c) = res?;
        projected.push(p);
        projectors.push(c);
    }

    let deficient: Vec<(usize, usize)> = projected
        .iter()
        .enumerate()
        .filter(|(_, p)| p.nrows() < rank)
        .map(|(k, p)| (k, p.nrows()))
        .collect();
    if !deficient.is_empty() {
        return Err(SolverError::ProjectedRankTooSmall {
            rank,
            count: deficient.len(),
            details: itemize(&deficient, "rank"),
        });
    }

    let fixed_energy = (0..tensor.n_slices())
        .map(|k| {
            let full: f64 = tensor
                .slice(k)
                .entries
                .iter()
                .map(|e| e.value * e.value)
                .sum();
            let kept: f64 = projected[k].iter().map(|x| x * x).sum();
            full - kept
        })
        .sum();

    Ok(SmoothSetup {
        projected,
        projectors,
        fixed_energy,
    })
}

/// Runs the full alternating fit.
pub fn fit(
    tensor: &IrregularTensor,
    spec: &ConstraintSpec,
    opts: &FitOptions,
) -> Result<(Parafac2Model, FitTrace), SolverError> {
    opts.validate()?;
    spec.validate()?;
    if tensor.n_slices() == 0 {
        return Err(SolverError::EmptyTensor);
    }
    let denom = tensor.frobenius_norm_sq();
    if denom == 0.0 {
        return Err(SolverError::ZeroNormTensor);
    }

    let serial = opts.deterministic || opts.threads == 1;
    let run = || fit_inner(tensor, spec, opts, denom, serial);
    if !serial && opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| SolverError::InvalidOptions(format!("thread pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }
}

fn fit_inner(
    tensor: &IrregularTensor,
    spec: &ConstraintSpec,
    opts: &FitOptions,
    denom: f64,
    serial: bool,
) -> Result<(Parafac2Model, FitTrace), SolverError> {
    let r = opts.rank;
    let j = tensor.n_cols();
    let k_total = tensor.n_slices();

    let smooth = spec
        .smoothness
        .as_ref()
        .map(|sm| prepare_smoothness(tensor, sm, r, serial))
        .transpose()?;
    let (data, fixed_energy, projectors) = match &smooth {
        Some(s) => (
            SliceSet::Dense(&s.projected),
            s.fixed_energy,
            Some(s.projectors.clone()),
        ),
        None => (SliceSet::Sparse(tensor), 0.0, None),
    };

    let offenders: Vec<(usize, usize)> = (0..k_total)
        .filter(|&k| data.rows(k) < r)
        .map(|k| (k, data.rows(k)))
        .collect();
    if !offenders.is_empty() {
        return Err(SolverError::SliceTooSmall {
            rank: r,
            count: offenders.len(),
            details: itemize(&offenders, "rows"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut h = DMatrix::from_fn(r, r, |_, _| rng.random::<f64>());
    let mut v = DMatrix::from_fn(j, r, |_, _| rng.random::<f64>());
    let mut w = DMatrix::from_fn(k_total, r, |_, _| rng.random::<f64>());

    let mut state_h = AdmmState::empty();
    let mut state_w = AdmmState::empty();
    let mut state_v = AdmmState::empty();
    let admm_opts = AdmmOptions {
        max_iters: opts.admm_max_iters,
        tol: opts.admm_tol,
        recompute_inner: opts.recompute_inner,
        deterministic: serial,
    };

    let started = Instant::now();
    let mut trace = FitTrace {
        iterations: Vec::new(),
        converged: false,
        total_seconds: 0.0,
    };
    let mut prev_fit: Option<f64> = None;
    let mut q: Vec<DMatrix<f64>> = Vec::new();

    for outer in 1..=opts.max_outer_iters {
        let iter_started = Instant::now();

        let (new_q, rank_warnings) = update_orthogonal_factors(data, &h, &w, &v, serial)?;
        q = new_q;
        let y = ImplicitY::new(data, &q)?;

        let mut inner_iters = [0usize; 3];
        let mut residuals = [0f64; 3];
        let mut primal_residuals = [0f64; 3];

        let out = admm_update_mode(&y, Mode::H, &h, &v, &w, &spec.on_h, &mut state_h, &admm_opts)?;
        h = out.factor;
        inner_iters[0] = out.inner_iters;
        residuals[0] = out.residual;
        primal_residuals[0] = out.primal_residual;

        let out = admm_update_mode(&y, Mode::W, &h, &v, &w, &spec.on_w, &mut state_w, &admm_opts)?;
        w = out.factor;
        inner_iters[1] = out.inner_iters;
        residuals[1] = out.residual;
        primal_residuals[1] = out.primal_residual;

        let out = admm_update_mode(&y, Mode::V, &h, &v, &w, &spec.on_v, &mut state_v, &admm_opts)?;
        v = out.factor;
        inner_iters[2] = out.inner_iters;
        residuals[2] = out.residual;
        primal_residuals[2] = out.primal_residual;

        let num = residual_numerator(data, |k| &q[k] * &h, &w, &v, serial);
        let fit_val = 1.0 - (num + fixed_energy) / denom;
        if !fit_val.is_finite() {
            return Err(SolverError::NonFiniteFit { iteration: outer });
        }

        let (q_err, cross_err) = structural_errors(&q, projectors.as_deref(), &h, serial);

        trace.iterations.push(IterRecord {
            iter: outer,
            fit: fit_val,
            seconds: if opts.deterministic {
                0.0
            } else {
                iter_started.elapsed().as_secs_f64()
            },
            inner_iters,
            residuals,
            primal_residuals,
            rank_warnings,
            max_q_ortho_error: q_err,
            max_crossprod_error: cross_err,
        });

        if let Some(p) = prev_fit {
            if (fit_val - p).abs() < opts.outer_tol * p.abs().max(1.0) {
                trace.converged = true;
                break;
            }
        }
        prev_fit = Some(fit_val);
    }

    trace.total_seconds = if opts.deterministic {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };

    let model = Parafac2Model {
        q,
        h,
        w,
        v,
        smooth_projectors: projectors,
    };
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{generate_synthetic, Entry, SparseSlice, SynthConfig};
    use approx::assert_relative_eq;

    fn small_synth(seed: u64) -> (IrregularTensor, Parafac2Model) {
        generate_synthetic(&SynthConfig {
            n_slices: 6,
            n_cols: 12,
            rank: 3,
            rows_min: 6,
            rows_max: 10,
            density: 0.7,
            noise_level: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn q_update_reconstructs_noiseless_data_with_true_factors() {
        let (tensor, truth) = small_synth(1);
        let data = SliceSet::Sparse(&tensor);
        let (q, warnings) =
            update_orthogonal_factors(data, &truth.h, &truth.w, &truth.v, true).unwrap();
        assert_eq!(warnings, 0);
        let model = Parafac2Model {
            q,
            h: truth.h.clone(),
            w: truth.w.clone(),
            v: truth.v.clone(),
            smooth_projectors: None,
        };
        for k in 0..tensor.n_slices() {
            let recon = model.reconstruct_slice(k).unwrap();
            let dense = tensor.slice(k).to_dense(tensor.n_cols());
            assert!((recon - dense).norm() <= 1e-8, "slice {k} residual too big");
        }
    }

    #[test]
    fn q_update_recovers_orthonormal_slice() {
        // H = S = V = I on a square orthonormal slice: polar returns it
        let q_star = crate::linalg::orthonormal_polar(&DMatrix::from_fn(4, 4, |i, j| {
            ((i * 7 + j * 3) as f64).sin()
        }))
        .unwrap()
        .q;
        let mut entries = Vec::new();
        for i in 0..4 {
            for jj in 0..4 {
                entries.push(Entry {
                    row: i,
                    col: jj,
                    value: q_star[(i, jj)],
                });
            }
        }
        let tensor = IrregularTensor::new(
            4,
            vec![SparseSlice {
                n_rows: 4,
                entries,
                visit_days: None,
            }],
        )
        .unwrap();
        let eye = DMatrix::identity(4, 4);
        let ones = DMatrix::from_element(1, 4, 1.0);
        let (q, _) =
            update_orthogonal_factors(SliceSet::Sparse(&tensor), &eye, &ones, &eye, true).unwrap();
        assert_relative_eq!(q[0], q_star, epsilon = 1e-10);
    }

    #[test]
    fn q_update_never_increases_the_objective() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..100 {
            let (tensor, _) = generate_synthetic(&SynthConfig {
                n_slices: 4,
                n_cols: 8,
                rank: 2,
                rows_min: 4,
                rows_max: 7,
                density: 0.8,
                noise_level: 0.5,
                seed: trial,
            })
            .unwrap();
            let r = 2;
            let h = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
            let v = DMatrix::from_fn(8, r, |_, _| rng.random_range(-1.0..1.0));
            let w = DMatrix::from_fn(4, r, |_, _| rng.random_range(-1.0..1.0));
            let q_before: Vec<DMatrix<f64>> = (0..4)
                .map(|k| {
                    let rows = tensor.slice(k).n_rows;
                    let g = DMatrix::from_fn(rows, r, |_, _| rng.random_range(-1.0..1.0));
                    crate::linalg::orthonormal_polar(&g).unwrap().q
                })
                .collect();
            let data = SliceSet::Sparse(&tensor);
            let before = residual_numerator(data, |k| &q_before[k] * &h, &w, &v, true);
            let (q_after, _) = update_orthogonal_factors(data, &h, &w, &v, true).unwrap();
            let after = residual_numerator(data, |k| &q_after[k] * &h, &w, &v, true);
            assert!(
                after <= before + 1e-9 * before.abs().max(1.0),
                "objective rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn admm_unconstrained_reaches_the_normal_equations() {
        let (tensor, truth) = small_synth(2);
        let data = SliceSet::Sparse(&tensor);
        let (q, _) = update_orthogonal_factors(data, &truth.h, &truth.w, &truth.v, true).unwrap();
        let y = ImplicitY::new(data, &q).unwrap();
        let mut state = AdmmState::empty();
        let opts = AdmmOptions {
            max_iters: 5000,
            tol: 1e-14,
            recompute_inner: false,
            deterministic: true,
        };
        let out = admm_update_mode(
            &y,
            Mode::V,
            &truth.h,
            &truth.v,
            &truth.w,
            &ConstraintKind::None,
            &mut state,
            &opts,
        )
        .unwrap();
        let g = gram_hadamard(&[&truth.h, &truth.v, &truth.w], 1).unwrap();
        let f = slicewise_mttkrp(&y, Mode::V, &truth.h, &truth.v, &truth.w, true).unwrap();
        let err = (&g * out.factor.transpose() - f.transpose()).norm() / f.norm();
        assert!(err <= 1e-6, "normal-equation residual {err}");
    }

    #[test]
    fn admm_inactive_non_negativity_matches_unconstrained() {
        // Noiseless data from non-negative factors: the unconstrained
        // solution is already non-negative, so the constraint is inactive.
        let (tensor, truth) = small_synth(3);
        let data = SliceSet::Sparse(&tensor);
        let (q, _) = update_orthogonal_factors(data, &truth.h, &truth.w, &truth.v, true).unwrap();
        let y = ImplicitY::new(data, &q).unwrap();
        let opts = AdmmOptions {
            max_iters: 3000,
            tol: 1e-12,
            recompute_inner: false,
            deterministic: true,
        };
        let run = |kind: ConstraintKind| {
            let mut state = AdmmState::empty();
            admm_update_mode(
                &y,
                Mode::W,
                &truth.h,
                &truth.v,
                &truth.w,
                &kind,
                &mut state,
                &opts,
            )
            .unwrap()
            .factor
        };
        let free = run(ConstraintKind::None);
        let nonneg = run(ConstraintKind::NonNegative);
        assert!((free.clone() - nonneg).norm() <= 1e-8 * free.norm().max(1.0));
    }

    #[test]
    fn admm_l0_with_huge_mu_zeroes_everything() {
        let (tensor, truth) = small_synth(4);
        let data = SliceSet::Sparse(&tensor);
        let (q, _) = update_orthogonal_factors(data, &truth.h, &truth.w, &truth.v, true).unwrap();
        let y = ImplicitY::new(data, &q).unwrap();
        let mut state = AdmmState::empty();
        let opts = AdmmOptions {
            max_iters: 20,
            tol: 1e-9,
            recompute_inner: false,
            deterministic: true,
        };
        let out = admm_update_mode(
            &y,
            Mode::V,
            &truth.h,
            &truth.v,
            &truth.w,
            &ConstraintKind::L0 { mu: 1e12 },
            &mut state,
            &opts,
        )
        .unwrap();
        assert!(out.factor.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn compute_fit_is_one_on_exact_model() {
        let (tensor, truth) = small_synth(5);
        let fit = compute_fit(&truth, &tensor).unwrap();
        assert!((fit - 1.0).abs() <= 1e-12, "fit = {fit}");
    }

    #[test]
    fn compute_fit_is_zero_on_zero_model() {
        let (tensor, truth) = small_synth(6);
        let zero = Parafac2Model {
            q: truth.q.clone(),
            h: DMatrix::zeros(3, 3),
            w: DMatrix::zeros(tensor.n_slices(), 3),
            v: DMatrix::zeros(tensor.n_cols(), 3),
            smooth_projectors: None,
        };
        let fit = compute_fit(&zero, &tensor).unwrap();
        assert_relative_eq!(fit, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn compute_fit_matches_dense_reconstruction() {
        let (tensor, truth) = generate_synthetic(&SynthConfig {
            noise_level: 0.4,
            seed: 7,
            ..SynthConfig::default()
        })
        .unwrap();
        let fit = compute_fit(&truth, &tensor).unwrap();
        let mut num = 0.0;
        for k in 0..tensor.n_slices() {
            let diff = tensor.slice(k).to_dense(tensor.n_cols())
                - truth.reconstruct_slice(k).unwrap();
            num += diff.norm_squared();
        }
        let expected = 1.0 - num / tensor.frobenius_norm_sq();
        assert_relative_eq!(fit, expected, epsilon = 1e-10);
    }

    #[test]
    fn compute_fit_rejects_zero_tensor() {
        let tensor = IrregularTensor::new(
            2,
            vec![SparseSlice {
                n_rows: 2,
                entries: vec![],
                visit_days: None,
            }],
        )
        .unwrap();
        let model = Parafac2Model {
            q: vec![DMatrix::identity(2, 1)],
            h: DMatrix::identity(1, 1),
            w: DMatrix::zeros(1, 1),
            v: DMatrix::zeros(2, 1),
            smooth_projectors: None,
        };
        assert!(matches!(
            compute_fit(&model, &tensor),
            Err(SolverError::ZeroNormTensor)
        ));
    }

    #[test]
    fn sparsity_counts_exact_zeros() {
        assert_eq!(compute_sparsity(&DMatrix::zeros(3, 3)), 1.0);
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert_eq!(compute_sparsity(&m), 0.5);
    }

    #[test]
    fn reconstruct_zero_weight_row_is_zero() {
        let (tensor, mut truth) = small_synth(8);
        truth.w.row_mut(0).fill(0.0);
        let recon = truth.reconstruct_slice(0).unwrap();
        assert_eq!(recon.iter().filter(|x| **x != 0.0).count(), 0);
        let _ = tensor;
    }

    #[test]
    fn reconstruct_matches_generator_slices() {
        let (tensor, truth) = small_synth(9);
        for k in 0..tensor.n_slices() {
            let recon = truth.reconstruct_slice(k).unwrap();
            let dense = tensor.slice(k).to_dense(tensor.n_cols());
            // entries below the sparse drop tolerance are absent from the
            // tensor, so compare with a matching absolute slack
            assert!((recon - dense).amax() <= 1e-10);
        }
    }

    #[test]
    fn reconstruct_rank_one_outer_product() {
        let q = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let model = Parafac2Model {
            q: vec![q],
            h: DMatrix::from_element(1, 1, 1.0),
            w: DMatrix::from_element(1, 1, 2.0),
            v: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            smooth_projectors: None,
        };
        let recon = model.reconstruct_slice(0).unwrap();
        let expected = DMatrix::from_row_slice(2, 3, &[2.0, 4.0, 6.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(recon, expected, epsilon = 1e-14);
    }

    #[test]
    fn reconstruct_rejects_bad_index() {
        let (_, truth) = small_synth(10);
        assert!(matches!(
            truth.reconstruct_slice(99),
            Err(SolverError::SliceIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn fit_rejects_slices_smaller_than_rank() {
        let (tensor, _) = generate_synthetic(&SynthConfig {
            n_slices: 3,
            rows_min: 4,
            rows_max: 5,
            rank: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let opts = FitOptions {
            rank: 6,
            ..FitOptions::default()
        };
        match fit(&tensor, &ConstraintSpec::default(), &opts) {
            Err(SolverError::SliceTooSmall { count, details, .. }) => {
                assert_eq!(count, 3);
                assert!(details.contains("k=0"));
            }
            other => panic!("expected SliceTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn fit_rank_one_non_negative_outer_products() {
        // Every slice is u_k vᵀ with non-negative u_k, v: rank-1 exact case.
        let v = [1.0, 0.5, 2.0, 0.25, 1.5];
        let mut slices = Vec::new();
        for k in 0..5usize {
            let rows = 4 + k;
            let mut entries = Vec::new();
            for i in 0..rows {
                let u_i = 0.3 + ((i * 13 + k * 7) % 9) as f64 / 4.0;
                for (j, &vj) in v.iter().enumerate() {
                    entries.push(Entry {
                        row: i,
                        col: j,
                        value: u_i * vj,
                    });
                }
            }
            slices.push(SparseSlice {
                n_rows: rows,
                entries,
                visit_days: None,
            });
        }
        let tensor = IrregularTensor::new(5, slices).unwrap();
        let opts = FitOptions {
            rank: 1,
            max_outer_iters: 300,
            outer_tol: 1e-12,
            admm_max_iters: 50,
            admm_tol: 1e-8,
            seed: 3,
            deterministic: true,
            ..FitOptions::default()
        };
        let (model, trace) = fit(&tensor, &ConstraintSpec::non_negative(), &opts).unwrap();
        let final_fit = trace.final_fit().unwrap();
        assert!((final_fit - 1.0).abs() <= 1e-6, "fit = {final_fit}");
        // recovered V is proportional to v
        let v_rec = model.v.column(0);
        let v_true = nalgebra::DVector::from_row_slice(&v);
        let cosine = v_rec.dot(&v_true) / (v_rec.norm() * v_true.norm());
        assert!(cosine >= 1.0 - 1e-6, "cosine = {cosine}");
    }

    #[test]
    fn fit_l0_sparsity_is_monotone_in_mu() {
        let (tensor, _) = generate_synthetic(&SynthConfig {
            n_slices: 8,
            n_cols: 15,
            rank: 3,
            rows_min: 6,
            rows_max: 10,
            density: 0.4,
            noise_level: 0.05,
            seed: 21,
        })
        .unwrap();
        let mut last = -1.0;
        for mu in [1e-6, 1e-3, 1e-2, 1e-1, 1.0] {
            let spec = ConstraintSpec {
                on_v: ConstraintKind::L0 { mu },
                ..ConstraintSpec::default()
            };
            let opts = FitOptions {
                rank: 3,
                max_outer_iters: 40,
                seed: 2,
                deterministic: true,
                ..FitOptions::default()
            };
            let (model, _) = fit(&tensor, &spec, &opts).unwrap();
            let s = compute_sparsity(&model.v);
            assert!(
                s >= last - 1e-12,
                "sparsity fell from {last} to {s} at mu={mu}"
            );
            last = s;
        }
    }
}
