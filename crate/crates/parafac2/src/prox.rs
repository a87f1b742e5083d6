//! Element-wise proximal operators for the constraint menu.
//!
//! Each operator is the map `x ↦ argmin_z c(z) + (ρ/2)(z − x)²` for its
//! constraint term `c`. The caller passes the already-shifted ADMM argument,
//! so everything here is a pure scalar map over the matrix entries.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProxError {
    #[error("prox input contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid constraint parameter: {0}")]
    InvalidParameter(String),
}

/// Per-factor constraint selection.
///
/// `L0` carries its threshold μ directly (an entry is zeroed when x² < μ),
/// independent of the ADMM step size; `L1` carries the regularization weight
/// λ and receives ρ at call time, shrinking by λ/ρ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintKind {
    None,
    NonNegative,
    L0 { mu: f64 },
    L1 { lambda: f64 },
}

impl ConstraintKind {
    pub fn validate(&self) -> Result<(), ProxError> {
        match *self {
            ConstraintKind::L0 { mu } if mu.is_nan() || mu <= 0.0 => Err(
                ProxError::InvalidParameter(format!("l0 threshold mu must be > 0, got {mu}")),
            ),
            ConstraintKind::L1 { lambda } if lambda.is_nan() || lambda < 0.0 => Err(
                ProxError::InvalidParameter(format!("l1 weight lambda must be >= 0, got {lambda}")),
            ),
            _ => Ok(()),
        }
    }

    /// True when the operator is the identity map.
    pub fn is_none(&self) -> bool {
        matches!(self, ConstraintKind::None)
    }
}

fn scalar_prox(kind: &ConstraintKind, x: f64, rho: f64) -> f64 {
    match *kind {
        ConstraintKind::None => x,
        ConstraintKind::NonNegative => x.max(0.0),
        // Keep the value at the x² = μ boundary: retains signal and makes
        // the operator idempotent.
        ConstraintKind::L0 { mu } => {
            if x * x < mu {
                0.0
            } else {
                x
            }
        }
        ConstraintKind::L1 { lambda } => {
            let shift = lambda / rho;
            x.signum() * (x.abs() - shift).max(0.0)
        }
    }
}

/// Applies the proximal operator entry-wise.
pub fn prox_apply(
    kind: &ConstraintKind,
    m: &DMatrix<f64>,
    rho: f64,
) -> Result<DMatrix<f64>, ProxError> {
    kind.validate()?;
    debug_assert!(rho > 0.0, "step size must be positive");
    if let Some((row, col)) = m
        .iter()
        .enumerate()
        .find(|(_, x)| !x.is_finite())
        .map(|(idx, _)| (idx % m.nrows(), idx / m.nrows()))
    {
        return Err(ProxError::NonFinite { row, col });
    }
    Ok(m.map(|x| scalar_prox(kind, x, rho)))
}
