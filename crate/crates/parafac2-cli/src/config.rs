//! Run configuration: a flat key=value file overridden by command-line
//! flags (flags win). Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use parafac2::solver::{ConstraintSpec, FitOptions, SmoothnessSpec};
use parafac2::ConstraintKind;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected \"key = value\", got {got:?}")]
    BadLine { line: usize, got: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required setting: {0}")]
    Missing(&'static str),
    #[error("factor {0:?} has more than one constraint")]
    ConflictingConstraints(Factor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Factor {
    H,
    W,
    V,
}

impl FromStr for Factor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "H" => Ok(Factor::H),
            "W" => Ok(Factor::W),
            "V" => Ok(Factor::V),
            other => Err(format!("unknown factor {other:?} (expected H, W or V)")),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::H => write!(f, "H"),
            Factor::W => write!(f, "W"),
            Factor::V => write!(f, "V"),
        }
    }
}

/// `FACTOR=value` as used by `--l0 V=49` and `--l1 V=0.5`.
fn parse_factor_value(key: &str, s: &str) -> Result<(Factor, f64), ConfigError> {
    let bad = |reason: String| ConfigError::BadValue {
        key: key.into(),
        reason,
    };
    let (factor, value) = s
        .split_once('=')
        .ok_or_else(|| bad(format!("expected FACTOR=value, got {s:?}")))?;
    let factor = factor.parse().map_err(bad)?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| bad(format!("bad number {value:?}")))?;
    Ok((factor, value))
}

/// `l=7,degree=3,gap-aware`.
fn parse_smooth(s: &str) -> Result<SmoothnessSpec, ConfigError> {
    let bad = |reason: String| ConfigError::BadValue {
        key: "smooth".into(),
        reason,
    };
    let mut n_basis = None;
    let mut degree = 3usize;
    let mut gap_aware = false;
    for part in s.split(',') {
        let part = part.trim();
        match part.split_once('=') {
            Some(("l", v)) => {
                n_basis = Some(v.parse().map_err(|_| bad(format!("bad l {v:?}")))?)
            }
            Some(("degree", v)) => {
                degree = v.parse().map_err(|_| bad(format!("bad degree {v:?}")))?
            }
            None if part == "gap-aware" || part == "gap_aware" => gap_aware = true,
            _ => return Err(bad(format!("unknown smoothness option {part:?}"))),
        }
    }
    Ok(SmoothnessSpec {
        n_basis: n_basis.ok_or_else(|| bad("missing l=<basis count>".into()))?,
        degree,
        gap_aware,
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError::BadValue {
            key: key.into(),
            reason: format!("bad boolean {other:?}"),
        }),
    }
}

/// Unresolved settings: every field optional so that config-file values and
/// flag values merge cleanly (later sources win).
#[derive(Debug, Default, Clone)]
pub struct Partial {
    pub input: Option<PathBuf>,
    pub days: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub rank: Option<usize>,
    pub nonneg: Option<Vec<Factor>>,
    pub l0: Option<(Factor, f64)>,
    pub l1: Option<(Factor, f64)>,
    pub smooth: Option<SmoothnessSpec>,
    pub outer_tol: Option<f64>,
    pub max_outer_iters: Option<usize>,
    pub admm_tol: Option<f64>,
    pub admm_max_iters: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub deterministic: Option<bool>,
    pub emit_u: Option<bool>,
    pub recompute_inner: Option<bool>,
}

impl Partial {
    /// Later (flag) values override earlier (config-file) ones.
    pub fn overridden_by(self, other: Partial) -> Partial {
        Partial {
            input: other.input.or(self.input),
            days: other.days.or(self.days),
            out_dir: other.out_dir.or(self.out_dir),
            rank: other.rank.or(self.rank),
            nonneg: other.nonneg.or(self.nonneg),
            l0: other.l0.or(self.l0),
            l1: other.l1.or(self.l1),
            smooth: other.smooth.or(self.smooth),
            outer_tol: other.outer_tol.or(self.outer_tol),
            max_outer_iters: other.max_outer_iters.or(self.max_outer_iters),
            admm_tol: other.admm_tol.or(self.admm_tol),
            admm_max_iters: other.admm_max_iters.or(self.admm_max_iters),
            seed: other.seed.or(self.seed),
            threads: other.threads.or(self.threads),
            deterministic: other.deterministic.or(self.deterministic),
            emit_u: other.emit_u.or(self.emit_u),
            recompute_inner: other.recompute_inner.or(self.recompute_inner),
        }
    }

    pub fn parse_nonneg(key: &str, v: &str) -> Result<Vec<Factor>, ConfigError> {
        v.split(',')
            .map(|tok| {
                tok.parse().map_err(|reason| ConfigError::BadValue {
                    key: key.into(),
                    reason,
                })
            })
            .collect()
    }

    /// Parses a flat `key = value` config file.
    pub fn from_config_file(path: &PathBuf) -> Result<Partial, ConfigError> {
        let content = std::fs::read_to_string(path)?;
        let mut p = Partial::default();
        for (idx, raw) in content.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: line_no,
                got: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad_num = |key: &str, v: &str| ConfigError::BadValue {
                key: key.into(),
                reason: format!("bad number {v:?}"),
            };
            match key {
                "input" => p.input = Some(PathBuf::from(value)),
                "days" => p.days = Some(PathBuf::from(value)),
                "out_dir" => p.out_dir = Some(PathBuf::from(value)),
                "rank" => p.rank = Some(value.parse().map_err(|_| bad_num(key, value))?),
                "nonneg" => p.nonneg = Some(Self::parse_nonneg(key, value)?),
                "l0" => p.l0 = Some(parse_factor_value(key, value)?),
                "l1" => p.l1 = Some(parse_factor_value(key, value)?),
                "smooth" => p.smooth = Some(parse_smooth(value)?),
                "outer_tol" => p.outer_tol = Some(value.parse().map_err(|_| bad_num(key, value))?),
                "max_outer_iters" => {
                    p.max_outer_iters = Some(value.parse().map_err(|_| bad_num(key, value))?)
                }
                "admm_tol" => p.admm_tol = Some(value.parse().map_err(|_| bad_num(key, value))?),
                "admm_max_iters" => {
                    p.admm_max_iters = Some(value.parse().map_err(|_| bad_num(key, value))?)
                }
                "seed" => p.seed = Some(value.parse().map_err(|_| bad_num(key, value))?),
                "threads" => p.threads = Some(value.parse().map_err(|_| bad_num(key, value))?),
                "deterministic" => p.deterministic = Some(parse_bool(key, value)?),
                "emit_u" => p.emit_u = Some(parse_bool(key, value)?),
                "recompute_inner" => p.recompute_inner = Some(parse_bool(key, value)?),
                other => {
                    return Err(ConfigError::UnknownKey {
                        line: line_no,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(p)
    }
}

pub fn parse_l0_flag(v: &str) -> Result<(Factor, f64), ConfigError> {
    parse_factor_value("l0", v)
}

pub fn parse_l1_flag(v: &str) -> Result<(Factor, f64), ConfigError> {
    parse_factor_value("l1", v)
}

pub fn parse_smooth_flag(v: &str) -> Result<SmoothnessSpec, ConfigError> {
    parse_smooth(v)
}

/// Fully resolved fit settings.
#[derive(Debug, Clone)]
pub struct FitSettings {
    pub input: PathBuf,
    pub days: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub rank: usize,
    pub constraints: ConstraintSpec,
    pub options: FitOptions,
    pub emit_u: bool,
}

impl FitSettings {
    pub fn resolve(merged: Partial) -> Result<FitSettings, ConfigError> {
        let input = merged.input.ok_or(ConfigError::Missing("input"))?;
        let out_dir = merged.out_dir.ok_or(ConfigError::Missing("out_dir"))?;
        let rank = merged.rank.ok_or(ConfigError::Missing("rank"))?;

        let mut per_factor: BTreeMap<&'static str, ConstraintKind> = BTreeMap::new();
        per_factor.insert("H", ConstraintKind::None);
        per_factor.insert("W", ConstraintKind::None);
        per_factor.insert("V", ConstraintKind::None);
        let mut assign = |factor: Factor, kind: ConstraintKind| -> Result<(), ConfigError> {
            let key = match factor {
                Factor::H => "H",
                Factor::W => "W",
                Factor::V => "V",
            };
            let slot = per_factor.get_mut(key).expect("factor slot");
            if !matches!(slot, ConstraintKind::None) {
                return Err(ConfigError::ConflictingConstraints(factor));
            }
            *slot = kind;
            Ok(())
        };
        for factor in merged.nonneg.unwrap_or_default() {
            assign(factor, ConstraintKind::NonNegative)?;
        }
        if let Some((factor, mu)) = merged.l0 {
            assign(factor, ConstraintKind::L0 { mu })?;
        }
        if let Some((factor, lambda)) = merged.l1 {
            assign(factor, ConstraintKind::L1 { lambda })?;
        }
        let constraints = ConstraintSpec {
            on_h: per_factor["H"],
            on_w: per_factor["W"],
            on_v: per_factor["V"],
            smoothness: merged.smooth,
        };

        let defaults = FitOptions::default();
        let options = FitOptions {
            rank,
            max_outer_iters: merged.max_outer_iters.unwrap_or(defaults.max_outer_iters),
            outer_tol: merged.outer_tol.unwrap_or(defaults.outer_tol),
            admm_max_iters: merged.admm_max_iters.unwrap_or(defaults.admm_max_iters),
            admm_tol: merged.admm_tol.unwrap_or(defaults.admm_tol),
            seed: merged.seed.unwrap_or(defaults.seed),
            threads: merged.threads.unwrap_or(defaults.threads),
            deterministic: merged.deterministic.unwrap_or(false),
            recompute_inner: merged.recompute_inner.unwrap_or(false),
        };

        Ok(FitSettings {
            input,
            days: merged.days,
            out_dir,
            rank,
            constraints,
            options,
            emit_u: merged.emit_u.unwrap_or(false),
        })
    }

    /// The resolved configuration block written into summary.json.
    pub fn summary_config(&self) -> serde_json::Value {
        let kind = |k: &ConstraintKind| match *k {
            ConstraintKind::None => "none".to_string(),
            ConstraintKind::NonNegative => "non_negative".to_string(),
            ConstraintKind::L0 { mu } => format!("l0(mu={mu})"),
            ConstraintKind::L1 { lambda } => format!("l1(lambda={lambda})"),
        };
        serde_json::json!({
            "input": self.input.display().to_string(),
            "days": self.days.as_ref().map(|d| d.display().to_string()),
            "out_dir": self.out_dir.display().to_string(),
            "rank": self.rank,
            "constraints": {
                "H": kind(&self.constraints.on_h),
                "W": kind(&self.constraints.on_w),
                "V": kind(&self.constraints.on_v),
            },
            "smooth": self.constraints.smoothness.map(|s| serde_json::json!({
                "n_basis": s.n_basis,
                "degree": s.degree,
                "gap_aware": s.gap_aware,
            })),
            "outer_tol": self.options.outer_tol,
            "max_outer_iters": self.options.max_outer_iters,
            "admm_tol": self.options.admm_tol,
            "admm_max_iters": self.options.admm_max_iters,
            "seed": self.options.seed,
            "threads": self.options.threads,
            "deterministic": self.options.deterministic,
            "recompute_inner": self.options.recompute_inner,
            "emit_u": self.emit_u,
        })
    }
}
