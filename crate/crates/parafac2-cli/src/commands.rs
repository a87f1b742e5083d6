//! The fit / synth / eval subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use parafac2::solver::{compute_fit, compute_sparsity, fit, Parafac2Model, SolverError};
use parafac2::tensor::{
    attach_timestamps, generate_synthetic, load_irregular_tensor, save_irregular_tensor,
    SynthConfig, TensorError,
};
use thiserror::Error;

use crate::config::{ConfigError, FitSettings};
use crate::matio::{read_matrix, read_stack, write_matrix, write_stack, MatIoError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    MatIo(#[from] MatIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Msg(String),
}

/// Exit status: 0 converged, 2 stopped at the iteration cap without meeting
/// the tolerance. Errors map to 1 in main.
pub fn cmd_fit(settings: &FitSettings) -> Result<i32, CliError> {
    let mut tensor = load_irregular_tensor(&settings.input)?;
    if let Some(days) = &settings.days {
        attach_timestamps(&mut tensor, days)?;
    }
    if let Some(sm) = &settings.constraints.smoothness {
        if sm.gap_aware && !tensor.has_visit_days() {
            let sidecar = settings.input.with_extension("days");
            return Err(CliError::Msg(format!(
                "gap-aware smoothness needs visit days, but no timestamp sidecar was found at {} (and no --days file was given)",
                sidecar.display()
            )));
        }
    }

    let (model, trace) = fit(&tensor, &settings.constraints, &settings.options)?;
    // Recomputed through the same routine `eval` uses, so the two agree
    // bit-for-bit on the stored factors.
    let final_fit = compute_fit(&model, &tensor)?;
    let sparsity_v = compute_sparsity(&model.v);

    let out = &settings.out_dir;
    fs::create_dir_all(out)?;
    write_matrix(out.join("H.mtx"), &model.h)?;
    write_matrix(out.join("W.mtx"), &model.w)?;
    write_matrix(out.join("V.mtx"), &model.v)?;
    write_stack(out.join("Q.mtx"), &model.q)?;
    if let Some(c) = &model.smooth_projectors {
        write_stack(out.join("C.mtx"), c)?;
    }
    if settings.emit_u {
        let u: Vec<_> = (0..model.n_slices()).map(|k| model.u(k)).collect();
        write_stack(out.join("U.mtx"), &u)?;
    }
    fs::write(out.join("trace.json"), trace.to_json())?;

    let summary = serde_json::json!({
        "fit": final_fit,
        "sparsity_v": sparsity_v,
        "iterations": trace.iterations.len(),
        "converged": trace.converged,
        "wall_seconds": trace.total_seconds,
        "config": settings.summary_config(),
    });
    fs::write(
        out.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary json")),
    )?;

    Ok(if trace.converged { 0 } else { 2 })
}

pub struct SynthSettings {
    pub out_dir: PathBuf,
    pub config: SynthConfig,
}

pub fn cmd_synth(settings: &SynthSettings) -> Result<i32, CliError> {
    let (tensor, truth) = generate_synthetic(&settings.config)?;
    let out = &settings.out_dir;
    fs::create_dir_all(out)?;
    // writes tensor.tns plus the tensor.days sidecar
    save_irregular_tensor(&tensor, out.join("tensor.tns"))?;
    write_matrix(out.join("H.mtx"), &truth.h)?;
    write_matrix(out.join("W.mtx"), &truth.w)?;
    write_matrix(out.join("V.mtx"), &truth.v)?;
    write_stack(out.join("Q.mtx"), &truth.q)?;
    Ok(0)
}

/// Reads the factor files of a fit (or synth) output directory back into a
/// model.
pub fn load_model(dir: &Path) -> Result<Parafac2Model, CliError> {
    let h = read_matrix(dir.join("H.mtx"))?;
    let w = read_matrix(dir.join("W.mtx"))?;
    let v = read_matrix(dir.join("V.mtx"))?;
    let q = read_stack(dir.join("Q.mtx"))?;
    let c_path = dir.join("C.mtx");
    let smooth_projectors = if c_path.exists() {
        Some(read_stack(&c_path)?)
    } else {
        None
    };
    Ok(Parafac2Model {
        q,
        h,
        w,
        v,
        smooth_projectors,
    })
}

pub fn cmd_eval(model_dir: &Path, tensor_path: &Path) -> Result<i32, CliError> {
    let tensor = load_irregular_tensor(tensor_path)?;
    let model = load_model(model_dir)?;
    let fit = compute_fit(&model, &tensor)?;
    let sparsity = compute_sparsity(&model.v);
    println!(
        "{}",
        serde_json::json!({ "fit": fit, "sparsity": sparsity })
    );
    Ok(0)
}
