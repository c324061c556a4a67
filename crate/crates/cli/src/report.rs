//! Report files. Every JSON report carries a versioned `schema` string and
//! a `metadata` block holding everything that varies between identical runs
//! (clock time, wall times, thread count). Two runs with the same config and
//! seed produce byte-identical reports once `metadata` is removed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use modal_tune::optimizer::{StepRecord, Termination, UpdateResult};
use modal_tune::sensitivity::{Perturbation, SvdReport, SweepRow};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const FORWARD_SCHEMA: &str = "modal-tune/forward/1";
pub const UPDATE_SCHEMA: &str = "modal-tune/update/1";
pub const SENSITIVITY_SCHEMA: &str = "modal-tune/sensitivity/1";
pub const BENCHMARK_SCHEMA: &str = "modal-tune/benchmark/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Seconds since the Unix epoch at report creation.
    pub created_unix: u64,
    pub threads: usize,
    /// Named wall-clock timings in seconds.
    #[serde(default)]
    pub timings: Vec<(String, f64)>,
}

impl Metadata {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "modal-tune".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            threads: rayon::current_num_threads(),
            timings: Vec::new(),
        }
    }

    pub fn timing(mut self, name: &str, seconds: f64) -> Self {
        self.timings.push((name.into(), seconds));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    pub schema: String,
    pub parameters: Vec<String>,
    pub x: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Relative residuals `||K v - lambda M v|| / ||K v||`.
    pub residuals: Vec<f64>,
    pub lanczos_steps: usize,
    /// Full-length mode shapes, one per pair.
    pub modes: Vec<Vec<f64>>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub schema: String,
    pub parameters: Vec<String>,
    pub start: Vec<f64>,
    pub x_opt: Vec<f64>,
    pub phi_opt: f64,
    pub termination: Termination,
    pub gradient_norm: f64,
    pub target_hz: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub mac: Vec<f64>,
    pub rom_builds: usize,
    pub full_solves: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rom_dims: Vec<usize>,
    pub phi_history: Vec<f64>,
    pub swap_warnings: usize,
    pub steps: Vec<StepRecord>,
    pub metadata: Metadata,
}

impl UpdateReport {
    pub fn new(
        names: Vec<String>,
        start: Vec<f64>,
        target_hz: Vec<f64>,
        res: &UpdateResult,
        metadata: Metadata,
    ) -> Self {
        let q = target_hz.len();
        Self {
            schema: UPDATE_SCHEMA.into(),
            parameters: names,
            start,
            x_opt: res.x_opt.clone(),
            phi_opt: res.phi_opt,
            termination: res.termination,
            gradient_norm: res.gradient_norm,
            target_hz,
            frequencies_hz: res.solution.frequencies.iter().take(q).copied().collect(),
            mac: res.residual.gamma.clone(),
            rom_builds: res.rom_builds,
            full_solves: res.full_solves,
            accepted: res.accepted(),
            rejected: res.rejected(),
            rom_dims: res.rom_dims.clone(),
            phi_history: res.phi_history.clone(),
            swap_warnings: res.swap_warnings,
            steps: res.steps.clone(),
            metadata,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema: String,
    pub parameters: Vec<String>,
    pub x: Vec<f64>,
    pub phi: f64,
    /// Rows of the residual Jacobian (physical parameter units).
    pub jacobian: Vec<Vec<f64>>,
    /// All rows came from full finite differences (repeated eigenvalue).
    pub finite_difference_fallback: bool,
    pub svd: SvdReport,
    pub perturbation: Option<Perturbation>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub x_opt: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub phi_opt: f64,
    pub termination: Termination,
    pub full_solves: usize,
    pub rom_builds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: String,
    pub parameters: Vec<String>,
    pub trust_region: MethodSummary,
    pub baseline: MethodSummary,
    /// `max_i |x_tr_i - x_bl_i| / |x_bl_i|`.
    pub x_agreement: f64,
    pub metadata: Metadata,
}

impl BenchmarkReport {
    pub fn wall_seconds(&self, method: &str) -> Option<f64> {
        self.metadata
            .timings
            .iter()
            .find(|(n, _)| n == method)
            .map(|(_, t)| *t)
    }

    /// Baseline wall time over trust-region wall time.
    pub fn wall_ratio(&self) -> Option<f64> {
        Some(self.wall_seconds("baseline")? / self.wall_seconds("trust_region")?)
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |m: &MethodSummary, t: Option<f64>| {
            let x: Vec<String> = m.x_opt.iter().map(|v| format!("{v:.6e}")).collect();
            format!(
                "{:<13} {:>7} {:>6} {:>11} {:>12.3e}  [{}]\n",
                m.method,
                m.full_solves,
                m.rom_builds,
                t.map(|t| format!("{:.3}", t)).unwrap_or_else(|| "-".into()),
                m.phi_opt,
                x.join(", ")
            )
        };
        out.push_str(&format!(
            "{:<13} {:>7} {:>6} {:>11} {:>12}  x_opt ({})\n",
            "method",
            "solves",
            "roms",
            "wall [s]",
            "phi",
            self.parameters.join(", ")
        ));
        out.push_str(&row(&self.trust_region, self.wall_seconds("trust_region")));
        out.push_str(&row(&self.baseline, self.wall_seconds("baseline")));
        out.push_str(&format!("x agreement {:.3e}", self.x_agreement));
        if let Some(r) = self.wall_ratio() {
            out.push_str(&format!(", wall-time ratio {:.2}", r));
        }
        out.push('\n');
        out
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    write_text(path, &text)
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("cannot write {}: {e}", path.display()))
}

/// Iteration log. Columns: `iteration, accepted, phi, radius, ratio`, then
/// `x_<name>` per parameter, then `f<i>_hz` per computed frequency. One row
/// per evaluated step, starting point first.
pub fn write_iterations(path: &Path, names: &[String], steps: &[StepRecord]) -> Result<PathBuf, CliError> {
    let nf = steps.iter().map(|s| s.frequencies.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = ["iteration", "accepted", "phi", "radius", "ratio"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(names.iter().map(|n| format!("x_{n}")));
    header.extend((1..=nf).map(|i| format!("f{i}_hz")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for s in steps {
        let mut rec = vec![
            s.iteration.to_string(),
            s.accepted.to_string(),
            format!("{:e}", s.phi),
            format!("{:e}", s.radius),
            s.ratio.map(|r| format!("{r:e}")).unwrap_or_default(),
        ];
        rec.extend(s.x.iter().map(|v| format!("{v:e}")));
        rec.extend((0..nf).map(|i| s.frequencies.get(i).map(|f| format!("{f:e}")).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))?;
    Ok(path.to_path_buf())
}

/// Sweep table. Columns: `delta, seed, error, converged, phi, rom_builds,
/// failure`.
pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<PathBuf, CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["delta", "seed", "error", "converged", "phi", "rom_builds", "failure"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            format!("{:e}", r.delta),
            r.seed.to_string(),
            format!("{:e}", r.error),
            r.converged.to_string(),
            format!("{:e}", r.phi),
            r.rom_builds.to_string(),
            r.failure.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))?;
    Ok(path.to_path_buf())
}

/// Removes the `metadata` member so two reports can be compared for
/// reproducibility.
pub fn strip_metadata(json: &str) -> Result<String, serde_json::Error> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("metadata");
    }
    serde_json::to_string_pretty(&v)
}

/// Appends `text` to stdout without interleaving with log output.
pub fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}
