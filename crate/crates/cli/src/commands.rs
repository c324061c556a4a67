use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use modal_tune::fixture;
use modal_tune::optimizer::{blackbox_baseline, update, UpdateResult};
use modal_tune::sensitivity::{
    jacobian, loglog_slope, median_errors, noise_sweep, perturb_solution, relative_error,
    svd_report, NoiseSweepOptions, SweepRow,
};
use modal_tune::solve_smallest;

use crate::config::{Run, RunConfig};
use crate::report::{
    create_dir, write_iterations, write_json, write_sweep, write_text, BenchmarkReport,
    ForwardReport, Metadata, MethodSummary, SensitivityReport, UpdateReport, BENCHMARK_SCHEMA,
    FORWARD_SCHEMA, SENSITIVITY_SCHEMA,
};
use crate::CliError;

fn names(run: &Run) -> Vec<String> {
    run.space.params().iter().map(|p| p.name.clone()).collect()
}

fn fmt_vec(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", s.join(", "))
}

pub struct Output<T> {
    pub report: T,
    pub files: Vec<PathBuf>,
    /// Human summary for stdout.
    pub summary: String,
}

pub fn forward(run: &Run, export_matrices: bool) -> Result<Output<ForwardReport>, CliError> {
    let x = run.space.start().to_vec();
    let t = Instant::now();
    let sol = solve_smallest(&run.system, &x, run.config.modes, &run.config.optimizer.eigen())?;
    let wall = t.elapsed().as_secs_f64();
    let report = ForwardReport {
        schema: FORWARD_SCHEMA.into(),
        parameters: names(run),
        x: x.clone(),
        frequencies_hz: sol.frequencies.clone(),
        eigenvalues: sol.eigenvalues.clone(),
        residuals: sol.residuals.clone(),
        lanczos_steps: sol.lanczos_steps,
        modes: (0..sol.len()).map(|i| sol.mode(i)).collect(),
        metadata: Metadata::new("forward").timing("solve", wall),
    };
    create_dir(&run.output_dir)?;
    let mut files = vec![write_json(&run.output_dir.join("forward.json"), &report)?];
    if export_matrices {
        let (k, m) = run.system.instantiate(&x)?;
        for (name, mat) in [("stiffness.mtx", &k), ("mass.mtx", &m)] {
            let path = run.output_dir.join(name);
            let f = File::create(&path)
                .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
            mat.write_matrix_market(BufWriter::new(f))
                .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
            files.push(path);
        }
    }
    let mut summary = format!("{} free dofs, {} Lanczos steps\n", run.system.dim(), sol.lanczos_steps);
    for (i, f) in sol.frequencies.iter().enumerate() {
        summary.push_str(&format!("f{} = {:.6} Hz\n", i + 1, f));
    }
    Ok(Output { report, files, summary })
}

fn run_update(run: &Run) -> Result<(UpdateResult, f64), CliError> {
    let t = Instant::now();
    let res = update(&run.system, run.target()?, &run.config.optimizer)?;
    Ok((res, t.elapsed().as_secs_f64()))
}

pub fn update_cmd(run: &Run) -> Result<Output<UpdateReport>, CliError> {
    let target = run.target()?;
    let (res, wall) = run_update(run)?;
    let report = UpdateReport::new(
        names(run),
        run.space.start().to_vec(),
        target.frequencies.clone(),
        &res,
        Metadata::new("update").timing("update", wall),
    );
    create_dir(&run.output_dir)?;
    let files = vec![
        write_json(&run.output_dir.join("update.json"), &report)?,
        write_iterations(&run.output_dir.join("iterations.csv"), &report.parameters, &res.steps)?,
    ];
    let summary = format!(
        "{:?} after {} ROM builds ({} full solves)\nx_opt = {}\nphi   = {:.3e}\nf     = {}\n",
        res.termination,
        res.rom_builds,
        res.full_solves,
        fmt_vec(&res.x_opt),
        res.phi_opt,
        fmt_vec(&report.frequencies_hz),
    );
    Ok(Output { report, files, summary })
}

pub fn sensitivity_cmd(run: &Run) -> Result<Output<SensitivityReport>, CliError> {
    let target = run.target()?;
    let cfg = &run.config.sensitivity;
    let t = Instant::now();
    let x = match &cfg.at {
        Some(x) => {
            run.space.check(x)?;
            x.clone()
        }
        None => run_update(run)?.0.x_opt,
    };
    let rep = jacobian(&run.system, target, &x, &run.config.jacobian_options())?;
    let svd = svd_report(&rep.jacobian, &x, cfg.noise_level);
    let perturbation = match &cfg.perturbation {
        Some(db) => Some(perturb_solution(&rep.jacobian, db)?),
        None => None,
    };
    let report = SensitivityReport {
        schema: SENSITIVITY_SCHEMA.into(),
        parameters: names(run),
        x,
        phi: rep.residual.phi,
        jacobian: rep
            .jacobian
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        finite_difference_fallback: rep.fallback,
        svd,
        perturbation,
        metadata: Metadata::new("sensitivity").timing("sensitivity", t.elapsed().as_secs_f64()),
    };
    create_dir(&run.output_dir)?;
    let files = vec![write_json(&run.output_dir.join("sensitivity.json"), &report)?];
    let mut summary = format!(
        "x = {}\ncondition number = {}\n",
        fmt_vec(&report.x),
        if report.svd.condition_number.is_finite() {
            format!("{:.4e}", report.svd.condition_number)
        } else {
            "inf".into()
        }
    );
    for (i, (s, z)) in report.svd.singular_values.iter().zip(&report.svd.z).enumerate() {
        summary.push_str(&format!(
            "sigma{} = {:.4e} {} z = {}\n",
            i + 1,
            s,
            if report.svd.trusted[i] { "trusted  " } else { "untrusted" },
            fmt_vec(z)
        ));
    }
    Ok(Output { report, files, summary })
}

pub struct SweepOutcome {
    pub clean_optimum: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub medians: Vec<f64>,
    pub slope: f64,
}

pub fn noise_sweep_cmd(run: &Run) -> Result<Output<SweepOutcome>, CliError> {
    let cfg = &run.config.noise_sweep;
    let opts = NoiseSweepOptions {
        levels: cfg.levels.clone(),
        seeds: (0..cfg.seeds).collect(),
        base_seed: run.config.seed,
        mode_noise: cfg.mode_noise,
        optimizer: run.config.optimizer,
    };
    let (clean_optimum, rows) = noise_sweep(&run.system, run.target()?, &opts)?;
    let medians = median_errors(&cfg.levels, &rows);
    let slope = loglog_slope(&cfg.levels, &medians);
    create_dir(&run.output_dir)?;
    let files = vec![write_sweep(&run.output_dir.join("noise_sweep.csv"), &rows)?];
    let mut summary = String::from("delta        median error\n");
    for (d, m) in cfg.levels.iter().zip(&medians) {
        summary.push_str(&format!("{d:<12.3e} {m:.4e}\n"));
    }
    summary.push_str(&format!("log-log slope {slope:.3}\n"));
    let failed = rows.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        summary.push_str(&format!("{failed} rows failed, see the failure column\n"));
    }
    Ok(Output {
        report: SweepOutcome {
            clean_optimum,
            rows,
            medians,
            slope,
        },
        files,
        summary,
    })
}

fn summarize(method: &str, res: &UpdateResult, q: usize) -> MethodSummary {
    MethodSummary {
        method: method.into(),
        x_opt: res.x_opt.clone(),
        frequencies_hz: res.solution.frequencies.iter().take(q).copied().collect(),
        phi_opt: res.phi_opt,
        termination: res.termination,
        full_solves: res.full_solves,
        rom_builds: res.rom_builds,
    }
}

/// Best-of-`repeats` wall time; results of every repeat are identical.
fn timed<F>(repeats: usize, f: F) -> Result<(UpdateResult, f64), CliError>
where
    F: Fn() -> modal_tune::Result<UpdateResult>,
{
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let res = f()?;
        best = best.min(t.elapsed().as_secs_f64());
        out = Some(res);
    }
    Ok((out.expect("at least one repeat"), best))
}

pub fn benchmark_cmd(run: &Run) -> Result<Output<BenchmarkReport>, CliError> {
    let target = run.target()?;
    let repeats = run.config.benchmark.repeats;
    let (tr, t_tr) = timed(repeats, || update(&run.system, target, &run.config.optimizer))?;
    let (bl, t_bl) = timed(repeats, || blackbox_baseline(&run.system, target, &run.config.baseline))?;
    let report = BenchmarkReport {
        schema: BENCHMARK_SCHEMA.into(),
        parameters: names(run),
        trust_region: summarize("trust_region", &tr, target.q()),
        baseline: summarize("baseline", &bl, target.q()),
        x_agreement: relative_error(&bl.x_opt, &tr.x_opt),
        metadata: Metadata::new("benchmark")
            .timing("trust_region", t_tr)
            .timing("baseline", t_bl),
    };
    create_dir(&run.output_dir)?;
    let summary = report.table();
    let files = vec![
        write_json(&run.output_dir.join("benchmark.json"), &report)?,
        write_text(&run.output_dir.join("benchmark.txt"), &summary)?,
    ];
    Ok(Output { report, files, summary })
}

/// Writes the canonical arch fixture: `mesh.json`, a synthetic
/// `target.json` at the reference parameters and a matching `config.json`.
pub fn make_mesh_arch(dir: &Path, refinement: usize) -> Result<Vec<PathBuf>, CliError> {
    let rt = fixture::arch_round_trip(refinement)?;
    create_dir(dir)?;
    let mut text = rt.target.to_json();
    text.push('\n');
    let mut mesh = rt.model.to_json();
    mesh.push('\n');
    Ok(vec![
        write_text(&dir.join("mesh.json"), &mesh)?,
        write_text(&dir.join("target.json"), &text)?,
        write_text(&dir.join("config.json"), &RunConfig::arch().to_json())?,
    ])
}
