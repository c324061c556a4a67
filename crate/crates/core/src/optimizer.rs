//! Trust-region model updating over local reduced-order models.
//!
//! All internal work happens in unit-cube coordinates `u = (x - a) / (b - a)`.
//! The trust region is the infinity-norm ball `|u - c|_inf <= radius`, so
//! intersected with the unit cube it is again a box and the subproblem is a
//! bound-constrained least-squares problem.
//!
//! Each outer iteration solves the subproblem on the current ROM, then runs a
//! full eigensolve at the candidate. That solve both verifies the step (ratio
//! test on the full objective) and, if the step is accepted, provides the
//! Lanczos subspace of the next ROM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assembly::{ConstrainedSystem, ParamSpace};
use crate::eigen::{solve_smallest, EigenOptions, EigenSolution};
use crate::error::{Error, Result};
use crate::objective::{evaluate, project_mode, ModalTarget, PairingMode, Residual};
use crate::rom::LocalRom;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionOptions {
    /// Stop when the scaled projected gradient falls below this.
    pub gradient_tol: f64,
    pub max_rom_builds: usize,
    pub initial_radius: f64,
    pub max_radius: f64,
    pub shrink: f64,
    pub grow: f64,
    pub eta1: f64,
    pub eta2: f64,
    /// ROM subspace cap.
    pub m_max: usize,
    pub pairing: PairingMode,
    /// Inner (subproblem) iteration cap and tolerance.
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    /// Finite-difference step in scaled coordinates.
    pub fd_step: f64,
    /// Objective value regarded as an exact match.
    pub phi_floor: f64,
    pub eigen_tol: f64,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-3,
            max_rom_builds: 50,
            initial_radius: 0.25,
            max_radius: 1.0,
            shrink: 0.5,
            grow: 2.0,
            eta1: 0.1,
            eta2: 0.75,
            m_max: 40,
            pairing: PairingMode::Index,
            inner_max_iter: 100,
            inner_tol: 1e-10,
            fd_step: 1e-6,
            phi_floor: 1e-24,
            eigen_tol: 1e-10,
        }
    }
}

impl TrustRegionOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("optimizer options: {m}")));
        if !(0.0 < self.eta1 && self.eta1 < self.eta2 && self.eta2 < 1.0) {
            return bad("need 0 < eta1 < eta2 < 1");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink factor must lie in (0, 1)");
        }
        if !(self.grow > 1.0) {
            return bad("grow factor must exceed 1");
        }
        if !(self.initial_radius > 0.0 && self.initial_radius <= self.max_radius) {
            return bad("need 0 < initial radius <= max radius");
        }
        if self.max_rom_builds == 0 {
            return bad("max ROM builds must be positive");
        }
        if !(self.gradient_tol > 0.0 && self.fd_step > 0.0 && self.inner_tol > 0.0) {
            return bad("tolerances and steps must be positive");
        }
        Ok(())
    }

    pub fn eigen(&self) -> EigenOptions {
        EigenOptions {
            tol: self.eigen_tol,
            ..EigenOptions::default()
        }
    }

    fn modes_needed(&self, target: &ModalTarget) -> usize {
        match self.pairing {
            PairingMode::Index => target.q(),
            PairingMode::Mac { buffer } => target.q() + buffer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Scaled projected gradient below tolerance (or exact match).
    Converged,
    /// ROM-build or evaluation budget used up; best point returned.
    BudgetExhausted,
    /// Trust radius shrank below resolution without progress.
    RadiusCollapsed,
}

/// One outer iteration (step 0 is the starting point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// Full-model objective at the evaluated point.
    pub phi: f64,
    /// Radius used to compute this step.
    pub radius: f64,
    /// Actual over predicted reduction; absent for the starting point.
    pub ratio: Option<f64>,
    pub accepted: bool,
    pub x_scaled: Vec<f64>,
    pub x: Vec<f64>,
    pub frequencies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub x_opt: Vec<f64>,
    pub phi_opt: f64,
    pub residual: Residual,
    /// Per surrogate build (accepted centers, starting point first).
    pub phi_history: Vec<f64>,
    pub frequency_history: Vec<Vec<f64>>,
    pub x_history: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
    pub solution: EigenSolution,
    pub termination: Termination,
    pub gradient_norm: f64,
    /// Surrogates in use over the run (initial plus one per accepted step).
    pub rom_builds: usize,
    /// Every full eigensolve performed.
    pub full_solves: usize,
    pub rom_dims: Vec<usize>,
    pub swap_warnings: usize,
}

impl UpdateResult {
    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.steps.len() - self.accepted()
    }
}

/// A local model of the residual around an expansion point, built from a
/// full solve there.
pub trait SurrogateModel {
    fn center(&self) -> &[f64];
    /// Full solve at the center.
    fn solution(&self) -> &EigenSolution;
    /// Full-model residual at the center.
    fn center_residual(&self) -> &Residual;
    /// Surrogate residual at `x`.
    fn residual(&self, x: &[f64]) -> Result<Residual>;
    /// Full eigensolves performed by this surrogate beyond its construction.
    fn extra_solves(&self) -> usize {
        0
    }
    fn dim(&self) -> usize;
}

pub trait SurrogateFactory {
    type Model: SurrogateModel;
    fn build(&self, x: &[f64]) -> Result<Self::Model>;
    fn space(&self) -> &ParamSpace;
}

fn full_residual(
    sol: &EigenSolution,
    target: &ModalTarget,
    pairing: PairingMode,
) -> Result<(Residual, bool)> {
    let modes = if target.has_modes() {
        (0..sol.len())
            .map(|i| project_mode(&sol.mode(i), &target.sensors))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (r, p) = evaluate(target, &sol.frequencies, &modes, pairing)?;
    Ok((r, p.swap_warning))
}

/// Lanczos ROM surrogate.
pub struct RomSurrogate<'a> {
    rom: LocalRom,
    target: &'a ModalTarget,
    sensor_basis: DMatrix<f64>,
    pairing: PairingMode,
    count: usize,
    center_residual: Residual,
}

impl<'a> RomSurrogate<'a> {
    pub fn new(rom: LocalRom, target: &'a ModalTarget, pairing: PairingMode) -> Result<Self> {
        let count = rom.q();
        let (center_residual, _) = full_residual(rom.center_solution(), target, pairing)?;
        Ok(Self {
            sensor_basis: rom.sensor_basis(&target.sensors),
            rom,
            target,
            pairing,
            count,
            center_residual,
        })
    }

    pub fn rom(&self) -> &LocalRom {
        &self.rom
    }
}

impl SurrogateModel for RomSurrogate<'_> {
    fn center(&self) -> &[f64] {
        self.rom.center()
    }

    fn solution(&self) -> &EigenSolution {
        self.rom.center_solution()
    }

    fn center_residual(&self) -> &Residual {
        &self.center_residual
    }

    fn residual(&self, x: &[f64]) -> Result<Residual> {
        let (f, modes) = self.rom.eval_at_sensors(x, &self.sensor_basis, self.count)?;
        let modes = if self.target.has_modes() { modes } else { Vec::new() };
        evaluate(self.target, &f, &modes, self.pairing).map(|(r, _)| r)
    }

    fn dim(&self) -> usize {
        self.rom.dim()
    }
}

pub struct RomFactory<'a> {
    pub system: &'a ConstrainedSystem,
    pub target: &'a ModalTarget,
    pub options: TrustRegionOptions,
}

impl<'a> SurrogateFactory for RomFactory<'a> {
    type Model = RomSurrogate<'a>;

    fn build(&self, x: &[f64]) -> Result<RomSurrogate<'a>> {
        let rom = LocalRom::build(
            self.system,
            x,
            self.options.modes_needed(self.target),
            self.options.m_max,
            &self.options.eigen(),
        )?;
        RomSurrogate::new(rom, self.target, self.options.pairing)
    }

    fn space(&self) -> &ParamSpace {
        self.system.space()
    }
}

/// Test shim: the "surrogate" is the full model itself, so every residual
/// evaluation is a full eigensolve and the trust-region loop reduces to
/// projected Gauss-Newton on the true objective.
pub struct FullModelFactory<'a> {
    pub system: &'a ConstrainedSystem,
    pub target: &'a ModalTarget,
    pub options: TrustRegionOptions,
}

pub struct FullModel<'a> {
    factory: &'a FullModelFactory<'a>,
    center: Vec<f64>,
    solution: EigenSolution,
    center_residual: Residual,
    solves: std::cell::Cell<usize>,
}

impl SurrogateModel for FullModel<'_> {
    fn center(&self) -> &[f64] {
        &self.center
    }

    fn solution(&self) -> &EigenSolution {
        &self.solution
    }

    fn center_residual(&self) -> &Residual {
        &self.center_residual
    }

    fn residual(&self, x: &[f64]) -> Result<Residual> {
        let f = self.factory;
        self.solves.set(self.solves.get() + 1);
        let sol = solve_smallest(f.system, x, f.options.modes_needed(f.target), &f.options.eigen())?;
        full_residual(&sol, f.target, f.options.pairing).map(|(r, _)| r)
    }

    fn extra_solves(&self) -> usize {
        self.solves.get()
    }

    fn dim(&self) -> usize {
        self.factory.system.dim()
    }
}

impl<'a> FullModelFactory<'a> {
    pub fn build_model(&'a self, x: &[f64]) -> Result<FullModel<'a>> {
        let sol = solve_smallest(
            self.system,
            x,
            self.options.modes_needed(self.target),
            &self.options.eigen(),
        )?;
        let (center_residual, _) = full_residual(&sol, self.target, self.options.pairing)?;
        Ok(FullModel {
            factory: self,
            center: x.to_vec(),
            solution: sol,
            center_residual,
            solves: std::cell::Cell::new(0),
        })
    }
}

impl<'a> SurrogateFactory for &'a FullModelFactory<'a> {
    type Model = FullModel<'a>;

    fn build(&self, x: &[f64]) -> Result<FullModel<'a>> {
        (*self).build_model(x)
    }

    fn space(&self) -> &ParamSpace {
        self.system.space()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn phi_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Residual Jacobian with respect to scaled coordinates by central
/// differences, one-sided where a step would leave `[lo, hi]`.
pub(crate) fn fd_jacobian_scaled<F>(
    f: F,
    u: &[f64],
    r0: &[f64],
    lo: &[f64],
    hi: &[f64],
    h: f64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = u.len();
    let mut j = DMatrix::zeros(r0.len(), p);
    for c in 0..p {
        let up = u[c] + h <= hi[c];
        let down = u[c] - h >= lo[c];
        let (a, b, width) = match (down, up) {
            (true, true) => (u[c] - h, u[c] + h, 2.0 * h),
            (false, true) => (u[c], u[c] + h, h),
            (true, false) => (u[c] - h, u[c], h),
            (false, false) => continue,
        };
        let eval = |v: f64| -> Result<Vec<f64>> {
            if v == u[c] {
                return Ok(r0.to_vec());
            }
            let mut w = u.to_vec();
            w[c] = v;
            f(&w)
        };
        let ra = eval(a)?;
        let rb = eval(b)?;
        for k in 0..r0.len() {
            j[(k, c)] = (rb[k] - ra[k]) / width;
        }
    }
    Ok(j)
}

/// `||P(u - g) - u||` with `P` the projection onto `[lo, hi]`.
pub(crate) fn projected_gradient_norm(u: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    u.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&ui, &gi), (&l, &h))| ((ui - gi).clamp(l, h) - ui).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Least-squares step `min ||J_F s + r||` over the free columns `F`.
fn gauss_newton_step(j: &DMatrix<f64>, r: &[f64], free: &[usize]) -> Vec<f64> {
    let p = j.ncols();
    let mut step = vec![0.0; p];
    if free.is_empty() {
        return step;
    }
    let jf = DMatrix::from_fn(j.nrows(), free.len(), |a, b| j[(a, free[b])]);
    let rhs = -DVector::from_column_slice(r);
    let svd = jf.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-12).max(f64::MIN_POSITIVE);
    if let Ok(s) = svd.solve(&rhs, eps) {
        for (k, &c) in free.iter().enumerate() {
            step[c] = s[k];
        }
    }
    step
}

/// Minimizes the surrogate objective over the box `[lo, hi]` (scaled
/// coordinates) by projected Gauss-Newton with a dogleg inner trust region.
/// Never returns a point with a larger surrogate objective than `u0`.
fn inner_solve<F>(
    f: F,
    u0: &[f64],
    r0: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    opts: &TrustRegionOptions,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = u0.len();
    let mut u = u0.to_vec();
    let mut r = r0;
    let mut phi = phi_of(&r);
    let mut delta = lo
        .iter()
        .zip(hi)
        .map(|(l, h)| h - l)
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut jac = fd_jacobian_scaled(&f, &u, &r, lo, hi, opts.fd_step)?;
    for _ in 0..opts.inner_max_iter {
        if phi <= opts.phi_floor {
            break;
        }
        let g: Vec<f64> = (jac.transpose() * DVector::from_column_slice(&r))
            .iter()
            .map(|v| 2.0 * v)
            .collect();
        if projected_gradient_norm(&u, &g, lo, hi) <= opts.inner_tol {
            break;
        }
        let free: Vec<usize> = (0..p)
            .filter(|&i| !((u[i] <= lo[i] && g[i] > 0.0) || (u[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let gn = gauss_newton_step(&jac, &r, &free);
        let mut gf = vec![0.0; p];
        for &i in &free {
            gf[i] = g[i];
        }
        let step = if norm(&gn) <= delta {
            gn
        } else {
            let jg = &jac * DVector::from_column_slice(&gf);
            let gg: f64 = gf.iter().map(|v| v * v).sum();
            let jgjg = jg.norm_squared();
            let cauchy: Vec<f64> = if jgjg > 0.0 {
                gf.iter().map(|v| -0.5 * gg / jgjg * v).collect()
            } else {
                vec![0.0; p]
            };
            let nc = norm(&cauchy);
            if nc >= delta || nc == 0.0 {
                let ng = gg.sqrt().max(f64::MIN_POSITIVE);
                gf.iter().map(|v| -delta * v / ng).collect()
            } else {
                // walk from the Cauchy point toward the Gauss-Newton point
                let d: Vec<f64> = gn.iter().zip(&cauchy).map(|(a, b)| a - b).collect();
                let a = norm(&d).powi(2);
                let b = 2.0 * cauchy.iter().zip(&d).map(|(x, y)| x * y).sum::<f64>();
                let c = nc * nc - delta * delta;
                let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
                cauchy.iter().zip(&d).map(|(x, y)| x + tau * y).collect()
            }
        };
        let trial: Vec<f64> = u
            .iter()
            .zip(&step)
            .zip(lo.iter().zip(hi))
            .map(|((x, s), (l, h))| (x + s).clamp(*l, *h))
            .collect();
        let actual_step: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
        if norm(&actual_step) <= 1e-15 {
            break;
        }
        let lin = &jac * DVector::from_column_slice(&actual_step) + DVector::from_column_slice(&r);
        let predicted = phi - lin.norm_squared();
        let r_trial = f(&trial)?;
        let phi_trial = phi_of(&r_trial);
        let actual = phi - phi_trial;
        let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };
        if actual > 0.0 && ratio > 0.1 {
            u = trial;
            r = r_trial;
            phi = phi_trial;
            if ratio > 0.75 {
                delta = (2.0 * delta).max(2.0 * norm(&actual_step));
            }
            jac = fd_jacobian_scaled(&f, &u, &r, lo, hi, opts.fd_step)?;
        } else if actual > 0.0 {
            // poor model but still a decrease: take it and shrink
            u = trial;
            r = r_trial;
            phi = phi_trial;
            delta = 0.25 * norm(&actual_step);
            jac = fd_jacobian_scaled(&f, &u, &r, lo, hi, opts.fd_step)?;
        } else {
            delta = 0.25 * norm(&actual_step);
        }
        if delta < 1e-14 {
            break;
        }
    }
    Ok((u, r))
}

fn region_box(center: &[f64], radius: f64) -> (Vec<f64>, Vec<f64>) {
    (
        center.iter().map(|c| (c - radius).max(0.0)).collect(),
        center.iter().map(|c| (c + radius).min(1.0)).collect(),
    )
}

/// Surrogate residual as a function of scaled coordinates.
fn scaled_residual<'m, M: SurrogateModel + ?Sized>(
    model: &'m M,
    space: &'m ParamSpace,
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'm {
    move |u: &[f64]| model.residual(&space.from_unit(u)).map(|r| r.r)
}

fn subproblem<M: SurrogateModel + ?Sized>(
    model: &M,
    space: &ParamSpace,
    center: &[f64],
    radius: f64,
    opts: &TrustRegionOptions,
) -> Result<(Vec<f64>, f64, f64)> {
    space.check(center)?;
    let uc = space.to_unit(center);
    let r0 = model.residual(center)?.r;
    let phi0 = phi_of(&r0);
    if radius <= 0.0 {
        return Ok((center.to_vec(), phi0, phi0));
    }
    let (lo, hi) = region_box(&uc, radius);
    let f = scaled_residual(model, space);
    let (u, r) = inner_solve(&f, &uc, r0, &lo, &hi, opts)?;
    let phi = phi_of(&r);
    if phi < phi0 {
        Ok((space.from_unit(&u), phi0, phi))
    } else {
        Ok((center.to_vec(), phi0, phi0))
    }
}

/// Minimizes the ROM objective over `Omega` intersected with the scaled
/// infinity-norm ball of `radius` around `center`.
pub fn solve_subproblem(
    rom: &LocalRom,
    target: &ModalTarget,
    center: &[f64],
    radius: f64,
    opts: &TrustRegionOptions,
) -> Result<Vec<f64>> {
    let model = RomSurrogate::new(rom.clone(), target, opts.pairing)?;
    subproblem(&model, rom.space(), center, radius, opts).map(|(x, _, _)| x)
}

fn gradient_at<M: SurrogateModel>(
    model: &M,
    space: &ParamSpace,
    opts: &TrustRegionOptions,
) -> Result<f64> {
    let u = space.to_unit(model.center());
    let r = model.residual(model.center())?.r;
    let lo = vec![0.0; u.len()];
    let hi = vec![1.0; u.len()];
    let jac = fd_jacobian_scaled(scaled_residual(model, space), &u, &r, &lo, &hi, opts.fd_step)?;
    let g: Vec<f64> = (jac.transpose() * DVector::from_column_slice(&r))
        .iter()
        .map(|v| 2.0 * v)
        .collect();
    Ok(projected_gradient_norm(&u, &g, &lo, &hi))
}

fn check_problem(space: &ParamSpace, target: &ModalTarget, opts: &TrustRegionOptions) -> Result<()> {
    opts.validate()?;
    space.check(space.start())?;
    let data = target.weights.iter().filter(|&&w| w > 0.0).count();
    if data < space.dim() {
        log::warn!(
            "{} weighted data for {} parameters: the problem is underdetermined",
            data,
            space.dim()
        );
    }
    Ok(())
}

/// Generic trust-region loop over any surrogate family.
pub fn update_with<F: SurrogateFactory>(
    factory: &F,
    target: &ModalTarget,
    opts: &TrustRegionOptions,
) -> Result<UpdateResult> {
    let space = factory.space().clone();
    check_problem(&space, target, opts)?;
    let mut x = space.start().to_vec();
    let mut model = factory.build(&x)?;
    let mut full_solves = 1;
    let mut rom_builds = 1;
    let mut phi = model.center_residual().phi;
    let mut radius = opts.initial_radius;
    let mut swap_warnings = 0;

    let record = |iteration: usize, m: &F::Model, radius: f64, ratio: Option<f64>, accepted: bool| StepRecord {
        iteration,
        phi: m.center_residual().phi,
        radius,
        ratio,
        accepted,
        x_scaled: space.to_unit(m.center()),
        x: m.center().to_vec(),
        frequencies: m.solution().frequencies[..target.q()].to_vec(),
    };
    let mut steps = vec![record(0, &model, radius, None, true)];
    let mut phi_history = vec![phi];
    let mut frequency_history = vec![model.solution().frequencies[..target.q()].to_vec()];
    let mut x_history = vec![x.clone()];
    let mut rom_dims = vec![model.dim()];
    let max_iterations = 4 * opts.max_rom_builds + 20;

    let mut gradient_norm = gradient_at(&model, &space, opts)?;
    let termination = loop {
        if phi <= opts.phi_floor || gradient_norm <= opts.gradient_tol {
            break Termination::Converged;
        }
        if rom_builds >= opts.max_rom_builds || steps.len() >= max_iterations {
            log::warn!("trust-region budget exhausted; returning best point");
            break Termination::BudgetExhausted;
        }
        if radius < 1e-12 {
            break Termination::RadiusCollapsed;
        }
        let (candidate, phi_model_center, phi_model_candidate) =
            subproblem(&model, &space, &x, radius, opts)?;
        full_solves += model.extra_solves();
        let predicted = phi_model_center - phi_model_candidate;
        if !(predicted > 0.0) {
            radius *= opts.shrink;
            log::debug!("no model decrease; radius -> {radius:e}");
            continue;
        }
        let next = factory.build(&candidate)?;
        full_solves += 1;
        let phi_candidate = next.center_residual().phi;
        let ratio = (phi - phi_candidate) / predicted;
        let step_radius = radius;
        if ratio >= opts.eta1 {
            if ratio >= opts.eta2 {
                radius = (radius * opts.grow).min(opts.max_radius);
            }
            steps.push(record(steps.len(), &next, step_radius, Some(ratio), true));
            model = next;
            x = candidate;
            phi = phi_candidate;
            rom_builds += 1;
            phi_history.push(phi);
            frequency_history.push(model.solution().frequencies[..target.q()].to_vec());
            x_history.push(x.clone());
            rom_dims.push(model.dim());
            gradient_norm = gradient_at(&model, &space, opts)?;
            log::info!(
                "build {rom_builds}: phi {phi:.3e}, |pg| {gradient_norm:.3e}, radius {radius:.3e}"
            );
        } else {
            steps.push(record(steps.len(), &next, step_radius, Some(ratio), false));
            radius *= opts.shrink;
        }
    };

    let (residual, swap) = full_residual(model.solution(), target, opts.pairing)?;
    if swap {
        swap_warnings += 1;
    }
    Ok(UpdateResult {
        x_opt: x,
        phi_opt: residual.phi,
        residual,
        phi_history,
        frequency_history,
        x_history,
        steps,
        solution: model.solution().clone(),
        termination,
        gradient_norm,
        rom_builds,
        full_solves,
        rom_dims,
        swap_warnings,
    })
}

/// Calibrates the parameters of `system` against `target`, starting from the
/// start point of the system's parameter space.
pub fn update(
    system: &ConstrainedSystem,
    target: &ModalTarget,
    opts: &TrustRegionOptions,
) -> Result<UpdateResult> {
    let factory = RomFactory {
        system,
        target,
        options: *opts,
    };
    update_with(&factory, target, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    pub gradient_tol: f64,
    pub max_evaluations: usize,
    pub fd_step: f64,
    pub initial_damping: f64,
    pub phi_floor: f64,
    pub pairing: PairingMode,
    pub eigen_tol: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-3,
            max_evaluations: 500,
            fd_step: 1e-6,
            initial_damping: 1e-3,
            phi_floor: 1e-24,
            pairing: PairingMode::Index,
            eigen_tol: 1e-10,
        }
    }
}

/// Projected Levenberg-Marquardt on the full model with forward-difference
/// Jacobians; every residual evaluation is a full eigensolve.
pub fn blackbox_baseline(
    system: &ConstrainedSystem,
    target: &ModalTarget,
    opts: &BaselineOptions,
) -> Result<UpdateResult> {
    let space = system.space();
    let tr = TrustRegionOptions {
        pairing: opts.pairing,
        eigen_tol: opts.eigen_tol,
        ..TrustRegionOptions::default()
    };
    check_problem(space, target, &tr)?;
    let p = space.dim();
    let count = tr.modes_needed(target);
    let eigen = tr.eigen();
    let solves = std::cell::Cell::new(0usize);
    let solve = |u: &[f64]| -> Result<(EigenSolution, Residual)> {
        solves.set(solves.get() + 1);
        let sol = solve_smallest(system, &space.from_unit(u), count, &eigen)?;
        let (r, _) = full_residual(&sol, target, opts.pairing)?;
        Ok((sol, r))
    };
    let lo = vec![0.0; p];
    let hi = vec![1.0; p];
    let jacobian = |u: &[f64], r0: &[f64]| -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(r0.len(), p);
        for c in 0..p {
            let h = if u[c] + opts.fd_step <= 1.0 { opts.fd_step } else { -opts.fd_step };
            let mut w = u.to_vec();
            w[c] += h;
            let (_, r) = solve(&w)?;
            for k in 0..r0.len() {
                j[(k, c)] = (r.r[k] - r0[k]) / h;
            }
        }
        Ok(j)
    };

    let mut u = space.to_unit(space.start());
    let (mut sol, mut res) = solve(&u)?;
    let record = |it: usize, u: &[f64], sol: &EigenSolution, res: &Residual, ratio: Option<f64>, accepted: bool| StepRecord {
        iteration: it,
        phi: res.phi,
        radius: 0.0,
        ratio,
        accepted,
        x_scaled: u.to_vec(),
        x: space.from_unit(u),
        frequencies: sol.frequencies[..target.q()].to_vec(),
    };
    let mut steps = vec![record(0, &u, &sol, &res, None, true)];
    let mut phi_history = vec![res.phi];
    let mut frequency_history = vec![sol.frequencies[..target.q()].to_vec()];
    let mut x_history = vec![space.from_unit(&u)];
    let mut mu = opts.initial_damping;
    let mut jac = jacobian(&u, &res.r)?;
    let mut gnorm;
    let termination = loop {
        let g: Vec<f64> = (jac.transpose() * DVector::from_column_slice(&res.r))
            .iter()
            .map(|v| 2.0 * v)
            .collect();
        gnorm = projected_gradient_norm(&u, &g, &lo, &hi);
        if res.phi <= opts.phi_floor || gnorm <= opts.gradient_tol {
            break Termination::Converged;
        }
        if solves.get() >= opts.max_evaluations {
            break Termination::BudgetExhausted;
        }
        if mu > 1e12 {
            break Termination::RadiusCollapsed;
        }
        let free: Vec<usize> = (0..p)
            .filter(|&i| !((u[i] <= 0.0 && g[i] > 0.0) || (u[i] >= 1.0 && g[i] < 0.0)))
            .collect();
        let jf = DMatrix::from_fn(jac.nrows(), free.len(), |a, b| jac[(a, free[b])]);
        let mut a = jf.transpose() * &jf;
        for d in 0..free.len() {
            a[(d, d)] += mu * a[(d, d)].max(1e-12);
        }
        let rhs = -(jf.transpose() * DVector::from_column_slice(&res.r));
        let s = a.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(free.len()));
        let mut trial = u.clone();
        for (k, &c) in free.iter().enumerate() {
            trial[c] = (trial[c] + s[k]).clamp(0.0, 1.0);
        }
        let (tsol, tres) = solve(&trial)?;
        let accepted = tres.phi < res.phi;
        steps.push(record(steps.len(), &trial, &tsol, &tres, None, accepted));
        if accepted {
            u = trial;
            sol = tsol;
            res = tres;
            mu = (mu / 3.0).max(1e-12);
            phi_history.push(res.phi);
            frequency_history.push(sol.frequencies[..target.q()].to_vec());
            x_history.push(space.from_unit(&u));
            jac = jacobian(&u, &res.r)?;
        } else {
            mu *= 4.0;
        }
    };
    Ok(UpdateResult {
        x_opt: space.from_unit(&u),
        phi_opt: res.phi,
        residual: res,
        phi_history,
        frequency_history,
        x_history,
        steps,
        solution: sol,
        termination,
        gradient_norm: gnorm,
        rom_builds: 0,
        full_solves: solves.get(),
        rom_dims: Vec::new(),
        swap_warnings: 0,
    })
}
