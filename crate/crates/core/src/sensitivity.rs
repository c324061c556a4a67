//! Residual Jacobian, scaled-Jacobian SVD, perturbation analysis and noise
//! sweeps.
//!
//! Frequency rows of the Jacobian use the simple-eigenvalue derivative
//!
//! ```text
//! d lambda / d x_j = v^T (dK/dx_j - lambda dM/dx_j) v,   v^T M v = 1
//! df/dx = (d lambda/dx) / (8 pi^2 f)
//! ```
//!
//! MAC rows use central differences on the local ROM. Near a repeated
//! eigenvalue every row falls back to central differences on full solves.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::ConstrainedSystem;
use crate::eigen::{solve_smallest, EigenOptions, EigenSolution};
use crate::error::{Error, Result};
use crate::objective::{evaluate, project_mode, ModalTarget, PairingMode, Residual};
use crate::optimizer::{update, RomSurrogate, SurrogateModel, Termination, TrustRegionOptions};
use crate::rom::LocalRom;

/// Relative eigenvalue gap below which pairs count as repeated.
pub const REPEATED_GAP: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct JacobianReport {
    /// `2q x p`, derivatives with respect to physical parameters.
    pub jacobian: DMatrix<f64>,
    pub residual: Residual,
    pub solution: EigenSolution,
    /// Repeated eigenvalue detected; all rows are full finite differences.
    pub fallback: bool,
}

fn residual_of(sol: &EigenSolution, target: &ModalTarget, pairing: PairingMode) -> Result<(Residual, Vec<usize>)> {
    let modes = if target.has_modes() {
        (0..sol.len())
            .map(|i| project_mode(&sol.mode(i), &target.sensors))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (r, p) = evaluate(target, &sol.frequencies, &modes, pairing)?;
    Ok((r, p.indices))
}

/// Steps `(a, b)` around `x[c]` inside the box, central when possible.
fn fd_points(x: &[f64], c: usize, h: f64, lo: f64, hi: f64) -> (f64, f64) {
    let up = x[c] + h <= hi;
    let down = x[c] - h >= lo;
    match (down, up) {
        (true, true) => (x[c] - h, x[c] + h),
        (false, true) => (x[c], x[c] + h),
        _ => (x[c] - h, x[c]),
    }
}

fn fd_column<F>(f: &F, x: &[f64], c: usize, h: f64, lo: f64, hi: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let (a, b) = fd_points(x, c, h, lo, hi);
    let at = |v: f64| {
        let mut w = x.to_vec();
        w[c] = v;
        f(&w)
    };
    let ra = at(a)?;
    let rb = at(b)?;
    Ok(ra.iter().zip(&rb).map(|(p, q)| (q - p) / (b - a)).collect())
}

/// Options for [`jacobian`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianOptions {
    /// Finite-difference step in unit-cube coordinates.
    pub fd_step: f64,
    pub pairing: PairingMode,
    pub m_max: usize,
    pub eigen: EigenOptions,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-6,
            pairing: PairingMode::Index,
            m_max: 40,
            eigen: EigenOptions::default(),
        }
    }
}

/// Residual Jacobian at `x`.
pub fn jacobian(
    system: &ConstrainedSystem,
    target: &ModalTarget,
    x: &[f64],
    opts: &JacobianOptions,
) -> Result<JacobianReport> {
    let space = system.space();
    space.check(x)?;
    let q = target.q();
    let p = space.dim();
    let count = match opts.pairing {
        PairingMode::Index => q,
        PairingMode::Mac { buffer } => q + buffer,
    };
    let probe = (count + 1).min(system.dim());
    let rom = LocalRom::build(system, x, probe, opts.m_max, &opts.eigen)?;
    let solution = rom.center_solution().clone();
    let (residual, pairing) = residual_of(&solution, target, opts.pairing)?;
    let lam = &solution.eigenvalues;
    let repeated = lam
        .windows(2)
        .any(|w| (w[1] - w[0]).abs() <= REPEATED_GAP * w[1].abs());
    let widths = space.widths();
    let lower = space.lower();
    let upper = space.upper();

    let mut jac = DMatrix::zeros(2 * q, p);
    if repeated {
        log::warn!("repeated eigenvalue near x; Jacobian by full finite differences");
        let full = |xx: &[f64]| -> Result<Vec<f64>> {
            let sol = solve_smallest(system, xx, probe, &opts.eigen)?;
            residual_of(&sol, target, opts.pairing).map(|(r, _)| r.r)
        };
        for c in 0..p {
            let col = fd_column(&full, x, c, opts.fd_step * widths[c], lower[c], upper[c])?;
            for (k, v) in col.into_iter().enumerate() {
                jac[(k, c)] = v;
            }
        }
    } else {
        let w = &target.weights;
        for c in 0..p {
            let dk = system.stiffness_derivative(c);
            let dm = system.mass_derivative(c);
            for (i, &mode) in pairing.iter().enumerate() {
                if w[i] == 0.0 {
                    continue;
                }
                let v: Vec<f64> = solution.reduced_modes.column(mode).iter().copied().collect();
                let mut dl = 0.0;
                if let Some(k) = &dk {
                    dl += k.bilinear(&v, &v);
                }
                if let Some(m) = &dm {
                    dl -= lam[mode] * m.bilinear(&v, &v);
                }
                let f = solution.frequencies[mode];
                let df = dl / (8.0 * std::f64::consts::PI.powi(2) * f);
                jac[(i, c)] = -w[i] * df;
            }
        }
        if target.has_modes() && w[q..].iter().any(|&v| v > 0.0) {
            let surrogate = RomSurrogate::new(rom, target, opts.pairing)?;
            let mac_rows = |xx: &[f64]| -> Result<Vec<f64>> {
                surrogate.residual(xx).map(|r| r.r[q..].to_vec())
            };
            for c in 0..p {
                let col = fd_column(&mac_rows, x, c, opts.fd_step * widths[c], lower[c], upper[c])?;
                for (k, v) in col.into_iter().enumerate() {
                    jac[(q + k, c)] = v;
                }
            }
        }
    }
    Ok(JacobianReport {
        jacobian: jac,
        residual,
        solution,
        fallback: repeated,
    })
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// SVD of the Jacobian with columns scaled by the optimum, so that every
/// scaled parameter equals one at the solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdReport {
    /// Descending; values below the numerical-rank threshold are zero.
    pub singular_values: Vec<f64>,
    /// Right singular vectors `z_i`.
    pub z: Vec<Vec<f64>>,
    /// Left singular vectors `q_i`.
    pub q: Vec<Vec<f64>>,
    /// `sigma_1 / sigma_p`; infinite (`null` in JSON) when rank deficient.
    #[serde(with = "infinite_as_null")]
    pub condition_number: f64,
    /// `sigma_i` exceeds both the noise level and the rank threshold.
    pub trusted: Vec<bool>,
    pub noise_level: f64,
    pub rank: usize,
}

/// Relative threshold separating genuine singular values from an exact
/// null direction polluted by rounding.
pub const RANK_TOL: f64 = 1e-8;

struct SortedSvd {
    sigma: Vec<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
}

fn sorted_svd(a: &DMatrix<f64>) -> SortedSvd {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return SortedSvd {
            sigma: Vec::new(),
            u: DMatrix::zeros(m, 0),
            v: DMatrix::zeros(n, 0),
        };
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("left vectors");
    let vt = svd.v_t.expect("right vectors");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut su = DMatrix::zeros(m, k);
    let mut sv = DMatrix::zeros(n, k);
    let mut sigma = Vec::with_capacity(k);
    for (c, &i) in order.iter().enumerate() {
        let mut zcol: Vec<f64> = vt.row(i).iter().copied().collect();
        let mut qcol: Vec<f64> = u.column(i).iter().copied().collect();
        // deterministic signs: largest component of z positive
        let big = zcol
            .iter()
            .cloned()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() * (1.0 + 1e-12) { v } else { acc });
        if big < 0.0 {
            zcol.iter_mut().for_each(|v| *v = -*v);
            qcol.iter_mut().for_each(|v| *v = -*v);
        }
        sv.set_column(c, &DVector::from_vec(zcol));
        su.set_column(c, &DVector::from_vec(qcol));
        sigma.push(svd.singular_values[i]);
    }
    let cutoff = (m.max(n) as f64) * f64::EPSILON * sigma[0];
    for s in sigma.iter_mut() {
        if *s <= cutoff {
            *s = 0.0;
        }
    }
    SortedSvd { sigma, u: su, v: sv }
}

pub fn svd_report(jacobian: &DMatrix<f64>, x_opt: &[f64], noise_level: f64) -> SvdReport {
    let p = jacobian.ncols();
    let scaled = DMatrix::from_fn(jacobian.nrows(), p, |r, c| jacobian[(r, c)] * x_opt[c]);
    let s = sorted_svd(&scaled);
    let sigma1 = s.sigma.first().copied().unwrap_or(0.0);
    let sigma_p = if s.sigma.len() < p { 0.0 } else { *s.sigma.last().unwrap_or(&0.0) };
    let condition_number = if sigma_p > 0.0 { sigma1 / sigma_p } else { f64::INFINITY };
    let trusted: Vec<bool> = s
        .sigma
        .iter()
        .map(|&v| v > noise_level && v > RANK_TOL * sigma1)
        .collect();
    SvdReport {
        rank: s.sigma.iter().filter(|&&v| v > 0.0).count(),
        z: s.v.column_iter().map(|c| c.iter().copied().collect()).collect(),
        q: s.u.column_iter().map(|c| c.iter().copied().collect()).collect(),
        singular_values: s.sigma,
        condition_number,
        trusted,
        noise_level,
    }
}

/// Linearized response of the solution to a data perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Least-squares solution of `J dx = db`.
    pub dx: Vec<f64>,
    /// `zeta_i = z_i . dx` over the right singular vectors of `J`.
    pub zeta: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub rank: usize,
}

/// Solves the normal equations `J^T J dx = J^T db` through the SVD
/// (pseudo-inverse when `J` is rank deficient).
pub fn perturb_solution(jacobian: &DMatrix<f64>, db: &[f64]) -> Result<Perturbation> {
    if db.len() != jacobian.nrows() {
        return Err(Error::Validation(format!(
            "perturbation of length {} for a Jacobian with {} rows",
            db.len(),
            jacobian.nrows()
        )));
    }
    let p = jacobian.ncols();
    let s = sorted_svd(jacobian);
    let b = DVector::from_column_slice(db);
    let mut dx = DVector::zeros(p);
    let mut rank = 0;
    for (i, &sigma) in s.sigma.iter().enumerate() {
        if sigma > 0.0 {
            rank += 1;
            let coef = s.u.column(i).dot(&b) / sigma;
            dx += s.v.column(i) * coef;
        }
    }
    if rank < p {
        log::warn!("rank-deficient Jacobian (rank {rank} of {p}); pseudo-inverse solution");
    }
    let zeta = (0..s.sigma.len()).map(|i| s.v.column(i).dot(&dx)).collect();
    Ok(Perturbation {
        dx: dx.iter().copied().collect(),
        zeta,
        z: s.v.column_iter().map(|c| c.iter().copied().collect()).collect(),
        rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSweepOptions {
    /// Relative frequency noise levels `delta`.
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Base seed mixed into every per-row generator.
    pub base_seed: u64,
    /// Standard deviation of additive Gaussian noise on mode shapes,
    /// relative to each mode's largest sensor amplitude.
    pub mode_noise: Option<f64>,
    pub optimizer: TrustRegionOptions,
}

impl Default for NoiseSweepOptions {
    fn default() -> Self {
        Self {
            levels: vec![1e-4, 1e-3, 1e-2, 1e-1],
            seeds: (0..10).collect(),
            base_seed: 0,
            mode_noise: None,
            optimizer: TrustRegionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub seed: u64,
    /// `max_i |x_i^p - x_i| / |x_i^p|` against the clean optimum.
    pub error: f64,
    pub converged: bool,
    pub phi: f64,
    pub rom_builds: usize,
    pub failure: Option<String>,
}

/// Frequencies perturbed by `f_i (1 + delta u_i)` with `u_i ~ U[-1, 1]`.
/// The draws depend on the seed only, so every noise level sees the same
/// direction (common random numbers).
pub fn perturbed_target(
    clean: &ModalTarget,
    delta: f64,
    base_seed: u64,
    seed: u64,
    mode_noise: Option<f64>,
) -> Result<ModalTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
    let freqs: Vec<f64> = clean
        .frequencies
        .iter()
        .map(|f| f * (1.0 + delta * rng.gen_range(-1.0..=1.0)))
        .collect();
    let mut target = clean.with_frequencies(freqs)?;
    if let Some(sd) = mode_noise {
        if sd > 0.0 && target.has_modes() {
            let normal = Normal::new(0.0, sd).map_err(|e| Error::Validation(e.to_string()))?;
            let shapes = target
                .mode_shapes
                .iter()
                .map(|s| {
                    let amp = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    s.iter().map(|v| v + amp * normal.sample(&mut rng)).collect()
                })
                .collect();
            target = target.with_mode_shapes(shapes)?;
        }
    }
    Ok(target)
}

/// Relative infinity-norm distance `max_i |(x_p_i - x_i) / x_p_i|`.
pub fn relative_error(x_p: &[f64], x: &[f64]) -> f64 {
    x_p.iter()
        .zip(x)
        .map(|(p, c)| ((p - c) / p).abs())
        .fold(0.0, f64::max)
}

/// Re-runs the update on perturbed targets and records the parameter error
/// against the clean optimum. Rows run in parallel; output order is
/// `(level, seed)`. A failing row is recorded and the sweep continues.
pub fn noise_sweep(
    system: &ConstrainedSystem,
    clean: &ModalTarget,
    opts: &NoiseSweepOptions,
) -> Result<(Vec<f64>, Vec<SweepRow>)> {
    let clean_opt = update(system, clean, &opts.optimizer)?.x_opt;
    let jobs: Vec<(f64, u64)> = opts
        .levels
        .iter()
        .flat_map(|&d| opts.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(delta, seed)| {
            let run = || -> Result<SweepRow> {
                let target = perturbed_target(clean, delta, opts.base_seed, seed, opts.mode_noise)?;
                let res = update(system, &target, &opts.optimizer)?;
                Ok(SweepRow {
                    delta,
                    seed,
                    error: relative_error(&res.x_opt, &clean_opt),
                    converged: res.termination == Termination::Converged,
                    phi: res.phi_opt,
                    rom_builds: res.rom_builds,
                    failure: None,
                })
            };
            run().unwrap_or_else(|e| SweepRow {
                delta,
                seed,
                error: f64::NAN,
                converged: false,
                phi: f64::NAN,
                rom_builds: 0,
                failure: Some(e.to_string()),
            })
        })
        .collect();
    Ok((clean_opt, rows))
}

/// Median error per noise level (failed rows excluded), in level order.
pub fn median_errors(levels: &[f64], rows: &[SweepRow]) -> Vec<f64> {
    levels
        .iter()
        .map(|&d| {
            let mut e: Vec<f64> = rows
                .iter()
                .filter(|r| r.delta == d && r.error.is_finite())
                .map(|r| r.error)
                .collect();
            e.sort_by(f64::total_cmp);
            match e.len() {
                0 => f64::NAN,
                n if n % 2 == 1 => e[n / 2],
                n => 0.5 * (e[n / 2 - 1] + e[n / 2]),
            }
        })
        .collect()
}

/// Least-squares slope of `log10(error)` against `log10(delta)`.
pub fn loglog_slope(levels: &[f64], errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .zip(errors)
        .filter(|(d, e)| **d > 0.0 && **e > 0.0 && e.is_finite())
        .map(|(d, e)| (d.log10(), e.log10()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{ParamSpace, Parameter, Property};
    use crate::fixture;
    use crate::mesh::{ConstraintSet, Element, MaterialRegion, Mesh, Model};
    use crate::objective::{SensorMap, WeightSpec};

    #[test]
    fn identity_jacobian_svd() {
        let r = svd_report(&DMatrix::identity(2, 2), &[1.0, 1.0], 0.0);
        assert_eq!(r.singular_values, vec![1.0, 1.0]);
        assert_eq!(r.condition_number, 1.0);
        assert!(r.trusted.iter().all(|&t| t));
    }

    #[test]
    fn rank_one_jacobian_has_infinite_condition() {
        let j = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0, 0.5, 1.0]);
        let r = svd_report(&j, &[1.0, 1.0], 1e-6);
        assert_eq!(r.singular_values[1], 0.0);
        assert!(r.condition_number.is_infinite());
        assert_eq!(r.trusted, vec![true, false]);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"condition_number\":null"));
        let back: SvdReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn perturbation_of_zero_is_zero() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let p = perturb_solution(&j, &[0.0; 3]).unwrap();
        assert!(p.dx.iter().all(|&v| v == 0.0));
        assert!(p.zeta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthonormal_columns_give_transpose_solution() {
        let s = 1.0 / 2f64.sqrt();
        let j = DMatrix::from_row_slice(3, 2, &[s, 0.0, s, 0.0, 0.0, 1.0]);
        let db = [0.3, -0.7, 1.1];
        let p = perturb_solution(&j, &db).unwrap();
        let expect = j.transpose() * DVector::from_column_slice(&db);
        for (a, b) in p.dx.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Independent oracle: Householder QR least squares.
    fn qr_least_squares(j: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
        let qr = j.clone().qr();
        let qtb = qr.q().transpose() * DVector::from_column_slice(b);
        let r = qr.r();
        r.solve_upper_triangular(&qtb).unwrap().iter().copied().collect()
    }

    #[test]
    fn perturbation_matches_dense_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let db: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = perturb_solution(&j, &db).unwrap();
        let oracle = qr_least_squares(&j, &db);
        for (a, b) in p.dx.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // reconstruction dx = sum zeta_i z_i
        let mut rec = vec![0.0; 3];
        for (z, zeta) in p.z.iter().zip(&p.zeta) {
            for k in 0..3 {
                rec[k] += zeta * z[k];
            }
        }
        for (a, b) in rec.iter().zip(&p.dx) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_is_invariant_under_parameter_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let j = DMatrix::from_fn(8, 3, |_, _| rng.gen_range(-1.0..1.0));
        let x = [2.0, 0.5, 3.0];
        let perm = [2, 0, 1];
        let jp = DMatrix::from_fn(8, 3, |r, c| j[(r, perm[c])]);
        let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let a = svd_report(&j, &x, 0.0);
        let b = svd_report(&jp, &xp, 0.0);
        for (s, t) in a.singular_values.iter().zip(&b.singular_values) {
            assert!((s - t).abs() < 1e-12 * s);
        }
        for (za, zb) in a.z.iter().zip(&b.z) {
            // undo the permutation, compare up to sign
            let back: Vec<f64> = (0..3).map(|i| zb[perm.iter().position(|&p| p == i).unwrap()]).collect();
            let dot: f64 = za.iter().zip(&back).map(|(u, v)| u * v).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dof_frequency_derivatives() {
        // single element with all but one dof fixed: lambda = E k0 / (rho m0)
        let mut c = ConstraintSet::default();
        for n in [0, 1, 3] {
            c.fix_node(n);
        }
        c.fixed.insert(crate::mesh::Dof::new(2, crate::mesh::Direction::Y));
        let model = Model::new(
            Mesh {
                nodes: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
                elements: vec![Element { conn: [0, 1, 2, 3], region: 1 }],
                thickness: 1.0,
            },
            c,
            vec![MaterialRegion::new(1, 2.0, 0.2, 3.0)],
        )
        .unwrap();
        let space = ParamSpace::new(
            vec![
                Parameter::new("E", &[1], Property::YoungModulus, 1.0, 4.0),
                Parameter::new("rho", &[1], Property::MassDensity, 1.0, 5.0),
            ],
            None,
        )
        .unwrap();
        let sys = ConstrainedSystem::new(&model, &space).unwrap();
        assert_eq!(sys.dim(), 1);
        let x = [2.0, 3.0];
        let sol = solve_smallest(&sys, &x, 1, &EigenOptions::default()).unwrap();
        let f = sol.frequencies[0];
        let sensors = SensorMap::new(vec![crate::mesh::Dof::new(2, crate::mesh::Direction::X)], &model).unwrap();
        let target = ModalTarget::build(vec![1.0], vec![], sensors, WeightSpec::custom(vec![1.0, 0.0])).unwrap();
        let opts = JacobianOptions {
            eigen: EigenOptions { guard: 0, ..EigenOptions::default() },
            ..JacobianOptions::default()
        };
        let rep = jacobian(&sys, &target, &x, &opts).unwrap();
        // r = f_hat - f, so dr/dx = -df/dx
        assert!((-rep.jacobian[(0, 0)] - f / (2.0 * x[0])).abs() < 1e-12 * f);
        assert!((-rep.jacobian[(0, 1)] + f / (2.0 * x[1])).abs() < 1e-12 * f);
        assert!(rep.jacobian.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_rows_match_finite_differences() {
        let rt = fixture::arch_round_trip(1).unwrap();
        let rep = jacobian(&rt.system, &rt.target, &rt.truth, &JacobianOptions::default()).unwrap();
        let widths = rt.space.widths();
        let q = rt.target.q();
        for c in 0..3 {
            let h = 1e-6 * widths[c];
            let eval = |d: f64| {
                let mut x = rt.truth.clone();
                x[c] += d;
                let s = solve_smallest(&rt.system, &x, q, &EigenOptions::default()).unwrap();
                s.frequencies
            };
            let fp = eval(h);
            let fm = eval(-h);
            for i in 0..q {
                let fd = -rt.target.weights[i] * (fp[i] - fm[i]) / (2.0 * h);
                let an = rep.jacobian[(i, c)];
                assert!((an - fd).abs() <= 1e-6 * an.abs(), "row {i} col {c}: {an:e} vs {fd:e}");
            }
        }
    }

    #[test]
    fn homogeneous_model_has_scaling_null_direction() {
        for with_modes in [false, true] {
            let rt = fixture::homogeneous_arch(0, with_modes).unwrap();
            let rep = jacobian(&rt.system, &rt.target, &rt.truth, &JacobianOptions::default()).unwrap();
            let svd = svd_report(&rep.jacobian, &rt.truth, 1e-6);
            assert!(svd.singular_values[1] <= 1e-8 * svd.singular_values[0], "{:?}", svd.singular_values);
            let z2 = &svd.z[1];
            let cos = ((z2[0] + z2[1]) / 2f64.sqrt()).abs();
            assert!(cos.min(1.0).acos() < 1e-6);
            assert!(!svd.trusted[1]);
        }
    }

    #[test]
    fn zero_noise_reproduces_clean_optimum() {
        let rt = fixture::arch_round_trip(0).unwrap();
        let opts = NoiseSweepOptions {
            levels: vec![0.0],
            seeds: vec![1, 2],
            ..NoiseSweepOptions::default()
        };
        let (_, rows) = noise_sweep(&rt.system, &rt.target, &opts).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.error, 0.0);
        }
    }

    #[test]
    fn common_random_numbers_across_levels() {
        let rt = fixture::arch_round_trip(0).unwrap();
        let a = perturbed_target(&rt.target, 1e-3, 7, 4, None).unwrap();
        let b = perturbed_target(&rt.target, 1e-2, 7, 4, None).unwrap();
        for i in 0..rt.target.q() {
            let f = rt.target.frequencies[i];
            let da = (a.frequencies[i] - f) / f;
            let db = (b.frequencies[i] - f) / f;
            assert!((db - 10.0 * da).abs() < 1e-12);
            assert!(da.abs() <= 1e-3);
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let d = [1e-4, 1e-3, 1e-2, 1e-1];
        let e: Vec<f64> = d.iter().map(|x| 3.0 * x).collect();
        assert!((loglog_slope(&d, &e) - 1.0).abs() < 1e-12);
    }
}
