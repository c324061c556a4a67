//! Local parametric reduced-order eigenmodels.
//!
//! At an expansion point `x0` the Lanczos vectors of the full solve span a
//! subspace `V` (orthonormalized in the Euclidean inner product). Because the
//! full operators are affine in `x`, so are the projections:
//!
//! ```text
//! V^T K(x) V = V^T K0 V + sum_i x_i V^T K_i V
//! ```
//!
//! and evaluating the model anywhere costs one dense `m x m` eigensolve.

use nalgebra::DMatrix;

use crate::assembly::{Affine, ConstrainedSystem, ParamSpace};
use crate::eigen::{dense_pencil, solve_with_basis, EigenOptions, EigenSolution};
use crate::error::{Error, Result};
use crate::objective::SensorMap;
use crate::sparse::CsrMatrix;

/// Hard cap on the subspace dimension.
pub const ROM_DIM_CAP: usize = 64;

#[derive(Debug, Clone)]
pub struct LocalRom {
    center: Vec<f64>,
    q: usize,
    space: ParamSpace,
    /// Euclidean-orthonormal basis in null-space coordinates (`n_f x m`).
    basis: DMatrix<f64>,
    /// `N V`: the basis in full coordinates (`n x m`).
    basis_full: DMatrix<f64>,
    stiffness: Affine<DMatrix<f64>>,
    mass: Affine<DMatrix<f64>>,
    center_solution: EigenSolution,
}

/// Reduced-model eigenpairs at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct RomEval {
    pub eigenvalues: Vec<f64>,
    pub frequencies: Vec<f64>,
    /// Full-coordinate modes `N V u`, one column each.
    pub modes: DMatrix<f64>,
}

fn project_affine(
    sys: &ConstrainedSystem,
    terms: &Affine<Vec<f64>>,
    v: &DMatrix<f64>,
) -> Affine<DMatrix<f64>> {
    let proj = |vals: &Vec<f64>| CsrMatrix::new(sys.pattern().clone(), vals.clone()).project(v);
    Affine {
        constant: proj(&terms.constant),
        linear: terms.linear.iter().map(|t| t.as_ref().map(proj)).collect(),
    }
}

fn combine_dense(a: &Affine<DMatrix<f64>>, x: &[f64]) -> DMatrix<f64> {
    let mut out = a.constant.clone();
    for (xi, t) in x.iter().zip(&a.linear) {
        if let Some(t) = t {
            out += t * *xi;
        }
    }
    out
}

impl LocalRom {
    /// Runs the full solve at `x0` (at most `m_max` Lanczos steps) and
    /// projects the affine blocks onto the resulting subspace.
    pub fn build(
        sys: &ConstrainedSystem,
        x0: &[f64],
        q: usize,
        m_max: usize,
        opts: &EigenOptions,
    ) -> Result<LocalRom> {
        let m_max = m_max.min(ROM_DIM_CAP);
        let solve_opts = EigenOptions {
            max_steps: m_max,
            ..*opts
        };
        let (center_solution, lanczos_basis) = match solve_with_basis(sys, x0, q, &solve_opts) {
            Ok(out) => out,
            Err(Error::NoConvergence { steps, residuals }) => {
                let worst = residuals.iter().cloned().fold(0.0f64, f64::max);
                return Err(Error::RomAccuracy {
                    dim: steps,
                    digits: if worst > 0.0 { -worst.log10() } else { 0.0 },
                });
            }
            Err(e) => return Err(e),
        };
        let basis = lanczos_basis.qr().q();
        let ns = sys.null_space();
        let mut basis_full = DMatrix::zeros(ns.full_dim(), basis.ncols());
        for c in 0..basis.ncols() {
            let col: Vec<f64> = basis.column(c).iter().copied().collect();
            basis_full
                .column_mut(c)
                .copy_from_slice(&ns.expand(&col));
        }
        Ok(LocalRom {
            center: x0.to_vec(),
            q,
            space: sys.space().clone(),
            stiffness: project_affine(sys, sys.stiffness_terms(), &basis),
            mass: project_affine(sys, sys.mass_terms(), &basis),
            basis,
            basis_full,
            center_solution,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// The full solve performed at the expansion point.
    pub fn center_solution(&self) -> &EigenSolution {
        &self.center_solution
    }

    /// `(V^T K(x) V, V^T M(x) V)` from the stored blocks.
    pub fn reduced_matrices(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        (combine_dense(&self.stiffness, x), combine_dense(&self.mass, x))
    }

    fn solve(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.space.check(x)?;
        let (k, m) = self.reduced_matrices(x);
        dense_pencil(&k, &m).map_err(|_| {
            Error::RomInconsistent("reduced mass matrix is not positive definite".into())
        })
    }

    /// First `q` pairs with modes in full coordinates.
    pub fn eval(&self, x: &[f64]) -> Result<RomEval> {
        let (values, u) = self.solve(x)?;
        let count = self.q.min(values.len());
        let modes = &self.basis_full * u.columns(0, count);
        Ok(RomEval {
            frequencies: values[..count].iter().map(|&l| crate::eigenvalue_to_hz(l)).collect(),
            eigenvalues: values[..count].to_vec(),
            modes,
        })
    }

    /// Rows of `N V` at the sensors (`s x m`).
    pub fn sensor_basis(&self, sensors: &SensorMap) -> DMatrix<f64> {
        let idx = sensors.indices();
        DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.basis_full[(idx[r], c)])
    }

    /// First `count` frequencies (Hz) and modes sampled through
    /// `sensor_basis`; the cost does not depend on the full model size.
    pub fn eval_at_sensors(
        &self,
        x: &[f64],
        sensor_basis: &DMatrix<f64>,
        count: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (values, u) = self.solve(x)?;
        let count = count.min(values.len());
        let freqs = values[..count].iter().map(|&l| crate::eigenvalue_to_hz(l)).collect();
        let modes = (0..count)
            .map(|i| (sensor_basis * u.column(i)).iter().copied().collect())
            .collect();
        Ok((freqs, modes))
    }
}
