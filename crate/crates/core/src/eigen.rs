//! Smallest eigenpairs of the constrained pencil `(N^T K N, N^T M N)`.
//!
//! The production solver is Lanczos on the shift-invert operator
//! `K^{-1} M` (shift zero) in the `M` inner product with full
//! reorthogonalization. A dense solver serves as an oracle for tests and as
//! the inner solver of the reduced-order models.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::ConstrainedSystem;
use crate::error::{Error, Result};
use crate::sparse::{factor_stiffness, CsrMatrix, EnvelopeCholesky};

/// Largest reduced dimension accepted by [`dense_oracle`].
pub const DENSE_ORACLE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Relative residual target for each returned pair.
    pub tol: f64,
    /// Extra Ritz pairs tracked beyond the requested ones.
    pub guard: usize,
    /// Lanczos step cap (clipped to the reduced dimension).
    pub max_steps: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            guard: 3,
            max_steps: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution {
    /// `omega^2`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Hz.
    pub frequencies: Vec<f64>,
    /// Full-coordinate modes (one column each), `M`-orthonormal.
    pub modes: DMatrix<f64>,
    /// The same modes in null-space coordinates.
    pub reduced_modes: DMatrix<f64>,
    /// `||K y - lambda M y|| / ||K y||` in reduced coordinates.
    pub residuals: Vec<f64>,
    pub lanczos_steps: usize,
}

impl EigenSolution {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn mode(&self, i: usize) -> Vec<f64> {
        self.modes.column(i).iter().copied().collect()
    }
}

/// Reduced-coordinate eigenpairs plus the Lanczos basis that produced them.
#[derive(Debug, Clone)]
pub(crate) struct LanczosOutput {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub residuals: Vec<f64>,
    /// `M`-orthonormal Lanczos vectors, one per column.
    pub basis: DMatrix<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fixes the sign so the largest-magnitude entry is positive.
pub(crate) fn normalize_sign(v: &mut [f64]) {
    let mut best = 0.0;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best * (1.0 + 1e-12) {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

struct Krylov<'a> {
    m: &'a CsrMatrix,
    q: Vec<Vec<f64>>,
    mq: Vec<Vec<f64>>,
}

impl Krylov<'_> {
    /// Two passes of classical Gram-Schmidt in the `M` inner product.
    fn orthogonalize(&self, w: &mut [f64]) {
        for _ in 0..2 {
            for (qi, mqi) in self.q.iter().zip(&self.mq) {
                let c = dot(w, mqi);
                axpy(-c, qi, w);
            }
        }
    }

    /// Appends `w / ||w||_M`; returns the norm.
    fn push(&mut self, mut w: Vec<f64>) -> Result<f64> {
        let mw = self.m.mul_vec(&w);
        let nrm2 = dot(&w, &mw);
        if !(nrm2 > 0.0) {
            return Err(Error::IndefiniteMass { pivot: 0 });
        }
        let nrm = nrm2.sqrt();
        w.iter_mut().for_each(|x| *x /= nrm);
        self.q.push(w);
        self.mq.push(mw.into_iter().map(|x| x / nrm).collect());
        Ok(nrm)
    }

    fn restart_vector(&self, attempt: u64) -> Vec<f64> {
        let n = self.m.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ attempt);
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        self.orthogonalize(&mut w);
        w
    }
}

/// Ritz pairs of the tridiagonal matrix, largest `theta` first.
fn tridiagonal_ritz(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let j = alpha.len();
    let t = DMatrix::from_fn(j, j, |r, c| {
        if r == c {
            alpha[r]
        } else if r == c + 1 {
            beta[c]
        } else if c == r + 1 {
            beta[r]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let theta = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let s = DMatrix::from_fn(j, j, |r, c| eig.eigenvectors[(r, order[c])]);
    (theta, s)
}

/// Shift-invert Lanczos on the pencil `(k, m)` with `chol` factoring `k`.
pub(crate) fn lanczos(
    k: &CsrMatrix,
    m: &CsrMatrix,
    chol: &EnvelopeCholesky,
    q: usize,
    opts: &EigenOptions,
) -> Result<LanczosOutput> {
    let n = k.dim();
    if q == 0 || q > n {
        return Err(Error::Validation(format!(
            "requested {q} eigenpairs of a {n}-dof system"
        )));
    }
    let want = (q + opts.guard).min(n);
    let max_steps = opts.max_steps.max(want).min(n);
    let mut kr = Krylov {
        m,
        q: Vec::new(),
        mq: Vec::new(),
    };
    kr.push(vec![1.0; n])?;
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut restarts = 0u64;
    let mut last_residuals = Vec::new();

    loop {
        let j = kr.q.len() - 1;
        let mut w = chol.solve(&kr.mq[j]);
        let a = dot(&w, &kr.mq[j]);
        axpy(-a, &kr.q[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &kr.q[j - 1], &mut w);
        }
        kr.orthogonalize(&mut w);
        alpha.push(a);
        let steps = j + 1;
        let b = {
            let mw = m.mul_vec(&w);
            dot(&w, &mw).max(0.0).sqrt()
        };

        if steps >= want {
            let (theta, s) = tridiagonal_ritz(&alpha, &beta);
            if theta[q - 1] <= 0.0 {
                return Err(Error::IndefiniteStiffness { pivot: 0 });
            }
            let estimate = |i: usize| (b * s[(steps - 1, i)]).abs() / theta[i];
            let guard_ok = (q..want).all(|i| estimate(i) <= opts.tol.sqrt());
            let wanted_ok = (0..q).all(|i| estimate(i) <= opts.tol);
            if (guard_ok && wanted_ok) || steps == max_steps {
                let out = finish(k, m, chol, &kr.q, &theta, &s, q);
                let converged = out.residuals.iter().all(|&r| r <= opts.tol)
                    || (steps == n && out.residuals.iter().all(|&r| r.is_finite()));
                if converged {
                    return Ok(out);
                }
                last_residuals = out.residuals;
                if steps == max_steps {
                    return Err(Error::NoConvergence {
                        steps,
                        residuals: last_residuals,
                    });
                }
            }
        }
        if steps == max_steps {
            return Err(Error::NoConvergence {
                steps,
                residuals: last_residuals,
            });
        }

        let scale = alpha.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if b <= 1e-10 * scale {
            // invariant subspace: continue from a fresh direction
            beta.push(0.0);
            loop {
                restarts += 1;
                let w = kr.restart_vector(restarts);
                let mw = m.mul_vec(&w);
                if dot(&w, &mw).sqrt() > 1e-8 {
                    kr.push(w)?;
                    break;
                }
                if restarts > 16 {
                    return Err(Error::NoConvergence {
                        steps,
                        residuals: last_residuals,
                    });
                }
            }
        } else {
            beta.push(b);
            w.iter_mut().for_each(|x| *x /= b);
            let mw = m.mul_vec(&w);
            kr.q.push(w);
            kr.mq.push(mw);
        }
    }
}

fn finish(
    k: &CsrMatrix,
    m: &CsrMatrix,
    _chol: &EnvelopeCholesky,
    q_vecs: &[Vec<f64>],
    _theta: &[f64],
    s: &DMatrix<f64>,
    q: usize,
) -> LanczosOutput {
    let n = k.dim();
    let j = q_vecs.len();
    let mut values = Vec::with_capacity(q);
    let mut residuals = Vec::with_capacity(q);
    let mut vectors = DMatrix::zeros(n, q);
    for i in 0..q {
        let mut y = vec![0.0; n];
        for (c, qc) in q_vecs.iter().enumerate().take(j) {
            axpy(s[(c, i)], qc, &mut y);
        }
        let ky = k.mul_vec(&y);
        let my = m.mul_vec(&y);
        let ymy = dot(&y, &my);
        let lambda = dot(&y, &ky) / ymy;
        let scale = 1.0 / ymy.sqrt();
        y.iter_mut().for_each(|v| *v *= scale);
        normalize_sign(&mut y);
        let r: Vec<f64> = ky.iter().zip(&my).map(|(a, b)| a - lambda * b).collect();
        residuals.push(norm(&r) / norm(&ky));
        values.push(lambda);
        vectors.set_column(i, &nalgebra::DVector::from_vec(y));
    }
    let basis = DMatrix::from_fn(n, j, |r, c| q_vecs[c][r]);
    LanczosOutput {
        values,
        vectors,
        residuals,
        basis,
    }
}

pub(crate) fn solve_with_basis(
    sys: &ConstrainedSystem,
    x: &[f64],
    q: usize,
    opts: &EigenOptions,
) -> Result<(EigenSolution, DMatrix<f64>)> {
    let (k, m) = sys.instantiate(x)?;
    let chol = factor_stiffness(sys.symbolic(), &k)?;
    let out = lanczos(&k, &m, &chol, q, opts)?;
    let ns = sys.null_space();
    let mut modes = DMatrix::zeros(ns.full_dim(), q);
    for i in 0..q {
        let y: Vec<f64> = out.vectors.column(i).iter().copied().collect();
        modes.set_column(i, &nalgebra::DVector::from_vec(ns.expand(&y)));
    }
    let steps = out.basis.ncols();
    Ok((
        EigenSolution {
            frequencies: out.values.iter().map(|&l| crate::eigenvalue_to_hz(l)).collect(),
            eigenvalues: out.values,
            modes,
            reduced_modes: out.vectors,
            residuals: out.residuals,
            lanczos_steps: steps,
        },
        out.basis,
    ))
}

/// The `q` smallest eigenpairs of the constrained problem at `x`.
pub fn solve_smallest(
    sys: &ConstrainedSystem,
    x: &[f64],
    q: usize,
    opts: &EigenOptions,
) -> Result<EigenSolution> {
    solve_with_basis(sys, x, q, opts).map(|(s, _)| s)
}

/// All eigenpairs of a small dense symmetric-definite pencil, ascending,
/// with `M`-orthonormal eigenvectors.
pub fn dense_pencil(k: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = k.nrows();
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or(Error::IndefiniteMass { pivot: 0 })?;
    let l = chol.l();
    // C = L^{-1} K L^{-T}
    let linv_k = l
        .solve_lower_triangular(k)
        .ok_or(Error::IndefiniteMass { pivot: 0 })?;
    let c = l
        .solve_lower_triangular(&linv_k.transpose())
        .ok_or(Error::IndefiniteMass { pivot: 0 })?;
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let z = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let lt = l.transpose();
    let mut v = lt
        .solve_upper_triangular(&z)
        .ok_or(Error::IndefiniteMass { pivot: 0 })?;
    for mut col in v.column_iter_mut() {
        let mut tmp: Vec<f64> = col.iter().copied().collect();
        normalize_sign(&mut tmp);
        col.copy_from_slice(&tmp);
    }
    Ok((values, v))
}

/// Full spectrum of the reduced pencil at `x` by dense linear algebra.
pub fn dense_oracle(sys: &ConstrainedSystem, x: &[f64]) -> Result<Vec<f64>> {
    let n = sys.dim();
    if n > DENSE_ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            n,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    let (k, m) = sys.instantiate(x)?;
    dense_pencil(&k.to_dense(), &m.to_dense()).map(|(v, _)| v)
}
