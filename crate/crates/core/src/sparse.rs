//! Compressed sparse row storage with shared sparsity patterns, and an
//! envelope (skyline) Cholesky factorization under reverse Cuthill-McKee
//! ordering.
//!
//! Parametric systems store one value array per affine term over a single
//! [`Pattern`], so instantiating `K(x)` is a scaled sum of slices.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square CSR sparsity pattern with sorted column indices in every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Pattern {
    /// Builds the pattern holding every `(row, col)` pair given (duplicates allowed).
    pub fn from_entries(n: usize, mut entries: Vec<(usize, usize)>) -> Pattern {
        entries.sort_unstable();
        entries.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _) in &entries {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = entries.into_iter().map(|(_, j)| j).collect();
        Pattern {
            n,
            row_ptr,
            col_idx,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Position of `(i, j)` in the value array.
    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }

    /// Scatters triplets into a value array aligned with this pattern.
    ///
    /// Panics if a triplet falls outside the pattern.
    pub fn scatter(&self, triplets: &[(usize, usize, f64)]) -> Vec<f64> {
        let mut values = vec![0.0; self.nnz()];
        for &(i, j, v) in triplets {
            let k = self
                .index_of(i, j)
                .unwrap_or_else(|| panic!("entry ({i}, {j}) outside pattern"));
            values[k] += v;
        }
        values
    }
}

/// Sparse matrix over a shared pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(pattern: Arc<Pattern>, values: Vec<f64>) -> CsrMatrix {
        assert_eq!(pattern.nnz(), values.len());
        CsrMatrix { pattern, values }
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> CsrMatrix {
        let pattern = Pattern::from_entries(n, triplets.iter().map(|&(i, j, _)| (i, j)).collect());
        let values = pattern.scatter(triplets);
        CsrMatrix::new(Arc::new(pattern), values)
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.index_of(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let r = self.pattern.row_range(i);
            *yi = self.pattern.col_idx[r.clone()]
                .iter()
                .zip(&self.values[r])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.mul_vec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in self.pattern.row_range(i) {
                d[(i, self.pattern.col_idx[k])] += self.values[k];
            }
        }
        d
    }

    /// `V^T A V` for a dense tall matrix `V`.
    pub fn project(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let m = v.ncols();
        let mut av = DMatrix::zeros(n, m);
        for c in 0..m {
            let col: Vec<f64> = v.column(c).iter().copied().collect();
            let prod = self.mul_vec(&col);
            av.column_mut(c).copy_from_slice(&prod);
        }
        let mut out = v.transpose() * av;
        out = 0.5 * (&out + out.transpose());
        out
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim() {
            for k in self.pattern.row_range(i) {
                let j = self.pattern.col_idx[k];
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Writes the matrix in Matrix Market coordinate format (full storage).
    pub fn write_matrix_market<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.dim(), self.dim(), self.pattern.nnz())?;
        for i in 0..self.dim() {
            for k in self.pattern.row_range(i) {
                writeln!(w, "{} {} {:.17e}", i + 1, self.pattern.col_idx[k] + 1, self.values[k])?;
            }
        }
        Ok(())
    }
}

/// Computes `sum_k c_k * values_k` over value arrays sharing one pattern.
pub fn linear_combination(pattern: &Arc<Pattern>, terms: &[(f64, &[f64])]) -> CsrMatrix {
    let mut values = vec![0.0; pattern.nnz()];
    for &(c, v) in terms {
        if c == 0.0 {
            continue;
        }
        for (acc, &x) in values.iter_mut().zip(v) {
            *acc += c * x;
        }
    }
    CsrMatrix::new(Arc::clone(pattern), values)
}

/// Reverse Cuthill-McKee ordering of the pattern's adjacency graph.
///
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(pattern: &Pattern) -> Vec<usize> {
    let n = pattern.n;
    let degree: Vec<usize> = (0..n).map(|i| pattern.row(i).len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |root: usize| -> (usize, usize) {
        // returns (eccentricity, min-degree node of last level)
        let mut level = vec![usize::MAX; n];
        level[root] = 0;
        let mut queue = VecDeque::from([root]);
        let mut last = root;
        while let Some(u) = queue.pop_front() {
            for &v in pattern.row(u) {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                    if level[v] > level[last] || (level[v] == level[last] && degree[v] < degree[last]) {
                        last = v;
                    }
                }
            }
        }
        (level[last], last)
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node");
        // pseudo-peripheral root (George-Liu)
        let mut root = seed;
        let (mut ecc, mut far) = bfs_levels(root);
        for _ in 0..8 {
            let (e2, f2) = bfs_levels(far);
            if e2 <= ecc {
                break;
            }
            root = far;
            ecc = e2;
            far = f2;
        }

        visited[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = pattern
                .row(u)
                .iter()
                .copied()
                .filter(|&v| !visited[v])
                .collect();
            next.sort_by_key(|&v| (degree[v], v));
            for v in next {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// Ordering and envelope structure, reusable across numeric factorizations
/// of matrices sharing a pattern.
#[derive(Debug, Clone)]
pub struct EnvelopeSymbolic {
    n: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// first[i]: leftmost column in row i of the permuted lower triangle.
    first: Vec<usize>,
    /// Start offset of row i in the packed factor storage.
    offset: Vec<usize>,
}

impl EnvelopeSymbolic {
    pub fn new(pattern: &Pattern) -> EnvelopeSymbolic {
        let n = pattern.n;
        let perm = reverse_cuthill_mckee(pattern);
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv_perm[old];
            for &oj in pattern.row(old) {
                let j = inv_perm[oj];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut offset = vec![0; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        EnvelopeSymbolic {
            n,
            perm,
            inv_perm,
            first,
            offset,
        }
    }

    pub fn envelope_size(&self) -> usize {
        self.offset[self.n]
    }

    /// Numeric factorization `P A P^T = L L^T`. Fails with the (original)
    /// pivot index if the matrix is not positive definite.
    pub fn factor(self: &Arc<Self>, a: &CsrMatrix) -> std::result::Result<EnvelopeCholesky, usize> {
        let n = self.n;
        assert_eq!(a.dim(), n);
        let mut l = vec![0.0; self.envelope_size()];
        let pat = a.pattern();
        for old in 0..n {
            let i = self.inv_perm[old];
            for k in pat.row_range(old) {
                let j = self.inv_perm[pat.col_idx[k]];
                if j <= i {
                    l[self.offset[i] + j - self.first[i]] += a.values[k];
                }
            }
        }
        for i in 0..n {
            let fi = self.first[i];
            let oi = self.offset[i];
            for j in fi..i {
                let fj = self.first[j];
                let oj = self.offset[j];
                let start = fi.max(fj);
                let mut s = l[oi + j - fi];
                for k in start..j {
                    s -= l[oi + k - fi] * l[oj + k - fj];
                }
                l[oi + j - fi] = s / l[oj + j - fj];
            }
            let diag = l[oi + i - fi];
            let mut d = diag;
            for k in fi..i {
                let v = l[oi + k - fi];
                d -= v * v;
            }
            // relative pivot test: rounding turns an exactly singular matrix
            // into pivots of order eps * diag rather than zero
            if !(d > 1e-12 * diag.abs()) || !d.is_finite() {
                return Err(self.perm[i]);
            }
            l[oi + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            symbolic: Arc::clone(self),
            l,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    symbolic: Arc<EnvelopeSymbolic>,
    l: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &*self.symbolic;
        let n = s.n;
        let mut y: Vec<f64> = (0..n).map(|i| b[s.perm[i]]).collect();
        for i in 0..n {
            let fi = s.first[i];
            let oi = s.offset[i];
            let mut v = y[i];
            for k in fi..i {
                v -= self.l[oi + k - fi] * y[k];
            }
            y[i] = v / self.l[oi + i - fi];
        }
        for i in (0..n).rev() {
            let fi = s.first[i];
            let oi = s.offset[i];
            y[i] /= self.l[oi + i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.l[oi + k - fi] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[s.perm[i]] = y[i];
        }
        x
    }

    /// log-determinant of the factored matrix.
    pub fn log_det(&self) -> f64 {
        let s = &*self.symbolic;
        (0..s.n)
            .map(|i| 2.0 * self.l[s.offset[i] + i - s.first[i]].ln())
            .sum()
    }
}

/// Convenience: factors `a`, mapping failure to an indefinite-stiffness error.
pub fn factor_stiffness(symbolic: &Arc<EnvelopeSymbolic>, a: &CsrMatrix) -> Result<EnvelopeCholesky> {
    symbolic
        .factor(a)
        .map_err(|pivot| Error::IndefiniteStiffness { pivot })
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn laplacian_2d(nx: usize, ny: usize) -> CsrMatrix {
        let id = |i: usize, j: usize| i * ny + j;
        let mut t = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                t.push((id(i, j), id(i, j), 4.0));
                if i + 1 < nx {
                    t.push((id(i, j), id(i + 1, j), -1.0));
                    t.push((id(i + 1, j), id(i, j), -1.0));
                }
                if j + 1 < ny {
                    t.push((id(i, j), id(i, j + 1), -1.0));
                    t.push((id(i, j + 1), id(i, j), -1.0));
                }
            }
        }
        CsrMatrix::from_triplets(nx * ny, &t)
    }

    #[test]
    fn rcm_is_a_permutation_and_narrows_the_envelope() {
        let a = laplacian_2d(20, 5);
        let perm = reverse_cuthill_mckee(a.pattern());
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        let sym = EnvelopeSymbolic::new(a.pattern());
        // natural ordering has half-bandwidth 5 -> envelope about 100 * 6
        assert!(sym.envelope_size() <= 100 * 7);
    }

    #[test]
    fn cholesky_solves_against_dense() {
        let a = laplacian_2d(7, 6);
        let sym = Arc::new(EnvelopeSymbolic::new(a.pattern()));
        let chol = sym.factor(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<f64> = (0..a.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = chol.solve(&b);
        let dense = a.to_dense().lu().solve(&to_dvector(&b)).unwrap();
        for (u, v) in x.iter().zip(dense.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        let ld = a.to_dense().determinant().ln();
        assert!((chol.log_det() - ld).abs() < 1e-9 * ld.abs());
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        let sym = Arc::new(EnvelopeSymbolic::new(a.pattern()));
        assert!(sym.factor(&a).is_err());
    }

    #[test]
    fn linear_combination_matches_manual_sum() {
        let a = laplacian_2d(3, 3);
        let pattern = Arc::clone(a.pattern());
        let c = linear_combination(&pattern, &[(2.0, a.values()), (-0.5, a.values())]);
        for (x, y) in c.values().iter().zip(a.values()) {
            assert_eq!(*x, 1.5 * y);
        }
    }

    #[test]
    fn projection_matches_dense_product() {
        let a = laplacian_2d(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = DMatrix::from_fn(16, 3, |_, _| rng.gen_range(-1.0..1.0));
        let p = a.project(&v);
        let d = v.transpose() * a.to_dense() * &v;
        assert!((p - d).amax() < 1e-12);
    }
}
