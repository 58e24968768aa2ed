//! Symmetric sparse matrices on a fixed FEM sparsity pattern, and a Cholesky
//! solver for principal submatrices (the free degrees of freedom).
//!
//! Factorization is delegated to `nalgebra-sparse`; we only add a reverse
//! Cuthill–McKee ordering so the fill stays banded.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;

use crate::error::{Error, Result};

/// Compressed-row sparsity pattern with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl CsrPattern {
    /// Pattern of a P1 system: node pairs sharing a cell are coupled.
    pub fn from_cells<'a>(n: usize, cells: impl Iterator<Item = &'a [usize]>) -> Self {
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for cell in cells {
            for &a in cell {
                for &b in cell {
                    adj[a].push(b);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Storage position of entry `(i, j)`; panics when it is not in the pattern.
    pub fn position(&self, i: usize, j: usize) -> usize {
        let start = self.row_ptr[i];
        match self.row(i).binary_search(&j) {
            Ok(k) => start + k,
            Err(_) => panic!("entry ({i}, {j}) is not in the sparsity pattern"),
        }
    }
}

/// Symmetric matrix stored on a shared pattern.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pattern: Arc<CsrPattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<CsrPattern>) -> Self {
        let nnz = pattern.nnz();
        Self { pattern, values: vec![0.0; nnz] }
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.pattern.position(i, j);
        self.values[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let start = self.pattern.row_ptr[i];
        match self.pattern.row(i).binary_search(&j) {
            Ok(k) => self.values[start + k],
            Err(_) => 0.0,
        }
    }

    /// `a * self + b * other` on the same pattern.
    pub fn combine(&self, a: f64, other: &SparseMatrix, b: f64) -> SparseMatrix {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern) || *self.pattern == *other.pattern);
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        SparseMatrix { pattern: self.pattern.clone(), values }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n());
        self.mul_vec_into(x.as_slice(), y.as_mut_slice());
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            y[i] = s;
        }
    }

    /// Quadratic form `x^T A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let p = &self.pattern;
        let mut total = 0.0;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            total += x[i] * s;
        }
        total
    }

    /// Bilinear form `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = &self.pattern;
        let mut total = 0.0;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * y[p.col_idx[k]];
            }
            total += x[i] * s;
        }
        total
    }
}

/// Reverse Cuthill–McKee ordering of the subgraph induced by `keep`.
/// Returns `perm` with `perm[new] = position in keep`.
fn rcm_order(pattern: &CsrPattern, keep: &[usize], local: &[Option<usize>]) -> Vec<usize> {
    let m = keep.len();
    let neighbours = |li: usize| {
        pattern.row(keep[li]).iter().filter_map(|&g| local[g]).filter(move |&lj| lj != li)
    };
    let degree: Vec<usize> = (0..m).map(|li| neighbours(li).count()).collect();
    let mut visited = vec![false; m];
    let mut order = Vec::with_capacity(m);
    let mut by_degree: Vec<usize> = (0..m).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start: last node reached by a BFS from the seed
        let start = {
            let mut seen = vec![false; m];
            let mut queue = VecDeque::from([seed]);
            seen[seed] = true;
            let mut last = seed;
            while let Some(v) = queue.pop_front() {
                last = v;
                let mut nb: Vec<usize> = neighbours(v).filter(|&w| !seen[w]).collect();
                nb.sort_by_key(|&w| (degree[w], w));
                for w in nb {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
            last
        };
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = neighbours(v).filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factor of the principal submatrix `A[keep, keep]`.
pub struct SubmatrixCholesky {
    keep: Vec<usize>,
    perm: Vec<usize>,
    factor: CscCholesky<f64>,
}

impl std::fmt::Debug for SubmatrixCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubmatrixCholesky").field("size", &self.keep.len()).finish()
    }
}

impl SubmatrixCholesky {
    pub fn factor(matrix: &SparseMatrix, keep: &[usize]) -> Result<Self> {
        let pattern = matrix.pattern();
        let n = pattern.n;
        let mut local = vec![None; n];
        for (li, &g) in keep.iter().enumerate() {
            local[g] = Some(li);
        }
        let perm = rcm_order(pattern, keep, &local);
        let mut inv_perm = vec![0; keep.len()];
        for (new, &li) in perm.iter().enumerate() {
            inv_perm[li] = new;
        }
        // Column j of the CSC matrix = row keep[perm[j]] of the symmetric CSR matrix.
        let m = keep.len();
        let mut col_offsets = Vec::with_capacity(m + 1);
        let mut row_indices = Vec::new();
        let mut values = Vec::new();
        col_offsets.push(0);
        for &li in &perm {
            let g = keep[li];
            let mut entries: Vec<(usize, f64)> = (pattern.row_ptr[g]..pattern.row_ptr[g + 1])
                .filter_map(|k| local[pattern.col_idx[k]].map(|lj| (inv_perm[lj], matrix.values[k])))
                .collect();
            entries.sort_unstable_by_key(|e| e.0);
            for (r, v) in entries {
                row_indices.push(r);
                values.push(v);
            }
            col_offsets.push(row_indices.len());
        }
        let csc = CscMatrix::try_from_csc_data(m, m, col_offsets, row_indices, values)
            .map_err(|e| Error::LinearSolve(format!("invalid CSC data: {e}")))?;
        let factor = CscCholesky::factor(&csc)
            .map_err(|e| Error::LinearSolve(format!("Cholesky factorization failed: {e}")))?;
        Ok(Self { keep: keep.to_vec(), perm, factor })
    }

    pub fn size(&self) -> usize {
        self.keep.len()
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    /// Solve with a right-hand side given in `keep` order; result in `keep` order.
    pub fn solve_local(&self, rhs: &[f64]) -> Vec<f64> {
        let m = self.keep.len();
        let b = nalgebra::DMatrix::from_iterator(m, 1, self.perm.iter().map(|&li| rhs[li]));
        let x = self.factor.solve(&b);
        let mut out = vec![0.0; m];
        for (new, &li) in self.perm.iter().enumerate() {
            out[li] = x[(new, 0)];
        }
        out
    }

    /// Solve `A[keep,keep] x = full_rhs[keep]` and scatter `x` into `out[keep]`.
    pub fn solve_scatter(&self, full_rhs: &[f64], out: &mut [f64]) {
        let local: Vec<f64> = self.keep.iter().map(|&g| full_rhs[g]).collect();
        let x = self.solve_local(&local);
        for (&g, v) in self.keep.iter().zip(x) {
            out[g] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_laplacian(n: usize) -> SparseMatrix {
        let cells: Vec<[usize; 2]> = (0..n - 1).map(|i| [i, i + 1]).collect();
        let pattern = Arc::new(CsrPattern::from_cells(n, cells.iter().map(|c| &c[..])));
        let mut a = SparseMatrix::zeros(pattern);
        for c in &cells {
            a.add(c[0], c[0], 1.0);
            a.add(c[1], c[1], 1.0);
            a.add(c[0], c[1], -1.0);
            a.add(c[1], c[0], -1.0);
        }
        a
    }

    #[test]
    fn solves_dirichlet_path_problem() {
        let n = 12;
        let a = path_laplacian(n);
        let keep: Vec<usize> = (1..n - 1).collect();
        let chol = SubmatrixCholesky::factor(&a, &keep).unwrap();
        // -u'' = 0 with u(0)=0, u(n-1)=1 => rhs = -A[:, n-1]
        let mut rhs = vec![0.0; n];
        rhs[n - 2] = 1.0;
        let mut u = vec![0.0; n];
        u[n - 1] = 1.0;
        chol.solve_scatter(&rhs, &mut u);
        for (i, v) in u.iter().enumerate() {
            assert!((v - i as f64 / (n - 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_reported() {
        let mut a = path_laplacian(4);
        a.add(1, 1, -5.0);
        assert!(SubmatrixCholesky::factor(&a, &[1, 2]).is_err());
    }
}
