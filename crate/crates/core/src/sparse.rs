//! Compressed-row sparse matrices and direct solver wrappers.
//!
//! Assembled finite element operators are kept in a plain CSR structure;
//! factorizations go through faer's sparse LU (general systems) and
//! Cholesky (SPD systems).

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::{Error, Result};

/// Sparse real matrix in compressed row storage.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, trips: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = trips.to_vec();
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &entries {
            debug_assert!(r < n_rows && c < n_cols);
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] = col_idx.len();
                last = Some((r, c));
            }
        }
        // forward-fill rows without entries
        for i in 1..=n_rows {
            if row_ptr[i] < row_ptr[i - 1] {
                row_ptr[i] = row_ptr[i - 1];
            }
        }
        CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.vals[lo..hi].iter().copied())
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for i in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    /// y = A^T x
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = vec![0.0; self.n_cols];
        for i in 0..self.n_rows {
            let xi = x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.vals[k] * xi;
            }
        }
        y
    }

    /// x^T A y
    pub fn quadratic_form(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n_rows);
        assert_eq!(y.len(), self.n_cols);
        let mut acc = 0.0;
        for i in 0..self.n_rows {
            let mut row = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.vals[k] * y[self.col_idx[k]];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// Returns A^T as a new matrix.
    pub fn transpose(&self) -> CsrMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                trips.push((self.col_idx[k], i, self.vals[k]));
            }
        }
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, &trips)
    }

    /// A <- A + alpha * B, requiring B's sparsity pattern to be contained in A's.
    pub fn add_scaled_into(&mut self, alpha: f64, other: &CsrMatrix) {
        assert_eq!(self.n_rows, other.n_rows);
        assert_eq!(self.n_cols, other.n_cols);
        for i in 0..self.n_rows {
            let (mut lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for k in other.row_ptr[i]..other.row_ptr[i + 1] {
                let c = other.col_idx[k];
                while lo < hi && self.col_idx[lo] < c {
                    lo += 1;
                }
                assert!(
                    lo < hi && self.col_idx[lo] == c,
                    "pattern of B not contained in A"
                );
                self.vals[lo] += alpha * other.vals[k];
            }
        }
    }

    /// Scales all stored values by `alpha`.
    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.vals {
            *v *= alpha;
        }
    }

    fn transpose_defect(&self, sign: f64) -> f64 {
        let t = self.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..self.n_rows {
            let a = self.row(i).collect::<Vec<_>>();
            let b = t.row(i).collect::<Vec<_>>();
            let mut bi = 0;
            for (c, v) in a {
                while bi < b.len() && b[bi].0 < c {
                    worst = worst.max(b[bi].1.abs());
                    bi += 1;
                }
                if bi < b.len() && b[bi].0 == c {
                    worst = worst.max((v - sign * b[bi].1).abs());
                    bi += 1;
                } else {
                    worst = worst.max(v.abs());
                }
            }
            while bi < b.len() {
                worst = worst.max(b[bi].1.abs());
                bi += 1;
            }
        }
        worst
    }

    /// Maximum absolute asymmetry max |A_ij - A_ji| over the stored pattern.
    pub fn asymmetry(&self) -> f64 {
        self.transpose_defect(1.0)
    }

    /// Maximum absolute skew-symmetry defect max |A_ij + A_ji|.
    pub fn skew_defect(&self) -> f64 {
        self.transpose_defect(-1.0)
    }

    /// Returns `(A - A^T) / 2`, with exact pairwise negation of mirrored
    /// entries (each unordered pair is computed once and negated).
    pub fn skew_part(&self) -> CsrMatrix {
        let t = self.transpose();
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..self.n_rows {
            let a = self.row(i).collect::<Vec<_>>();
            let b = t.row(i).collect::<Vec<_>>();
            let (mut ai, mut bi) = (0, 0);
            while ai < a.len() || bi < b.len() {
                let ca = a.get(ai).map(|e| e.0).unwrap_or(usize::MAX);
                let cb = b.get(bi).map(|e| e.0).unwrap_or(usize::MAX);
                let j = ca.min(cb);
                if j < i {
                    // handled from the mirrored row
                    if ca == j {
                        ai += 1;
                    }
                    if cb == j {
                        bi += 1;
                    }
                    continue;
                }
                let va = if ca == j {
                    ai += 1;
                    a[ai - 1].1
                } else {
                    0.0
                };
                let vb = if cb == j {
                    bi += 1;
                    b[bi - 1].1
                } else {
                    0.0
                };
                let v = 0.5 * (va - vb);
                trips.push((i, j, v));
                if j != i {
                    trips.push((j, i, -v));
                }
            }
        }
        CsrMatrix::from_triplets(self.n_rows, self.n_cols, &trips)
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                trips.push(Triplet::new(i, self.col_idx[k], self.vals[k]));
            }
        }
        SparseColMat::try_new_from_triplets(self.n_rows, self.n_cols, &trips)
            .map_err(|e| Error::Factorization(format!("{e:?}")))
    }
}

/// LU factorization of a square sparse matrix.
pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        assert_eq!(a.n_rows, a.n_cols);
        let m = a.to_faer()?;
        let lu = m
            .sp_lu()
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(SparseLu { lu, n: a.n_rows })
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Solves A^T x = b.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve_transpose(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Cholesky factorization of a symmetric positive definite sparse matrix.
pub struct SparseCholesky {
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
    n: usize,
}

impl SparseCholesky {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        assert_eq!(a.n_rows, a.n_cols);
        let m = a.to_faer()?;
        let llt = m
            .sp_cholesky(faer::Side::Lower)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(SparseCholesky { llt, n: a.n_rows })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Euclidean norm.
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// x - y elementwise.
pub fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

/// x + alpha * y elementwise, in place.
pub fn axpy(x: &mut [f64], alpha: f64, y: &[f64]) {
    assert_eq!(x.len(), y.len());
    for (a, b) in x.iter_mut().zip(y) {
        *a += alpha * b;
    }
}

/// Dot product.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
