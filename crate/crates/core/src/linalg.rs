//! Thin wrappers over `faer` used throughout the crate.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt as SparseLlt, Lu as SparseLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Accum, Col, ColRef, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

pub type SparseMat = SparseColMat<usize, f64>;

/// `a * x` for a sparse `a`.
pub fn spmv(a: &SparseMat, x: ColRef<'_, f64>) -> Col<f64> {
    let mut out = Col::zeros(a.nrows());
    faer::sparse::linalg::matmul::sparse_dense_matmul(out.as_mat_mut(), Accum::Replace, a.as_ref(), x.as_mat(), 1.0, Par::Seq);
    out
}

/// `a * x` for a sparse `a` and dense `x`.
pub fn spmm(a: &SparseMat, x: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), x.ncols());
    faer::sparse::linalg::matmul::sparse_dense_matmul(out.as_mut(), Accum::Replace, a.as_ref(), x, 1.0, Par::Seq);
    out
}

/// Sparse symmetric positive definite factorization.
#[derive(Clone)]
pub struct SpdSolver {
    llt: SparseLlt<usize, f64>,
}

impl SpdSolver {
    pub fn new(a: &SparseMat) -> Result<Self> {
        let llt = a.sp_cholesky(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self { llt })
    }

    pub fn solve(&self, b: ColRef<'_, f64>) -> Col<f64> {
        let mut x = b.to_owned();
        self.llt.solve_in_place(x.as_mat_mut());
        x
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut x = b.to_owned();
        self.llt.solve_in_place(x.as_mut());
        x
    }

    /// In-place solve on a block of exactly [`crate::qge::LANES`] columns.
    pub fn solve_block(&self, b: &mut Mat<f64>) {
        assert_eq!(b.ncols(), crate::qge::LANES);
        self.llt.solve_in_place(b.as_mut());
    }
}

/// Sparse LU with partial pivoting.
#[derive(Clone)]
pub struct LuSolver {
    lu: SparseLu<usize, f64>,
}

impl LuSolver {
    pub fn new(a: &SparseMat) -> Result<Self> {
        let lu = a.sp_lu().map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self { lu })
    }

    pub fn solve_in_place(&self, b: &mut Col<f64>) {
        self.lu.solve_in_place(b.as_mat_mut());
    }

    /// In-place solve on a block of exactly [`crate::qge::LANES`] columns.
    pub fn solve_block(&self, b: &mut Mat<f64>) {
        assert_eq!(b.ncols(), crate::qge::LANES);
        self.lu.solve_in_place(b.as_mut());
    }
}

/// Builds a sparse matrix from `(row, col, value)` entries; duplicates add.
pub fn sparse_from_entries(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> SparseMat {
    let t: Vec<_> = entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
    SparseColMat::try_new_from_triplets(nrows, ncols, &t).expect("valid triplets")
}

pub fn sparse_identity(n: usize) -> SparseMat {
    sparse_from_entries(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
}

/// Sorted symmetric eigendecomposition.
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Mat<f64>,
}

/// Eigenpairs of a symmetric matrix in descending eigenvalue order. Only the
/// lower triangle is read.
pub fn sym_eigen_desc(a: MatRef<'_, f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n == 0 {
        return Ok(SymEigen { values: vec![], vectors: Mat::zeros(0, 0) });
    }
    let evd = a.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    // faer returns ascending order
    let values: Vec<f64> = (0..n).rev().map(|i| s[i]).collect();
    let u = evd.U();
    let vectors = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    Ok(SymEigen { values, vectors })
}

/// Ascending-order variant of [`sym_eigen_desc`].
pub fn sym_eigen_asc(a: MatRef<'_, f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n == 0 {
        return Ok(SymEigen { values: vec![], vectors: Mat::zeros(0, 0) });
    }
    let evd = a.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    Ok(SymEigen { values: s.iter().copied().collect(), vectors: evd.U().to_owned() })
}

/// Dense symmetric positive definite solve `a x = b` via Cholesky.
pub fn spd_solve(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let llt = a.llt(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    Ok(llt.solve(b))
}

/// Dense LU solve `a x = b`.
pub fn lu_solve(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    a.partial_piv_lu().solve(b)
}

/// Euclidean 2-norm.
pub fn norm2(x: ColRef<'_, f64>) -> f64 {
    x.norm_l2()
}

/// Mean of the columns of `x`.
pub fn column_mean(x: MatRef<'_, f64>) -> Col<f64> {
    let n = x.ncols();
    let mut m = Col::zeros(x.nrows());
    for j in 0..n {
        m += x.col(j);
    }
    if n > 0 {
        m *= faer::Scale(1.0 / n as f64);
    }
    m
}

/// Columns of `x` minus their mean.
pub fn centered(x: MatRef<'_, f64>) -> Mat<f64> {
    let m = column_mean(x);
    Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - m[i])
}

/// Largest symmetric deviation `max |a_ij - a_ji|`.
pub fn asymmetry(a: MatRef<'_, f64>) -> f64 {
    let mut d: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..j {
            d = d.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    d
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut d: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            d = d.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    d
}

pub fn max_abs(a: MatRef<'_, f64>) -> f64 {
    let mut d: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            d = d.max(a[(i, j)].abs());
        }
    }
    d
}
