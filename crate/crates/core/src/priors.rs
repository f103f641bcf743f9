//! Initial-ensemble distributions: the Gaussian prior with inverse-Laplacian
//! covariance and resampling from an archive of states on the attractor.

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Col, ColRef, Mat, MatRef, Par, Side};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::fem::{FemOperators, StateVector};
use crate::linalg::sym_eigen_asc;
use crate::rng::{normal_col, StreamFamily};

/// Smallest generalized eigenpairs of `K xi = lambda M xi`.
#[derive(Debug, Clone)]
pub struct LaplacianEigenbasis {
    /// Ascending, all positive.
    pub eigvals: Vec<f64>,
    /// M-orthonormal eigenvectors as columns.
    pub eigvecs: Mat<f64>,
    /// `sum 1/lambda_i` over the modes that were computed but not kept.
    pub discarded_variance: f64,
}

/// Default truncation of the sampling basis.
pub fn default_n_modes(n_dofs: usize) -> usize {
    n_dofs.min(400)
}

/// Dense generalized eigensolve through the Cholesky factor `M = C C^T`:
/// the eigenvectors `y` of `C^-1 K C^-T` map back as `xi = C^-T y`.
pub fn build_laplacian_eigenbasis(ops: &FemOperators, n_modes: usize) -> Result<LaplacianEigenbasis> {
    let n = ops.n_dofs();
    if n_modes == 0 || n_modes > n {
        return Err(Error::Config(format!("n_modes = {n_modes} outside 1..={n}")));
    }
    let m = ops.mass.to_dense();
    let c = m.llt(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?.L().to_owned();
    let mut a = ops.stiffness.to_dense();
    solve_lower_triangular_in_place(c.as_ref(), a.as_mut(), Par::Seq);
    let mut at = a.transpose().to_owned();
    solve_lower_triangular_in_place(c.as_ref(), at.as_mut(), Par::Seq);
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (at[(i, j)] + at[(j, i)]));
    let eig = sym_eigen_asc(sym.as_ref())?;
    if eig.values[0] <= 0.0 {
        return Err(Error::Factorization(format!("non-positive Laplacian eigenvalue {}", eig.values[0])));
    }
    let mut vecs = eig.vectors.subcols(0, n_modes).to_owned();
    solve_upper_triangular_in_place(c.transpose(), vecs.as_mut(), Par::Seq);
    let discarded_variance = eig.values[n_modes..].iter().map(|l| 1.0 / l).sum();
    if n_modes < n {
        log::info!("prior truncated to {n_modes} modes; discarded variance {discarded_variance:.3e}");
    }
    Ok(LaplacianEigenbasis { eigvals: eig.values[..n_modes].to_vec(), eigvecs: vecs, discarded_variance })
}

impl LaplacianEigenbasis {
    pub fn n_modes(&self) -> usize {
        self.eigvals.len()
    }

    /// `sum_i lambda_i^{-1/2} z_i xi_i`.
    pub fn combine(&self, z: ColRef<'_, f64>) -> StateVector {
        let w = Col::from_fn(self.n_modes(), |i| z[i] / self.eigvals[i].sqrt());
        &self.eigvecs * &w
    }
}

/// `count` draws from `N(0, Delta^-1)`; column `j` uses `family.member(j)`.
pub fn sample_smooth_prior(basis: &LaplacianEigenbasis, family: &StreamFamily, count: usize) -> Mat<f64> {
    let mut out = Mat::zeros(basis.eigvecs.nrows(), count);
    for j in 0..count {
        let z = normal_col(&mut family.member(j as u64), basis.n_modes());
        out.col_mut(j).copy_from(basis.combine(z.as_ref()));
    }
    out
}

/// Long-horizon snapshots used as an empirical invariant measure.
#[derive(Debug, Clone)]
pub struct InvariantArchive {
    pub snapshots: Mat<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

impl InvariantArchive {
    pub fn new(snapshots: Mat<f64>, t_start: f64, t_end: f64) -> Result<Self> {
        if snapshots.ncols() == 0 {
            return Err(Error::EmptyArchive);
        }
        Ok(Self { snapshots, t_start, t_end })
    }

    pub fn len(&self) -> usize {
        self.snapshots.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.ncols() == 0
    }

    pub fn snapshots(&self) -> MatRef<'_, f64> {
        self.snapshots.as_ref()
    }
}

/// Uniform resampling with replacement from `archive`, optionally jittered by
/// `sigma_jit` times a smooth-prior draw.
pub fn sample_invariant_prior(
    archive: &InvariantArchive,
    jitter: Option<(&LaplacianEigenbasis, f64)>,
    family: &StreamFamily,
    count: usize,
) -> Result<Mat<f64>> {
    if archive.is_empty() {
        return Err(Error::EmptyArchive);
    }
    let n = archive.snapshots.nrows();
    let mut out = Mat::zeros(n, count);
    for j in 0..count {
        let mut rng = family.member(j as u64);
        let pick = rng.random_range(0..archive.len());
        out.col_mut(j).copy_from(archive.snapshots.col(pick));
        if let Some((basis, sigma)) = jitter {
            if sigma != 0.0 {
                if basis.eigvecs.nrows() != n {
                    return Err(Error::DimensionMismatch { expected: n, found: basis.eigvecs.nrows() });
                }
                let z = normal_col(&mut rng, basis.n_modes());
                let d = basis.combine(z.as_ref());
                for i in 0..n {
                    out[(i, j)] += sigma * d[i];
                }
            }
        }
    }
    Ok(out)
}
