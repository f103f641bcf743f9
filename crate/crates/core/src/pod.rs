//! Proper orthogonal decomposition, reduced spaces and their online
//! inflation/deflation, and the variance-linked POD tolerances.

use std::sync::Arc;

use faer::{Col, Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg::{spmm, sym_eigen_desc, SparseMat};
use crate::qge::QgeModel;

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const POD_RELATIVE_CUTOFF: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct PodResult {
    /// Retained modes as columns; orthonormal in the inner product used.
    pub basis: Mat<f64>,
    /// All correlation eigenvalues, descending, with negligible ones zeroed.
    pub eigenvalues: Vec<f64>,
    /// `sum_{i > n} gamma_i`.
    pub discarded_energy: f64,
}

impl PodResult {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Smallest `n` with `sum_{i >= n} gamma_i <= tol`, together with that tail.
/// Ties are decided with a slack of a few ulps of the total energy, so a
/// tolerance equal to the energy computed another way still discards all.
fn truncation(gamma: &[f64], tol: f64) -> (usize, f64) {
    let mut tails = vec![0.0; gamma.len() + 1];
    for i in (0..gamma.len()).rev() {
        tails[i] = tails[i + 1] + gamma[i];
    }
    let slack = 1e-13 * tails[0];
    let n = (0..=gamma.len()).find(|&n| tails[n] <= tol + slack).expect("the empty tail is zero");
    (n, tails[n])
}

fn clean_spectrum(values: &[f64]) -> Vec<f64> {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    values.iter().map(|&g| if g > POD_RELATIVE_CUTOFF * top && g > 0.0 { g } else { 0.0 }).collect()
}

/// Deterministic sign: entry sum non-negative, ties broken by the first
/// entry of largest magnitude.
fn fix_sign(v: &mut Mat<f64>, j: usize) {
    let col = v.col(j);
    let s: f64 = col.iter().sum();
    let flip = if s.abs() > 1e-12 * col.norm_l2() {
        s < 0.0
    } else {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() * (1.0 + 1e-12) {
                best = x;
            }
        }
        best < 0.0
    };
    if flip {
        for i in 0..v.nrows() {
            v[(i, j)] = -v[(i, j)];
        }
    }
}

/// POD in the inner product `(a, b) = a^T W b` through the `s x s` Gramian
/// `G / s`, `s` being the snapshot count.
fn pod_gramian(snapshots: MatRef<'_, f64>, weighted: MatRef<'_, f64>, tol: f64) -> Result<PodResult> {
    let s = snapshots.ncols();
    let d = snapshots.nrows();
    if s == 0 {
        return Err(Error::Config("POD of an empty snapshot set".into()));
    }
    let mut g = snapshots.transpose() * weighted;
    let inv = 1.0 / s as f64;
    for j in 0..s {
        for i in 0..s {
            g[(i, j)] *= inv;
        }
    }
    let mut eig = sym_eigen_desc(g.as_ref())?;
    let gamma = clean_spectrum(&eig.values);
    let (n, discarded) = truncation(&gamma, tol);
    let mut basis = Mat::zeros(d, n);
    for j in 0..n {
        fix_sign(&mut eig.vectors, j);
        let scale = 1.0 / (s as f64 * gamma[j]).sqrt();
        let v = eig.vectors.col(j);
        let phi = snapshots * v;
        for i in 0..d {
            basis[(i, j)] = phi[i] * scale;
        }
    }
    Ok(PodResult { basis, eigenvalues: gamma, discarded_energy: discarded })
}

/// POD with the mass inner product `(a, b)_V = a^T M b`.
pub fn pod(mass: &SparseMat, snapshots: MatRef<'_, f64>, tol: f64) -> Result<PodResult> {
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("negative POD tolerance {tol}")));
    }
    let weighted = spmm(mass, snapshots);
    let mut r = pod_gramian(snapshots, weighted.as_ref(), tol)?;
    m_orthonormalize(mass, &mut r.basis, 0);
    Ok(r)
}

/// POD with the Euclidean inner product. Uses the `d x d` correlation matrix
/// when it is smaller than the Gramian.
pub fn pod_euclidean(snapshots: MatRef<'_, f64>, tol: f64) -> Result<PodResult> {
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("negative POD tolerance {tol}")));
    }
    let (d, s) = (snapshots.nrows(), snapshots.ncols());
    if s == 0 {
        return Err(Error::Config("POD of an empty snapshot set".into()));
    }
    if s <= d {
        return pod_gramian(snapshots, snapshots, tol);
    }
    let mut r = snapshots * snapshots.transpose();
    let inv = 1.0 / s as f64;
    for j in 0..d {
        for i in 0..d {
            r[(i, j)] *= inv;
        }
    }
    let mut eig = sym_eigen_desc(r.as_ref())?;
    let gamma = clean_spectrum(&eig.values);
    let (n, discarded) = truncation(&gamma, tol);
    for j in 0..n {
        fix_sign(&mut eig.vectors, j);
    }
    Ok(PodResult { basis: eig.vectors.subcols(0, n).to_owned(), eigenvalues: gamma, discarded_energy: discarded })
}

/// Modified Gram-Schmidt in the mass inner product with one re-pass, applied
/// to columns `first..` of `basis` (earlier columns are taken as already
/// orthonormal and left untouched). Columns that lose all their mass are
/// removed.
pub fn m_orthonormalize(mass: &SparseMat, basis: &mut Mat<f64>, first: usize) {
    let d = basis.nrows();
    let mut kept: Vec<Col<f64>> = (0..first).map(|j| basis.col(j).to_owned()).collect();
    let mut m_kept: Vec<Col<f64>> = kept.iter().map(|q| crate::linalg::spmv(mass, q.as_ref())).collect();
    for j in first..basis.ncols() {
        let mut v = basis.col(j).to_owned();
        let norm0 = crate::linalg::spmv(mass, v.as_ref()).transpose() * &v;
        for _pass in 0..2 {
            for (q, mq) in kept.iter().zip(&m_kept) {
                let c = mq.transpose() * &v;
                v -= faer::Scale(c) * q;
            }
        }
        let mv = crate::linalg::spmv(mass, v.as_ref());
        let norm2 = mv.transpose() * &v;
        if !(norm2 > 1e-20 * norm0.max(f64::MIN_POSITIVE)) || norm2 <= 0.0 {
            continue;
        }
        let s = 1.0 / norm2.sqrt();
        v *= faer::Scale(s);
        m_kept.push(crate::linalg::spmv(mass, v.as_ref()));
        kept.push(v);
    }
    let mut out = Mat::zeros(d, kept.len());
    for (j, q) in kept.iter().enumerate() {
        out.col_mut(j).copy_from(q);
    }
    *basis = out;
}

/// A V-orthonormal vorticity basis with its paired streamfunction basis
/// `K z_i = M phi_i`.
#[derive(Debug, Clone)]
pub struct ReducedSpace {
    pub basis: Mat<f64>,
    pub psi_basis: Mat<f64>,
}

impl ReducedSpace {
    /// Pairs an M-orthonormal `basis` with its streamfunctions.
    pub fn new(model: &QgeModel, basis: Mat<f64>) -> Self {
        let psi_basis = model.streamfunction_mat(basis.as_ref());
        Self { basis, psi_basis }
    }

    pub fn empty(n_dofs: usize) -> Self {
        Self { basis: Mat::zeros(n_dofs, 0), psi_basis: Mat::zeros(n_dofs, 0) }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Either the whole finite-element space or a reduced subspace of it.
#[derive(Debug, Clone)]
pub enum Space {
    Full,
    Reduced(Arc<ReducedSpace>),
}

impl Space {
    pub fn empty(n_dofs: usize) -> Self {
        Space::Reduced(Arc::new(ReducedSpace::empty(n_dofs)))
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Space::Full)
    }

    pub fn dim(&self, n_dofs: usize) -> usize {
        match self {
            Space::Full => n_dofs,
            Space::Reduced(r) => r.dim(),
        }
    }

    /// Reduced coordinates `Phi^T M x` of the columns of `x`.
    pub fn project(&self, mass: &SparseMat, x: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            Space::Full => x.to_owned(),
            Space::Reduced(r) => r.basis.transpose() * spmm(mass, x),
        }
    }

    /// `Phi c` for each column of `c`.
    pub fn lift(&self, c: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            Space::Full => c.to_owned(),
            Space::Reduced(r) => &r.basis * c,
        }
    }

    /// V-orthogonal projection of the columns of `x`, in full coordinates.
    pub fn project_full(&self, mass: &SparseMat, x: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            Space::Full => x.to_owned(),
            Space::Reduced(_) => self.lift(self.project(mass, x).as_ref()),
        }
    }
}

/// `span{POD(X - Pi_W X, eps), W}`, re-orthonormalized.
pub fn inflate(model: &QgeModel, w_prev: &Space, hf_snapshots: MatRef<'_, f64>, eps: f64) -> Result<Space> {
    let Space::Reduced(w) = w_prev else {
        return Ok(Space::Full);
    };
    let mass = &model.ops().mass;
    let n_dofs = model.n_dofs();
    if hf_snapshots.nrows() != n_dofs {
        return Err(Error::DimensionMismatch { expected: n_dofs, found: hf_snapshots.nrows() });
    }
    let mut resid = hf_snapshots.to_owned();
    if w.dim() > 0 {
        for _pass in 0..2 {
            let c = w.basis.transpose() * spmm(mass, resid.as_ref());
            resid -= &w.basis * &c;
        }
    }
    // Residual energy at roundoff level relative to the snapshots is noise.
    let energy = spread_free_energy(mass, hf_snapshots);
    let extra = pod(mass, resid.as_ref(), eps.max(POD_RELATIVE_CUTOFF * energy))?;
    if extra.dim() == 0 {
        return Ok(w_prev.clone());
    }
    let old = w.dim();
    let mut basis = Mat::zeros(n_dofs, old + extra.dim());
    basis.subcols_mut(0, old).copy_from(&w.basis);
    basis.subcols_mut(old, extra.dim()).copy_from(&extra.basis);
    m_orthonormalize(mass, &mut basis, old);
    if basis.ncols() == old {
        return Ok(w_prev.clone());
    }
    let new_psi = model.streamfunction_mat(basis.subcols(old, basis.ncols() - old));
    let mut psi_basis = Mat::zeros(n_dofs, basis.ncols());
    psi_basis.subcols_mut(0, old).copy_from(&w.psi_basis);
    psi_basis.subcols_mut(old, basis.ncols() - old).copy_from(&new_psi);
    Ok(Space::Reduced(Arc::new(ReducedSpace { basis, psi_basis })))
}

/// `POD(lf, eps)` where `lf` holds coordinates in `v_curr`.
///
/// For a reduced `v_curr` the POD runs on the coordinates with the Euclidean
/// inner product (valid because the basis is V-orthonormal) and the result is
/// lifted. For the full space the coordinates are finite-element vectors and
/// the mass Gramian is used.
pub fn deflate(model: &QgeModel, v_curr: &Space, lf_coords: MatRef<'_, f64>, eps: f64) -> Result<Space> {
    let n_dofs = model.n_dofs();
    let dim = v_curr.dim(n_dofs);
    if lf_coords.nrows() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: lf_coords.nrows() });
    }
    let mass = &model.ops().mass;
    let basis = match v_curr {
        Space::Full => pod(mass, lf_coords, eps)?.basis,
        Space::Reduced(v) => {
            if dim == 0 || lf_coords.ncols() == 0 {
                return Ok(Space::empty(n_dofs));
            }
            let r = pod_euclidean(lf_coords, eps)?;
            let mut b = &v.basis * &r.basis;
            m_orthonormalize(mass, &mut b, 0);
            b
        }
    };
    Ok(Space::Reduced(Arc::new(ReducedSpace::new(model, basis))))
}

/// Mean squared V-norm of the columns.
fn spread_free_energy(mass: &SparseMat, x: MatRef<'_, f64>) -> f64 {
    let mx = spmm(mass, x);
    (0..x.ncols()).map(|j| x.col(j).transpose() * mx.col(j)).sum::<f64>() / x.ncols().max(1) as f64
}

/// `||x_j - mean||_V^2` for every column.
pub fn spread_norms(mass: &SparseMat, x: MatRef<'_, f64>) -> Vec<f64> {
    let c = crate::linalg::centered(x);
    let mc = spmm(mass, c.as_ref());
    (0..c.ncols()).map(|j| c.col(j).transpose() * mc.col(j)).collect()
}

/// `(x_j - mean_x, y_j - mean_y)_V` for every column pair.
pub fn spread_inner(mass: &SparseMat, x: MatRef<'_, f64>, y: MatRef<'_, f64>) -> Vec<f64> {
    let cx = crate::linalg::centered(x);
    let cy = crate::linalg::centered(y);
    let my = spmm(mass, cy.as_ref());
    (0..cx.ncols()).map(|j| cx.col(j).transpose() * my.col(j)).collect()
}

/// `1e-14` times the mean squared V-norm of the principal spread, or
/// `1e-300` when the spread vanishes.
pub fn tolerance_floor(mass: &SparseMat, principal: MatRef<'_, f64>) -> f64 {
    let s = spread_norms(mass, principal);
    let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
    if mean > 0.0 {
        1e-14 * mean
    } else {
        1e-300
    }
}

fn check_sizes(p: MatRef<'_, f64>, c: MatRef<'_, f64>, a: MatRef<'_, f64>) -> Result<()> {
    for n in [p.ncols(), a.ncols()] {
        if n < 2 {
            return Err(Error::EnsembleTooSmall(n));
        }
    }
    if c.ncols() != p.ncols() {
        return Err(Error::DimensionMismatch { expected: p.ncols(), found: c.ncols() });
    }
    Ok(())
}

/// Multi-level estimate of `2 eps_r tr C`, floored.
pub fn adaptive_tolerance_ml(
    mass: &SparseMat,
    principal: MatRef<'_, f64>,
    control: MatRef<'_, f64>,
    ancillary: MatRef<'_, f64>,
    eps_r: f64,
) -> Result<f64> {
    check_sizes(principal, control, ancillary)?;
    let np = principal.ncols() as f64;
    let na = ancillary.ncols() as f64;
    let sp: f64 = spread_norms(mass, principal).iter().sum();
    let sc: f64 = spread_norms(mass, control).iter().sum();
    let sa: f64 = spread_norms(mass, ancillary).iter().sum();
    let raw = 2.0 * eps_r / (np - 1.0) * (sp - sc) + 2.0 * eps_r / (na - 1.0) * sa;
    Ok(raw.max(tolerance_floor(mass, principal)))
}

/// Control-variate estimate of `2 eps_r tr C`, floored.
pub fn adaptive_tolerance_mf(
    mass: &SparseMat,
    principal: MatRef<'_, f64>,
    control: MatRef<'_, f64>,
    ancillary: MatRef<'_, f64>,
    eps_r: f64,
) -> Result<f64> {
    check_sizes(principal, control, ancillary)?;
    let np = principal.ncols() as f64;
    let na = ancillary.ncols() as f64;
    let sp: f64 = spread_norms(mass, principal).iter().sum();
    let sc: f64 = spread_norms(mass, control).iter().sum();
    let x: f64 = spread_inner(mass, principal, control).iter().sum();
    let sa: f64 = spread_norms(mass, ancillary).iter().sum();
    let raw = 0.5 * eps_r / (na - 1.0) * sa + 2.0 * eps_r / (np - 1.0) * (sp - x + 0.25 * sc);
    Ok(raw.max(tolerance_floor(mass, principal)))
}

/// Per-level ensembles entering the telescopic tolerances: level 0 has no
/// control ensemble, every finer level pairs a principal with a control.
pub struct LevelSpread<'a> {
    pub principal: MatRef<'a, f64>,
    pub control: Option<MatRef<'a, f64>>,
}

fn unbiased_sum(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Telescopic multi-level tolerance for relative tolerance `eps_r`:
/// `2 eps_r [S(P0) + sum_s (S(Ps) - S(Cs))]` with unbiased spreads `S`.
pub fn telescopic_tolerance_ml(mass: &SparseMat, levels: &[LevelSpread<'_>], eps_r: f64) -> Result<f64> {
    let top = check_levels(levels)?;
    let mut t = unbiased_sum(&spread_norms(mass, levels[0].principal));
    for lv in &levels[1..] {
        let c = lv.control.expect("checked");
        t += unbiased_sum(&spread_norms(mass, lv.principal)) - unbiased_sum(&spread_norms(mass, c));
    }
    Ok((2.0 * eps_r * t).max(tolerance_floor(mass, top)))
}

/// Telescopic multi-fidelity tolerance: level `s` weighted by `4^-(L-s)`.
pub fn telescopic_tolerance_mf(mass: &SparseMat, levels: &[LevelSpread<'_>], eps_r: f64) -> Result<f64> {
    let top = check_levels(levels)?;
    let l = levels.len() - 1;
    let mut t = 0.25f64.powi(l as i32) * unbiased_sum(&spread_norms(mass, levels[0].principal));
    for (s, lv) in levels.iter().enumerate().skip(1) {
        let c = lv.control.expect("checked");
        let sp = unbiased_sum(&spread_norms(mass, lv.principal));
        let sc = unbiased_sum(&spread_norms(mass, c));
        let x = unbiased_sum(&spread_inner(mass, lv.principal, c));
        t += 0.25f64.powi((l - s) as i32) * (sp + 0.25 * sc - x);
    }
    Ok((2.0 * eps_r * t).max(tolerance_floor(mass, top)))
}

fn check_levels<'a>(levels: &[LevelSpread<'a>]) -> Result<MatRef<'a, f64>> {
    if levels.len() < 2 {
        return Err(Error::Config("telescopic tolerance needs at least two levels".into()));
    }
    for (s, lv) in levels.iter().enumerate() {
        if lv.principal.ncols() < 2 {
            return Err(Error::EnsembleTooSmall(lv.principal.ncols()));
        }
        match (s, lv.control) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Config("level 0 carries no control ensemble".into())),
            (_, None) => return Err(Error::Config(format!("level {s} lacks its control ensemble"))),
            (_, Some(c)) if c.ncols() != lv.principal.ncols() => {
                return Err(Error::DimensionMismatch { expected: lv.principal.ncols(), found: c.ncols() })
            }
            _ => {}
        }
    }
    Ok(levels[levels.len() - 1].principal)
}
