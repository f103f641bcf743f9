//! Ensemble Kalman filters: the single-ensemble baseline and the multi-level
//! and multi-fidelity filters over a hierarchy of reduced models.
//!
//! Ensembles are stored in finite-element coordinates, one member per
//! column. A hierarchy with `L` levels holds principal ensembles `P^0..P^L`
//! and control ensembles `C^1..C^L`, where `P^L` is the high-fidelity
//! ensemble, `P^l` lives in the inflated space `V^l` and `C^l` in `V^(l-1)`.
//! The two-level filters are the case `L = 1`: `P^1` is the principal,
//! `C^1` the control and `P^0` the ancillary ensemble.

use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::{Col, Mat, MatRef, Side};

use crate::error::{Error, Result};
use crate::linalg::{centered, column_mean, sym_eigen_desc, SparseMat};
use crate::pod::{deflate, inflate, m_orthonormalize, telescopic_tolerance_mf, telescopic_tolerance_ml, LevelSpread, ReducedSpace, Space};
use crate::qge::{QgeModel, Trajectory};
use crate::rng::{normal_columns, StreamFamily};
use crate::rom::build_reduced_operators;

/// Point-evaluation operator: a 0/1 selection of state entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    dofs: Vec<usize>,
    n_dofs: usize,
}

impl Observation {
    pub fn new(dofs: Vec<usize>, n_dofs: usize) -> Self {
        assert!(dofs.iter().all(|&d| d < n_dofs), "observed dof out of range");
        Self { dofs, n_dofs }
    }

    pub fn n_obs(&self) -> usize {
        self.dofs.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    pub fn apply(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        Mat::from_fn(self.dofs.len(), x.ncols(), |r, j| x[(self.dofs[r], j)])
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut l = Mat::zeros(self.dofs.len(), self.n_dofs);
        for (r, &d) in self.dofs.iter().enumerate() {
            l[(r, d)] = 1.0;
        }
        l
    }
}

/// Which of the two covariance operators to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    /// State-measurement covariance.
    Q,
    /// Measurement-measurement covariance.
    P,
}

/// `1/(N-1) sum_n (a_n - mean a)(b_n - mean b)^T`, members paired by column.
pub fn cross_covariance(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let n = a.ncols();
    if b.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: b.ncols() });
    }
    if n < 2 {
        return Err(Error::EnsembleTooSmall(n));
    }
    let ca = centered(a);
    let cb = centered(b);
    let mut c = &ca * cb.transpose();
    c *= faer::Scale(1.0 / (n as f64 - 1.0));
    Ok(c)
}

/// Covariance of one ensemble given its states and their observations.
pub fn single_cov(states: MatRef<'_, f64>, observed: MatRef<'_, f64>, which: Which) -> Result<Mat<f64>> {
    match which {
        Which::Q => cross_covariance(states, observed),
        Which::P => cross_covariance(observed, observed),
    }
}

/// Paired cross-covariance `X^{a,b}` of two ensembles.
pub fn cross_cov(
    states_a: MatRef<'_, f64>,
    observed_a: MatRef<'_, f64>,
    observed_b: MatRef<'_, f64>,
    which: Which,
) -> Result<Mat<f64>> {
    if states_a.ncols() != observed_b.ncols() {
        return Err(Error::DimensionMismatch { expected: states_a.ncols(), found: observed_b.ncols() });
    }
    match which {
        Which::Q => cross_covariance(states_a, observed_b),
        Which::P => cross_covariance(observed_a, observed_b),
    }
}

/// Projection of `(Q~, P~)` onto the cone of positive semi-definite
/// operators: eigenpairs of `P~` with negative eigenvalue are removed from
/// both.
pub fn psd_regularize(q: MatRef<'_, f64>, p: MatRef<'_, f64>) -> Result<(Mat<f64>, Mat<f64>)> {
    let d = p.nrows();
    if p.ncols() != d || q.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: p.ncols().max(q.ncols()) });
    }
    let sym = Mat::from_fn(d, d, |i, j| 0.5 * (p[(i, j)] + p[(j, i)]));
    let eig = sym_eigen_desc(sym.as_ref())?;
    let keep: Vec<usize> = (0..d).filter(|&i| eig.values[i] >= 0.0).collect();
    if keep.len() == d {
        return Ok((q.to_owned(), sym));
    }
    let pk = Mat::from_fn(d, keep.len(), |r, c| eig.vectors[(r, keep[c])]);
    let scaled = Mat::from_fn(d, keep.len(), |r, c| eig.values[keep[c]] * pk[(r, c)]);
    let p_out = &scaled * pk.transpose();
    let q_out = (q * &pk) * pk.transpose();
    Ok((q_out, p_out))
}

/// Kalman gain `Q (P + s I)^-1` with `s` the noise variance.
pub fn kalman_gain(q: MatRef<'_, f64>, p: MatRef<'_, f64>, noise_var: f64) -> Result<Mat<f64>> {
    let solved = solve_innovation(p, noise_var, q.transpose())?;
    Ok(solved.transpose().to_owned())
}

/// `(P + s I)^-1 r` through a symmetric indefinite factorization.
fn solve_innovation(p: MatRef<'_, f64>, noise_var: f64, r: MatRef<'_, f64>) -> Result<Mat<f64>> {
    assert!(noise_var > 0.0, "measurement noise must be positive");
    let d = p.nrows();
    let a = Mat::from_fn(d, d, |i, j| 0.5 * (p[(i, j)] + p[(j, i)]) + if i == j { noise_var } else { 0.0 });
    let x = a.lblt(Side::Lower).solve(r);
    if !x.is_all_finite() {
        return Err(Error::Factorization("singular innovation covariance".into()));
    }
    Ok(x)
}

/// Filter update family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Ml,
    Mf,
}

/// How the surrogate spaces evolve between windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retraining {
    /// Inflate the inherited deflated space, then deflate after the forecast.
    InflationDeflation,
    /// Rebuild from the principal snapshots alone each window.
    Memoryless,
    /// Keep the spaces fixed.
    Frozen,
}

/// Hierarchy of ensembles at one assimilation time.
#[derive(Debug, Clone)]
pub struct EnsembleSet {
    pub k: usize,
    /// `principal[l]`, `l = 0..=L`.
    pub principal: Vec<Mat<f64>>,
    /// `control[l]`, `l = 1..=L`; `control[0]` is empty.
    pub control: Vec<Mat<f64>>,
    /// Inflated spaces `V^l`, `l = 0..L`.
    pub inflated: Vec<Space>,
    /// Deflated spaces `W^l`, `l = 0..L`.
    pub deflated: Vec<Space>,
}

impl EnsembleSet {
    /// Initial hierarchy: each control ensemble equals the principal of its
    /// level and every state lives in the full space.
    pub fn initial(principal: Vec<Mat<f64>>, deflated: Vec<Space>) -> Result<Self> {
        let l = principal.len().checked_sub(1).filter(|&l| l >= 1).ok_or_else(|| Error::Config("need at least two levels".into()))?;
        if deflated.len() != l {
            return Err(Error::DimensionMismatch { expected: l, found: deflated.len() });
        }
        for p in &principal {
            if p.ncols() < 2 {
                return Err(Error::EnsembleTooSmall(p.ncols()));
            }
        }
        let n = principal[0].nrows();
        let mut control = vec![Mat::zeros(n, 0)];
        control.extend(principal[1..].iter().cloned());
        Ok(Self { k: 0, principal, control, inflated: vec![Space::Full; l], deflated })
    }

    /// Two-level set from principal, control and ancillary ensembles.
    pub fn two_level(principal: Mat<f64>, control: Mat<f64>, ancillary: Mat<f64>, inflated: Space, deflated: Space) -> Self {
        let n = principal.nrows();
        Self {
            k: 0,
            principal: vec![ancillary, principal],
            control: vec![Mat::zeros(n, 0), control],
            inflated: vec![inflated],
            deflated: vec![deflated],
        }
    }

    pub fn levels(&self) -> usize {
        self.principal.len() - 1
    }

    /// The high-fidelity principal ensemble `P^L`.
    pub fn principal_hf(&self) -> &Mat<f64> {
        &self.principal[self.levels()]
    }

    pub fn control_hf(&self) -> &Mat<f64> {
        &self.control[self.levels()]
    }

    /// `P^0`; the ancillary ensemble of the two-level filters.
    pub fn ancillary(&self) -> &Mat<f64> {
        &self.principal[0]
    }

    /// Space holding `P^l`.
    pub fn principal_space(&self, l: usize) -> &Space {
        if l == self.levels() {
            &Space::Full
        } else {
            &self.inflated[l]
        }
    }

    /// Space holding `C^l`.
    pub fn control_space(&self, l: usize) -> &Space {
        &self.inflated[l - 1]
    }

    pub fn principal_mean(&self) -> Col<f64> {
        column_mean(self.principal_hf().as_ref())
    }

    fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || self.control.len() != l + 1 || self.inflated.len() != l || self.deflated.len() != l {
            return Err(Error::Config("malformed ensemble hierarchy".into()));
        }
        for s in 1..=l {
            if self.control[s].ncols() != self.principal[s].ncols() {
                return Err(Error::DimensionMismatch { expected: self.principal[s].ncols(), found: self.control[s].ncols() });
            }
        }
        for p in &self.principal {
            if p.ncols() < 2 {
                return Err(Error::EnsembleTooSmall(p.ncols()));
            }
        }
        Ok(())
    }
}

/// Hierarchical covariance estimate `(Q, P)`.
///
/// Multi-level: `Q~ = X(P^0) + sum_s [X(P^s) - X(C^s)]`.
/// Multi-fidelity: `Q = 4^-L X(P^0) + sum_s 4^-(L-s) [X(P^s) + X(C^s)/4 -
/// (X(P^s, C^s) + X(C^s, P^s))/2]`, the recursive control-variate estimator.
fn hierarchical_covariances(es: &EnsembleSet, obs: &Observation, kind: UpdateKind) -> Result<(Mat<f64>, Mat<f64>)> {
    es.validate()?;
    let l = es.levels();
    let lp: Vec<Mat<f64>> = es.principal.iter().map(|x| obs.apply(x.as_ref())).collect();
    let lc: Vec<Mat<f64>> = es.control.iter().map(|x| obs.apply(x.as_ref())).collect();
    let q0 = single_cov(es.principal[0].as_ref(), lp[0].as_ref(), Which::Q)?;
    let p0 = single_cov(es.principal[0].as_ref(), lp[0].as_ref(), Which::P)?;
    match kind {
        UpdateKind::Ml => {
            let (mut q, mut p) = (q0, p0);
            for s in 1..=l {
                q += single_cov(es.principal[s].as_ref(), lp[s].as_ref(), Which::Q)?;
                q -= single_cov(es.control[s].as_ref(), lc[s].as_ref(), Which::Q)?;
                p += single_cov(es.principal[s].as_ref(), lp[s].as_ref(), Which::P)?;
                p -= single_cov(es.control[s].as_ref(), lc[s].as_ref(), Which::P)?;
            }
            Ok((q, p))
        }
        UpdateKind::Mf => {
            let (mut q, mut p) = (q0, p0);
            for s in 1..=l {
                let (xp, xc) = (es.principal[s].as_ref(), es.control[s].as_ref());
                let (op, oc) = (lp[s].as_ref(), lc[s].as_ref());
                let mut qs = single_cov(xp, op, Which::Q)?;
                qs += faer::Scale(0.25) * single_cov(xc, oc, Which::Q)?;
                q *= faer::Scale(0.25);
                let mut ps = single_cov(xp, op, Which::P)?;
                ps += faer::Scale(0.25) * single_cov(xc, oc, Which::P)?;
                p *= faer::Scale(0.25);
                q += qs;
                q -= faer::Scale(0.5) * (cross_cov(xp, op, oc, Which::Q)? + cross_cov(xc, oc, op, Which::Q)?);
                p += ps;
                p -= faer::Scale(0.5) * (cross_cov(xp, op, oc, Which::P)? + cross_cov(xc, oc, op, Which::P)?);
            }
            Ok((q, p))
        }
    }
}

/// Unregularized multi-level covariances `(Q~, P~)`.
pub fn ml_covariances(es: &EnsembleSet, obs: &Observation) -> Result<(Mat<f64>, Mat<f64>)> {
    hierarchical_covariances(es, obs, UpdateKind::Ml)
}

/// Multi-fidelity control-variate covariances `(Q^MF, P^MF)`.
pub fn mf_covariances(es: &EnsembleSet, obs: &Observation) -> Result<(Mat<f64>, Mat<f64>)> {
    hierarchical_covariances(es, obs, UpdateKind::Mf)
}

#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    /// Measurement noise standard deviation.
    pub sigma: f64,
    /// Apply PSD regularization to the multi-fidelity covariances as well.
    pub psd_for_mf: bool,
}

/// Perturbed data `d + sqrt(scale) sigma z`, one column per member.
pub fn perturbed_data(data: &Col<f64>, sigma: f64, scale: f64, family: &StreamFamily, members: usize) -> Mat<f64> {
    let z = normal_columns(family, data.nrows(), members);
    let s = scale.sqrt() * sigma;
    Mat::from_fn(data.nrows(), members, |i, j| data[i] + s * z[(i, j)])
}

/// Analysis step of the multi-level (`Ml`) or multi-fidelity (`Mf`) filter.
///
/// `family` must be specific to the assimilation time; level `l` draws its
/// perturbed data from `family.child("P{l}")` and its control ensemble reuses
/// those draws by member index.
pub fn hierarchical_analysis(
    mass: &SparseMat,
    es: &EnsembleSet,
    obs: &Observation,
    data: &Col<f64>,
    kind: UpdateKind,
    opts: AnalysisOptions,
    family: &StreamFamily,
) -> Result<EnsembleSet> {
    let (q, p) = hierarchical_covariances(es, obs, kind)?;
    let (q, p) = if kind == UpdateKind::Ml || opts.psd_for_mf { psd_regularize(q.as_ref(), p.as_ref())? } else { (q, p) };
    let scale = if kind == UpdateKind::Ml { 1.0 } else { 0.5 };
    let noise_var = scale * opts.sigma * opts.sigma;
    let l = es.levels();
    let mut out = es.clone();
    for s in 0..=l {
        let m = es.principal[s].ncols();
        let d = perturbed_data(data, opts.sigma, scale, &family.child(format!("P{s}")), m);
        let innov_p = &d - obs.apply(es.principal[s].as_ref());
        let inc = &q * solve_innovation(p.as_ref(), noise_var, innov_p.as_ref())?;
        out.principal[s] += es.principal_space(s).project_full(mass, inc.as_ref());
        if s >= 1 {
            let innov_c = &d - obs.apply(es.control[s].as_ref());
            let inc = &q * solve_innovation(p.as_ref(), noise_var, innov_c.as_ref())?;
            out.control[s] += es.control_space(s).project_full(mass, inc.as_ref());
        }
    }
    if kind == UpdateKind::Mf {
        recenter(mass, &mut out);
    }
    Ok(out)
}

/// Multi-fidelity re-centering mean, `m_0 = mean P^0`,
/// `m_s = mean P^s + (m_(s-1) - mean C^s) / 2`.
pub fn recentering_mean(es: &EnsembleSet) -> Col<f64> {
    let mut m = column_mean(es.principal[0].as_ref());
    for s in 1..=es.levels() {
        let mp = column_mean(es.principal[s].as_ref());
        let mc = column_mean(es.control[s].as_ref());
        m = Col::from_fn(mp.nrows(), |i| mp[i] + 0.5 * (m[i] - mc[i]));
    }
    m
}

/// Translates every ensemble so that its mean is the (projected)
/// re-centering mean.
pub fn recenter(mass: &SparseMat, es: &mut EnsembleSet) {
    let target = recentering_mean(es);
    let tm = target.as_mat();
    let l = es.levels();
    for s in 0..=l {
        let t = es.principal_space(s).project_full(mass, tm);
        shift_to(&mut es.principal[s], t.col(0));
        if s >= 1 {
            let t = es.control_space(s).project_full(mass, tm);
            shift_to(&mut es.control[s], t.col(0));
        }
    }
}

fn shift_to(x: &mut Mat<f64>, target: faer::ColRef<'_, f64>) {
    let mean = column_mean(x.as_ref());
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            x[(i, j)] += target[i] - mean[i];
        }
    }
}

/// Two-level multi-level analysis.
pub fn ml_analysis(
    mass: &SparseMat,
    es: &EnsembleSet,
    obs: &Observation,
    data: &Col<f64>,
    sigma: f64,
    family: &StreamFamily,
) -> Result<EnsembleSet> {
    hierarchical_analysis(mass, es, obs, data, UpdateKind::Ml, AnalysisOptions { sigma, psd_for_mf: false }, family)
}

/// Two-level multi-fidelity analysis with re-centering.
pub fn mf_analysis(
    mass: &SparseMat,
    es: &EnsembleSet,
    obs: &Observation,
    data: &Col<f64>,
    sigma: f64,
    family: &StreamFamily,
) -> Result<EnsembleSet> {
    hierarchical_analysis(mass, es, obs, data, UpdateKind::Mf, AnalysisOptions { sigma, psd_for_mf: false }, family)
}

/// Classic stochastic EnKF update of a single ensemble. Draws come from
/// `family.child("P1")`, the stream of the two-level principal ensemble.
pub fn enkf_analysis(ensemble: &Mat<f64>, obs: &Observation, data: &Col<f64>, sigma: f64, family: &StreamFamily) -> Result<Mat<f64>> {
    let lx = obs.apply(ensemble.as_ref());
    let q = single_cov(ensemble.as_ref(), lx.as_ref(), Which::Q)?;
    let p = single_cov(ensemble.as_ref(), lx.as_ref(), Which::P)?;
    let d = perturbed_data(data, sigma, 1.0, &family.child("P1"), ensemble.ncols());
    let innov = &d - &lx;
    let inc = &q * solve_innovation(p.as_ref(), sigma * sigma, innov.as_ref())?;
    Ok(ensemble + inc)
}

/// High-fidelity forecast of a single ensemble.
pub fn enkf_predict(model: &QgeModel, ensemble: &Mat<f64>, t_window: f64) -> Result<Mat<f64>> {
    let trajs = model.flow_ensemble(ensemble.as_ref(), t_window)?;
    Ok(last_states(&trajs))
}

fn last_states(trajs: &[Trajectory]) -> Mat<f64> {
    let n = trajs.first().map_or(0, |t| t.states.nrows());
    let mut out = Mat::zeros(n, trajs.len());
    for (j, t) in trajs.iter().enumerate() {
        out.col_mut(j).copy_from(t.last());
    }
    out
}

fn intermediate_states(trajs: &[Trajectory]) -> Mat<f64> {
    let n = trajs.first().map_or(0, |t| t.states.nrows());
    let per = trajs.first().map_or(0, |t| t.len() - 1);
    let mut out = Mat::zeros(n, trajs.len() * per);
    for (j, t) in trajs.iter().enumerate() {
        out.subcols_mut(j * per, per).copy_from(t.intermediate());
    }
    out
}

/// Settings of the prediction step.
#[derive(Debug, Clone)]
pub struct PredictConfig {
    pub kind: UpdateKind,
    pub retraining: Retraining,
    /// Relative tolerance per level, `l = 0..L`.
    pub eps_r: Vec<f64>,
    /// Fractions of the absolute tolerance spent on inflation and deflation.
    pub inflate_ratio: f64,
    pub deflate_ratio: f64,
    pub t_window: f64,
}

/// Diagnostics of one prediction step.
#[derive(Debug, Clone, Default)]
pub struct PredictReport {
    /// Absolute tolerance per level.
    pub tolerances: Vec<f64>,
    /// Dimension of each inflated space used by the surrogates.
    pub inflated_dims: Vec<usize>,
    /// Dimension of each deflated space after the step.
    pub deflated_dims: Vec<usize>,
    pub wall_seconds: f64,
}

/// `span{a, b}`, with the coarser space `a` first.
fn union_spaces(model: &QgeModel, a: &Space, b: &Space) -> Space {
    match (a, b) {
        (Space::Full, _) | (_, Space::Full) => Space::Full,
        (Space::Reduced(ra), Space::Reduced(rb)) => {
            let n = model.n_dofs();
            let (da, db) = (ra.dim(), rb.dim());
            let mut basis = Mat::zeros(n, da + db);
            basis.subcols_mut(0, da).copy_from(&ra.basis);
            basis.subcols_mut(da, db).copy_from(&rb.basis);
            m_orthonormalize(&model.ops().mass, &mut basis, da);
            if basis.ncols() == da {
                return a.clone();
            }
            Space::Reduced(std::sync::Arc::new(ReducedSpace::new(model, basis)))
        }
    }
}

/// Forecast of a block of full-coordinate states with the surrogate on
/// `space`. Returns end states in full coordinates and the trajectory
/// coordinates in `space` (intermediate states only, member-major).
fn surrogate_forecast(
    model: &QgeModel,
    space: &Space,
    rom: Option<&crate::rom::ReducedOperators>,
    states: MatRef<'_, f64>,
    t_window: f64,
) -> Result<(Mat<f64>, Mat<f64>)> {
    let mass = &model.ops().mass;
    match space {
        Space::Full => {
            let trajs = model.flow_ensemble(states, t_window)?;
            Ok((last_states(&trajs), intermediate_states(&trajs)))
        }
        Space::Reduced(r) => {
            let steps = model.params().n_steps(t_window)?;
            match rom {
                None => {
                    log::warn!("empty reduced space: surrogate forecasts are zero");
                    Ok((Mat::zeros(states.nrows(), states.ncols()), Mat::zeros(0, states.ncols() * steps)))
                }
                Some(rom) => {
                    let c0 = r.basis.transpose() * crate::linalg::spmm(mass, states);
                    let trajs = rom.flow_ensemble(c0.as_ref(), t_window)?;
                    let ends = last_states(&trajs);
                    Ok((&r.basis * &ends, intermediate_states(&trajs)))
                }
            }
        }
    }
}

/// Prediction step over the whole hierarchy.
///
/// The high-fidelity principal ensemble is advanced with the full model and
/// its intermediate states inflate each deflated space into the surrogate
/// space `V^l`. Control ensembles start from the projected principal states
/// of their level, lower principal ensembles from their own projections.
/// The surrogate trajectories are then compressed into the next deflated
/// spaces. With `L = 1` this is the two-level prediction.
pub fn telescopic_predict(model: &QgeModel, es: &EnsembleSet, cfg: &PredictConfig) -> Result<(EnsembleSet, PredictReport)> {
    es.validate()?;
    let t0 = Instant::now();
    let l = es.levels();
    if cfg.eps_r.len() != l {
        return Err(Error::DimensionMismatch { expected: l, found: cfg.eps_r.len() });
    }
    let ops = model.ops();
    let mass = &ops.mass;
    let n = model.n_dofs();

    let hf = model.flow_ensemble(es.principal_hf().as_ref(), cfg.t_window)?;
    let hf_end = last_states(&hf);
    let hf_snap = intermediate_states(&hf);

    let frozen = cfg.retraining == Retraining::Frozen;
    let tolerances = if frozen {
        vec![0.0; l]
    } else {
        let levels: Vec<LevelSpread<'_>> = (0..=l)
            .map(|s| LevelSpread { principal: es.principal[s].as_ref(), control: (s > 0).then(|| es.control[s].as_ref()) })
            .collect();
        cfg.eps_r
            .iter()
            .map(|&e| match cfg.kind {
                UpdateKind::Ml => telescopic_tolerance_ml(mass, &levels, e),
                UpdateKind::Mf => telescopic_tolerance_mf(mass, &levels, e),
            })
            .collect::<Result<Vec<f64>>>()?
    };

    let mut spaces: Vec<Space> = Vec::with_capacity(l);
    for s in 0..l {
        let v = match cfg.retraining {
            Retraining::Frozen => es.inflated[s].clone(),
            Retraining::InflationDeflation => inflate(model, &es.deflated[s], hf_snap.as_ref(), cfg.inflate_ratio * tolerances[s])?,
            Retraining::Memoryless => inflate(model, &Space::empty(n), hf_snap.as_ref(), cfg.inflate_ratio * tolerances[s])?,
        };
        let v = if s > 0 && !frozen { union_spaces(model, &spaces[s - 1], &v) } else { v };
        spaces.push(v);
    }

    let roms: Vec<Option<crate::rom::ReducedOperators>> = spaces
        .iter()
        .map(|sp| match sp {
            Space::Reduced(r) if r.dim() > 0 => build_reduced_operators(model, r).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let mut next = es.clone();
    next.k = es.k + 1;
    next.principal[l] = hf_end;
    // Surrogate trajectories, in coordinates of their own space, per level.
    let mut lf_principal: Vec<Mat<f64>> = vec![Mat::zeros(0, 0); l];
    let mut lf_control_top = Mat::zeros(0, 0);
    for s in 0..l {
        // Members advanced by the surrogate on V^s: P^s and C^(s+1).
        let p_in = es.principal[s].as_ref();
        let c_src = es.principal[s + 1].as_ref();
        let reuse_hf = s + 1 == l && spaces[s].is_full();
        let batch = if reuse_hf {
            p_in.to_owned()
        } else {
            let mut b = Mat::zeros(n, p_in.ncols() + c_src.ncols());
            b.subcols_mut(0, p_in.ncols()).copy_from(p_in);
            b.subcols_mut(p_in.ncols(), c_src.ncols()).copy_from(c_src);
            b
        };
        let (ends, snaps) = surrogate_forecast(model, &spaces[s], roms[s].as_ref(), batch.as_ref(), cfg.t_window)?;
        let per = snaps.ncols() / batch.ncols().max(1);
        let np = p_in.ncols();
        next.principal[s] = ends.subcols(0, np).to_owned();
        lf_principal[s] = snaps.subcols(0, np * per).to_owned();
        let (c_end, c_snap) = if reuse_hf {
            (next.principal[l].clone(), hf_snap.clone())
        } else {
            (ends.subcols(np, c_src.ncols()).to_owned(), snaps.subcols(np * per, c_src.ncols() * per).to_owned())
        };
        next.control[s + 1] = c_end;
        if s + 1 == l {
            lf_control_top = c_snap;
        } else {
            // Lower-level controls do not enter the deflation set.
            let _ = c_snap;
        }
    }
    next.inflated = spaces.clone();

    let mut deflated: Vec<Space> = Vec::with_capacity(l);
    match cfg.retraining {
        Retraining::Frozen => deflated = es.deflated.clone(),
        Retraining::Memoryless => deflated = vec![Space::empty(n); l],
        Retraining::InflationDeflation => {
            let top = &spaces[l - 1];
            // Low-fidelity set in coordinates of V^(L-1).
            let mut parts: Vec<Mat<f64>> = Vec::new();
            for s in 0..l {
                parts.push(change_coordinates(mass, &spaces[s], top, lf_principal[s].as_ref()));
            }
            parts.push(lf_control_top);
            let rows = top.dim(n);
            let total: usize = parts.iter().map(|p| p.ncols()).sum();
            let mut lf = Mat::zeros(rows, total);
            let mut off = 0;
            for p in &parts {
                if p.nrows() == rows {
                    lf.subcols_mut(off, p.ncols()).copy_from(p);
                }
                off += p.ncols();
            }
            for s in 0..l {
                let w = if top.is_full() && cfg.eps_r[s] == 0.0 {
                    Space::Full
                } else {
                    deflate(model, top, lf.as_ref(), cfg.deflate_ratio * tolerances[s])?
                };
                let w = if s > 0 { union_spaces(model, &deflated[s - 1], &w) } else { w };
                deflated.push(w);
            }
        }
    }
    next.deflated = deflated;

    let report = PredictReport {
        tolerances,
        inflated_dims: next.inflated.iter().map(|v| v.dim(n)).collect(),
        deflated_dims: next.deflated.iter().map(|v| v.dim(n)).collect(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((next, report))
}

/// Coordinates in `to` of states given by coordinates in `from`.
fn change_coordinates(mass: &SparseMat, from: &Space, to: &Space, c: MatRef<'_, f64>) -> Mat<f64> {
    match (from, to) {
        (Space::Full, Space::Full) => c.to_owned(),
        (Space::Reduced(a), Space::Reduced(b)) if std::sync::Arc::ptr_eq(a, b) => c.to_owned(),
        _ => to.project(mass, from.lift(c).as_ref()),
    }
}

/// Two-level prediction; the `L = 1` case of [`telescopic_predict`].
pub fn predict(model: &QgeModel, es: &EnsembleSet, cfg: &PredictConfig) -> Result<(EnsembleSet, PredictReport)> {
    if es.levels() != 1 {
        return Err(Error::Config(format!("two-level prediction on {} levels", es.levels())));
    }
    telescopic_predict(model, es, cfg)
}
