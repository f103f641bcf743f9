//! Full-order quasi-geostrophic model: stationary initial condition and the
//! implicit midpoint flow.
//!
//! With `nu = Ro / Re` the semi-discrete system reads
//!
//! ```text
//! M w' - Dx p + nu K w + Ro J(w, p, .) = F,      K p = M w
//! ```
//!
//! The streamfunction is eliminated at every residual evaluation through the
//! Cholesky factor of `K`, so the nonlinear unknown is the vorticity alone.
//!
//! The midpoint equation is solved by a simplified Newton iteration whose
//! iteration matrix is the Jacobian of the linear part,
//! `M/dt + nu K / 2 - Dx K^-1 M / 2`, factorized once per model. Each
//! iteration applies it through a coupled vorticity/streamfunction system so
//! that no dense Schur complement is formed.
//!
//! Linear solves run over fixed-width blocks of [`LANES`] right-hand sides.
//! A column's result depends only on its own data, never on its neighbours or
//! on its position in the block, so ensemble and single-state flows agree
//! bitwise.

use std::sync::Arc;

use faer::{Col, ColRef, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FemOperators, StateVector};
use crate::linalg::{sparse_from_entries, spmv, LuSolver, SparseMat, SpdSolver};

/// Width of every sparse solve block.
pub const LANES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QgeParams {
    pub ro: f64,
    pub re: f64,
    pub dt: f64,
    /// Absolute tolerance on the 2-norm of the midpoint residual.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Whether the advection term `Ro J` is present.
    #[serde(default = "yes")]
    pub advection: bool,
}

fn yes() -> bool {
    true
}

impl Default for QgeParams {
    fn default() -> Self {
        Self { ro: 1e-3, re: 100.0, dt: 0.1, newton_tol: 1e-10, newton_max_iter: 25, advection: true }
    }
}

impl QgeParams {
    pub fn nu(&self) -> f64 {
        self.ro / self.re
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.ro) && ok(self.re) && ok(self.dt) && ok(self.newton_tol)) || self.newton_max_iter == 0 {
            return Err(Error::Config(format!("invalid QGE parameters {self:?}")));
        }
        Ok(())
    }

    /// Number of sub-steps covering `t_window`, which must be a positive
    /// multiple of `dt` up to rounding.
    pub fn n_steps(&self, t_window: f64) -> Result<usize> {
        let r = t_window / self.dt;
        let n = r.round();
        if !(n >= 1.0) || (r - n).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::Config(format!("window {t_window} is not a positive multiple of dt = {}", self.dt)));
        }
        Ok(n as usize)
    }
}

/// Vorticity states at uniformly spaced times; column `i` of `states` is the
/// state at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Mat<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> ColRef<'_, f64> {
        self.states.col(i)
    }

    pub fn last(&self) -> ColRef<'_, f64> {
        self.states.col(self.states.ncols() - 1)
    }

    /// All states after the initial one.
    pub fn intermediate(&self) -> MatRef<'_, f64> {
        self.states.subcols(1, self.states.ncols() - 1)
    }
}

/// Solver for the full-order model on one mesh. Immutable and shareable.
pub struct QgeModel {
    ops: Arc<FemOperators>,
    params: QgeParams,
    /// Signed step; negative for the time-reversed integrator.
    dt: f64,
    k_solver: SpdSolver,
    /// `[[M/dt + nu K/2, -Dx/2], [-M, K]]` on `(delta, phi)`.
    chord: LuSolver,
}

impl QgeModel {
    pub fn new(ops: Arc<FemOperators>, params: QgeParams) -> Result<Self> {
        params.validate()?;
        Self::with_signed_dt(ops, params, params.dt)
    }

    /// The same model integrated backwards in time with step `-dt`.
    pub fn reversed(&self) -> Result<Self> {
        Self::with_signed_dt(self.ops.clone(), self.params, -self.dt)
    }

    fn with_signed_dt(ops: Arc<FemOperators>, params: QgeParams, dt: f64) -> Result<Self> {
        let k_solver = SpdSolver::new(&ops.stiffness)?;
        let chord = LuSolver::new(&chord_matrix(&ops, params.nu(), dt))?;
        Ok(Self { ops, params, dt, k_solver, chord })
    }

    pub fn ops(&self) -> &Arc<FemOperators> {
        &self.ops
    }

    pub fn params(&self) -> &QgeParams {
        &self.params
    }

    pub fn n_dofs(&self) -> usize {
        self.ops.n_dofs()
    }

    /// Streamfunction of `omega`: the solution of `K psi = M omega`.
    pub fn streamfunction(&self, omega: ColRef<'_, f64>) -> StateVector {
        self.k_solver.solve(spmv(&self.ops.mass, omega).as_ref())
    }

    /// Streamfunctions of the columns of `omegas`.
    pub fn streamfunction_mat(&self, omegas: MatRef<'_, f64>) -> Mat<f64> {
        self.k_solver.solve_mat(crate::linalg::spmm(&self.ops.mass, omegas).as_ref())
    }

    /// Solves `-Dx psi + nu K omega = F`, `K psi = M omega`.
    pub fn solve_stationary(&self) -> Result<(StateVector, StateVector)> {
        let ops = &*self.ops;
        let n = ops.n_dofs();
        let nu = self.params.nu();
        let mut entries = Vec::new();
        push_scaled(&mut entries, &ops.stiffness, 0, 0, nu);
        push_scaled(&mut entries, &ops.dx, 0, n, -1.0);
        push_scaled(&mut entries, &ops.mass, n, 0, -1.0);
        push_scaled(&mut entries, &ops.stiffness, n, n, 1.0);
        let a = sparse_from_entries(2 * n, 2 * n, &entries);
        let lu = LuSolver::new(&a)?;
        let mut rhs = Col::<f64>::zeros(2 * n);
        rhs.subrows_mut(0, n).copy_from(&ops.forcing);
        let mut x = rhs.clone();
        lu.solve_in_place(&mut x);
        let res = (&rhs - spmv(&a, x.as_ref())).norm_l2();
        let scale = rhs.norm_l2();
        if !(res <= 1e-10 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::Factorization(format!("stationary residual {res:e} relative to {scale:e}")));
        }
        let omega = x.subrows(0, n).to_owned();
        // Recover psi from omega so that K psi = M omega holds to solver accuracy.
        let psi = self.streamfunction(omega.as_ref());
        Ok((omega, psi))
    }

    /// Midpoint residual
    /// `M (w1 - w0)/dt - Dx p + nu K w + Ro J(w, p) - F` at `w = (w0 + w1)/2`.
    pub fn residual(&self, omega_in: ColRef<'_, f64>, omega_out: ColRef<'_, f64>) -> StateVector {
        let mid = Col::from_fn(omega_in.nrows(), |i| 0.5 * (omega_in[i] + omega_out[i]));
        let psi = self.streamfunction(mid.as_ref());
        let mut r = Col::zeros(omega_in.nrows());
        self.residual_into(omega_in, omega_out, mid.as_ref(), psi.as_ref(), &mut r);
        r
    }

    fn residual_into(
        &self,
        omega_in: ColRef<'_, f64>,
        omega_out: ColRef<'_, f64>,
        mid: ColRef<'_, f64>,
        psi: ColRef<'_, f64>,
        r: &mut Col<f64>,
    ) {
        let ops = &*self.ops;
        let n = ops.n_dofs();
        let diff = Col::from_fn(n, |i| (omega_out[i] - omega_in[i]) / self.dt);
        let m_diff = spmv(&ops.mass, diff.as_ref());
        let dx_psi = spmv(&ops.dx, psi);
        let k_mid = spmv(&ops.stiffness, mid);
        let nu = self.params.nu();
        for i in 0..n {
            r[i] = m_diff[i] - dx_psi[i] + nu * k_mid[i] - ops.forcing[i];
        }
        if self.params.advection {
            let mut j = Col::zeros(n);
            ops.trilinear_into(mid, psi, &mut j);
            for i in 0..n {
                r[i] += self.params.ro * j[i];
            }
        }
    }

    /// One implicit midpoint step.
    pub fn step(&self, omega_in: ColRef<'_, f64>) -> Result<StateVector> {
        self.check_len(omega_in)?;
        let mut x = Mat::zeros(self.n_dofs(), 1);
        x.col_mut(0).copy_from(omega_in);
        self.step_block(&mut x, 0)?;
        Ok(x.col(0).to_owned())
    }

    /// Trajectory over `t_window` starting at time 0.
    pub fn flow(&self, omega_in: ColRef<'_, f64>, t_window: f64) -> Result<Trajectory> {
        self.check_len(omega_in)?;
        let mut x = Mat::zeros(self.n_dofs(), 1);
        x.col_mut(0).copy_from(omega_in);
        Ok(self.flow_ensemble(x.as_ref(), t_window)?.pop().expect("one member"))
    }

    /// Flows every column of `omegas`; member `j` of the result equals
    /// `flow(omegas.col(j), t_window)` bitwise.
    pub fn flow_ensemble(&self, omegas: MatRef<'_, f64>, t_window: f64) -> Result<Vec<Trajectory>> {
        let n = self.n_dofs();
        if omegas.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, found: omegas.nrows() });
        }
        let steps = self.params.n_steps(t_window)?;
        let times: Vec<f64> = (0..=steps).map(|s| s as f64 * self.dt).collect();
        let mut out: Vec<Trajectory> = (0..omegas.ncols())
            .map(|j| {
                let mut states = Mat::zeros(n, steps + 1);
                states.col_mut(0).copy_from(omegas.col(j));
                Trajectory { times: times.clone(), states }
            })
            .collect();
        let chunks: Vec<&mut [Trajectory]> = out.chunks_mut(LANES).collect();
        let run = |chunk: &mut [Trajectory]| -> Result<()> {
            let mut x = Mat::zeros(n, chunk.len());
            for (j, t) in chunk.iter().enumerate() {
                x.col_mut(j).copy_from(t.states.col(0));
            }
            for s in 0..steps {
                self.step_block(&mut x, s)?;
                for (j, t) in chunk.iter_mut().enumerate() {
                    t.states.col_mut(s + 1).copy_from(x.col(j));
                }
            }
            Ok(())
        };
        use rayon::prelude::*;
        chunks.into_par_iter().map(run).collect::<Result<Vec<()>>>()?;
        Ok(out)
    }

    fn check_len(&self, x: ColRef<'_, f64>) -> Result<()> {
        if x.nrows() != self.n_dofs() {
            return Err(Error::DimensionMismatch { expected: self.n_dofs(), found: x.nrows() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite state".into()));
        }
        Ok(())
    }

    /// Advances up to [`LANES`] columns of `x` by one step in place.
    fn step_block(&self, x: &mut Mat<f64>, step: usize) -> Result<()> {
        let n = self.n_dofs();
        let w = x.ncols();
        debug_assert!(w <= LANES);
        let x_in = x.to_owned();
        let mut active = vec![true; w];
        let mut residuals = vec![f64::INFINITY; w];
        let mut mid = Mat::<f64>::zeros(n, LANES);
        let mut psi = Mat::<f64>::zeros(n, LANES);
        let mut rhs = Mat::<f64>::zeros(2 * n, LANES);
        let mut r = Col::<f64>::zeros(n);
        for iter in 0..=self.params.newton_max_iter {
            // psi at the current midpoints
            for j in 0..w {
                if active[j] {
                    for i in 0..n {
                        mid[(i, j)] = 0.5 * (x_in[(i, j)] + x[(i, j)]);
                    }
                    let m = spmv(&self.ops.mass, mid.col(j));
                    psi.col_mut(j).copy_from(&m);
                } else {
                    psi.col_mut(j).fill(0.0);
                }
            }
            self.k_solver.solve_block(&mut psi);
            rhs.fill(0.0);
            for j in 0..w {
                if !active[j] {
                    continue;
                }
                self.residual_into(x_in.col(j), x.col(j), mid.col(j), psi.col(j), &mut r);
                residuals[j] = r.norm_l2();
                if !residuals[j].is_finite() {
                    return Err(Error::NonConvergence { residual: residuals[j], iterations: iter, step });
                }
                if residuals[j] <= self.params.newton_tol {
                    active[j] = false;
                } else {
                    for i in 0..n {
                        rhs[(i, j)] = -r[i];
                    }
                }
            }
            if !active.iter().any(|&a| a) {
                return Ok(());
            }
            if iter == self.params.newton_max_iter {
                break;
            }
            self.chord.solve_block(&mut rhs);
            for j in 0..w {
                if active[j] {
                    for i in 0..n {
                        x[(i, j)] += rhs[(i, j)];
                    }
                }
            }
        }
        let worst = residuals.iter().cloned().fold(0.0, f64::max);
        Err(Error::NonConvergence { residual: worst, iterations: self.params.newton_max_iter, step })
    }
}

fn push_scaled(out: &mut Vec<(usize, usize, f64)>, a: &SparseMat, r0: usize, c0: usize, s: f64) {
    for (c, col) in (0..a.ncols()).map(|c| (c, a.val_of_col(c))) {
        for (k, r) in a.row_idx_of_col(c).enumerate() {
            out.push((r0 + r, c0 + c, s * col[k]));
        }
    }
}

fn chord_matrix(ops: &FemOperators, nu: f64, dt: f64) -> SparseMat {
    let n = ops.n_dofs();
    let mut e = Vec::new();
    push_scaled(&mut e, &ops.mass, 0, 0, 1.0 / dt);
    push_scaled(&mut e, &ops.stiffness, 0, 0, 0.5 * nu);
    push_scaled(&mut e, &ops.dx, 0, n, -0.5);
    push_scaled(&mut e, &ops.mass, n, 0, -1.0);
    push_scaled(&mut e, &ops.stiffness, n, n, 1.0);
    sparse_from_entries(2 * n, 2 * n, &e)
}
