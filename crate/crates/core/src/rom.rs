//! Galerkin reduced model of the QGE on a reduced space.
//!
//! In coordinates `c` of a V-orthonormal basis `Phi` with streamfunction
//! basis `Z`, the projected system is
//!
//! ```text
//! c' - Dr c + nu Kr c + Ro T(c, c) = fr
//! ```
//!
//! with `Kr = Phi^T K Phi`, `Dr = Phi^T Dx Z`, `fr = Phi^T F` and
//! `T[i][j][l] = phi_i^T J(phi_j, z_l)`. The quadratic term projects exactly,
//! so no hyper-reduction is involved.
//!
//! The tensor is stored twice as `(n*n) x n` matrices so that both partial
//! contractions needed by Newton are plain matrix products over a block of
//! members:
//! `ta[(i + n j, l)] = T[i][j][l]` and `tb[(i + n l, j)] = T[i][j][l]`.

use faer::linalg::solvers::Solve;
use faer::{Col, ColRef, Mat, MatRef};

use crate::error::{Error, Result};
use crate::linalg::spmm;
use crate::pod::ReducedSpace;
use crate::qge::{QgeModel, QgeParams, Trajectory, LANES};

pub struct ReducedOperators {
    pub n: usize,
    pub params: QgeParams,
    pub k_r: Mat<f64>,
    pub d_r: Mat<f64>,
    pub f_r: Col<f64>,
    /// Observation of the basis, `N_obs x n`, when the mesh is aligned.
    pub l_r: Option<Mat<f64>>,
    ta: Mat<f64>,
    tb: Mat<f64>,
    /// `-Dr + nu Kr`.
    lin: Mat<f64>,
}

/// Projects the full model onto `space`. Performs exactly `n^2` calls to the
/// full trilinear form.
pub fn build_reduced_operators(model: &QgeModel, space: &ReducedSpace) -> Result<ReducedOperators> {
    let n = space.dim();
    if n == 0 {
        return Err(Error::DegenerateSpace);
    }
    let ops = model.ops();
    let params = *model.params();
    let phi = space.basis.as_ref();
    let z = space.psi_basis.as_ref();
    let k_r = phi.transpose() * spmm(&ops.stiffness, phi);
    let d_r = phi.transpose() * spmm(&ops.dx, z);
    let f_r = phi.transpose() * &ops.forcing;
    let l_r = ops.obs_dofs.as_ref().map(|dofs| Mat::from_fn(dofs.len(), n, |r, j| phi[(dofs[r], j)]));
    let nu = params.nu();
    let lin = Mat::from_fn(n, n, |i, j| -d_r[(i, j)] + nu * k_r[(i, j)]);
    let mut ta = Mat::zeros(n * n, n);
    let mut tb = Mat::zeros(n * n, n);
    let mut buf = Mat::zeros(model.n_dofs(), n);
    for j in 0..n {
        for l in 0..n {
            let t = ops.apply_trilinear(phi.col(j), z.col(l))?;
            buf.col_mut(l).copy_from(&t);
        }
        // block[(i, l)] = T[i][j][l]
        let block = phi.transpose() * &buf;
        for l in 0..n {
            for i in 0..n {
                ta[(i + n * j, l)] = block[(i, l)];
                tb[(i + n * l, j)] = block[(i, l)];
            }
        }
    }
    Ok(ReducedOperators { n, params, k_r, d_r, f_r, l_r, ta, tb, lin })
}

impl ReducedOperators {
    /// `T[i][j][l]`.
    pub fn tensor(&self, i: usize, j: usize, l: usize) -> f64 {
        self.ta[(i + self.n * j, l)]
    }

    /// `T(a, b)_i = sum_{j,l} T[i][j][l] a_j b_l`.
    pub fn quadratic(&self, a: ColRef<'_, f64>, b: ColRef<'_, f64>) -> Col<f64> {
        let y = &self.ta * b;
        let n = self.n;
        Col::from_fn(n, |i| (0..n).map(|j| y[i + n * j] * a[j]).sum())
    }

    /// Reduced midpoint residual.
    pub fn residual(&self, c_in: ColRef<'_, f64>, c_out: ColRef<'_, f64>) -> Col<f64> {
        let n = self.n;
        let mid = Col::from_fn(n, |i| 0.5 * (c_in[i] + c_out[i]));
        let lin = &self.lin * &mid;
        let adv = if self.params.advection { self.quadratic(mid.as_ref(), mid.as_ref()) } else { Col::zeros(n) };
        Col::from_fn(n, |i| {
            (c_out[i] - c_in[i]) / self.params.dt + lin[i] + self.params.ro * adv[i] - self.f_r[i]
        })
    }

    pub fn step(&self, c_in: ColRef<'_, f64>) -> Result<Col<f64>> {
        let mut x = Mat::zeros(self.n, 1);
        x.col_mut(0).copy_from(c_in);
        self.step_block(&mut x, 0)?;
        Ok(x.col(0).to_owned())
    }

    pub fn flow(&self, c_in: ColRef<'_, f64>, t_window: f64) -> Result<Trajectory> {
        let mut x = Mat::zeros(self.n, 1);
        x.col_mut(0).copy_from(c_in);
        Ok(self.flow_ensemble(x.as_ref(), t_window)?.pop().expect("one member"))
    }

    /// Reduced flow of every column; member results do not depend on the
    /// other members.
    pub fn flow_ensemble(&self, c_in: MatRef<'_, f64>, t_window: f64) -> Result<Vec<Trajectory>> {
        let n = self.n;
        if c_in.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, found: c_in.nrows() });
        }
        let steps = self.params.n_steps(t_window)?;
        let times: Vec<f64> = (0..=steps).map(|s| s as f64 * self.params.dt).collect();
        let mut out: Vec<Trajectory> = (0..c_in.ncols())
            .map(|j| {
                let mut states = Mat::zeros(n, steps + 1);
                states.col_mut(0).copy_from(c_in.col(j));
                Trajectory { times: times.clone(), states }
            })
            .collect();
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
        out.par_chunks_mut(LANES).map(run).collect::<Result<Vec<()>>>()?;
        Ok(out)
    }

    /// Newton with the exact reduced Jacobian on up to [`LANES`] columns.
    fn step_block(&self, x: &mut Mat<f64>, step: usize) -> Result<()> {
        let n = self.n;
        let w = x.ncols();
        debug_assert!(w <= LANES);
        let dt = self.params.dt;
        let ro = self.params.ro;
        let adv = self.params.advection;
        let x_in = x.clone();
        let mut active = vec![true; w];
        let mut residuals = vec![f64::INFINITY; w];
        let mut mid = Mat::<f64>::zeros(n, LANES);
        for iter in 0..=self.params.newton_max_iter {
            for j in 0..LANES {
                for i in 0..n {
                    mid[(i, j)] = if j < w && active[j] { 0.5 * (x_in[(i, j)] + x[(i, j)]) } else { 0.0 };
                }
            }
            let (ya, yb) = if adv { (&self.ta * &mid, &self.tb * &mid) } else { (Mat::zeros(0, 0), Mat::zeros(0, 0)) };
            let mut any = false;
            for j in 0..w {
                if !active[j] {
                    continue;
                }
                let m = mid.col(j);
                let lin = &self.lin * m;
                let mut r = Col::from_fn(n, |i| (x[(i, j)] - x_in[(i, j)]) / dt + lin[i] - self.f_r[i]);
                if adv {
                    for jj in 0..n {
                        let mj = m[jj];
                        for i in 0..n {
                            r[i] += ro * ya[(i + n * jj, j)] * mj;
                        }
                    }
                }
                residuals[j] = r.norm_l2();
                if !residuals[j].is_finite() {
                    return Err(Error::NonConvergence { residual: residuals[j], iterations: iter, step });
                }
                if residuals[j] <= self.params.newton_tol {
                    active[j] = false;
                    continue;
                }
                if iter == self.params.newton_max_iter {
                    any = true;
                    continue;
                }
                let jac = Mat::from_fn(n, n, |i, k| {
                    let mut v = 0.5 * self.lin[(i, k)];
                    if i == k {
                        v += 1.0 / dt;
                    }
                    if adv {
                        v += 0.5 * ro * (ya[(i + n * k, j)] + yb[(i + n * k, j)]);
                    }
                    v
                });
                let delta = jac.partial_piv_lu().solve(&r);
                for i in 0..n {
                    x[(i, j)] -= delta[i];
                }
                any = true;
            }
            if !any {
                return Ok(());
            }
        }
        let worst = residuals.iter().cloned().fold(0.0, f64::max);
        Err(Error::NonConvergence { residual: worst, iterations: self.params.newton_max_iter, step })
    }
}
