//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use arbenkf::pod::{pod, ReducedSpace, Space};
use arbenkf::priors::{build_laplacian_eigenbasis, sample_smooth_prior};
use arbenkf::rng::StreamFamily;
use arbenkf::{assemble_operators, build_mesh, QgeModel, QgeParams};
use faer::Mat;

pub struct Fixture {
    pub model: QgeModel,
    /// Stationary state plus smooth perturbations, one per column.
    pub states: Mat<f64>,
}

/// Model on an aligned `mesh x mesh` grid with `members` perturbed states.
pub fn fixture(mesh: usize, members: usize) -> Fixture {
    let ops = Arc::new(assemble_operators(&build_mesh(mesh, mesh).expect("aligned mesh")));
    let model = QgeModel::new(ops, QgeParams::default()).expect("default parameters");
    let (w0, _) = model.solve_stationary().expect("stationary state");
    let basis = build_laplacian_eigenbasis(model.ops(), model.n_dofs().min(60)).expect("eigenbasis");
    let d = sample_smooth_prior(&basis, &StreamFamily::new(1, 0, "bench"), members);
    let states = Mat::from_fn(model.n_dofs(), members, |i, j| w0[i] + 20.0 * d[(i, j)]);
    Fixture { model, states }
}

impl Fixture {
    /// POD space of one short trajectory per member.
    pub fn reduced_space(&self, rel_tol: f64) -> Space {
        let trajs = self.model.flow_ensemble(self.states.as_ref(), 1.0).expect("flow");
        let cols: Vec<_> = trajs.iter().flat_map(|t| (0..t.len()).map(move |i| t.state(i))).collect();
        let snaps = Mat::from_fn(self.model.n_dofs(), cols.len(), |i, j| cols[j][i]);
        let energy = (0..snaps.ncols()).map(|j| self.model.ops().v_norm(snaps.col(j)).powi(2)).sum::<f64>() / snaps.ncols() as f64;
        let r = pod(&self.model.ops().mass, snaps.as_ref(), rel_tol * energy).expect("pod");
        Space::Reduced(Arc::new(ReducedSpace::new(&self.model, r.basis)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_consistent() {
        let f = fixture(21, 3);
        assert_eq!(f.states.ncols(), 3);
        assert_eq!(f.states.nrows(), f.model.n_dofs());
        let n = f.model.n_dofs();
        let d = f.reduced_space(1e-4).dim(n);
        assert!(d > 0 && d < n);
    }
}
