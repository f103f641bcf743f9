#![allow(dead_code)]

use std::sync::Arc;

use arbenkf::fem::{assemble_operators, assemble_operators_with_forcing, Mesh};
use arbenkf::priors::{build_laplacian_eigenbasis, sample_smooth_prior};
use arbenkf::rng::{normal_columns, StreamFamily};
use arbenkf::{QgeModel, QgeParams};
use faer::{Col, Mat};

pub fn model(n: usize) -> QgeModel {
    QgeModel::new(Arc::new(assemble_operators(&Mesh::structured(n, n))), QgeParams::default()).unwrap()
}

pub fn model_with(n: usize, params: QgeParams) -> QgeModel {
    QgeModel::new(Arc::new(assemble_operators(&Mesh::structured(n, n))), params).unwrap()
}

pub fn unforced_model(n: usize) -> QgeModel {
    QgeModel::new(Arc::new(assemble_operators_with_forcing(&Mesh::structured(n, n), |_, _| 0.0)), QgeParams::default()).unwrap()
}

/// Standard normal matrix from a labelled stream.
pub fn gaussian(seed: u64, label: &str, rows: usize, cols: usize) -> Mat<f64> {
    normal_columns(&StreamFamily::new(seed, 0, label), rows, cols)
}

/// Stationary state plus a smooth perturbation of size `scale`, one per column.
pub fn smooth_states(model: &QgeModel, seed: u64, count: usize, scale: f64) -> Mat<f64> {
    let (w0, _) = model.solve_stationary().unwrap();
    let basis = build_laplacian_eigenbasis(model.ops(), model.n_dofs().min(60)).unwrap();
    let d = sample_smooth_prior(&basis, &StreamFamily::new(seed, 0, "test-states"), count);
    Mat::from_fn(model.n_dofs(), count, |i, j| w0[i] + scale * d[(i, j)])
}

pub fn max_abs_col(c: &Col<f64>) -> f64 {
    c.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn max_diff(a: faer::MatRef<'_, f64>, b: faer::MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

pub fn bitwise_eq(a: faer::MatRef<'_, f64>, b: faer::MatRef<'_, f64>) -> bool {
    a.nrows() == b.nrows()
        && a.ncols() == b.ncols()
        && (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| a[(i, j)].to_bits() == b[(i, j)].to_bits()))
}
