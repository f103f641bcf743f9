mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use arbenkf::linalg::{spmm, spmv, sym_eigen_desc};
use arbenkf::pod::*;
use arbenkf::priors::build_laplacian_eigenbasis;
use arbenkf::rom::build_reduced_operators;
use arbenkf::Error;
use common::*;
use faer::{Col, Mat, MatRef, Side};

fn v_norm2(mass: &arbenkf::linalg::SparseMat, x: faer::ColRef<'_, f64>) -> f64 {
    x.transpose() * spmv(mass, x)
}

/// Mean squared V-distance of the snapshots to their projection on `basis`.
fn projection_mse(mass: &arbenkf::linalg::SparseMat, basis: MatRef<'_, f64>, s: MatRef<'_, f64>) -> f64 {
    let c = basis.transpose() * spmm(mass, s);
    let r = s - basis * &c;
    (0..s.ncols()).map(|j| v_norm2(mass, r.col(j))).sum::<f64>() / s.ncols() as f64
}

/// `Phi Phi^T M` as a dense matrix.
fn projector(mass: &arbenkf::linalg::SparseMat, basis: MatRef<'_, f64>) -> Mat<f64> {
    basis * spmm(mass, basis).transpose()
}

#[test]
fn rank_one_snapshot_set() {
    let m = model(6);
    let mass = &m.ops().mass;
    let s = gaussian(1, "rank-one", m.n_dofs(), 1);
    let r = pod(mass, s.as_ref(), 0.0).unwrap();
    assert_eq!(r.dim(), 1);
    let norm = v_norm2(mass, s.col(0)).sqrt();
    let sign = if r.basis[(0, 0)] * s[(0, 0)] > 0.0 { 1.0 } else { -1.0 };
    for i in 0..m.n_dofs() {
        assert!((r.basis[(i, 0)] - sign * s[(i, 0)] / norm).abs() < 1e-12);
    }
    assert!(r.basis.col(0).iter().sum::<f64>() >= 0.0);
}

#[test]
fn tolerance_above_total_energy_keeps_nothing() {
    let m = model(6);
    let mass = &m.ops().mass;
    let s = gaussian(2, "energy", m.n_dofs(), 4);
    let energy = (0..4).map(|j| v_norm2(mass, s.col(j))).sum::<f64>() / 4.0;
    assert_eq!(pod(mass, s.as_ref(), energy).unwrap().dim(), 0);
    assert!(pod(mass, s.as_ref(), 0.999 * energy).unwrap().dim() >= 1);
    assert_eq!(pod(mass, Mat::<f64>::zeros(m.n_dofs(), 3).as_ref(), 0.0).unwrap().dim(), 0);
}

#[test]
fn matches_dense_correlation_operator() {
    // R = (1/s) sum_p s_p (s_p, .)_V; with M = C C^T its eigenvalues are
    // those of C^T S S^T C / s.
    let m = model(6);
    let mass = &m.ops().mass;
    let s = gaussian(3, "oracle", m.n_dofs(), 5);
    let r = pod(mass, s.as_ref(), 0.0).unwrap();
    let c = mass.to_dense().llt(Side::Lower).unwrap().L().to_owned();
    let a = c.transpose() * &s;
    let sym = (&a * a.transpose()) * faer::Scale(1.0 / 5.0);
    let eig = sym_eigen_desc(sym.as_ref()).unwrap();
    assert_eq!(r.dim(), 5);
    for i in 0..5 {
        assert!((r.eigenvalues[i] - eig.values[i]).abs() <= 1e-10 * eig.values[0]);
    }
    // The retained modes are R-eigenvectors: R phi = gamma phi.
    for j in 0..5 {
        let phi = r.basis.col(j);
        let coeff = s.transpose() * spmv(mass, phi);
        let rphi = (&s * &coeff) * faer::Scale(1.0 / 5.0);
        for i in 0..m.n_dofs() {
            assert!((rphi[i] - r.eigenvalues[j] * phi[i]).abs() <= 1e-10 * eig.values[0]);
        }
    }
}

#[test]
fn projection_error_equals_discarded_energy() {
    let m = model(9);
    let mass = &m.ops().mass;
    let s = gaussian(4, "optimality", m.n_dofs(), 12);
    let full = pod(mass, s.as_ref(), 0.0).unwrap();
    for n in 0..=full.dim() {
        let tail: f64 = full.eigenvalues[n..].iter().sum();
        let err = projection_mse(mass, full.basis.subcols(0, n), s.as_ref());
        assert!((err - tail).abs() <= 1e-10 * tail.max(1e-300) + 1e-12 * full.eigenvalues[0], "n = {n}");
    }
    let tol = 0.3 * full.eigenvalues.iter().sum::<f64>();
    let r = pod(mass, s.as_ref(), tol).unwrap();
    assert!(r.discarded_energy <= tol);
    let shorter: f64 = full.eigenvalues[r.dim() - 1..].iter().sum();
    assert!(shorter > tol, "size is the smallest admissible");
}

#[test]
fn projection_is_orthogonal() {
    let m = model(9);
    let mass = &m.ops().mass;
    let basis = pod(mass, gaussian(5, "basis", m.n_dofs(), 6).as_ref(), 0.0).unwrap().basis;
    let space = Space::Reduced(Arc::new(ReducedSpace::new(&m, basis.clone())));
    let x = gaussian(6, "x", m.n_dofs(), 3);
    let px = space.project_full(mass, x.as_ref());
    let ppx = space.project_full(mass, px.as_ref());
    assert!(max_diff(px.as_ref(), ppx.as_ref()) < 1e-10 * max_diff(px.as_ref(), Mat::zeros(px.nrows(), 3).as_ref()));
    for j in 0..3 {
        let r = &x.col(j) - &px.col(j);
        let total = v_norm2(mass, x.col(j));
        let split = v_norm2(mass, px.col(j)) + v_norm2(mass, r.as_ref());
        assert!((total - split).abs() <= 1e-10 * total);
        let c = space.project(mass, r.as_mat());
        assert!(c.col(0).norm_l2() <= 1e-10 * total.sqrt());
    }
    let g = basis.transpose() * spmm(mass, basis.as_ref());
    assert!(max_diff(g.as_ref(), Mat::<f64>::identity(6, 6).as_ref()) < 1e-10);
    let psi_res = spmm(&m.ops().stiffness, match &space {
        Space::Reduced(r) => r.psi_basis.as_ref(),
        Space::Full => unreachable!(),
    }) - spmm(mass, basis.as_ref());
    assert!(psi_res.norm_l2() <= 1e-10 * spmm(mass, basis.as_ref()).norm_l2());
}

#[test]
fn inflation_properties() {
    let m = model(9);
    let mass = &m.ops().mass;
    let n = m.n_dofs();
    let empty = Space::empty(n);
    let one = gaussian(7, "one", n, 1);
    let v1 = inflate(&m, &empty, one.as_ref(), 0.0).unwrap();
    assert_eq!(v1.dim(n), 1);
    // Snapshots inside the span leave the space unchanged.
    let inside = Mat::from_fn(n, 2, |i, j| (j as f64 + 1.0) * one[(i, 0)]);
    assert_eq!(inflate(&m, &v1, inside.as_ref(), 0.0).unwrap().dim(n), 1);

    let w = pod(mass, gaussian(8, "w", n, 4).as_ref(), 0.0).unwrap().basis;
    let w = Space::Reduced(Arc::new(ReducedSpace::new(&m, w)));
    let snaps = gaussian(9, "snaps", n, 10);
    let total = (0..10).map(|j| v_norm2(mass, snaps.col(j))).sum::<f64>() / 10.0;
    let eps = 0.2 * total;
    let v = inflate(&m, &w, snaps.as_ref(), eps).unwrap();
    assert!(v.dim(n) >= w.dim(n));
    let Space::Reduced(vb) = &v else { panic!() };
    assert!(projection_mse(mass, vb.basis.as_ref(), snaps.as_ref()) <= eps + 1e-10 * total);
    // span(W) is contained in span(V).
    let Space::Reduced(wb) = &w else { panic!() };
    let back = v.project_full(mass, wb.basis.as_ref());
    assert!(max_diff(back.as_ref(), wb.basis.as_ref()) < 1e-10);
    assert!(inflate(&m, &Space::Full, snaps.as_ref(), eps).unwrap().is_full());
}

#[test]
fn deflation_properties() {
    let m = model(9);
    let mass = &m.ops().mass;
    let n = m.n_dofs();
    let v = pod(mass, gaussian(10, "v", n, 6).as_ref(), 0.0).unwrap().basis;
    let space = Space::Reduced(Arc::new(ReducedSpace::new(&m, v.clone())));
    let coords = gaussian(11, "coords", 6, 20);
    let w = deflate(&m, &space, coords.as_ref(), 0.0).unwrap();
    assert_eq!(w.dim(n), 6);
    let Space::Reduced(wb) = &w else { panic!() };
    assert!(max_diff(projector(mass, wb.basis.as_ref()).as_ref(), projector(mass, v.as_ref()).as_ref()) < 1e-10);
    assert_eq!(deflate(&m, &space, Mat::zeros(6, 5).as_ref(), 0.0).unwrap().dim(n), 0);

    // Reduced-coordinate deflation equals POD of the lifted snapshots.
    let low = Mat::from_fn(6, 20, |i, j| coords[(i, j)] * 0.5f64.powi(i as i32));
    let lifted = &v * &low;
    let energy = (0..20).map(|j| v_norm2(mass, lifted.col(j))).sum::<f64>() / 20.0;
    let eps = 0.05 * energy;
    let a = deflate(&m, &space, low.as_ref(), eps).unwrap();
    let b = pod(mass, lifted.as_ref(), eps).unwrap();
    let Space::Reduced(ab) = &a else { panic!() };
    assert_eq!(ab.dim(), b.dim());
    assert!(ab.dim() < 6);
    assert!(max_diff(projector(mass, ab.basis.as_ref()).as_ref(), projector(mass, b.basis.as_ref()).as_ref()) < 1e-10);
}

fn brute_spread(mass: &arbenkf::linalg::SparseMat, x: MatRef<'_, f64>, y: MatRef<'_, f64>) -> f64 {
    // sum_n (x_n - mean x, y_n - mean y)_V with explicit loops
    let (d, nn) = (x.nrows(), x.ncols());
    let mut mx = vec![0.0; d];
    let mut my = vec![0.0; d];
    for j in 0..nn {
        for i in 0..d {
            mx[i] += x[(i, j)] / nn as f64;
            my[i] += y[(i, j)] / nn as f64;
        }
    }
    let dense = mass.to_dense();
    let mut t = 0.0;
    for j in 0..nn {
        for a in 0..d {
            for b in 0..d {
                t += (x[(a, j)] - mx[a]) * dense[(a, b)] * (y[(b, j)] - my[b]);
            }
        }
    }
    t
}

#[test]
fn tolerances_match_brute_force() {
    let m = model(4);
    let mass = &m.ops().mass;
    let n = m.n_dofs();
    let p = gaussian(12, "p", n, 3);
    let c = gaussian(13, "c", n, 3);
    let a = gaussian(14, "a", n, 4);
    let e = 1e-2;
    let (sp, sc, sa) = (brute_spread(mass, p.as_ref(), p.as_ref()), brute_spread(mass, c.as_ref(), c.as_ref()), brute_spread(mass, a.as_ref(), a.as_ref()));
    let x = brute_spread(mass, p.as_ref(), c.as_ref());
    let ml = 2.0 * e / 2.0 * (sp - sc) + 2.0 * e / 3.0 * sa;
    let mf = 0.5 * e / 3.0 * sa + 2.0 * e / 2.0 * (sp - x + 0.25 * sc);
    let floor = tolerance_floor(mass, p.as_ref());
    let got_ml = adaptive_tolerance_ml(mass, p.as_ref(), c.as_ref(), a.as_ref(), e).unwrap();
    let got_mf = adaptive_tolerance_mf(mass, p.as_ref(), c.as_ref(), a.as_ref(), e).unwrap();
    assert!((got_ml - ml.max(floor)).abs() <= 1e-12 * ml.abs().max(floor));
    assert!((got_mf - mf.max(floor)).abs() <= 1e-12 * mf.abs());

    // Identical control and principal: only the ancillary term survives.
    let only_a = adaptive_tolerance_ml(mass, p.as_ref(), p.as_ref(), a.as_ref(), e).unwrap();
    assert!((only_a - 2.0 * e / 3.0 * sa).abs() <= 1e-12 * only_a);
    let mf_same = adaptive_tolerance_mf(mass, p.as_ref(), p.as_ref(), a.as_ref(), e).unwrap();
    assert!((mf_same - (0.5 * e / 3.0 * sa + 2.0 * e / 2.0 * 0.25 * sp)).abs() <= 1e-12 * mf_same);

    // Zero spread everywhere gives the floor.
    let flat = Mat::from_fn(n, 3, |i, _| i as f64);
    let flat_a = Mat::from_fn(n, 4, |i, _| i as f64);
    assert_eq!(adaptive_tolerance_ml(mass, flat.as_ref(), flat.as_ref(), flat_a.as_ref(), e).unwrap(), 1e-300);
    assert_eq!(adaptive_tolerance_mf(mass, flat.as_ref(), flat.as_ref(), flat_a.as_ref(), e).unwrap(), 1e-300);
    assert!(adaptive_tolerance_ml(mass, p.subcols(0, 1), c.subcols(0, 1), a.as_ref(), e).is_err());
}

#[test]
fn reduced_assembly_counts_trilinear_calls() {
    let m = model(9);
    let basis = pod(&m.ops().mass, gaussian(15, "b", m.n_dofs(), 5).as_ref(), 0.0).unwrap().basis;
    let space = ReducedSpace::new(&m, basis);
    let before = m.ops().trilinear_calls.load(Ordering::SeqCst);
    let rom = build_reduced_operators(&m, &space).unwrap();
    assert_eq!(m.ops().trilinear_calls.load(Ordering::SeqCst) - before, 25);
    assert_eq!(rom.n, 5);
    let t = m.ops().apply_trilinear(space.basis.col(0), space.psi_basis.col(0)).unwrap();
    let t000: f64 = space.basis.col(0).transpose() * &t;
    assert!((rom.tensor(0, 0, 0) - t000).abs() <= 1e-12 * t000.abs().max(1.0));
    assert!(matches!(build_reduced_operators(&m, &ReducedSpace::empty(m.n_dofs())), Err(Error::DegenerateSpace)));
}

#[test]
fn reduced_residual_is_the_projected_full_residual() {
    let m = model(11);
    let mass = &m.ops().mass;
    let snaps = smooth_states(&m, 16, 8, 30.0);
    let basis = pod(mass, snaps.as_ref(), 0.0).unwrap().basis;
    let space = ReducedSpace::new(&m, basis.clone());
    let rom = build_reduced_operators(&m, &space).unwrap();
    let c0 = gaussian(17, "c0", rom.n, 1).col(0).to_owned() * faer::Scale(20.0);
    let c1 = gaussian(18, "c1", rom.n, 1).col(0).to_owned() * faer::Scale(20.0);
    let full = m.residual((&basis * &c0).as_ref(), (&basis * &c1).as_ref());
    let projected = basis.transpose() * &full;
    let reduced = rom.residual(c0.as_ref(), c1.as_ref());
    let scale = projected.norm_l2().max(1.0);
    assert!((&projected - &reduced).norm_l2() <= 1e-10 * scale, "{:e}", (&projected - &reduced).norm_l2());
}

#[test]
fn full_dimensional_reduced_flow_reproduces_the_full_flow() {
    let m = model(11);
    let n = m.n_dofs();
    let basis = build_laplacian_eigenbasis(m.ops(), n).unwrap().eigvecs;
    let space = ReducedSpace::new(&m, basis.clone());
    let rom = build_reduced_operators(&m, &space).unwrap();
    let x = smooth_states(&m, 19, 1, 30.0);
    let full = m.flow(x.col(0), 1.0).unwrap();
    let c0 = basis.transpose() * spmv(&m.ops().mass, x.col(0));
    let red = rom.flow(c0.as_ref(), 1.0).unwrap();
    let lifted = &basis * &red.states;
    let scale = full.states.norm_max();
    assert!(max_diff(lifted.as_ref(), full.states.as_ref()) <= 1e-8 * scale, "{:e}", max_diff(lifted.as_ref(), full.states.as_ref()));
}

#[test]
fn reduced_flow_is_deterministic_per_member() {
    let m = model(9);
    let basis = pod(&m.ops().mass, smooth_states(&m, 20, 6, 30.0).as_ref(), 0.0).unwrap().basis;
    let rom = build_reduced_operators(&m, &ReducedSpace::new(&m, basis)).unwrap();
    let c = gaussian(21, "c", rom.n, 19);
    let all = rom.flow_ensemble(c.as_ref(), 0.5).unwrap();
    for j in [0, 5, 16, 18] {
        let one = rom.flow(c.col(j), 0.5).unwrap();
        assert!(bitwise_eq(one.states.as_ref(), all[j].states.as_ref()));
    }
    let again = rom.flow_ensemble(c.as_ref(), 0.5).unwrap();
    assert!(all.iter().zip(&again).all(|(a, b)| bitwise_eq(a.states.as_ref(), b.states.as_ref())));
}

#[test]
fn unforced_reduced_model_keeps_zero() {
    let m = unforced_model(9);
    let basis = pod(&m.ops().mass, gaussian(22, "z", m.n_dofs(), 3).as_ref(), 0.0).unwrap().basis;
    let rom = build_reduced_operators(&m, &ReducedSpace::new(&m, basis)).unwrap();
    let t = rom.flow(Col::<f64>::zeros(rom.n).as_ref(), 1.0).unwrap();
    assert!(t.states.norm_max() == 0.0);
}
