//! Fast invariant checks bundled with the binary.

use std::sync::Arc;

use arbenkf::filters::{psd_regularize, single_cov, Observation, Which};
use arbenkf::harness::{parse_csv, steps_to_csv, StepRecord};
use arbenkf::linalg::{spmm, sym_eigen_desc};
use arbenkf::pod::pod;
use arbenkf::priors::build_laplacian_eigenbasis;
use arbenkf::rng::{normal_columns, StreamFamily};
use arbenkf::{assemble_operators, Mesh, QgeModel, QgeParams};
use faer::Mat;

use crate::Failure;

type Check = (&'static str, fn() -> Result<String, String>);

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_model() -> QgeModel {
    let ops = Arc::new(assemble_operators(&Mesh::structured(11, 11)));
    QgeModel::new(ops, QgeParams::default()).expect("default parameters are valid")
}

fn pod_error_bound() -> Result<String, String> {
    let m = small_model();
    let mass = &m.ops().mass;
    let s = normal_columns(&StreamFamily::new(1, 0, "selftest-pod"), m.n_dofs(), 12);
    let total: f64 = (0..12).map(|j| m.ops().v_norm(s.col(j)).powi(2)).sum::<f64>() / 12.0;
    let r = pod(mass, s.as_ref(), 0.3 * total).map_err(|e| e.to_string())?;
    let proj = &r.basis * (r.basis.transpose() * spmm(mass, s.as_ref()));
    let err: f64 = (0..12).map(|j| m.ops().v_norm((s.col(j) - proj.col(j)).as_ref()).powi(2)).sum::<f64>() / 12.0;
    let gap = (err - r.discarded_energy).abs() / total;
    ensure(gap <= 1e-10, format!("{} modes, relative gap {gap:.2e}", r.dim()))
}

fn covariance_symmetry() -> Result<String, String> {
    let x = normal_columns(&StreamFamily::new(2, 0, "selftest-cov"), 10, 6);
    let obs = Observation::new(vec![1, 4, 8], 10);
    let p = single_cov(x.as_ref(), obs.apply(x.as_ref()).as_ref(), Which::P).map_err(|e| e.to_string())?;
    let min = sym_eigen_desc(p.as_ref()).map_err(|e| e.to_string())?.values[2];
    let asym = (&p - p.transpose()).norm_max();
    ensure(asym == 0.0 && min >= -1e-12, format!("asymmetry {asym:.1e}, min eigenvalue {min:.2e}"))
}

fn psd_projection() -> Result<String, String> {
    let g = normal_columns(&StreamFamily::new(3, 0, "selftest-psd"), 6, 6);
    let p = Mat::from_fn(6, 6, |i, j| g[(i, j)] + g[(j, i)]);
    let (_, p2) = psd_regularize(Mat::<f64>::zeros(2, 6).as_ref(), p.as_ref()).map_err(|e| e.to_string())?;
    let min = sym_eigen_desc(p2.as_ref()).map_err(|e| e.to_string())?.values[5];
    ensure(min >= -1e-12, format!("min eigenvalue {min:.2e}"))
}

fn time_reversibility() -> Result<String, String> {
    let m = small_model();
    let (w0, _) = m.solve_stationary().map_err(|e| e.to_string())?;
    let d = normal_columns(&StreamFamily::new(4, 0, "selftest-flow"), m.n_dofs(), 1);
    let x = Mat::from_fn(m.n_dofs(), 1, |i, _| w0[i] + 10.0 * d[(i, 0)]);
    let fwd = m.flow(x.col(0), 0.5).map_err(|e| e.to_string())?;
    let back = m.reversed().map_err(|e| e.to_string())?.flow(fwd.last(), 0.5).map_err(|e| e.to_string())?;
    let err = (back.last() - x.col(0)).norm_max() / x.norm_max();
    ensure(err <= 1e-8, format!("round-trip relative error {err:.2e}"))
}

fn laplacian_spectrum() -> Result<String, String> {
    let m = small_model();
    let b = build_laplacian_eigenbasis(m.ops(), 3).map_err(|e| e.to_string())?;
    let lam = 2.0 * std::f64::consts::PI.powi(2);
    let rel = (b.eigvals[0] - lam) / lam;
    ensure(rel > 0.0 && rel < 0.1, format!("lambda_1 {:.4}, continuum {lam:.4}", b.eigvals[0]))
}

fn csv_round_trip() -> Result<String, String> {
    let steps: Vec<StepRecord> =
        (0..5).map(|k| StepRecord { k, err_pre: 1.0 / (k as f64 + 3.0), err_post: 1e-300 * k as f64, rom_dim: k * 7, wall_seconds: 0.1 }).collect();
    let back = parse_csv(&steps_to_csv(&steps)).map_err(|e| e.to_string())?;
    ensure(back == steps, "5 rows".into())
}

const CHECKS: [Check; 6] = [
    ("pod error bound", pod_error_bound),
    ("covariance symmetry", covariance_symmetry),
    ("psd projection", psd_projection),
    ("time reversibility", time_reversibility),
    ("laplacian spectrum", laplacian_spectrum),
    ("csv round trip", csv_round_trip),
];

pub fn run() -> Result<(), Failure> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(d) => println!("pass  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{} passed, {failed} failed", CHECKS.len() - failed);
    if failed > 0 {
        return Err(Failure { kind: "selftest", message: format!("{failed} check(s) failed"), code: 1 });
    }
    Ok(())
}
