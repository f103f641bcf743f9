mod common;

use std::sync::OnceLock;

use arbenkf::filters::{psd_regularize, single_cov, Observation, Which};
use arbenkf::harness::quantiles;
use arbenkf::linalg::sym_eigen_desc;
use arbenkf::pod::{adaptive_tolerance_mf, adaptive_tolerance_ml, pod, telescopic_tolerance_ml, telescopic_tolerance_mf, LevelSpread};
use arbenkf::QgeModel;
use common::*;
use faer::Mat;
use proptest::prelude::*;

fn shared_model() -> &'static QgeModel {
    static M: OnceLock<QgeModel> = OnceLock::new();
    M.get_or_init(|| model(7))
}

fn shifted(x: &Mat<f64>, shift: f64) -> Mat<f64> {
    Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] + shift * (i as f64 + 1.0).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tolerances_scale_quadratically(seed in 0u64..1000, alpha in 0.1f64..10.0, np in 2usize..8, na in 2usize..12) {
        let m = shared_model();
        let mass = &m.ops().mass;
        let n = m.n_dofs();
        let (p, c, a) = (gaussian(seed, "p", n, np), gaussian(seed, "c", n, np) * faer::Scale(0.5), gaussian(seed, "a", n, na));
        let s = faer::Scale(alpha);
        for f in [adaptive_tolerance_ml, adaptive_tolerance_mf] {
            let t1 = f(mass, p.as_ref(), c.as_ref(), a.as_ref(), 1e-2).unwrap();
            let t2 = f(mass, (&p * s).as_ref(), (&c * s).as_ref(), (&a * s).as_ref(), 1e-2).unwrap();
            prop_assert!((t2 - alpha * alpha * t1).abs() <= 1e-10 * t2.abs());
        }
    }

    #[test]
    fn tolerances_ignore_ensemble_translation(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let m = shared_model();
        let mass = &m.ops().mass;
        let n = m.n_dofs();
        let (p, c, a) = (gaussian(seed, "p", n, 5), gaussian(seed, "c", n, 5), gaussian(seed, "a", n, 9));
        for f in [adaptive_tolerance_ml, adaptive_tolerance_mf] {
            let t1 = f(mass, p.as_ref(), c.as_ref(), a.as_ref(), 1e-3).unwrap();
            let t2 = f(mass, shifted(&p, shift).as_ref(), shifted(&c, -shift).as_ref(), shifted(&a, 2.0 * shift).as_ref(), 1e-3).unwrap();
            prop_assert!((t1 - t2).abs() <= 1e-9 * t1.abs());
        }
    }

    #[test]
    fn one_level_telescope_is_the_two_ensemble_tolerance(seed in 0u64..1000, np in 2usize..8, na in 2usize..12) {
        let m = shared_model();
        let mass = &m.ops().mass;
        let n = m.n_dofs();
        let (p, c, a) = (gaussian(seed, "p", n, np), gaussian(seed, "c", n, np), gaussian(seed, "a", n, na));
        let levels = [LevelSpread { principal: a.as_ref(), control: None }, LevelSpread { principal: p.as_ref(), control: Some(c.as_ref()) }];
        let ml = adaptive_tolerance_ml(mass, p.as_ref(), c.as_ref(), a.as_ref(), 1e-2).unwrap();
        let mf = adaptive_tolerance_mf(mass, p.as_ref(), c.as_ref(), a.as_ref(), 1e-2).unwrap();
        prop_assert!((telescopic_tolerance_ml(mass, &levels, 1e-2).unwrap() - ml).abs() <= 1e-12 * ml.abs());
        prop_assert!((telescopic_tolerance_mf(mass, &levels, 1e-2).unwrap() - mf).abs() <= 1e-12 * mf.abs());
    }

    #[test]
    fn covariance_is_bilinear_and_symmetric(seed in 0u64..1000, alpha in -3.0f64..3.0, members in 2usize..9) {
        let obs = Observation::new(vec![0, 2, 5, 7], 9);
        let x = gaussian(seed, "x", 9, members);
        let y = &x * faer::Scale(alpha);
        let p1 = single_cov(x.as_ref(), obs.apply(x.as_ref()).as_ref(), Which::P).unwrap();
        let p2 = single_cov(y.as_ref(), obs.apply(y.as_ref()).as_ref(), Which::P).unwrap();
        prop_assert!(max_diff(p2.as_ref(), (&p1 * faer::Scale(alpha * alpha)).as_ref()) <= 1e-12 * (1.0 + p2.norm_max()));
        prop_assert!(max_diff(p1.as_ref(), p1.transpose()) == 0.0);
    }

    #[test]
    fn psd_output_is_psd_and_idempotent(seed in 0u64..1000, dim in 1usize..8) {
        let g = gaussian(seed, "g", dim, dim);
        let p = Mat::from_fn(dim, dim, |i, j| g[(i, j)] + g[(j, i)]);
        let q = gaussian(seed, "q", 3, dim);
        let (q1, p1) = psd_regularize(q.as_ref(), p.as_ref()).unwrap();
        prop_assert!(sym_eigen_desc(p1.as_ref()).unwrap().values[dim - 1] >= -1e-12);
        let (q2, p2) = psd_regularize(q1.as_ref(), p1.as_ref()).unwrap();
        prop_assert!(max_diff(p2.as_ref(), p1.as_ref()) <= 1e-12 * (1.0 + p1.norm_max()));
        prop_assert!(max_diff(q2.as_ref(), q1.as_ref()) <= 1e-10 * (1.0 + q1.norm_max()));
    }

    #[test]
    fn pod_error_equals_discarded_energy(seed in 0u64..1000, count in 1usize..12, frac in 0.0f64..1.0) {
        let m = shared_model();
        let mass = &m.ops().mass;
        let s = gaussian(seed, "s", m.n_dofs(), count);
        let total: f64 = (0..count).map(|j| m.ops().v_norm(s.col(j)).powi(2)).sum::<f64>() / count as f64;
        let r = pod(mass, s.as_ref(), frac * total).unwrap();
        let d = r.dim();
        let proj = &r.basis * (r.basis.transpose() * arbenkf::linalg::spmm(mass, s.as_ref()));
        let err: f64 = (0..count).map(|j| m.ops().v_norm((s.col(j) - proj.col(j)).as_ref()).powi(2)).sum::<f64>() / count as f64;
        let tail = r.discarded_energy;
        prop_assert_eq!(r.eigenvalues.len() >= d, true);
        prop_assert!(err <= frac * total * (1.0 + 1e-10) + 1e-12);
        prop_assert!((err - tail).abs() <= 1e-10 * total);
    }

    #[test]
    fn quantiles_are_ordered(v in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let q = quantiles(&v).unwrap();
        prop_assert!(q.min <= q.q25 && q.q25 <= q.median && q.median <= q.q75 && q.q75 <= q.max);
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        prop_assert_eq!(q.min, s[0]);
        prop_assert_eq!(q.max, s[s.len() - 1]);
    }
}
