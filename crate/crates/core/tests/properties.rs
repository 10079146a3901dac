//! Property tests for the library's structural invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use salnx::kernel::{kernel_eval, KernelParams};
use salnx::learner::{criterion_value, Criterion};
use salnx::log::{CsvRow, ExperimentLog, IterationRecord, LogHeader, Phase};
use salnx::safety::{xi_mc_with_draws, NormalDraws};
use salnx::trajectory::{ramp_points, History, NxConfig, RampParam};

fn vec_strategy(dim: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(range, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_symmetric_bounded_positive(
        a in vec_strategy(3, -10.0..10.0),
        b in vec_strategy(3, -10.0..10.0),
        sv in 0.1f64..5.0,
        ils in vec_strategy(3, 0.01..3.0),
    ) {
        let p = KernelParams::new(sv, ils).unwrap();
        let x = DVector::from_vec(a);
        let y = DVector::from_vec(b);
        let kxy = kernel_eval(x.as_view(), y.as_view(), &p).unwrap();
        let kyx = kernel_eval(y.as_view(), x.as_view(), &p).unwrap();
        prop_assert_eq!(kxy, kyx);
        prop_assert!(kxy > 0.0 && kxy <= sv);
        let kxx = kernel_eval(x.as_view(), x.as_view(), &p).unwrap();
        prop_assert_eq!(kxx, sv);
    }

    #[test]
    fn ramp_is_affine_in_endpoint(
        u0 in vec_strategy(2, -5.0..5.0),
        e1 in vec_strategy(2, -5.0..5.0),
        e2 in vec_strategy(2, -5.0..5.0),
        w in 0.0f64..1.0,
        d2 in 1usize..4,
        m in 1usize..7,
    ) {
        let cfg = NxConfig::contiguous(2, d2, 0, m).unwrap();
        let history = History::seeded(&DVector::from_vec(u0), d2);
        let e1 = DVector::from_vec(e1);
        let e2 = DVector::from_vec(e2);
        let mix = &e1 * w + &e2 * (1.0 - w);
        let t1 = ramp_points(&RampParam::new(e1), &history, &cfg).unwrap();
        let t2 = ramp_points(&RampParam::new(e2), &history, &cfg).unwrap();
        let tm = ramp_points(&RampParam::new(mix), &history, &cfg).unwrap();
        let blend = t1.as_matrix() * w + t2.as_matrix() * (1.0 - w);
        prop_assert!((tm.as_matrix() - blend).abs().max() < 1e-9);
    }

    #[test]
    fn ramp_slots_stay_on_segment(
        u0 in vec_strategy(2, -5.0..5.0),
        eta in vec_strategy(2, -5.0..5.0),
        d2 in 1usize..4,
        m in 1usize..7,
    ) {
        let cfg = NxConfig::contiguous(2, d2, 0, m).unwrap();
        let u0v = DVector::from_vec(u0.clone());
        let history = History::seeded(&u0v, d2);
        let etav = DVector::from_vec(eta.clone());
        let tau = ramp_points(&RampParam::new(etav), &history, &cfg).unwrap();
        for k in 0..m {
            let col = tau.point(k);
            for (s, v) in col.iter().enumerate() {
                let j = s % 2;
                let lo = u0[j].min(eta[j]) - 1e-12;
                let hi = u0[j].max(eta[j]) + 1e-12;
                prop_assert!(*v >= lo && *v <= hi, "slot {s} of column {k} left the segment");
            }
        }
    }

    #[test]
    fn xi_mc_monotone_under_mean_shift(
        mu in vec_strategy(3, -2.0..2.0),
        delta in 0.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut b = DMatrix::zeros(3, 3);
        let mut rng = seed.wrapping_mul(2654435761).wrapping_add(12345);
        for i in 0..3 {
            for j in 0..3 {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                b[(i, j)] = ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            }
        }
        let sigma = &b * b.transpose() + DMatrix::identity(3, 3) * 0.05;
        let draws = NormalDraws::generate(500, 3, seed);
        let muv = DVector::from_vec(mu);
        let base = xi_mc_with_draws(&muv, &sigma, &draws).unwrap();
        let shifted = xi_mc_with_draws(&muv.map(|v| v + delta), &sigma, &draws).unwrap();
        prop_assert!(shifted.p_hat >= base.p_hat);
    }

    #[test]
    fn logdet_ranking_matches_det_ranking(
        seed_a in 0u64..500,
        seed_b in 500u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let spd = |seed: u64| {
            let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let b: DMatrix<f64> = DMatrix::from_fn(4, 4, |_, _| r.random_range(-1.0..1.0));
            &b * b.transpose() + DMatrix::identity(4, 4) * 0.2
        };
        let a = spd(seed_a);
        let b = spd(seed_b);
        let la = criterion_value(&a, Criterion::Determinant).unwrap();
        let lb = criterion_value(&b, Criterion::Determinant).unwrap();
        let da = a.determinant();
        let db = b.determinant();
        // Ranking by log-determinant agrees with ranking by determinant on
        // positive-definite candidates.
        prop_assert_eq!(la > lb, da > db);
    }

    #[test]
    fn csv_rows_roundtrip_random_floats(
        crit in proptest::option::of(-1e12f64..1e12),
        xi in proptest::option::of(0.0f64..1.0),
        rmse in proptest::option::of(0.0f64..1e9),
        eta1 in -1e6f64..1e6,
        eta2 in -1e6f64..1e6,
        unsafe_flag in any::<bool>(),
        seed in proptest::option::of(any::<u64>()),
    ) {
        let config = salnx::config::ExperimentConfig::for_benchmark("exp2").unwrap();
        let log = ExperimentLog {
            header: LogHeader {
                config,
                master_seed: 1,
                code_version: "t".into(),
                domain_lower: vec![-5.0, -5.0],
                domain_upper: vec![45.0, 45.0],
                initial_safe_point: vec![5.0, 5.0],
            },
            records: vec![IterationRecord {
                iter: 1,
                phase: Phase::Explore,
                strategy: "sal".into(),
                eta: vec![eta1, eta2],
                tau_dim: 4,
                tau: vec![0.0; 20],
                outputs: vec![0.0; 5],
                safety: vec![0.0; 5],
                criterion: crit,
                xi: xi.map(|p| salnx::log::XiRecord {
                    p_hat: p,
                    n_samples: 100,
                    std_err: 0.0,
                    seed: seed.unwrap_or(0),
                }),
                proposal_seed: None,
                accepted: true,
                unsafe_flag,
                interrupted_at: None,
                det_sigma: None,
                log_i_term: None,
                rmse,
                coverage: None,
                wall_ms: 0.0,
            }],
        };
        let text = log.csv_string().unwrap();
        let rows: Vec<CsvRow> = ExperimentLog::read_csv(&mut text.as_bytes()).unwrap();
        prop_assert_eq!(rows, log.csv_rows());
    }
}
