//! Integration tests for the endpoint proposers and the experiment loop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use salnx::config::ExperimentConfig;
use salnx::gp::GpModel;
use salnx::kernel::KernelParams;
use salnx::learner::{
    criterion_value, propose_fisher, propose_random_safe, propose_sal, AcquisitionConfig,
    BoxDomain, Criterion,
};
use salnx::log::Phase;
use salnx::theory::{replay_feasibility, run_benchmark, theory_mutual_info};
use salnx::trajectory::{ramp_points, History, NxConfig, RampParam};

fn exp2_nx() -> NxConfig {
    NxConfig::contiguous(2, 2, 0, 5).unwrap()
}

fn exp2_f_kernel() -> KernelParams {
    KernelParams::new(1.0, vec![2.25; 4]).unwrap()
}

fn default_acq(alpha: f64, seed: u64) -> AcquisitionConfig {
    AcquisitionConfig {
        alpha,
        criterion: Criterion::Determinant,
        n_restarts: 20,
        n_mc: 1000,
        local_steps: 50,
        seed,
    }
}

/// A safety model considering everything deeply safe: empty model whose
/// prior mean sits far above zero.
fn deep_safe_g() -> GpModel {
    GpModel::empty(KernelParams::new(4.0, vec![2.25; 4]).unwrap(), 0.01, 10.0).unwrap()
}

/// A safety model considering everything deeply unsafe.
fn deep_unsafe_g() -> GpModel {
    GpModel::empty(KernelParams::new(4.0, vec![2.25; 4]).unwrap(), 0.01, -10.0).unwrap()
}

#[test]
fn sal_matches_exhaustive_grid_on_deep_safe_problem() {
    let nx = exp2_nx();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(exp2_f_kernel(), 0.25, 0.0).unwrap();
    let g = deep_safe_g();
    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 2);
    let acq = default_acq(0.2, 314);
    let proposal = propose_sal(&f, &g, &history, &nx, &acq, &domain).unwrap();
    assert!(!proposal.fallback);

    // Exhaustive 21x21 oracle over the endpoint box.
    let crit_of = |eta: &DVector<f64>| {
        let tau = ramp_points(&RampParam::new(eta.clone()), &history, &nx).unwrap();
        criterion_value(
            &f.predict_internal(&tau).unwrap().cov,
            Criterion::Determinant,
        )
        .unwrap()
    };
    let steps = 21usize;
    let coord = |i: usize| -5.0 + 50.0 * i as f64 / (steps - 1) as f64;
    let mut grid = vec![vec![0.0f64; steps]; steps];
    let mut grid_max = f64::NEG_INFINITY;
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let eta = DVector::from_vec(vec![coord(i), coord(j)]);
            let c = crit_of(&eta);
            *cell = c;
            grid_max = grid_max.max(c);
        }
    }
    // The grid's criterion resolution: the largest change between adjacent
    // grid points.
    let mut resolution = 0.0f64;
    for i in 0..steps {
        for j in 0..steps {
            if i + 1 < steps {
                resolution = resolution.max((grid[i][j] - grid[i + 1][j]).abs());
            }
            if j + 1 < steps {
                resolution = resolution.max((grid[i][j] - grid[i][j + 1]).abs());
            }
        }
    }
    assert!(
        proposal.criterion >= grid_max - resolution,
        "optimizer found {} but grid oracle reached {} (resolution {})",
        proposal.criterion,
        grid_max,
        resolution
    );
}

#[test]
fn alpha_one_equals_unconstrained_argmax_over_own_candidates() {
    let nx = exp2_nx();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(exp2_f_kernel(), 0.25, 0.0).unwrap();
    let g = deep_safe_g();
    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 2);

    let free = propose_sal(&f, &g, &history, &nx, &default_acq(1.0, 99), &domain).unwrap();
    // The chosen candidate is the argmax over everything evaluated.
    let best = free
        .diagnostics
        .candidates
        .iter()
        .map(|c| c.criterion)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(free.criterion, best);
    assert!(free.diagnostics.candidates.iter().all(|c| c.feasible));
    assert!(free.diagnostics.candidates.iter().all(|c| c.xi.is_none()));

    // A vacuous constraint (deep-safe everywhere) walks the same path and
    // picks the same endpoint.
    let constrained = propose_sal(&f, &g, &history, &nx, &default_acq(0.5, 99), &domain).unwrap();
    assert_eq!(free.eta, constrained.eta);
}

#[test]
fn sal_respects_half_plane_safe_set() {
    // Constructed ground truth: safe iff the first coordinate stays left of
    // 20. The regression model is empty, so both halves look equally
    // informative and only the constraint separates them.
    let nx = NxConfig::contiguous(2, 1, 0, 5).unwrap();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(KernelParams::new(1.0, vec![2.25; 2]).unwrap(), 0.25, 0.0).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let n = 250;
    let train = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-5.0..45.0));
    let z = DVector::from_fn(n, |i, _| if train[(i, 0)] < 20.0 { 5.0 } else { -5.0 });
    let g_kernel = KernelParams::new(25.0, vec![1.0 / 25.0, 1.0 / 25.0]).unwrap();
    let g = GpModel::fit(&train, &z, g_kernel, 0.01, -2.0).unwrap();

    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 1);
    for seed in 0..20u64 {
        let proposal =
            propose_sal(&f, &g, &history, &nx, &default_acq(0.2, seed), &domain).unwrap();
        assert!(!proposal.fallback, "seed {seed} fell back");
        assert!(
            proposal.eta[0] < 20.0,
            "seed {seed} proposed into the unsafe half-plane: {}",
            proposal.eta[0]
        );
    }
}

#[test]
fn random_safe_returns_first_feasible_draw() {
    let nx = exp2_nx();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(exp2_f_kernel(), 0.25, 0.0).unwrap();
    let g = deep_safe_g();
    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 2);
    let p =
        propose_random_safe(&f, &g, &history, &nx, &default_acq(0.2, 7), &domain, 1000).unwrap();
    assert!(!p.fallback);
    assert_eq!(p.diagnostics.candidates.len(), 1);
    assert_eq!(p.diagnostics.chosen, Some(0));
}

#[test]
fn random_safe_flags_fallback_when_nothing_is_feasible() {
    let nx = exp2_nx();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(exp2_f_kernel(), 0.25, 0.0).unwrap();
    let g = deep_unsafe_g();
    let u0 = DVector::from_vec(vec![5.0, 5.0]);
    let history = History::seeded(&u0, 2);
    let p = propose_random_safe(&f, &g, &history, &nx, &default_acq(0.2, 7), &domain, 25).unwrap();
    assert!(p.fallback);
    assert_eq!(p.diagnostics.candidates.len(), 25);
    assert_eq!(p.diagnostics.chosen, None);
    // Stay in place: the fallback re-issues the current operating point.
    assert_eq!(p.eta, u0);
}

#[test]
fn random_safe_is_deterministic_per_seed() {
    let nx = exp2_nx();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(exp2_f_kernel(), 0.25, 0.0).unwrap();
    let g = deep_safe_g();
    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 2);
    let a =
        propose_random_safe(&f, &g, &history, &nx, &default_acq(0.2, 11), &domain, 1000).unwrap();
    let b =
        propose_random_safe(&f, &g, &history, &nx, &default_acq(0.2, 11), &domain, 1000).unwrap();
    let c =
        propose_random_safe(&f, &g, &history, &nx, &default_acq(0.2, 12), &domain, 1000).unwrap();
    assert_eq!(a.eta, b.eta);
    assert_ne!(a.eta, c.eta);
}

#[test]
fn fisher_on_empty_model_breaks_ties_by_first_candidate() {
    let nx = exp2_nx();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let f = GpModel::empty(exp2_f_kernel(), 0.25, 0.0).unwrap();
    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 2);
    let acq = default_acq(1.0, 21);
    let p = propose_fisher(&f, &history, &nx, &acq, &domain, &[]).unwrap();
    // Constant (zero) mean: every information matrix is zero, every
    // criterion is -inf, so the first evaluated candidate wins.
    assert_eq!(p.diagnostics.chosen, Some(0));
    assert_eq!(p.eta, p.diagnostics.candidates[0].eta);
    assert_eq!(p.criterion, f64::NEG_INFINITY);

    let q = propose_fisher(&f, &history, &nx, &acq, &domain, &[]).unwrap();
    assert_eq!(p.eta, q.eta);
}

#[test]
fn experiment_with_zero_iterations_logs_only_initialization() {
    let mut cfg = ExperimentConfig::for_benchmark("exp2").unwrap();
    cfg.n_iterations = 0;
    cfg.metrics.every = 0;
    let log = run_benchmark(&cfg, 3).unwrap();
    assert_eq!(log.records.len(), cfg.n_init);
    assert!(log.records.iter().all(|r| r.phase == Phase::Init));
}

#[test]
fn identical_seeds_reproduce_identical_logs() {
    let mut cfg = ExperimentConfig::for_benchmark("exp2").unwrap();
    cfg.n_iterations = 5;
    let mut a = run_benchmark(&cfg, 17).unwrap();
    let mut b = run_benchmark(&cfg, 17).unwrap();
    for r in a.records.iter_mut().chain(b.records.iter_mut()) {
        r.wall_ms = 0.0;
    }
    assert_eq!(a, b);
}

#[test]
fn feasibility_decisions_replay_from_stored_seeds() {
    let mut cfg = ExperimentConfig::for_benchmark("exp2").unwrap();
    cfg.n_iterations = 10;
    cfg.alpha = Some(0.2);
    cfg.metrics.every = 0;
    let log = run_benchmark(&cfg, 23).unwrap();
    let margin = replay_feasibility(&log).unwrap();
    assert!(
        margin > 0.0,
        "accepted endpoint failed its replayed constraint (margin {margin})"
    );
}

#[test]
fn truncated_executions_keep_models_and_identities_consistent() {
    use salnx::benchmarks::SyntheticSystem;
    use salnx::learner::run_experiment;
    // Unconstrained exploration on a rig-like system that interrupts at the
    // first violation: blocks of varying length enter the models.
    let mut system = SyntheticSystem::exp2(901);
    system.set_truncate_on_violation(true);
    let mut cfg = ExperimentConfig::for_benchmark("exp2").unwrap();
    cfg.n_iterations = 12;
    cfg.alpha = Some(1.0);
    cfg.metrics.every = 0;
    let log = run_experiment(&mut system, &cfg, 31).unwrap();
    let truncated: Vec<_> = log
        .records
        .iter()
        .filter(|r| r.interrupted_at.is_some())
        .collect();
    assert!(
        !truncated.is_empty(),
        "unconstrained exploration should hit the safety boundary"
    );
    for r in &truncated {
        assert_eq!(r.outputs.len(), r.interrupted_at.unwrap() + 1);
        assert_eq!(r.safety.len(), r.outputs.len());
        assert!(r.unsafe_flag);
    }
    // The information identity telescopes over executed prefixes, so it
    // must survive partial blocks.
    let mi = theory_mutual_info(&log).unwrap();
    assert!(mi.relative_gap <= 1e-7, "gap {}", mi.relative_gap);
}

#[test]
fn exp1_rmse_improves_from_ten_to_sixty_iterations() {
    let mut cfg = ExperimentConfig::for_benchmark("exp1").unwrap();
    cfg.n_iterations = 60;
    cfg.alpha = Some(0.01);
    let mut at10 = Vec::new();
    let mut at60 = Vec::new();
    for seed in 1..=5u64 {
        let log = run_benchmark(&cfg, seed).unwrap();
        at10.push(log.explore_records().nth(9).unwrap().rmse.unwrap());
        at60.push(log.explore_records().nth(59).unwrap().rmse.unwrap());
    }
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[s.len() / 2]
    };
    assert!(
        median(&at60) < median(&at10),
        "median RMSE did not improve: {} -> {}",
        median(&at10),
        median(&at60)
    );
}

#[test]
fn drop_initial_data_refits_on_exploration_data_only() {
    use salnx::config::HyperMode;
    use salnx::gp::HyperBounds;
    let mut cfg = ExperimentConfig::for_benchmark("exp2").unwrap();
    cfg.n_iterations = 4;
    cfg.alpha = Some(0.2);
    cfg.metrics.every = 0;
    cfg.drop_initial_data = true;
    cfg.hypers = HyperMode::Trained {
        bounds_f: HyperBounds::new(vec![0.1; 6], vec![10.0; 6]).unwrap(),
        bounds_g: HyperBounds::new(vec![0.1; 6], vec![10.0; 6]).unwrap(),
        init_f: salnx::config::HyperSpec {
            signal_variance: 1.0,
            inv_lengthscales_sq: vec![2.25; 4],
            noise_variance: 0.25,
        },
        init_g: salnx::config::HyperSpec {
            signal_variance: 4.0,
            inv_lengthscales_sq: vec![2.25; 4],
            noise_variance: 0.25,
        },
        cadence: 2,
        restarts: 1,
    };
    let log = run_benchmark(&cfg, 8).unwrap();
    assert_eq!(log.explore_records().count(), 4);
    assert!(log.explore_records().all(|r| r.criterion.is_some()));
}

#[test]
fn fisher_proposal_matches_exhaustive_grid_with_fitted_model() {
    use salnx::learner::fisher_matrix;
    // A fitted model over a 2-D static structure gives the information
    // matrix real curvature; the optimizer must reach the grid optimum.
    let nx = NxConfig::contiguous(2, 1, 0, 5).unwrap();
    let domain = BoxDomain::cube(-5.0, 45.0, 2).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let train = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-5.0..45.0));
    let y = DVector::from_fn(40, |i, _| {
        let a = train[(i, 0)] - 20.0;
        let b = train[(i, 1)] - 20.0;
        0.01 * (a * a + b * b)
    });
    let kernel = KernelParams::new(25.0, vec![1.0 / 100.0; 2]).unwrap();
    let f = GpModel::fit(&train, &y, kernel, 0.01, 0.0).unwrap();
    let history = History::seeded(&DVector::from_vec(vec![5.0, 5.0]), 1);
    let acq = default_acq(1.0, 77);
    let p = propose_fisher(&f, &history, &nx, &acq, &domain, &[]).unwrap();

    let steps = 21usize;
    let coord = |i: usize| -5.0 + 50.0 * i as f64 / (steps - 1) as f64;
    let mut grid = vec![vec![0.0f64; steps]; steps];
    let mut grid_max = f64::NEG_INFINITY;
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let eta = DVector::from_vec(vec![coord(i), coord(j)]);
            let info = fisher_matrix(&eta, &f, &[], &history, &nx).unwrap();
            let c = criterion_value(&info, Criterion::Determinant).unwrap();
            *cell = c;
            grid_max = grid_max.max(c);
        }
    }
    let mut resolution = 0.0f64;
    for i in 0..steps {
        for j in 0..steps {
            if i + 1 < steps {
                resolution = resolution.max((grid[i][j] - grid[i + 1][j]).abs());
            }
            if j + 1 < steps {
                resolution = resolution.max((grid[i][j] - grid[i][j + 1]).abs());
            }
        }
    }
    assert!(
        p.criterion >= grid_max - resolution,
        "optimizer found {} but grid oracle reached {} (resolution {})",
        p.criterion,
        grid_max,
        resolution
    );
}
