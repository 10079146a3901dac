//! Run metrics: model approximation error (RMSE), safe-region coverage and
//! the unsafe-trajectory fraction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::gp::GpModel;
use crate::learner::{BoxDomain, GroundTruth};
use crate::log::{ExperimentLog, Phase};
use crate::trajectory::{ramp_points, History, NxConfig, RampParam, Trajectory};

/// Root-mean-square error of the model's predictive mean against a noiseless
/// ground truth over a grid of embedded points.
pub fn rmse(model: &GpModel, truth: &dyn GroundTruth, grid: &Trajectory) -> Result<f64> {
    let mean = model.predict_mean(grid)?;
    let n = grid.num_points();
    let mut acc = 0.0;
    for i in 0..n {
        let x = grid.point(i);
        let diff = mean[i] - truth.f_noiseless(&x);
        acc += diff * diff;
    }
    Ok((acc / n as f64).sqrt())
}

/// Fraction of sampled points whose true safety classification (noiseless
/// indicator >= 0) matches the safety model's (posterior mean >= 0).
pub fn coverage(g_model: &GpModel, truth: &dyn GroundTruth, points: &Trajectory) -> Result<f64> {
    let mean = g_model.predict_mean(points)?;
    let n = points.num_points();
    let mut hits = 0usize;
    for i in 0..n {
        let x = points.point(i);
        let truth_safe = truth.z_noiseless(&x) >= 0.0;
        let model_safe = mean[i] >= 0.0;
        if truth_safe == model_safe {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Fraction of exploration trajectories flagged unsafe; initialization
/// records are excluded.
pub fn unsafe_fraction(log: &ExperimentLog) -> f64 {
    let mut total = 0usize;
    let mut unsafe_count = 0usize;
    for rec in &log.records {
        if rec.phase == Phase::Explore {
            total += 1;
            if rec.unsafe_flag {
                unsafe_count += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unsafe_count as f64 / total as f64
    }
}

/// Coverage over freshly sampled random trajectories: `n_traj` seeded ramps
/// (uniform start and endpoint) discretized like executed trajectories.
pub fn coverage_sampled(
    g_model: &GpModel,
    truth: &dyn GroundTruth,
    domain: &BoxDomain,
    nx: &NxConfig,
    n_traj: usize,
    seed: u64,
) -> Result<f64> {
    let fixtures = MetricFixtures::generate(truth, domain, nx, 1, n_traj, seed);
    fixtures.coverage(g_model)
}

/// Precomputed evaluation fixtures: a seeded RMSE grid of embedded points
/// with seeded histories, and seeded random ramp trajectories for coverage.
pub struct MetricFixtures {
    rmse_grid: Trajectory,
    rmse_truth: Vec<f64>,
    coverage_points: Trajectory,
    coverage_truth_safe: Vec<bool>,
}

impl MetricFixtures {
    pub fn generate(
        truth: &dyn GroundTruth,
        domain: &BoxDomain,
        nx: &NxConfig,
        rmse_points: usize,
        coverage_trajectories: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = nx.embedded_dim();

        // Every slot of an RMSE grid point is an independent uniform draw
        // over the corresponding manipulated-variable range (the "seeded
        // history" of the point).
        let mut grid = DMatrix::zeros(d, rmse_points.max(1));
        for c in 0..rmse_points.max(1) {
            let mut s = 0;
            for lag in 0..=nx.max_lag() {
                for (j, lags) in nx.lags.iter().enumerate() {
                    if lags.contains(&lag) {
                        grid[(s, c)] = rng.random_range(domain.lower[j]..domain.upper[j]);
                        s += 1;
                    }
                }
            }
        }
        let rmse_grid = Trajectory::from_points(grid).expect("nonempty grid");
        let rmse_truth: Vec<f64> = (0..rmse_grid.num_points())
            .map(|i| truth.f_noiseless(&rmse_grid.point(i)))
            .collect();

        // Coverage samples whole ramps: random start, random endpoint,
        // discretized and embedded like an executed trajectory.
        let n_traj = coverage_trajectories.max(1);
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n_traj * nx.m);
        for _ in 0..n_traj {
            let start = domain.sample(&mut rng);
            let eta = domain.sample(&mut rng);
            let history = History::seeded(&start, nx.max_lag().max(1));
            let tau = ramp_points(&RampParam::new(eta), &history, nx)
                .expect("seeded history is sufficient");
            for k in 0..nx.m {
                cols.push(tau.point(k));
            }
        }
        let mut pts = DMatrix::zeros(d, cols.len());
        for (c, col) in cols.iter().enumerate() {
            pts.set_column(c, col);
        }
        let coverage_points = Trajectory::from_points(pts).expect("nonempty coverage set");
        let coverage_truth_safe: Vec<bool> = (0..coverage_points.num_points())
            .map(|i| truth.z_noiseless(&coverage_points.point(i)) >= 0.0)
            .collect();

        MetricFixtures {
            rmse_grid,
            rmse_truth,
            coverage_points,
            coverage_truth_safe,
        }
    }

    pub fn rmse(&self, f_model: &GpModel) -> Result<f64> {
        let mean = f_model.predict_mean(&self.rmse_grid)?;
        let n = self.rmse_truth.len();
        let mut acc = 0.0;
        for i in 0..n {
            let diff = mean[i] - self.rmse_truth[i];
            acc += diff * diff;
        }
        Ok((acc / n as f64).sqrt())
    }

    pub fn coverage(&self, g_model: &GpModel) -> Result<f64> {
        let mean = g_model.predict_mean(&self.coverage_points)?;
        let n = self.coverage_truth_safe.len();
        let hits = (0..n)
            .filter(|&i| (mean[i] >= 0.0) == self.coverage_truth_safe[i])
            .count();
        Ok(hits as f64 / n as f64)
    }
}
