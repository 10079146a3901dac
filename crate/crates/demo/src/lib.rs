//! Browser demo: watch safe active learning explore the 2-D benchmark.
//!
//! A [`DemoSession`] owns the synthetic system, both models and the
//! execution history. The page drives three operations: `step` plans and
//! executes one trajectory, the field getters render the learned safety
//! surface and the acquisition surface over a grid, and a fresh session
//! restarts with new parameters. Everything is deterministic in the seed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use wasm_bindgen::prelude::*;

use salnx::benchmarks::SyntheticSystem;
use salnx::gp::GpModel;
use salnx::kernel::KernelParams;
use salnx::learner::{
    derive_seed, propose_random_safe, propose_sal, AcquisitionConfig, BoxDomain, Criterion,
    GroundTruth, SystemAdapter, SAFETY_PRIOR_MEAN, STREAM_PROPOSAL,
};
use salnx::safety::xi_analytic_1d;
use salnx::trajectory::{ramp_inputs, ramp_points, History, NxConfig, RampParam, Trajectory};

const N_INIT: usize = 10;
const INIT_BOX_FRACTION: f64 = 0.05;

struct Models {
    f: GpModel,
    g: GpModel,
}

#[wasm_bindgen]
pub struct DemoSession {
    system: SyntheticSystem,
    nx: NxConfig,
    domain: BoxDomain,
    history: History,
    models: Models,
    alpha: f64,
    strategy: String,
    seed: u64,
    iteration: usize,
    executed: Vec<Vec<f64>>, // executed manipulated points, for drawing
    unsafe_count: usize,
}

fn f_kernel() -> KernelParams {
    KernelParams::new(1.0, vec![2.25; 2]).expect("static kernel")
}

fn g_kernel() -> KernelParams {
    KernelParams::new(4.0, vec![2.25; 2]).expect("static kernel")
}

#[wasm_bindgen]
impl DemoSession {
    /// Start a session on the 2-D benchmark. `strategy` is "sal" or
    /// "random_safe"; `alpha` is the per-trajectory unsafe-probability
    /// threshold (1.0 disables the constraint).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, alpha: f64, strategy: String) -> Result<DemoSession, JsValue> {
        let mut system = SyntheticSystem::exp1(derive_seed(seed, 99, 0));
        let nx = system.nx().clone();
        let domain = system.domain();
        let safe_point = system.initial_safe_point();
        let mut history = History::seeded(&safe_point, 1);
        let input_stats = domain.input_standardizer(&nx);

        // Initialization: small box around the expert safe point.
        let half = domain.extent() * INIT_BOX_FRACTION;
        let init_box = BoxDomain::new(
            domain.clamp(&(&safe_point - &half)),
            domain.clamp(&(&safe_point + &half)),
        )
        .map_err(to_js)?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1, 0));
        let mut blocks: Vec<DMatrix<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut zs: Vec<f64> = Vec::new();
        let mut executed = Vec::new();
        for _ in 0..N_INIT {
            let eta = init_box.sample(&mut rng);
            let ramp = RampParam::new(eta);
            let tau = ramp_points(&ramp, &history, &nx).map_err(to_js)?;
            let inputs = ramp_inputs(&ramp, &history, &nx).map_err(to_js)?;
            let res = system.step(&inputs).map_err(to_js)?;
            for u in &inputs {
                history.push(u);
                executed.push(vec![u[0], u[1]]);
            }
            blocks.push(tau.to_rows());
            ys.extend(&res.outputs);
            zs.extend(&res.safety);
        }
        let total: usize = blocks.iter().map(|m| m.nrows()).sum();
        let mut inputs_all = DMatrix::zeros(total, nx.embedded_dim());
        let mut row = 0;
        for block in &blocks {
            inputs_all
                .view_mut((row, 0), (block.nrows(), block.ncols()))
                .copy_from(block);
            row += block.nrows();
        }
        let y_all = DVector::from_vec(ys);
        let z_all = DVector::from_vec(zs);

        let y_mean = y_all.mean();
        let y_var = y_all
            .iter()
            .map(|v| (v - y_mean) * (v - y_mean))
            .sum::<f64>()
            / y_all.len() as f64;
        let mut f_stats = input_stats.clone();
        f_stats.target_mean = y_mean;
        f_stats.target_std = if y_var.sqrt() > 1e-12 {
            y_var.sqrt()
        } else {
            1.0
        };
        let f = GpModel::fit_standardized(&inputs_all, &y_all, f_kernel(), 0.25, 0.0, f_stats)
            .map_err(to_js)?;
        let g = GpModel::fit_standardized(
            &inputs_all,
            &z_all,
            g_kernel(),
            1.0,
            SAFETY_PRIOR_MEAN,
            input_stats,
        )
        .map_err(to_js)?;

        Ok(DemoSession {
            system,
            nx,
            domain,
            history,
            models: Models { f, g },
            alpha,
            strategy,
            seed,
            iteration: 0,
            executed,
            unsafe_count: 0,
        })
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    /// Plan, execute and learn from one piecewise trajectory. Returns a
    /// JSON summary for the page to draw.
    pub fn step(&mut self) -> Result<String, JsValue> {
        self.iteration += 1;
        let acq = AcquisitionConfig {
            alpha: self.alpha,
            criterion: Criterion::Determinant,
            n_restarts: 20,
            n_mc: 600,
            local_steps: 30,
            seed: derive_seed(self.seed, STREAM_PROPOSAL, self.iteration as u64),
        };
        let proposal = if self.strategy == "random_safe" {
            propose_random_safe(
                &self.models.f,
                &self.models.g,
                &self.history,
                &self.nx,
                &acq,
                &self.domain,
                1000,
            )
        } else {
            propose_sal(
                &self.models.f,
                &self.models.g,
                &self.history,
                &self.nx,
                &acq,
                &self.domain,
            )
        }
        .map_err(to_js)?;

        let ramp = RampParam::new(proposal.eta.clone());
        let tau = ramp_points(&ramp, &self.history, &self.nx).map_err(to_js)?;
        let inputs = ramp_inputs(&ramp, &self.history, &self.nx).map_err(to_js)?;
        let res = self.system.step(&inputs).map_err(to_js)?;
        let executed = res.outputs.len();
        let mut points = Vec::new();
        for u in inputs.iter().take(executed) {
            self.history.push(u);
            self.executed.push(vec![u[0], u[1]]);
            points.push(vec![u[0], u[1]]);
        }
        let tau_exec = tau.head(executed).map_err(to_js)?;
        self.models.f = self
            .models
            .f
            .block_update(&tau_exec, &DVector::from_vec(res.outputs.clone()))
            .map_err(to_js)?;
        self.models.g = self
            .models
            .g
            .block_update(&tau_exec, &DVector::from_vec(res.safety.clone()))
            .map_err(to_js)?;
        if res.violation_at.is_some() {
            self.unsafe_count += 1;
        }

        let summary = serde_json::json!({
            "iteration": self.iteration,
            "eta": [proposal.eta[0], proposal.eta[1]],
            "points": points,
            "criterion": finite_or_null(proposal.criterion),
            "xi": proposal.xi.as_ref().map(|x| x.p_hat),
            "fallback": proposal.fallback,
            "unsafe": res.violation_at.is_some(),
            "unsafe_count": self.unsafe_count,
            "candidates": proposal.diagnostics.candidates.len(),
            "data_points": self.models.f.num_points(),
        });
        Ok(summary.to_string())
    }

    /// Learned safety probability per grid cell (the pointwise orthant
    /// probability of the safety posterior), row-major `res x res` over the
    /// domain.
    pub fn safety_field(&self, res: usize) -> Result<Vec<f64>, JsValue> {
        let grid = self.grid(res);
        let pred = self.models.g.predict(&grid).map_err(to_js)?;
        Ok((0..grid.num_points())
            .map(|i| {
                let sd = pred.cov[(i, i)].max(1e-12).sqrt();
                xi_analytic_1d(pred.mean[i], sd)
            })
            .collect())
    }

    /// True noiseless safety indicator per grid cell (positive = safe).
    pub fn true_safety_field(&self, res: usize) -> Vec<f64> {
        let grid = self.grid(res);
        (0..grid.num_points())
            .map(|i| self.system.z_noiseless(&grid.point(i)))
            .collect()
    }

    /// Acquisition surface: the log-determinant criterion of the ramp from
    /// the current operating point to each grid endpoint.
    pub fn criterion_field(&self, res: usize) -> Result<Vec<f64>, JsValue> {
        let mut out = Vec::with_capacity(res * res);
        for idx in 0..res * res {
            let eta = self.grid_point(res, idx);
            let tau = ramp_points(&RampParam::new(eta), &self.history, &self.nx).map_err(to_js)?;
            let pred = self.models.f.predict_internal(&tau).map_err(to_js)?;
            let v = salnx::learner::criterion_value(&pred.cov, Criterion::Determinant)
                .map_err(to_js)?;
            out.push(if v.is_finite() { v } else { -1e30 });
        }
        Ok(out)
    }

    /// Regression-model posterior mean over the grid.
    pub fn mean_field(&self, res: usize) -> Result<Vec<f64>, JsValue> {
        let grid = self.grid(res);
        let mean = self.models.f.predict_mean(&grid).map_err(to_js)?;
        Ok(mean.iter().copied().collect())
    }

    /// True regression surface over the grid.
    pub fn true_mean_field(&self, res: usize) -> Vec<f64> {
        let grid = self.grid(res);
        (0..grid.num_points())
            .map(|i| self.system.f_noiseless(&grid.point(i)))
            .collect()
    }

    /// All executed manipulated points, flattened `[x0, y0, x1, y1, ..]`.
    pub fn executed_points(&self) -> Vec<f64> {
        self.executed
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    pub fn domain_bounds(&self) -> Vec<f64> {
        vec![
            self.domain.lower[0],
            self.domain.lower[1],
            self.domain.upper[0],
            self.domain.upper[1],
        ]
    }

    pub fn current_point(&self) -> Vec<f64> {
        let u = self.history.last();
        vec![u[0], u[1]]
    }
}

impl DemoSession {
    fn grid(&self, res: usize) -> Trajectory {
        let mut pts = DMatrix::zeros(2, res * res);
        for idx in 0..res * res {
            let p = self.grid_point(res, idx);
            pts.set_column(idx, &p);
        }
        Trajectory::from_points(pts).expect("nonempty grid")
    }

    fn grid_point(&self, res: usize, idx: usize) -> DVector<f64> {
        let i = idx % res; // x
        let j = idx / res; // y
        let fx = i as f64 / (res - 1) as f64;
        let fy = j as f64 / (res - 1) as f64;
        DVector::from_vec(vec![
            self.domain.lower[0] + fx * (self.domain.upper[0] - self.domain.lower[0]),
            self.domain.lower[1] + fy * (self.domain.upper[1] - self.domain.lower[1]),
        ])
    }
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn to_js(e: salnx::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}
