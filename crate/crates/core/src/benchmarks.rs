//! Synthetic ground-truth systems exposed through the system-adapter
//! interface, plus a pluggable adapter for user-defined systems.
//!
//! Benchmark "exp1" is a static 2-D problem (the embedded point is the
//! manipulated variable itself); "exp2" is a time-series problem whose
//! ground truth depends on the current and previous input through
//! difference quotients of a quadratic base function.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::learner::{BoxDomain, GroundTruth, StepResult, SystemAdapter};
use crate::safety::SafetyObservation;
use crate::trajectory::{nx_embed, History, NxConfig};

/// First benchmark's regression truth:
/// `(x1-2)^2 + (x1-2)(x2-2) + (x2-2)^2`.
pub fn exp1_f(x: &DVector<f64>) -> f64 {
    let a = x[0] - 2.0;
    let b = x[1] - 2.0;
    a * a + a * b + b * b
}

/// First benchmark's safety latent:
/// `(x1-5)^2 + (x1-5)(x2-5) + (x2-5)^2`.
pub fn exp1_g(x: &DVector<f64>) -> f64 {
    let a = x[0] - 5.0;
    let b = x[1] - 5.0;
    a * a + a * b + b * b
}

/// Noiseless safety indicator of the first benchmark: `-0.005 g(x) + 1`.
/// The safe set is the ellipse `g(x) <= 200`.
pub fn exp1_z_noiseless(x: &DVector<f64>) -> f64 {
    -0.005 * exp1_g(x) + 1.0
}

/// Second benchmark's base function
/// `(u1-2)^2 - (u1-2)(u2-2) + (u2-2)^2` (note the minus cross term).
pub fn exp2_f_base(u1: f64, u2: f64) -> f64 {
    let a = u1 - 2.0;
    let b = u2 - 2.0;
    a * a - a * b + b * b
}

/// Safety base function `(u1-5)^2 - (u1-5)(u2-5) + (u2-5)^2`.
pub fn exp2_g_base(u1: f64, u2: f64) -> f64 {
    let a = u1 - 5.0;
    let b = u2 - 5.0;
    a * a - a * b + b * b
}

/// Below this input separation a difference quotient switches to its
/// analytic limit (the base function's partial derivative); the raw formula
/// is undefined there and the optimizer does propose such points.
pub const QUOTIENT_EPS: f64 = 1e-9;

fn quotients(
    uk: (f64, f64),
    ukm1: (f64, f64),
    base: fn(f64, f64) -> f64,
    d1: fn(f64, f64) -> f64,
    d2: fn(f64, f64) -> f64,
) -> (f64, f64) {
    let fk = base(uk.0, uk.1);
    let q1 = if (uk.0 - ukm1.0).abs() < QUOTIENT_EPS {
        d1(uk.0, uk.1)
    } else {
        (fk - base(ukm1.0, uk.1)) / (uk.0 - ukm1.0)
    };
    let q2 = if (uk.1 - ukm1.1).abs() < QUOTIENT_EPS {
        d2(uk.0, uk.1)
    } else {
        (fk - base(uk.0, ukm1.1)) / (uk.1 - ukm1.1)
    };
    (q1, q2)
}

fn exp2_f_d1(u1: f64, u2: f64) -> f64 {
    2.0 * (u1 - 2.0) - (u2 - 2.0)
}

fn exp2_f_d2(u1: f64, u2: f64) -> f64 {
    -(u1 - 2.0) + 2.0 * (u2 - 2.0)
}

fn exp2_g_d1(u1: f64, u2: f64) -> f64 {
    2.0 * (u1 - 5.0) - (u2 - 5.0)
}

fn exp2_g_d2(u1: f64, u2: f64) -> f64 {
    -(u1 - 5.0) + 2.0 * (u2 - 5.0)
}

/// History-dependent regression truth of the second benchmark on the
/// embedded point `x = (u_k, u_{k-1})`: the base value plus two difference
/// quotients against the previous input.
pub fn exp2_f(x: &DVector<f64>) -> f64 {
    let uk = (x[0], x[1]);
    let ukm1 = (x[2], x[3]);
    let (q1, q2) = quotients(uk, ukm1, exp2_f_base, exp2_f_d1, exp2_f_d2);
    exp2_f_base(uk.0, uk.1) + q1 + q2
}

/// History-dependent safety latent: base value minus the absolute
/// difference quotients.
pub fn exp2_g(x: &DVector<f64>) -> f64 {
    let uk = (x[0], x[1]);
    let ukm1 = (x[2], x[3]);
    let (q1, q2) = quotients(uk, ukm1, exp2_g_base, exp2_g_d1, exp2_g_d2);
    exp2_g_base(uk.0, uk.1) - q1.abs() - q2.abs()
}

/// Noiseless safety indicator of the second benchmark.
pub fn exp2_z_noiseless(x: &DVector<f64>) -> f64 {
    -0.005 * exp2_g(x) + 1.0
}

type TruthFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// A synthetic system: ground-truth functions, a noise model and an
/// internal execution history, exposed through [`SystemAdapter`].
pub struct SyntheticSystem {
    name: String,
    nx: NxConfig,
    domain: BoxDomain,
    safe_point: DVector<f64>,
    f_true: TruthFn,
    z_true: TruthFn,
    noise_std_y: f64,
    noise_std_z: f64,
    noiseless: bool,
    /// Stop executing a trajectory at the first true safety violation, the
    /// way an instrumented rig would.
    truncate_on_violation: bool,
    history: History,
    rng: ChaCha12Rng,
}

impl SyntheticSystem {
    /// Fully custom system; the generic adapter for user-defined problems.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        name: &str,
        nx: NxConfig,
        domain: BoxDomain,
        safe_point: DVector<f64>,
        f_true: TruthFn,
        z_true: TruthFn,
        noise_std_y: f64,
        noise_std_z: f64,
        seed: u64,
    ) -> Result<Self> {
        nx.validate()?;
        if domain.dim() != nx.d1 || safe_point.len() != nx.d1 {
            return Err(Error::dim(format!(
                "domain dim {} / safe point dim {} vs d1 {}",
                domain.dim(),
                safe_point.len(),
                nx.d1
            )));
        }
        if nx.q != 0 {
            return Err(Error::arg(
                "synthetic adapters drive pure exogenous structures (q = 0)",
            ));
        }
        let history = History::seeded(&safe_point, nx.max_lag().max(1));
        Ok(SyntheticSystem {
            name: name.to_string(),
            nx,
            domain,
            safe_point,
            f_true,
            z_true,
            noise_std_y,
            noise_std_z,
            noiseless: false,
            truncate_on_violation: false,
            history,
            rng: ChaCha12Rng::seed_from_u64(seed),
        })
    }

    /// First benchmark: static 2-D quadratic truth, unit observation noise
    /// on both channels, elliptical safe region around (5, 5).
    pub fn exp1(seed: u64) -> Self {
        SyntheticSystem::custom(
            "exp1",
            NxConfig::contiguous(2, 1, 0, 5).expect("static config"),
            BoxDomain::cube(-5.0, 45.0, 2).expect("static domain"),
            DVector::from_vec(vec![5.0, 5.0]),
            Arc::new(exp1_f),
            Arc::new(exp1_z_noiseless),
            1.0,
            1.0,
            seed,
        )
        .expect("static benchmark definition")
    }

    /// Second benchmark: time-series truth over `x_k = (u_k, u_{k-1})`,
    /// unit output noise, 0.01 safety-indicator noise.
    pub fn exp2(seed: u64) -> Self {
        SyntheticSystem::custom(
            "exp2",
            NxConfig::contiguous(2, 2, 0, 5).expect("static config"),
            BoxDomain::cube(-5.0, 45.0, 2).expect("static domain"),
            DVector::from_vec(vec![5.0, 5.0]),
            Arc::new(exp2_f),
            Arc::new(exp2_z_noiseless),
            1.0,
            0.01,
            seed,
        )
        .expect("static benchmark definition")
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "exp1" => Ok(Self::exp1(seed)),
            "exp2" => Ok(Self::exp2(seed)),
            other => Err(Error::Config(format!("unknown benchmark '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nx(&self) -> &NxConfig {
        &self.nx
    }

    pub fn set_noiseless(&mut self, on: bool) {
        self.noiseless = on;
    }

    pub fn set_truncate_on_violation(&mut self, on: bool) {
        self.truncate_on_violation = on;
    }

    fn noise(&mut self, std: f64) -> f64 {
        // The stream advances even in noiseless mode so both modes visit
        // identical inputs under the same seed.
        let z: f64 = StandardNormal.sample(&mut self.rng);
        if self.noiseless {
            0.0
        } else {
            std * z
        }
    }

    /// Noisy output observation at an embedded point.
    pub fn observe_y(&mut self, x: &DVector<f64>) -> f64 {
        let noise = self.noise(self.noise_std_y);
        (self.f_true)(x) + noise
    }

    /// Noisy safety-indicator observation at an embedded point.
    pub fn observe_z(&mut self, x: &DVector<f64>) -> f64 {
        let noise = self.noise(self.noise_std_z);
        (self.z_true)(x) + noise
    }
}

impl GroundTruth for SyntheticSystem {
    fn f_noiseless(&self, x: &DVector<f64>) -> f64 {
        (self.f_true)(x)
    }

    fn z_noiseless(&self, x: &DVector<f64>) -> f64 {
        (self.z_true)(x)
    }
}

impl SystemAdapter for SyntheticSystem {
    fn domain(&self) -> BoxDomain {
        self.domain.clone()
    }

    fn initial_safe_point(&self) -> DVector<f64> {
        self.safe_point.clone()
    }

    fn step(&mut self, inputs: &[DVector<f64>]) -> Result<StepResult> {
        if inputs.is_empty() {
            return Err(Error::arg("step needs at least one input point"));
        }
        let depth = self.nx.max_lag() + 1;
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut safety = Vec::with_capacity(inputs.len());
        let mut violation_at = None;
        for (idx, u) in inputs.iter().enumerate() {
            if u.len() != self.nx.d1 {
                return Err(Error::dim(format!(
                    "input point of dim {} vs d1 {}",
                    u.len(),
                    self.nx.d1
                )));
            }
            self.history.push(u);
            // Embed the newest executed point with its lag context.
            let tail_len = depth.min(self.history.len());
            let mut seq: Vec<DVector<f64>> = Vec::with_capacity(tail_len);
            for off in (0..tail_len).rev() {
                seq.push(self.history.before_last(off)?);
            }
            let x = nx_embed(&seq, &self.nx)?
                .pop()
                .expect("tail has exactly one embedding");
            outputs.push(self.observe_y(&x));
            safety.push(self.observe_z(&x));
            // The system judges violations on the true indicator, not the
            // noisy measurement handed to the learner.
            let truth = SafetyObservation::new((self.z_true)(&x))?;
            if violation_at.is_none() && !truth.is_safe() {
                violation_at = Some(idx);
                if self.truncate_on_violation {
                    break;
                }
            }
        }
        Ok(StepResult {
            outputs,
            safety,
            violation_at,
        })
    }

    fn ground_truth(&self) -> Option<&dyn GroundTruth> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn v4(a: f64, b: f64, c: f64, d: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b, c, d])
    }

    #[test]
    fn exp1_f_minimizer_and_value() {
        assert_eq!(exp1_f(&v2(2.0, 2.0)), 0.0);
        assert_eq!(exp1_f(&v2(3.0, 3.0)), 3.0);
    }

    #[test]
    fn exp1_f_matches_formula_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = v2(rng.random_range(-5.0..45.0), rng.random_range(-5.0..45.0));
            let want = (x[0] - 2.0).powi(2) + (x[0] - 2.0) * (x[1] - 2.0) + (x[1] - 2.0).powi(2);
            assert!((exp1_f(&x) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn exp1_safe_center_and_boundary() {
        assert_eq!(exp1_z_noiseless(&v2(5.0, 5.0)), 1.0);
        // The zero contour is g = 200.
        let x = v2(5.0 + (200.0f64 / 3.0).sqrt(), 5.0 + (200.0f64 / 3.0).sqrt());
        assert!((exp1_g(&x) - 200.0).abs() < 1e-9);
        assert!(exp1_z_noiseless(&x).abs() < 1e-11);
    }

    #[test]
    fn exp1_safe_set_matches_closed_form_on_grid() {
        // Convex quadratic: membership test against g <= 200 everywhere.
        for i in 0..100 {
            for j in 0..100 {
                let x = v2(-5.0 + 0.5 * i as f64, -5.0 + 0.5 * j as f64);
                assert_eq!(exp1_z_noiseless(&x) >= 0.0, exp1_g(&x) <= 200.0);
            }
        }
    }

    #[test]
    fn exp2_f_hand_computed_point() {
        // u_k = (3,3), u_{k-1} = (2,2): base 1, both quotients 0.
        let x = v4(3.0, 3.0, 2.0, 2.0);
        assert!((exp2_f(&x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp2_f_limit_matches_partial_derivatives() {
        let u = (7.0, -1.5);
        let want = exp2_f_base(u.0, u.1) + exp2_f_d1(u.0, u.1) + exp2_f_d2(u.0, u.1);
        // Straddle the threshold: analytic branch and shrinking h agree.
        let exact = exp2_f(&v4(u.0, u.1, u.0, u.1));
        assert!((exact - want).abs() < 1e-12);
        let mut h = 1e-3;
        for _ in 0..3 {
            let v = exp2_f(&v4(u.0, u.1, u.0 - h, u.1 - h));
            assert!((v - want).abs() < 10.0 * h, "h={h}: {v} vs {want}");
            h *= 0.1;
        }
    }

    #[test]
    fn exp2_f_matches_formula_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = v4(
                rng.random_range(-5.0..45.0),
                rng.random_range(-5.0..45.0),
                rng.random_range(-5.0..45.0),
                rng.random_range(-5.0..45.0),
            );
            let base = |u1: f64, u2: f64| {
                (u1 - 2.0).powi(2) - (u1 - 2.0) * (u2 - 2.0) + (u2 - 2.0).powi(2)
            };
            let want = base(x[0], x[1])
                + (base(x[0], x[1]) - base(x[2], x[1])) / (x[0] - x[2])
                + (base(x[0], x[1]) - base(x[0], x[3])) / (x[1] - x[3]);
            assert!((exp2_f(&x) - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn exp2_z_hand_computed_point() {
        // u_k = (5,5), u_{k-1} = (4,4): base 0, |quotients| both 1,
        // so g = -2 and z = 1.01.
        let x = v4(5.0, 5.0, 4.0, 4.0);
        assert!((exp2_g(&x) - (-2.0)).abs() < 1e-12);
        assert!((exp2_z_noiseless(&x) - 1.01).abs() < 1e-12);
    }

    #[test]
    fn exp2_g_matches_formula_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = v4(
                rng.random_range(-5.0..45.0),
                rng.random_range(-5.0..45.0),
                rng.random_range(-5.0..45.0),
                rng.random_range(-5.0..45.0),
            );
            let base = |u1: f64, u2: f64| {
                (u1 - 5.0).powi(2) - (u1 - 5.0) * (u2 - 5.0) + (u2 - 5.0).powi(2)
            };
            let want = base(x[0], x[1])
                - ((base(x[0], x[1]) - base(x[2], x[1])) / (x[0] - x[2])).abs()
                - ((base(x[0], x[1]) - base(x[0], x[3])) / (x[1] - x[3])).abs();
            assert!((exp2_g(&x) - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn noiseless_mode_returns_truth_exactly() {
        let mut sys = SyntheticSystem::exp1(9);
        sys.set_noiseless(true);
        let x = v2(4.0, 6.0);
        assert_eq!(sys.observe_y(&x), exp1_f(&x));
        assert_eq!(sys.observe_z(&x), exp1_z_noiseless(&x));
    }

    #[test]
    fn observations_reproducible_under_seed() {
        let x = v2(1.0, 2.0);
        let mut a = SyntheticSystem::exp1(7);
        let mut b = SyntheticSystem::exp1(7);
        for _ in 0..5 {
            assert_eq!(a.observe_y(&x), b.observe_y(&x));
            assert_eq!(a.observe_z(&x), b.observe_z(&x));
        }
    }

    #[test]
    fn observation_noise_has_configured_scale() {
        let mut sys = SyntheticSystem::exp1(11);
        let x = v2(3.0, 3.0);
        let n = 100_000;
        let mean = (0..n).map(|_| sys.observe_y(&x)).sum::<f64>() / n as f64;
        // Unit noise: the sample mean of 1e5 draws is within ~0.02.
        assert!((mean - exp1_f(&x)).abs() < 0.02, "sample mean {mean}");
    }

    #[test]
    fn exp2_safety_noise_is_hundred_times_smaller() {
        let mut sys = SyntheticSystem::exp2(13);
        let x = v4(6.0, 6.0, 5.0, 5.0);
        let truth = exp2_z_noiseless(&x);
        let n = 50_000;
        let var = (0..n)
            .map(|_| (sys.observe_z(&x) - truth).powi(2))
            .sum::<f64>()
            / n as f64;
        // Configured standard deviation is 0.01 (variance 1e-4).
        assert!((var - 1e-4).abs() < 2e-5, "sample variance {var}");
    }

    #[test]
    fn step_reports_first_violation_without_truncation() {
        let mut sys = SyntheticSystem::exp1(4);
        sys.set_noiseless(true);
        // March straight out of the safe ellipse.
        let inputs: Vec<DVector<f64>> = (1..=5).map(|k| v2(5.0 + 8.0 * k as f64, 5.0)).collect();
        let r = sys.step(&inputs).unwrap();
        assert_eq!(r.outputs.len(), 5);
        let first_bad = inputs
            .iter()
            .position(|u| exp1_z_noiseless(u) < 0.0)
            .unwrap();
        assert_eq!(r.violation_at, Some(first_bad));
    }

    #[test]
    fn step_truncates_when_configured() {
        let mut sys = SyntheticSystem::exp1(4);
        sys.set_noiseless(true);
        sys.set_truncate_on_violation(true);
        let inputs: Vec<DVector<f64>> = (1..=5).map(|k| v2(5.0 + 8.0 * k as f64, 5.0)).collect();
        let r = sys.step(&inputs).unwrap();
        let first_bad = inputs
            .iter()
            .position(|u| exp1_z_noiseless(u) < 0.0)
            .unwrap();
        assert_eq!(r.violation_at, Some(first_bad));
        assert_eq!(r.outputs.len(), first_bad + 1);
        assert_eq!(r.safety.len(), first_bad + 1);
    }

    #[test]
    fn exp2_step_embeds_with_previous_input() {
        let mut sys = SyntheticSystem::exp2(5);
        sys.set_noiseless(true);
        let inputs = vec![v2(6.0, 6.0), v2(7.0, 7.0)];
        let r = sys.step(&inputs).unwrap();
        // First point pairs with the seeded safe point (5,5), second with
        // the first input.
        let x1 = v4(6.0, 6.0, 5.0, 5.0);
        let x2 = v4(7.0, 7.0, 6.0, 6.0);
        assert!((r.outputs[0] - exp2_f(&x1)).abs() < 1e-12);
        assert!((r.outputs[1] - exp2_f(&x2)).abs() < 1e-12);
    }
}
