//! Consistency checks tying a logged run back to the quantities the
//! analysis reasons about: the dual-route mutual-information identity, the
//! per-iteration and cumulative determinant bounds with their explicit
//! constants, and the decay / greedy-dominance behavior of the determinant
//! criterion.
//!
//! All checks replay the run from its log: models are rebuilt block by
//! block with the logged data, so every stored per-iteration quantity can be
//! recomputed independently and cross-checked. Replay requires fixed
//! hyperparameters (with training enabled the kernel changes across
//! iterations and the identities do not apply).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::HyperMode;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::learner::{criterion_value, uniform_start_points, BoxDomain};
use crate::log::{ExperimentLog, IterationRecord, Phase};
use crate::safety::{is_safe, xi_mc_with_draws, NormalDraws};
use crate::trajectory::{ramp_points, History, RampParam, Trajectory};

/// One named pass/fail outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Mutual information computed two independent ways.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutualInfoEntry {
    /// `1/2 sum_i log |I + Sigma_{i-1}(tau_i) / noise|` from the stored
    /// per-iteration terms.
    pub from_terms: f64,
    /// `1/2 (log |K + noise I| - n log noise)` on the full kernel matrix.
    pub from_kernel: f64,
    pub relative_gap: f64,
    /// Largest absolute difference between a stored log term and its
    /// replayed recomputation.
    pub max_term_mismatch: f64,
}

/// Determinant bounds with their explicit constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetBoundsEntry {
    /// `sigma_f^{2m} / log(1 + noise^{-m} sigma_f^{2m})` at the nominal
    /// block size.
    pub c1: f64,
    /// `C = 2 C1`.
    pub c: f64,
    pub effective_noise: f64,
    /// Minimum over iterations of `C1 log(1 + det(Sigma/noise)) - det Sigma`.
    pub a3_min_margin: f64,
    /// Minimum over prefixes of `C I_n - sum_i det Sigma_i`.
    pub a4_min_margin: f64,
    pub n_checked: usize,
}

/// Decay diagnostics of the determinant criterion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayEntry {
    /// Running average of `det Sigma_{i-1}(tau_i)` over exploration
    /// iterations.
    pub running_avg: Vec<f64>,
    /// `running_avg[99] / running_avg[9]` when the run is long enough.
    pub ratio_100_over_10: Option<f64>,
    /// Minimum of `criterion(chosen) - criterion(alternative)` over all
    /// feasible same-start alternatives.
    pub dominance_min_margin: f64,
    pub alternatives_checked: usize,
    /// Largest absolute difference between a logged criterion value and its
    /// replayed recomputation.
    pub max_criterion_mismatch: f64,
}

/// Full theory report for one logged run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub mutual_info: MutualInfoEntry,
    pub det_bounds: DetBoundsEntry,
    pub decay: DecayEntry,
    pub signal_variance: f64,
    pub checks: Vec<TheoryCheck>,
}

impl TheoryReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn domain_from_log(log: &ExperimentLog) -> Result<BoxDomain> {
    BoxDomain::new(
        DVector::from_vec(log.header.domain_lower.clone()),
        DVector::from_vec(log.header.domain_upper.clone()),
    )
}

/// Replayed model states: `visit(record, f_before, g_before, history_before)`
/// runs for every record with the models as they were before that block was
/// added. Returns the final regression model.
pub fn replay<F>(log: &ExperimentLog, mut visit: F) -> Result<GpModel>
where
    F: FnMut(&IterationRecord, &GpModel, &GpModel, &History) -> Result<()>,
{
    let config = &log.header.config;
    if !matches!(config.hypers, HyperMode::Fixed { .. }) {
        return Err(Error::state("theory replay requires fixed hyperparameters"));
    }
    let domain = domain_from_log(log)?;
    let nx = &config.nx;
    let input_stats = domain.input_standardizer(nx);
    let safe_point = DVector::from_vec(log.header.initial_safe_point.clone());

    // Reassemble the raw dataset in execution order.
    let mut blocks: Vec<(Trajectory, DVector<f64>, DVector<f64>)> = Vec::new();
    for rec in &log.records {
        let tau = rec.trajectory()?;
        let executed = rec.executed_points().min(tau.num_points()).max(1);
        blocks.push((
            tau.head(executed)?,
            DVector::from_vec(rec.outputs.clone()),
            DVector::from_vec(rec.safety.clone()),
        ));
    }
    let n_init = log.init_records().count();
    let data = crate::learner::replay_dataset(blocks, n_init);
    let settled = crate::learner::fit_models_for_replay(&data, config, &input_stats)?;

    let mut f = GpModel::empty_standardized(
        settled.0.kernel().clone(),
        settled.0.noise_variance(),
        settled.0.prior_mean(),
        settled.0.stats().clone(),
    )?;
    let mut g = GpModel::empty_standardized(
        settled.1.kernel().clone(),
        settled.1.noise_variance(),
        settled.1.prior_mean(),
        settled.1.stats().clone(),
    )?;
    let mut history = History::seeded(&safe_point, nx.max_lag().max(1));

    for (rec, (tau_exec, ys, zs)) in log.records.iter().zip(data.blocks.iter()) {
        visit(rec, &f, &g, &history)?;
        f = f.block_update(tau_exec, ys)?;
        g = g.block_update(tau_exec, zs)?;
        // Executed manipulated inputs are the newest-lag slots of the
        // executed trajectory columns.
        for k in 0..tau_exec.num_points() {
            let col = tau_exec.point(k);
            let mut u = DVector::zeros(nx.d1);
            for j in 0..nx.d1 {
                u[j] = col[nx.q + j];
            }
            history.push(&u);
        }
    }
    Ok(f)
}

/// Per-record determinant and mutual-information log term over the executed
/// prefix, recomputed from a replayed model state.
fn replay_terms(f: &GpModel, rec: &IterationRecord) -> Result<(f64, f64, f64)> {
    let tau = rec.trajectory()?;
    let pred = f.predict_internal(&tau)?;
    let executed = rec.executed_points().min(tau.num_points()).max(1);
    let noise = f.effective_noise();
    let det_full = pred.cov.clone().determinant();
    let sub = pred.cov.view((0, 0), (executed, executed)).into_owned();
    let det_exec = sub.determinant();
    let log_term = (DMatrix::identity(executed, executed) + sub / noise)
        .determinant()
        .ln();
    Ok((det_full, det_exec, log_term))
}

/// Dual-route mutual information: the sum of stored per-iteration log terms
/// against an independent evaluation on the full kernel matrix of the final
/// replayed model.
pub fn theory_mutual_info(log: &ExperimentLog) -> Result<MutualInfoEntry> {
    let mut from_terms = 0.0;
    let mut max_term_mismatch: f64 = 0.0;
    let mut recomputed = Vec::new();
    let final_f = replay(log, |rec, f, _g, _h| {
        let (_, _, log_term) = replay_terms(f, rec)?;
        recomputed.push(log_term);
        Ok(())
    })?;
    for (rec, redo) in log.records.iter().zip(&recomputed) {
        let stored = rec
            .log_i_term
            .ok_or_else(|| Error::state(format!("record {} is missing its log term", rec.iter)))?;
        max_term_mismatch = max_term_mismatch.max((stored - redo).abs());
        from_terms += 0.5 * stored;
    }
    let n_pts = final_f.num_points() as f64;
    let noise = final_f.effective_noise();
    let from_kernel = 0.5 * (final_f.chol().logdet() - n_pts * noise.ln());
    let scale = from_terms.abs().max(from_kernel.abs()).max(1e-300);
    Ok(MutualInfoEntry {
        from_terms,
        from_kernel,
        relative_gap: (from_terms - from_kernel).abs() / scale,
        max_term_mismatch,
    })
}

fn c1_constant(signal_variance: f64, noise: f64, m: usize) -> f64 {
    let sf2m = signal_variance.powi(m as i32);
    let ratio = sf2m / noise.powi(m as i32);
    sf2m / (1.0 + ratio).ln()
}

/// Verify the per-iteration determinant bound and the cumulative bound
/// against the mutual information, reporting the worst margins.
pub fn theory_det_bounds(log: &ExperimentLog) -> Result<DetBoundsEntry> {
    let mut entries: Vec<(usize, f64, f64)> = Vec::new(); // (block size, det, log term)
    let mut noise = 0.0;
    let mut signal = 0.0;
    replay(log, |rec, f, _g, _h| {
        let (_, det_exec, log_term) = replay_terms(f, rec)?;
        entries.push((rec.executed_points().max(1), det_exec, log_term));
        noise = f.effective_noise();
        signal = f.kernel().signal_variance;
        Ok(())
    })?;

    let mut a3_min: f64 = f64::INFINITY;
    let mut a4_min: f64 = f64::INFINITY;
    let mut det_sum = 0.0;
    let mut info = 0.0;
    for (m_i, det, log_term) in &entries {
        let c1_i = c1_constant(signal, noise, *m_i);
        let scaled = det / noise.powi(*m_i as i32);
        let a3 = c1_i * (1.0 + scaled).ln() - det;
        a3_min = a3_min.min(a3);
        det_sum += det;
        info += 0.5 * log_term;
        // The cumulative bound must hold at every prefix.
        let c_i = 2.0 * c1_i;
        a4_min = a4_min.min(c_i * info - det_sum);
    }
    let nominal_m = log.header.config.nx.m;
    let c1 = c1_constant(signal, noise, nominal_m);
    Ok(DetBoundsEntry {
        c1,
        c: 2.0 * c1,
        effective_noise: noise,
        a3_min_margin: a3_min,
        a4_min_margin: a4_min,
        n_checked: entries.len(),
    })
}

/// Decay of the determinant criterion plus greedy same-start dominance: the
/// chosen endpoint's criterion must dominate the seeded uniform alternatives
/// that the proposal itself evaluated (replayed with the same models,
/// history and Monte-Carlo draws).
pub fn theory_decay(log: &ExperimentLog) -> Result<DecayEntry> {
    let domain = domain_from_log(log)?;
    let config = &log.header.config;
    let nx = &config.nx;
    let n_uniform = config.n_restarts.div_ceil(2);
    let alpha = config.resolve_alpha()?;
    let unconstrained = alpha >= 1.0;

    let mut dets: Vec<f64> = Vec::new();
    let mut dominance_min: f64 = f64::INFINITY;
    let mut alternatives = 0usize;
    let mut max_crit_mismatch: f64 = 0.0;

    replay(log, |rec, f, g, history| {
        if rec.phase != Phase::Explore {
            return Ok(());
        }
        let (det_full, _, _) = replay_terms(f, rec)?;
        dets.push(det_full);

        let (Some(stored_crit), Some(proposal_seed)) = (rec.criterion, rec.proposal_seed) else {
            return Ok(());
        };
        // Recompute the chosen candidate's criterion from the replayed state.
        let tau = rec.trajectory()?;
        let pred = f.predict_internal(&tau)?;
        let crit = criterion_value(&pred.cov, config.criterion)?;
        if stored_crit.is_finite() || crit.is_finite() {
            max_crit_mismatch = max_crit_mismatch.max((crit - stored_crit).abs());
        }
        if rec.strategy != "sal" || !rec.accepted {
            return Ok(());
        }
        let draws = rec
            .xi
            .as_ref()
            .map(|xi| NormalDraws::generate(xi.n_samples, nx.m, xi.seed));
        for eta in uniform_start_points(&domain, n_uniform, proposal_seed) {
            let alt_tau = ramp_points(&RampParam::new(eta), history, nx)?;
            let feasible = if unconstrained {
                true
            } else if let Some(d) = &draws {
                let g_pred = g.predict(&alt_tau)?;
                is_safe(&xi_mc_with_draws(&g_pred.mean, &g_pred.cov, d)?, alpha)
            } else {
                true
            };
            if !feasible {
                continue;
            }
            let alt_pred = f.predict_internal(&alt_tau)?;
            let alt_crit = criterion_value(&alt_pred.cov, config.criterion)?;
            alternatives += 1;
            if alt_crit.is_finite() || stored_crit.is_finite() {
                dominance_min = dominance_min.min(stored_crit - alt_crit);
            }
        }
        Ok(())
    })?;

    let running_avg = running_average(&dets);
    let ratio_100_over_10 = if running_avg.len() >= 100 && running_avg[9] > 0.0 {
        Some(running_avg[99] / running_avg[9])
    } else {
        None
    };
    Ok(DecayEntry {
        running_avg,
        ratio_100_over_10,
        dominance_min_margin: if alternatives == 0 {
            f64::INFINITY
        } else {
            dominance_min
        },
        alternatives_checked: alternatives,
        max_criterion_mismatch: max_crit_mismatch,
    })
}

/// Replay the stored Monte-Carlo decisions of accepted constrained
/// proposals and return the worst `p_hat - (1 - alpha)` margin; accepted
/// endpoints must reproduce their stored estimate exactly.
pub fn replay_feasibility(log: &ExperimentLog) -> Result<f64> {
    let config = &log.header.config;
    let alpha = config.resolve_alpha()?;
    let nx = &config.nx;
    let mut min_margin = f64::INFINITY;
    replay(log, |rec, _f, g, _h| {
        if rec.phase != Phase::Explore || !rec.accepted {
            return Ok(());
        }
        let Some(xi) = &rec.xi else { return Ok(()) };
        let tau = rec.trajectory()?;
        let draws = NormalDraws::generate(xi.n_samples, nx.m, xi.seed);
        let g_pred = g.predict(&tau)?;
        let redo = xi_mc_with_draws(&g_pred.mean, &g_pred.cov, &draws)?;
        if (redo.p_hat - xi.p_hat).abs() > 1e-12 {
            return Err(Error::state(format!(
                "record {}: replayed p_hat {} vs stored {}",
                rec.iter, redo.p_hat, xi.p_hat
            )));
        }
        min_margin = min_margin.min(redo.p_hat - (1.0 - alpha));
        Ok(())
    })?;
    Ok(min_margin)
}

/// Run every check on a logged run and bundle the outcomes.
pub fn theory_report(log: &ExperimentLog) -> Result<TheoryReport> {
    let mutual_info = theory_mutual_info(log)?;
    let det_bounds = theory_det_bounds(log)?;
    let decay = theory_decay(log)?;
    let signal_variance = match &log.header.config.hypers {
        HyperMode::Fixed { f, .. } => f.signal_variance,
        HyperMode::Trained { .. } => f64::NAN,
    };

    let mut checks = Vec::new();
    checks.push(TheoryCheck {
        name: "mutual_info_dual_route".into(),
        pass: mutual_info.relative_gap <= 1e-7,
        detail: format!(
            "terms {:.9} vs kernel {:.9} (relative gap {:.3e})",
            mutual_info.from_terms, mutual_info.from_kernel, mutual_info.relative_gap
        ),
    });
    checks.push(TheoryCheck {
        name: "stored_terms_replay".into(),
        pass: mutual_info.max_term_mismatch <= 1e-9,
        detail: format!(
            "max stored-vs-replayed gap {:.3e}",
            mutual_info.max_term_mismatch
        ),
    });
    checks.push(TheoryCheck {
        name: "kernel_bounded_by_one".into(),
        pass: signal_variance <= 1.0 + 1e-12,
        detail: format!("signal variance {signal_variance}"),
    });
    checks.push(TheoryCheck {
        name: "det_bound_per_iteration".into(),
        pass: det_bounds.a3_min_margin >= -1e-8,
        detail: format!(
            "min margin {:.3e} over {} blocks (C1 = {:.6})",
            det_bounds.a3_min_margin, det_bounds.n_checked, det_bounds.c1
        ),
    });
    checks.push(TheoryCheck {
        name: "det_sum_bounded_by_information".into(),
        pass: det_bounds.a4_min_margin >= -1e-8,
        detail: format!(
            "min prefix margin {:.3e} (C = {:.6})",
            det_bounds.a4_min_margin, det_bounds.c
        ),
    });
    checks.push(TheoryCheck {
        name: "greedy_same_start_dominance".into(),
        pass: decay.dominance_min_margin >= -1e-8,
        detail: format!(
            "min margin {:.3e} over {} alternatives",
            decay.dominance_min_margin, decay.alternatives_checked
        ),
    });
    checks.push(TheoryCheck {
        name: "criterion_replay".into(),
        pass: decay.max_criterion_mismatch <= 1e-9,
        detail: format!(
            "max logged-vs-replayed gap {:.3e}",
            decay.max_criterion_mismatch
        ),
    });
    if let Some(r) = decay.ratio_100_over_10 {
        checks.push(TheoryCheck {
            name: "variance_decay_ratio".into(),
            pass: r < 0.3,
            detail: format!("running average ratio avg(100)/avg(10) = {r:.4}"),
        });
    }

    Ok(TheoryReport {
        mutual_info,
        det_bounds,
        decay,
        signal_variance,
        checks,
    })
}

/// Running mean of a series: entry `n` averages the first `n + 1` values.
pub fn running_average(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        out.push(acc / (i + 1) as f64);
    }
    out
}

/// Convenience: run a fresh experiment on a benchmark and return its log
/// (used by the CLI and tests).
pub fn run_benchmark(
    config: &crate::config::ExperimentConfig,
    master_seed: u64,
) -> Result<ExperimentLog> {
    let mut system = crate::benchmarks::SyntheticSystem::by_name(
        &config.benchmark,
        crate::learner::derive_seed(master_seed, crate::learner::STREAM_ADAPTER, 0),
    )?;
    system.set_noiseless(config.noiseless);
    crate::learner::run_experiment(&mut system, config, master_seed)
}
