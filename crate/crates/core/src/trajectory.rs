//! Input embedding and ramp parametrization.
//!
//! A time-series model sees embedded points `x_k` stacking lagged values of
//! the manipulated variable `u` (and, with output feedback, lagged outputs).
//! A piecewise trajectory is one parametrized curve segment discretized into
//! `m` such points; here the segment is a linear ramp from the previous
//! endpoint to a candidate endpoint `eta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;

/// Input-structure configuration.
///
/// `lags[j]` lists the lag offsets of manipulated-variable dimension `j`
/// that enter the embedding (0 = current value). Contiguous lags `0..d2`
/// give the classic exogenous structure; sparse masks cover structures that
/// skip intermediate lags. `q` is the output-feedback depth (0 for a pure
/// exogenous model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NxConfig {
    pub d1: usize,
    pub lags: Vec<Vec<usize>>,
    pub q: usize,
    pub m: usize,
}

impl NxConfig {
    /// Contiguous lags `0..d2` on every input dimension.
    pub fn contiguous(d1: usize, d2: usize, q: usize, m: usize) -> Result<Self> {
        if d2 == 0 {
            return Err(Error::arg("history depth d2 must be at least 1"));
        }
        let cfg = NxConfig {
            d1,
            lags: vec![(0..d2).collect(); d1],
            q,
            m,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.m == 0 {
            return Err(Error::arg("d1 and m must be at least 1"));
        }
        if self.lags.len() != self.d1 {
            return Err(Error::arg(format!(
                "lag mask has {} rows for {} input dimensions",
                self.lags.len(),
                self.d1
            )));
        }
        for (j, ls) in self.lags.iter().enumerate() {
            if ls.is_empty() {
                return Err(Error::arg(format!("dimension {j} has an empty lag mask")));
            }
            if !ls.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::arg(format!(
                    "lag mask for dimension {j} must be strictly increasing"
                )));
            }
            if ls[0] != 0 {
                return Err(Error::arg(format!(
                    "lag mask for dimension {j} must include lag 0"
                )));
            }
        }
        Ok(())
    }

    /// Embedded input dimension: feedback slots plus one slot per (dim, lag).
    pub fn embedded_dim(&self) -> usize {
        self.q + self.lags.iter().map(|l| l.len()).sum::<usize>()
    }

    /// Deepest manipulated-variable lag used anywhere.
    pub fn max_lag(&self) -> usize {
        self.lags.iter().map(|l| *l.last().unwrap()).max().unwrap()
    }

    /// Slot order of the embedding: output feedback first (newest first),
    /// then manipulated lags, lag-major and newest first.
    fn input_slots(&self) -> Vec<(usize, usize)> {
        let mut slots = Vec::new();
        for lag in 0..=self.max_lag() {
            for (j, ls) in self.lags.iter().enumerate() {
                if ls.contains(&lag) {
                    slots.push((lag, j));
                }
            }
        }
        slots
    }
}

/// Endpoint of the next ramp in the manipulated-variable space.
#[derive(Debug, Clone, PartialEq)]
pub struct RampParam {
    pub eta: DVector<f64>,
}

impl RampParam {
    pub fn new(eta: DVector<f64>) -> Self {
        RampParam { eta }
    }
}

/// Executed manipulated-variable sequence; append-only, single writer.
///
/// The last stored point is the start point `u_0` of the next ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    points: Vec<Vec<f64>>,
}

impl History {
    /// Seed the history by replicating the initial point backwards `depth`
    /// times, so early embeddings are well-defined.
    pub fn seeded(initial: &DVector<f64>, depth: usize) -> Self {
        let p: Vec<f64> = initial.iter().copied().collect();
        History {
            points: vec![p; depth.max(1)],
        }
    }

    pub fn push(&mut self, u: &DVector<f64>) {
        self.points.push(u.iter().copied().collect());
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Start point of the next ramp (most recently executed input).
    pub fn last(&self) -> DVector<f64> {
        DVector::from_vec(self.points.last().expect("history is never empty").clone())
    }

    /// Value `offset` steps before the last point; offset 0 is the last point.
    pub fn before_last(&self, offset: usize) -> Result<DVector<f64>> {
        if offset + 1 > self.points.len() {
            return Err(Error::state(format!(
                "history holds {} points, needed offset {}",
                self.points.len(),
                offset
            )));
        }
        Ok(DVector::from_vec(
            self.points[self.points.len() - 1 - offset].clone(),
        ))
    }

    /// View of the first `len` executed points as a new history.
    pub fn prefix(&self, len: usize) -> History {
        History {
            points: self.points[..len.min(self.points.len())].to_vec(),
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// One piecewise input trajectory: a `d x m` matrix whose columns are the
/// embedded points `x_1 .. x_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: DMatrix<f64>,
}

impl Trajectory {
    pub fn from_points(points: DMatrix<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::arg("trajectory needs at least one point"));
        }
        Ok(Trajectory { points })
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn num_points(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, k: usize) -> DVector<f64> {
        self.points.column(k).into_owned()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Points as rows (the layout GP training data uses).
    pub fn to_rows(&self) -> DMatrix<f64> {
        self.points.transpose()
    }

    /// Trajectory over the first `count` points.
    pub fn head(&self, count: usize) -> Result<Trajectory> {
        if count == 0 || count > self.num_points() {
            return Err(Error::arg(format!(
                "cannot take {count} of {} points",
                self.num_points()
            )));
        }
        Ok(Trajectory {
            points: self.points.columns(0, count).into_owned(),
        })
    }
}

/// Planned manipulated-variable points of the ramp to `eta`:
/// `u_k = u_0 + (k/m)(eta - u_0)` for `k = 1..m`.
pub fn ramp_inputs(
    eta: &RampParam,
    history: &History,
    cfg: &NxConfig,
) -> Result<Vec<DVector<f64>>> {
    if eta.eta.len() != cfg.d1 {
        return Err(Error::dim(format!(
            "endpoint has dim {}, config wants {}",
            eta.eta.len(),
            cfg.d1
        )));
    }
    let u0 = history.last();
    let m = cfg.m as f64;
    Ok((1..=cfg.m)
        .map(|k| &u0 + (&eta.eta - &u0) * (k as f64 / m))
        .collect())
}

/// Embedded trajectory of the ramp to `eta`, given the execution history.
///
/// Slot `(lag l, dim j)` of column `k` is the ramp value
/// `u_0 + ((k-l)/m)(eta - u_0)` when `k-l >= 0`, and the historical value
/// `k-l` steps back otherwise. Requires `q = 0`; feedback slots come from
/// [`narx_embed_with_surrogate`].
pub fn ramp_points(eta: &RampParam, history: &History, cfg: &NxConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.q != 0 {
        return Err(Error::arg(
            "ramp_points embeds exogenous slots only (q must be 0)",
        ));
    }
    if eta.eta.len() != cfg.d1 {
        return Err(Error::dim(format!(
            "endpoint has dim {}, config wants {}",
            eta.eta.len(),
            cfg.d1
        )));
    }
    let need = cfg.max_lag();
    if history.len() < need.max(1) {
        return Err(Error::state(format!(
            "history holds {} points, ramp embedding needs {}",
            history.len(),
            need.max(1)
        )));
    }
    let u0 = history.last();
    let slots = cfg.input_slots();
    let m = cfg.m as f64;
    let mut points = DMatrix::zeros(cfg.embedded_dim(), cfg.m);
    for k in 1..=cfg.m {
        for (s, (lag, j)) in slots.iter().enumerate() {
            let rel = k as i64 - *lag as i64;
            let v = if rel >= 0 {
                u0[*j] + (rel as f64 / m) * (eta.eta[*j] - u0[*j])
            } else {
                history.before_last((-rel) as usize)?[*j]
            };
            points[(s, k - 1)] = v;
        }
    }
    Trajectory::from_points(points)
}

/// All valid lag embeddings of an executed input sequence, in order.
pub fn nx_embed(u_sequence: &[DVector<f64>], cfg: &NxConfig) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    if cfg.q != 0 {
        return Err(Error::arg(
            "nx_embed handles the pure exogenous case; use narx_embed_with_surrogate for q > 0",
        ));
    }
    let need = cfg.max_lag() + 1;
    if u_sequence.len() < need {
        return Err(Error::arg(format!(
            "sequence of {} points is too short for lag depth {}",
            u_sequence.len(),
            need
        )));
    }
    let slots = cfg.input_slots();
    let mut out = Vec::with_capacity(u_sequence.len() - need + 1);
    for k in (need - 1)..u_sequence.len() {
        let mut x = DVector::zeros(cfg.embedded_dim());
        for (s, (lag, j)) in slots.iter().enumerate() {
            x[s] = u_sequence[k - lag][*j];
        }
        out.push(x);
    }
    Ok(out)
}

/// Embeddings with `q` output-feedback slots filled by rolling the
/// regression model's predictive mean forward. Feedback values that predate
/// the first prediction are seeded with the model's prior mean.
pub fn narx_embed_with_surrogate(
    u_sequence: &[DVector<f64>],
    f_model: &GpModel,
    cfg: &NxConfig,
) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    if cfg.q == 0 {
        return Err(Error::arg("q = 0 has no feedback slots; use nx_embed"));
    }
    let need = cfg.max_lag() + 1;
    if u_sequence.len() < need {
        return Err(Error::arg(format!(
            "sequence of {} points is too short for lag depth {}",
            u_sequence.len(),
            need
        )));
    }
    if f_model.input_dim() != cfg.embedded_dim() {
        return Err(Error::dim(format!(
            "surrogate model dim {} vs embedded dim {}",
            f_model.input_dim(),
            cfg.embedded_dim()
        )));
    }
    let prior = f_model.stats().target_mean + f_model.stats().target_std * f_model.prior_mean();
    let slots = cfg.input_slots();
    let mut feedback: Vec<f64> = vec![prior; cfg.q]; // newest first
    let mut out = Vec::new();
    for k in (need - 1)..u_sequence.len() {
        let mut x = DVector::zeros(cfg.embedded_dim());
        for (i, fb) in feedback.iter().enumerate() {
            x[i] = *fb;
        }
        for (s, (lag, j)) in slots.iter().enumerate() {
            x[cfg.q + s] = u_sequence[k - lag][*j];
        }
        let tau = Trajectory::from_points(DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        let y_hat = f_model.predict_mean(&tau)?[0];
        feedback.rotate_right(1);
        feedback[0] = y_hat;
        out.push(x);
    }
    Ok(out)
}
