//! Experiment logs: append-only per-iteration records with full replay
//! information, persisted as line-delimited JSON plus a flat CSV table.
//!
//! CSV columns (fixed order, one row per record):
//! `iter,strategy,eta_1..eta_d1,crit,xi_hat,unsafe,rmse,coverage,seed`
//! where `seed` is the Monte-Carlo seed of the stored safety estimate.
//! Optional fields serialize as empty cells. Floats are written with Rust's
//! shortest round-trip formatting, so loading a table reproduces every
//! numeric field bit-exactly.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::safety::SafetyEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Explore,
}

/// Stored form of a safety estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiRecord {
    pub p_hat: f64,
    pub n_samples: usize,
    pub std_err: f64,
    pub seed: u64,
}

impl From<&SafetyEstimate> for XiRecord {
    fn from(e: &SafetyEstimate) -> Self {
        XiRecord {
            p_hat: e.p_hat,
            n_samples: e.n_samples,
            std_err: e.std_err,
            seed: e.seed,
        }
    }
}

/// One executed trajectory: planning inputs, measurements and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based global index over initialization and exploration records.
    pub iter: usize,
    pub phase: Phase,
    pub strategy: String,
    pub eta: Vec<f64>,
    /// Embedded dimension of the planned trajectory.
    pub tau_dim: usize,
    /// Planned trajectory, column-major `tau_dim x m`.
    pub tau: Vec<f64>,
    /// Output observations over the executed prefix.
    pub outputs: Vec<f64>,
    /// Safety observations over the executed prefix.
    pub safety: Vec<f64>,
    pub criterion: Option<f64>,
    pub xi: Option<XiRecord>,
    pub proposal_seed: Option<u64>,
    /// False when the proposer fell back to re-issuing the current point.
    pub accepted: bool,
    pub unsafe_flag: bool,
    pub interrupted_at: Option<usize>,
    /// Determinant of the planned predictive covariance (model space).
    pub det_sigma: Option<f64>,
    /// `log |I + Sigma / noise|` over the executed prefix (model space).
    pub log_i_term: Option<f64>,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub wall_ms: f64,
}

impl IterationRecord {
    pub fn executed_points(&self) -> usize {
        self.outputs.len()
    }

    /// Planned trajectory as a matrix (columns are embedded points).
    pub fn trajectory(&self) -> Result<crate::trajectory::Trajectory> {
        if self.tau_dim == 0 || !self.tau.len().is_multiple_of(self.tau_dim) {
            return Err(Error::state(format!(
                "record {} has malformed trajectory data",
                self.iter
            )));
        }
        let m = self.tau.len() / self.tau_dim;
        crate::trajectory::Trajectory::from_points(nalgebra::DMatrix::from_column_slice(
            self.tau_dim,
            m,
            &self.tau,
        ))
    }
}

/// Log header: everything needed to replay the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub code_version: String,
    pub domain_lower: Vec<f64>,
    pub domain_upper: Vec<f64>,
    pub initial_safe_point: Vec<f64>,
}

/// Full run log: header plus append-only records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub header: LogHeader,
    pub records: Vec<IterationRecord>,
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt_f64(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::state(format!("bad float '{s}': {e}")))
    }
}

/// One row of the flat CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub iter: usize,
    pub strategy: String,
    pub eta: Vec<f64>,
    pub crit: Option<f64>,
    pub xi_hat: Option<f64>,
    pub unsafe_flag: bool,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub seed: Option<u64>,
}

impl ExperimentLog {
    pub fn d1(&self) -> usize {
        self.header.config.nx.d1
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["iter".to_string(), "strategy".to_string()];
        for j in 1..=self.d1() {
            cols.push(format!("eta_{j}"));
        }
        cols.extend(
            ["crit", "xi_hat", "unsafe", "rmse", "coverage", "seed"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.records
            .iter()
            .map(|r| CsvRow {
                iter: r.iter,
                strategy: r.strategy.clone(),
                eta: r.eta.clone(),
                crit: r.criterion,
                xi_hat: r.xi.as_ref().map(|x| x.p_hat),
                unsafe_flag: r.unsafe_flag,
                rmse: r.rmse,
                coverage: r.coverage,
                seed: r.xi.as_ref().map(|x| x.seed),
            })
            .collect()
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for row in self.csv_rows() {
            let mut cols = vec![row.iter.to_string(), row.strategy.clone()];
            for v in &row.eta {
                cols.push(v.to_string());
            }
            cols.push(fmt_opt_f64(row.crit));
            cols.push(fmt_opt_f64(row.xi_hat));
            cols.push(if row.unsafe_flag { "1" } else { "0" }.to_string());
            cols.push(fmt_opt_f64(row.rmse));
            cols.push(fmt_opt_f64(row.coverage));
            cols.push(row.seed.map(|s| s.to_string()).unwrap_or_default());
            writeln!(w, "{}", cols.join(","))?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::state(e.to_string()))
    }

    /// Parse rows written by [`ExperimentLog::write_csv`]. The embedded-point
    /// dimension is inferred from the header line.
    pub fn read_csv(r: &mut dyn BufRead) -> Result<Vec<CsvRow>> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::state("empty CSV"))??;
        let cols: Vec<&str> = header.split(',').collect();
        let d1 = cols.iter().filter(|c| c.starts_with("eta_")).count();
        if d1 == 0 || cols.len() != d1 + 8 {
            return Err(Error::state(format!("unrecognized CSV header '{header}'")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d1 + 8 {
                return Err(Error::state(format!(
                    "row has {} fields, expected {}",
                    f.len(),
                    d1 + 8
                )));
            }
            let mut eta = Vec::with_capacity(d1);
            for v in &f[2..2 + d1] {
                eta.push(
                    v.parse::<f64>()
                        .map_err(|e| Error::state(format!("bad eta '{v}': {e}")))?,
                );
            }
            rows.push(CsvRow {
                iter: f[0]
                    .parse()
                    .map_err(|e| Error::state(format!("bad iter '{}': {e}", f[0])))?,
                strategy: f[1].to_string(),
                eta,
                crit: parse_opt_f64(f[2 + d1])?,
                xi_hat: parse_opt_f64(f[3 + d1])?,
                unsafe_flag: f[4 + d1] == "1",
                rmse: parse_opt_f64(f[5 + d1])?,
                coverage: parse_opt_f64(f[6 + d1])?,
                seed: if f[7 + d1].is_empty() {
                    None
                } else {
                    Some(
                        f[7 + d1]
                            .parse()
                            .map_err(|e| Error::state(format!("bad seed: {e}")))?,
                    )
                },
            });
        }
        Ok(rows)
    }

    /// Line-delimited JSON: header line, then one line per record.
    pub fn write_jsonl(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(
            w,
            "{}",
            serde_json::to_string(&self.header).map_err(|e| Error::state(e.to_string()))?
        )?;
        for rec in &self.records {
            writeln!(
                w,
                "{}",
                serde_json::to_string(rec).map_err(|e| Error::state(e.to_string()))?
            )?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: &mut dyn BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::state("empty log file"))??;
        let header: LogHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::state(format!("bad log header: {e}")))?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::state(format!("bad log record: {e}")))?,
            );
        }
        Ok(ExperimentLog { header, records })
    }

    pub fn explore_records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Explore)
    }

    pub fn init_records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn sample_log() -> ExperimentLog {
        let config = ExperimentConfig::for_benchmark("exp2").unwrap();
        ExperimentLog {
            header: LogHeader {
                config,
                master_seed: 7,
                code_version: "test".into(),
                domain_lower: vec![-5.0, -5.0],
                domain_upper: vec![45.0, 45.0],
                initial_safe_point: vec![5.0, 5.0],
            },
            records: vec![
                IterationRecord {
                    iter: 1,
                    phase: Phase::Init,
                    strategy: "init".into(),
                    eta: vec![5.125, 4.875],
                    tau_dim: 4,
                    tau: vec![0.0; 20],
                    outputs: vec![1.0; 5],
                    safety: vec![0.9; 5],
                    criterion: None,
                    xi: None,
                    proposal_seed: None,
                    accepted: true,
                    unsafe_flag: false,
                    interrupted_at: None,
                    det_sigma: Some(0.12345678901234568),
                    log_i_term: Some(1.5),
                    rmse: None,
                    coverage: None,
                    wall_ms: 1.25,
                },
                IterationRecord {
                    iter: 2,
                    phase: Phase::Explore,
                    strategy: "sal".into(),
                    eta: vec![10.0 / 3.0, -1.0000000000000002],
                    tau_dim: 4,
                    tau: vec![0.5; 20],
                    outputs: vec![2.0; 5],
                    safety: vec![0.8, 0.7, 0.6, -0.1, -0.2],
                    criterion: Some(-3.2094820394823),
                    xi: Some(XiRecord {
                        p_hat: 0.997,
                        n_samples: 1000,
                        std_err: 0.0017,
                        seed: 42,
                    }),
                    proposal_seed: Some(99),
                    accepted: true,
                    unsafe_flag: true,
                    interrupted_at: Some(3),
                    det_sigma: Some(1e-12),
                    log_i_term: Some(0.25),
                    rmse: Some(123.456789),
                    coverage: Some(0.8125),
                    wall_ms: 2.5,
                },
            ],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let log = sample_log();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = ExperimentLog::read_jsonl(&mut buf.as_slice()).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn csv_round_trip_preserves_numeric_fields() {
        let log = sample_log();
        let text = log.csv_string().unwrap();
        let rows = ExperimentLog::read_csv(&mut text.as_bytes()).unwrap();
        assert_eq!(rows, log.csv_rows());
    }

    #[test]
    fn csv_header_lists_eta_per_dimension() {
        let log = sample_log();
        assert_eq!(
            log.csv_header(),
            "iter,strategy,eta_1,eta_2,crit,xi_hat,unsafe,rmse,coverage,seed"
        );
    }

    #[test]
    fn csv_is_deterministic() {
        let log = sample_log();
        assert_eq!(log.csv_string().unwrap(), log.csv_string().unwrap());
    }
}
