//! Per-iteration records shared by the nested solvers and the baselines,
//! their CSV form, and summary diagnostics (monotonicity, fitted rates).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Window used when fitting a local linear rate.
pub const RATE_WINDOW: usize = 20;
/// Slack allowed when checking that a cost sequence is non-decreasing.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    #[serde(with = "linalg::serde_rows")]
    pub l: Mat,
    #[serde(with = "linalg::serde_rows")]
    pub k: Mat,
    /// `C(K_t, L_t)`; for nested methods `K_t = K(L_t)`.
    pub cost: f64,
    /// Norm of the gradient mapping `(L_{t+1} - L_t) / (2η)`.
    pub grad_map_norm: f64,
    /// `‖∇_L C(K_t, L_t)‖_F`.
    pub grad_norm: f64,
    /// `‖∇_K C(K_t, L_t)‖_F`.
    pub grad_k_norm: f64,
    /// `λ_min(Q - L_tᵀRᵛL_t)`.
    pub lambda_min_qtilde: f64,
    pub proj_active: bool,
    pub rho: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OuterTrace {
    pub records: Vec<TraceRecord>,
    /// `σ_min(Σ0)`.
    pub mu: f64,
    /// `σ_min(W_L)` at the last iterate, when it was computed.
    pub nu: Option<f64>,
}

/// One CSV row; the column order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub t: usize,
    pub cost: f64,
    pub grad_map_norm: f64,
    pub grad_norm: f64,
    pub lambda_min_qtilde: f64,
    pub rho: f64,
    pub proj_active: bool,
}

pub const CSV_HEADER: &str = "t,cost,grad_map_norm,grad_norm,lambda_min_qtilde,rho,proj_active";

impl From<&TraceRecord> for CsvRow {
    fn from(r: &TraceRecord) -> Self {
        CsvRow {
            t: r.t,
            cost: r.cost,
            grad_map_norm: r.grad_map_norm,
            grad_norm: r.grad_norm,
            lambda_min_qtilde: r.lambda_min_qtilde,
            rho: r.rho,
            proj_active: r.proj_active,
        }
    }
}

impl OuterTrace {
    pub fn new(mu: f64) -> Self {
        OuterTrace {
            records: Vec::new(),
            mu,
            nu: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn mapping_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.grad_map_norm).collect()
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.records.iter().map(CsvRow::from).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv_rows(&self.csv_rows(), out)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Costs never decrease by more than [`MONOTONE_SLACK`].
    pub fn monotone_cost(&self) -> bool {
        self.records.windows(2).all(|w| w[1].cost >= w[0].cost - MONOTONE_SLACK)
    }

    /// Largest spectral radius seen along the run.
    pub fn max_rho(&self) -> f64 {
        self.records.iter().map(|r| r.rho).fold(0.0, f64::max)
    }

    pub fn any_projection(&self) -> bool {
        self.records.iter().any(|r| r.proj_active)
    }

    /// `Σ_t ‖G_t‖²`: bounded exactly when the running average of squared
    /// mapping norms decays like O(1/t).
    pub fn cesaro_constant(&self) -> f64 {
        self.records.iter().map(|r| r.grad_map_norm.powi(2)).sum()
    }

    /// Fitted slope of `ln ‖G_t‖` over the trailing [`RATE_WINDOW`] iterates.
    pub fn mapping_rate(&self) -> Option<f64> {
        trailing_log_slope(&self.mapping_norms(), RATE_WINDOW)
    }

    /// Fitted slope of `ln |C* - C_t|` over trailing iterates with gap ≤ 1e-3.
    pub fn cost_gap_rate(&self, value: f64) -> Option<f64> {
        let gaps: Vec<f64> = self
            .records
            .iter()
            .map(|r| (value - r.cost).abs())
            .skip_while(|g| *g > 1e-3)
            .collect();
        trailing_log_slope(&gaps, RATE_WINDOW)
    }

    pub fn summary(&self, converged: bool, oracle_value: Option<f64>) -> TraceSummary {
        let final_cost = self.last().map_or(f64::NAN, |r| r.cost);
        TraceSummary {
            converged,
            iters: self.records.len().saturating_sub(1),
            final_cost,
            gap_to_oracle: oracle_value.map(|v| (final_cost - v).abs()),
            fitted_local_rate: self.mapping_rate(),
            monotone_cost: self.monotone_cost(),
            max_rho: self.max_rho(),
            cesaro_constant: self.cesaro_constant(),
            mu: self.mu,
            nu: self.nu,
        }
    }
}

pub fn write_csv_rows<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected trace header {:?}", header.join(","))));
    }
    reader.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub converged: bool,
    pub iters: usize,
    pub final_cost: f64,
    pub gap_to_oracle: Option<f64>,
    /// Slope of `ln ‖G_t‖` per iteration over the trailing window.
    pub fitted_local_rate: Option<f64>,
    pub monotone_cost: bool,
    pub max_rho: f64,
    pub cesaro_constant: f64,
    pub mu: f64,
    pub nu: Option<f64>,
}

/// Least-squares slope of `ln v` against the index, over the last `window`
/// entries that are positive and finite. Needs at least three points.
pub fn trailing_log_slope(values: &[f64], window: usize) -> Option<f64> {
    let points: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite() && **v > 0.0)
        .map(|(i, v)| (i as f64, v.ln()))
        .collect();
    let tail = &points[points.len().saturating_sub(window)..];
    if tail.len() < 3 {
        return None;
    }
    let n = tail.len() as f64;
    let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = tail.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
