//! Energy, time-to-accuracy and energy-to-accuracy over exported records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::associate::{
    associate_rounds, AssociateError, Association, Bucket, StageWindow,
};
use crate::metrics::records::{MetricSample, StageKind};
use crate::metrics::store::JobRecords;
use crate::strategy::RoundRecord;

pub const SUMMARY_HEADER: [&str; 8] = [
    "job_id",
    "algorithm",
    "model",
    "fraction_fit",
    "max_val_acc",
    "tta_s",
    "eta_j",
    "edp_js",
];

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("client {0} has no samples inside active stages")]
    NoActiveSamples(u32),
    #[error("no idle power known for client {0}")]
    MissingIdle(u32),
    #[error("num_batches must be >= 1")]
    ZeroBatches,
    #[error("{what} must be finite and non-negative, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error(transparent)]
    Associate(#[from] AssociateError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which stages count as active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveStages {
    #[default]
    FitAndEval,
    FitOnly,
}

impl ActiveStages {
    pub fn includes(&self, kind: StageKind) -> bool {
        match self {
            ActiveStages::FitAndEval => true,
            ActiveStages::FitOnly => kind == StageKind::Fit,
        }
    }
}

/// Where idle power comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum IdleSource {
    /// Known per client (from its device profile).
    Given(BTreeMap<u32, f64>),
    /// Mean of the client's samples outside every stage.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub client_id: u32,
    pub idle_power_w: f64,
    /// Mean measured draw during active stages minus idle.
    pub mean_active_power_w: f64,
    pub active_time_s: f64,
    pub energy_j: f64,
    /// Set when the measured mean fell below idle and was clamped to zero.
    pub clamped: bool,
}

/// `max(0, measured_mean - idle)` and whether clamping happened.
pub fn active_power(measured_mean_w: f64, idle_power_w: f64) -> (f64, bool) {
    let p = measured_mean_w - idle_power_w;
    if p < 0.0 {
        (0.0, true)
    } else {
        (p, false)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-client energy: active power times total active stage time.
pub fn compute_energy(
    samples: &[MetricSample],
    assoc: &Association,
    idle: &IdleSource,
    stages: ActiveStages,
) -> Result<Vec<EnergyReport>, AnalysisError> {
    let mut clients: BTreeMap<u32, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for w in &assoc.windows {
        if stages.includes(w.kind) {
            clients.entry(w.client_id).or_default().2 += w.duration_s();
        }
    }
    for (s, b) in samples.iter().zip(&assoc.buckets) {
        let entry = clients.entry(s.client_id).or_default();
        match b {
            Bucket::Stage { kind, .. } if stages.includes(*kind) => entry.0.push(s.power_w),
            Bucket::Stage { .. } => {}
            Bucket::Idle { .. } => entry.1.push(s.power_w),
        }
    }
    let mut out = Vec::with_capacity(clients.len());
    for (client_id, (active, idle_samples, active_time_s)) in clients {
        if active_time_s == 0.0 && active.is_empty() {
            continue;
        }
        let measured =
            mean(active.iter().copied()).ok_or(AnalysisError::NoActiveSamples(client_id))?;
        let idle_power_w = match idle {
            IdleSource::Given(m) => *m
                .get(&client_id)
                .ok_or(AnalysisError::MissingIdle(client_id))?,
            IdleSource::Measured => {
                mean(idle_samples.iter().copied()).ok_or(AnalysisError::MissingIdle(client_id))?
            }
        };
        let (p, clamped) = active_power(measured, idle_power_w);
        if clamped {
            log::warn!("client {client_id}: active power below idle, clamped to 0");
        }
        out.push(EnergyReport {
            client_id,
            idle_power_w,
            mean_active_power_w: p,
            active_time_s,
            energy_j: p * active_time_s,
            clamped,
        });
    }
    Ok(out)
}

/// First round reaching `target`.
pub fn first_round_reaching(rounds: &[RoundRecord], target: f64) -> Option<&RoundRecord> {
    let mut ordered: Vec<&RoundRecord> = rounds.iter().collect();
    ordered.sort_by_key(|r| r.round);
    ordered.into_iter().find(|r| r.mean_val_accuracy >= target)
}

/// Time from job start to the end of the first round reaching `target`.
pub fn compute_tta(rounds: &[RoundRecord], target: f64) -> Option<f64> {
    let start = rounds
        .iter()
        .map(|r| r.round_start_s)
        .fold(f64::INFINITY, f64::min);
    first_round_reaching(rounds, target).map(|r| r.round_end_s - start)
}

/// Energy of all clients over active stages up to and including the first
/// round reaching `target`.
pub fn compute_eta(
    reports: &[EnergyReport],
    windows: &[StageWindow],
    rounds: &[RoundRecord],
    target: f64,
    stages: ActiveStages,
) -> Option<f64> {
    let last = first_round_reaching(rounds, target)?.round;
    let power: BTreeMap<u32, f64> = reports
        .iter()
        .map(|r| (r.client_id, r.mean_active_power_w))
        .collect();
    Some(
        windows
            .iter()
            .filter(|w| w.round <= last && stages.includes(w.kind))
            .map(|w| power.get(&w.client_id).copied().unwrap_or(0.0) * w.duration_s())
            .sum(),
    )
}

pub fn compute_edp(time_s: f64, energy_j: f64) -> Result<f64, AnalysisError> {
    for (what, value) in [("time", time_s), ("energy", energy_j)] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(AnalysisError::Negative { what, value });
        }
    }
    Ok(time_s * energy_j)
}

/// Fit time and energy of one client in one round.
pub fn round_fit_totals(report: &EnergyReport, windows: &[StageWindow], round: u32) -> (f64, f64) {
    let time: f64 = windows
        .iter()
        .filter(|w| w.client_id == report.client_id && w.round == round && w.kind == StageKind::Fit)
        .map(StageWindow::duration_s)
        .sum();
    (time, time * report.mean_active_power_w)
}

/// `(time per batch, energy per batch)`.
pub fn per_batch_stats(
    fit_time_s: f64,
    fit_energy_j: f64,
    num_batches: usize,
) -> Result<(f64, f64), AnalysisError> {
    if num_batches == 0 {
        return Err(AnalysisError::ZeroBatches);
    }
    let n = num_batches as f64;
    Ok((fit_time_s / n, fit_energy_j / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub job_id: String,
    pub algorithm: String,
    pub model: String,
    pub fraction_fit: f64,
    pub max_val_acc: Option<f64>,
    pub tta_s: Option<f64>,
    pub eta_j: Option<f64>,
    pub edp_js: Option<f64>,
}

/// Everything derived from one job's records.
#[derive(Debug, Clone, PartialEq)]
pub struct JobAnalysis {
    pub energy: Vec<EnergyReport>,
    pub windows: Vec<StageWindow>,
    pub max_val_acc: Option<f64>,
    pub tta_s: Option<f64>,
    pub eta_j: Option<f64>,
    pub edp_js: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn analyze_job(
    records: &JobRecords,
    idle: &IdleSource,
    target: Option<f64>,
    stages: ActiveStages,
) -> Result<JobAnalysis, AnalysisError> {
    let assoc = associate_rounds(&records.samples, &records.stage_events, &records.rounds)?;
    let mut warnings = Vec::new();
    let energy = match compute_energy(&records.samples, &assoc, idle, stages) {
        Ok(e) => Some(e),
        Err(e @ (AnalysisError::NoActiveSamples(_) | AnalysisError::MissingIdle(_))) => {
            warnings.push(format!("energy unavailable: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let max_val_acc = records
        .rounds
        .iter()
        .map(|r| r.mean_val_accuracy)
        .reduce(f64::max);
    let tta_s = target.and_then(|t| compute_tta(&records.rounds, t));
    let eta_j = match (&energy, target) {
        (Some(e), Some(t)) => compute_eta(e, &assoc.windows, &records.rounds, t, stages),
        _ => None,
    };
    if target.is_none() {
        warnings.push("no target accuracy; tta/eta left empty".into());
    } else if tta_s.is_none() {
        warnings.push("target accuracy never reached".into());
    }
    if energy.as_ref().is_some_and(|e| e.iter().any(|r| r.clamped)) {
        warnings.push("some clients had active power below idle (clamped to 0)".into());
    }
    let edp_js = match (tta_s, eta_j) {
        (Some(t), Some(e)) => Some(compute_edp(t, e)?),
        _ => None,
    };
    Ok(JobAnalysis {
        energy: energy.unwrap_or_default(),
        windows: assoc.windows,
        max_val_acc,
        tta_s,
        eta_j,
        edp_js,
        warnings,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `summary.csv` rows sorted by job id.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), AnalysisError> {
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in sorted {
        w.write_record([
            r.job_id.clone(),
            r.algorithm.clone(),
            r.model.clone(),
            r.fraction_fit.to_string(),
            cell(r.max_val_acc),
            cell(r.tta_s),
            cell(r.eta_j),
            cell(r.edp_js),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_json(path: &Path, rows: &[SummaryRow]) -> Result<(), AnalysisError> {
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    let mut text = serde_json::to_string_pretty(&sorted)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
