//! Per-trial behavioral metrics, dataset summaries and the human-data CSV
//! import/export that makes analysis independent of where trials came from.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Outcome, TrialRecord};

/// RMSE threshold (m/s) above which a driver counts as contributing.
pub const JOINT_THRESHOLD: f64 = 0.5;
/// Acceleration jump (m/s²) that counts as a change-point.
pub const CHANGEPOINT_DEADBAND: f64 = 0.05;
/// Mean piecewise score at or above which intermittent control is credited.
pub const PIECEWISE_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no trials left after excluding collisions and non-finished trials (collision rate {collision_rate:.2}%)")]
    EmptySample { collision_rate: f64 },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: {reason}")]
    BadCell { row: usize, column: String, reason: String },
    #[error("step series references unknown trial {0:?}")]
    UnknownTrial(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Metrics of a single trial, independent of its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial_id: String,
    pub h: f64,
    pub dv: f64,
    pub outcome: Outcome,
    /// `Some(true)` when the left vehicle merged first.
    pub merge_first: Option<bool>,
    pub gap_at_merge: Option<f64>,
    pub collided: bool,
    pub speed_rmse_left: f64,
    pub speed_rmse_right: f64,
    pub joint_contribution: bool,
    pub piecewise_score: Option<f64>,
}

impl TrialMetrics {
    /// Finished without collision: the rows that feed gap, RMSE and regressions.
    pub fn is_analyzed(&self) -> bool {
        matches!(self.outcome, Outcome::LeftMergedFirst | Outcome::RightMergedFirst)
    }
}

fn merge_first(outcome: Outcome) -> Option<bool> {
    match outcome {
        Outcome::LeftMergedFirst => Some(true),
        Outcome::RightMergedFirst => Some(false),
        _ => None,
    }
}

pub fn joint_contribution(rmse_left: f64, rmse_right: f64) -> bool {
    rmse_left >= JOINT_THRESHOLD && rmse_right >= JOINT_THRESHOLD
}

/// Root-mean-square deviation of `series` from `reference`.
pub fn speed_rmse(series: &[f64], reference: f64) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let ss: f64 = series.iter().map(|v| (v - reference).powi(2)).sum();
    (ss / series.len() as f64).sqrt()
}

/// Fraction of steps at which the velocity-derived acceleration does not
/// jump by more than the deadband. Series shorter than 3 score 1.
pub fn piecewise_linearity(velocity: &[f64], dt: f64) -> f64 {
    if velocity.len() < 3 {
        return 1.0;
    }
    let accel: Vec<f64> = velocity.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let opportunities = accel.len() - 1;
    let changes = accel
        .windows(2)
        .filter(|w| (w[1] - w[0]).abs() > CHANGEPOINT_DEADBAND)
        .count();
    1.0 - changes as f64 / opportunities as f64
}

fn trial_id(trial: &TrialRecord) -> String {
    format!(
        "{}/{}/r{}",
        trial.prompt_variant.label(),
        trial.condition.id,
        trial.repetition
    )
}

fn velocities(times: &[f64], v: &[f64], merge_time: Option<f64>) -> (f64, Vec<f64>) {
    let v0 = v[0];
    let window: Vec<f64> = match merge_time {
        Some(tm) => times
            .iter()
            .zip(v)
            .filter(|(t, _)| **t <= tm + 1e-9)
            .map(|(_, v)| *v)
            .collect(),
        None => v.to_vec(),
    };
    (v0, window)
}

/// Metrics from raw per-step velocity series; shared by simulated and
/// imported trials so both sources go through identical arithmetic.
#[allow(clippy::too_many_arguments)]
pub fn metrics_from_series(
    trial_id: String,
    h: f64,
    dv: f64,
    outcome: Outcome,
    gap_at_merge: Option<f64>,
    merge_time: Option<f64>,
    times: &[f64],
    v_left: &[f64],
    v_right: &[f64],
    dt: f64,
) -> Result<TrialMetrics, MetricsError> {
    if times.is_empty() || times.len() != v_left.len() || times.len() != v_right.len() {
        return Err(MetricsError::Degenerate(format!("trial {trial_id} has no usable steps")));
    }
    let (l0, lw) = velocities(times, v_left, merge_time);
    let (r0, rw) = velocities(times, v_right, merge_time);
    let speed_rmse_left = speed_rmse(&lw, l0);
    let speed_rmse_right = speed_rmse(&rw, r0);
    let collided = outcome == Outcome::Collision;
    let piecewise_score = if times.len() >= 3 {
        Some(0.5 * (piecewise_linearity(v_left, dt) + piecewise_linearity(v_right, dt)))
    } else {
        None
    };
    Ok(TrialMetrics {
        trial_id,
        h,
        dv,
        outcome,
        merge_first: merge_first(outcome),
        gap_at_merge: if merge_first(outcome).is_some() { gap_at_merge } else { None },
        collided,
        speed_rmse_left,
        speed_rmse_right,
        joint_contribution: joint_contribution(speed_rmse_left, speed_rmse_right),
        piecewise_score,
    })
}

pub fn compute_trial_metrics(trial: &TrialRecord, dt: f64) -> Result<TrialMetrics, MetricsError> {
    if trial.steps.is_empty() {
        return Err(MetricsError::Degenerate(format!("trial {} has zero steps", trial_id(trial))));
    }
    let times: Vec<f64> = trial.steps.iter().map(|s| s.time).collect();
    let vl: Vec<f64> = trial.steps.iter().map(|s| s.left.velocity).collect();
    let vr: Vec<f64> = trial.steps.iter().map(|s| s.right.velocity).collect();
    metrics_from_series(
        trial_id(trial),
        trial.condition.projected_headway,
        trial.condition.relative_velocity,
        trial.outcome,
        trial.gap_at_merge,
        trial.merge_time,
        &times,
        &vl,
        &vr,
        dt,
    )
}

pub fn compute_dataset_metrics(trials: &[TrialRecord], dt: f64) -> Result<Vec<TrialMetrics>, MetricsError> {
    trials.iter().map(|t| compute_trial_metrics(t, dt)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n_trials: usize,
    pub n_collisions: usize,
    pub n_analyzed: usize,
    /// Percent of all trials.
    pub collision_rate: f64,
    pub mean_gap: f64,
    /// Mean over both drivers of every analyzed trial.
    pub mean_rmse: f64,
    /// Percent of analyzed trials.
    pub joint_rate: f64,
    pub mean_piecewise: Option<f64>,
}

pub fn aggregate(metrics: &[TrialMetrics]) -> Result<Summary, MetricsError> {
    if metrics.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let n_trials = metrics.len();
    let n_collisions = metrics.iter().filter(|m| m.collided).count();
    let collision_rate = 100.0 * n_collisions as f64 / n_trials as f64;
    let kept: Vec<&TrialMetrics> = metrics.iter().filter(|m| m.is_analyzed()).collect();
    if kept.is_empty() {
        return Err(MetricsError::EmptySample { collision_rate });
    }
    let n = kept.len() as f64;
    let gaps: Vec<f64> = kept.iter().filter_map(|m| m.gap_at_merge).collect();
    let mean_gap = if gaps.is_empty() {
        f64::NAN
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    let mean_rmse = kept
        .iter()
        .map(|m| m.speed_rmse_left + m.speed_rmse_right)
        .sum::<f64>()
        / (2.0 * n);
    let joint_rate = 100.0 * kept.iter().filter(|m| m.joint_contribution).count() as f64 / n;
    let scores: Vec<f64> = kept.iter().filter_map(|m| m.piecewise_score).collect();
    let mean_piecewise = if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    };
    Ok(Summary {
        n_trials,
        n_collisions,
        n_analyzed: kept.len(),
        collision_rate,
        mean_gap,
        mean_rmse,
        joint_rate,
        mean_piecewise,
    })
}

// ---------------------------------------------------------------------------
// Human-data CSV

pub const HUMAN_COLUMNS: [&str; 8] = [
    "trial_id",
    "h",
    "dv",
    "outcome",
    "gap_at_merge",
    "rmse_left",
    "rmse_right",
    "collided",
];
pub const STEP_COLUMNS: [&str; 4] = ["trial_id", "t", "v_left", "v_right"];

fn column_index(headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>, MetricsError> {
    names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| MetricsError::MissingColumn(name.to_string()))
        })
        .collect()
}

fn bad(row: usize, column: &str, reason: impl Into<String>) -> MetricsError {
    MetricsError::BadCell {
        row,
        column: column.to_string(),
        reason: reason.into(),
    }
}

fn number(raw: &str, row: usize, column: &str) -> Result<f64, MetricsError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| bad(row, column, format!("not a finite number: {raw:?}")))
}

fn optional_number(raw: &str, row: usize, column: &str) -> Result<Option<f64>, MetricsError> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        Ok(None)
    } else {
        number(t, row, column).map(Some)
    }
}

fn boolean(raw: &str, row: usize, column: &str) -> Result<bool, MetricsError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(bad(row, column, format!("not a boolean: {other:?}"))),
    }
}

fn outcome_cell(raw: &str, row: usize) -> Result<Outcome, MetricsError> {
    let t = raw.trim().to_ascii_lowercase();
    let alias = match t.as_str() {
        "left" | "1" => "left-merged-first",
        "right" | "0" => "right-merged-first",
        other => other,
    };
    alias.parse::<Outcome>().map_err(|e| bad(row, "outcome", e))
}

struct HumanRow {
    trial_id: String,
    h: f64,
    dv: f64,
    outcome: Outcome,
    gap: Option<f64>,
    rmse_left: f64,
    rmse_right: f64,
}

fn read_human_rows<R: Read>(reader: R) -> Result<Vec<HumanRow>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let idx = column_index(rdr.headers()?, &HUMAN_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |c: usize| rec.get(idx[c]).unwrap_or("");
        let outcome = outcome_cell(cell(3), row)?;
        let collided = boolean(cell(7), row, "collided")?;
        if collided != (outcome == Outcome::Collision) {
            return Err(bad(row, "collided", "disagrees with outcome"));
        }
        rows.push(HumanRow {
            trial_id: cell(0).trim().to_string(),
            h: number(cell(1), row, "h")?,
            dv: number(cell(2), row, "dv")?,
            outcome,
            gap: optional_number(cell(4), row, "gap_at_merge")?,
            rmse_left: number(cell(5), row, "rmse_left")?,
            rmse_right: number(cell(6), row, "rmse_right")?,
        });
    }
    Ok(rows)
}

#[derive(Default)]
struct Series {
    t: Vec<f64>,
    vl: Vec<f64>,
    vr: Vec<f64>,
}

fn read_step_rows<R: Read>(reader: R) -> Result<HashMap<String, Series>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let idx = column_index(rdr.headers()?, &STEP_COLUMNS)?;
    let mut out: HashMap<String, Series> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |c: usize| rec.get(idx[c]).unwrap_or("");
        let s = out.entry(cell(0).trim().to_string()).or_default();
        s.t.push(number(cell(1), row, "t")?);
        s.vl.push(number(cell(2), row, "v_left")?);
        s.vr.push(number(cell(3), row, "v_right")?);
    }
    Ok(out)
}

/// Reads the human summary CSV and, when given, the per-step long CSV.
/// Summary RMSEs are taken as reported (the step CSV carries no merge marker
/// to delimit the interaction window); the step series supplies the
/// piecewise-linearity score.
pub fn import_human<R: Read, S: Read>(
    summary: R,
    steps: Option<S>,
    dt: f64,
) -> Result<Vec<TrialMetrics>, MetricsError> {
    let rows = read_human_rows(summary)?;
    let mut series = match steps {
        Some(s) => read_step_rows(s)?,
        None => HashMap::new(),
    };
    let known: std::collections::HashSet<&str> = rows.iter().map(|r| r.trial_id.as_str()).collect();
    if let Some(id) = series.keys().find(|k| !known.contains(k.as_str())) {
        return Err(MetricsError::UnknownTrial(id.clone()));
    }
    Ok(rows
        .into_iter()
        .map(|r| {
            let piecewise_score = series
                .remove(&r.trial_id)
                .filter(|s| s.t.len() >= 3)
                .map(|s| 0.5 * (piecewise_linearity(&s.vl, dt) + piecewise_linearity(&s.vr, dt)));
            TrialMetrics {
                merge_first: merge_first(r.outcome),
                gap_at_merge: if merge_first(r.outcome).is_some() { r.gap } else { None },
                collided: r.outcome == Outcome::Collision,
                joint_contribution: joint_contribution(r.rmse_left, r.rmse_right),
                trial_id: r.trial_id,
                h: r.h,
                dv: r.dv,
                outcome: r.outcome,
                speed_rmse_left: r.rmse_left,
                speed_rmse_right: r.rmse_right,
                piecewise_score,
            }
        })
        .collect())
}

/// Writes trials in the human summary schema plus the long step CSV, so a
/// simulated dataset can be re-imported through the human path.
pub fn export_human<W: Write, S: Write>(
    trials: &[TrialRecord],
    dt: f64,
    summary: W,
    steps: S,
) -> Result<(), MetricsError> {
    let mut sw = csv::Writer::from_writer(summary);
    sw.write_record(HUMAN_COLUMNS)?;
    let mut lw = csv::Writer::from_writer(steps);
    lw.write_record(STEP_COLUMNS)?;
    for trial in trials {
        let m = compute_trial_metrics(trial, dt)?;
        sw.write_record([
            m.trial_id.clone(),
            m.h.to_string(),
            m.dv.to_string(),
            m.outcome.label().to_string(),
            m.gap_at_merge.map(|g| g.to_string()).unwrap_or_default(),
            m.speed_rmse_left.to_string(),
            m.speed_rmse_right.to_string(),
            (m.collided as u8).to_string(),
        ])?;
        for s in &trial.steps {
            lw.write_record([
                m.trial_id.clone(),
                s.time.to_string(),
                s.left.velocity.to_string(),
                s.right.velocity.to_string(),
            ])?;
        }
    }
    sw.flush().map_err(csv::Error::from)?;
    lw.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Normalized metrics table (one row per trial) as written by `import-human`.
pub fn write_metrics<W: Write>(metrics: &[TrialMetrics], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<TrialMetrics>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(MetricsError::from)).collect()
}

/// Sorted map from (dv, h) to analyzed trials, keyed by bit pattern so the
/// grouping is exact.
pub fn group_by_condition(metrics: &[TrialMetrics]) -> BTreeMap<(i64, i64), Vec<&TrialMetrics>> {
    let key = |x: f64| (x * 1e6).round() as i64;
    let mut out: BTreeMap<(i64, i64), Vec<&TrialMetrics>> = BTreeMap::new();
    for m in metrics {
        out.entry((key(m.dv), key(m.h))).or_default().push(m);
    }
    out
}
