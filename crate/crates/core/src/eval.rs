//! Test RMSE and confidence intervals from overlapping windows.
//!
//! Every calendar day of a drive is covered by up to `T` windows, so it
//! collects several RUL predictions. Their mean is the point estimate, the
//! standard error `s / sqrt(n)` is the reported margin, and the interval is
//! `mean ± t_{(1+γ)/2, n-1} · s / sqrt(n)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::TfbestModel;
use crate::stats::student_t_quantile;
use crate::tensor::Real;
use crate::train::{rmse, window_tensor};

pub const DEFAULT_CONFIDENCE: f64 = 0.90;

/// Point estimate, standard error and interval for one set of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub n: usize,
    pub point_estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub true_rul: i64,
    pub n: usize,
    pub point_estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ConfidenceRow {
    pub fn new(true_rul: i64, m: Margin) -> Self {
        ConfidenceRow {
            true_rul,
            n: m.n,
            point_estimate: m.point_estimate,
            std_error: m.std_error,
            ci_low: m.ci_low,
            ci_high: m.ci_high,
        }
    }
}

/// Student-t interval around the sample mean. A single prediction gives a
/// degenerate interval at the prediction itself.
pub fn confidence_margin(preds: &[f64], gamma: f64) -> Result<Margin> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {gamma} outside (0, 1)")));
    }
    let n = preds.len();
    let mean = preds.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Margin {
            n,
            point_estimate: mean,
            std_error: 0.0,
            ci_low: mean,
            ci_high: mean,
        });
    }
    let var = preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = var.sqrt() / (n as f64).sqrt();
    let t = student_t_quantile((1.0 + gamma) / 2.0, (n - 1) as u32)?;
    Ok(Margin {
        n,
        point_estimate: mean,
        std_error: se,
        ci_low: mean - t * se,
        ci_high: mean + t * se,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DayPredictions {
    pub true_rul: i64,
    pub preds: Vec<f64>,
}

/// Groups per-step predictions by `(serial, day_index)`.
pub fn aggregate_overlaps(
    windows: &[WindowSample],
    preds: &[Vec<f64>],
) -> Result<BTreeMap<(String, usize), DayPredictions>> {
    if windows.len() != preds.len() {
        return Err(Error::shape("aggregate", &[windows.len()], &[preds.len()]));
    }
    let mut days: BTreeMap<(String, usize), DayPredictions> = BTreeMap::new();
    for (w, p) in windows.iter().zip(preds) {
        if p.len() != w.len() || w.day_index.len() != w.len() {
            return Err(Error::shape("aggregate window", &[w.len()], &[p.len()]));
        }
        for ((&day, &rul), &y) in w.day_index.iter().zip(&w.targets).zip(p) {
            let entry = days.entry((w.serial.clone(), day)).or_insert_with(|| DayPredictions {
                true_rul: rul,
                preds: Vec::new(),
            });
            if entry.true_rul != rul {
                return Err(Error::InvalidArgument(format!(
                    "{} day {day}: windows disagree on true RUL ({} vs {rul})",
                    w.serial, entry.true_rul
                )));
            }
            entry.preds.push(y);
        }
    }
    Ok(days)
}

/// Eval-mode RUL sequences for each window.
pub fn predict_windows<T: Real>(
    model: &TfbestModel<T>,
    windows: &[WindowSample],
) -> Result<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|w| {
            let y = model.predict(&window_tensor(w)?)?;
            Ok(y.into_iter().map(Real::as_f64).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveTable {
    pub serial: String,
    /// One row per day, sorted by descending true RUL.
    pub rows: Vec<ConfidenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub serial: String,
    pub day: usize,
    pub true_rul: i64,
    pub predicted_rul: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub test_rmse: f64,
    pub n_windows: usize,
    pub drives: Vec<DriveTable>,
    /// Predictions of all drives grouped by true RUL.
    pub pooled: Vec<ConfidenceRow>,
    pub trace: Vec<TracePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_rmse: f64,
    pub n_drives: usize,
    pub n_windows: usize,
}

impl Evaluation {
    pub fn summary(&self) -> Summary {
        Summary {
            test_rmse: self.test_rmse,
            n_drives: self.drives.len(),
            n_windows: self.n_windows,
        }
    }
}

/// Builds the evaluation from predictions already aligned with `windows`.
pub fn evaluate_predictions(
    windows: &[WindowSample],
    preds: &[Vec<f64>],
    gamma: f64,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let days = aggregate_overlaps(windows, preds)?;
    let flat_p: Vec<f64> = preds.iter().flatten().copied().collect();
    let flat_t: Vec<f64> = windows.iter().flat_map(|w| w.targets.iter().map(|&r| r as f64)).collect();
    let test_rmse = rmse(&flat_p, &flat_t)?;

    let mut drives: Vec<DriveTable> = Vec::new();
    let mut trace = Vec::with_capacity(days.len());
    let mut pooled: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for ((serial, day), d) in &days {
        let row = ConfidenceRow::new(d.true_rul, confidence_margin(&d.preds, gamma)?);
        trace.push(TracePoint {
            serial: serial.clone(),
            day: *day,
            true_rul: d.true_rul,
            predicted_rul: row.point_estimate,
        });
        pooled.entry(d.true_rul).or_default().extend(&d.preds);
        match drives.last_mut() {
            Some(t) if &t.serial == serial => t.rows.push(row),
            _ => drives.push(DriveTable {
                serial: serial.clone(),
                rows: vec![row],
            }),
        }
    }
    for t in &mut drives {
        t.rows.sort_by_key(|r| std::cmp::Reverse(r.true_rul));
    }
    let pooled = pooled
        .iter()
        .rev()
        .map(|(&rul, p)| Ok(ConfidenceRow::new(rul, confidence_margin(p, gamma)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        test_rmse,
        n_windows: windows.len(),
        drives,
        pooled,
        trace,
    })
}

pub fn evaluate<T: Real>(
    model: &TfbestModel<T>,
    windows: &[WindowSample],
    gamma: f64,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let preds = predict_windows(model, windows)?;
    evaluate_predictions(windows, &preds, gamma)
}

/// Two-decimal fixed formatting without a `-0.00`.
pub fn fixed2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// One report line: `serial,true_rul,n,point_estimate,std_error,ci_low,ci_high`.
pub fn format_row(serial: &str, row: &ConfidenceRow, clip_zero: bool) -> String {
    let clip = |x: f64| if clip_zero { x.max(0.0) } else { x };
    format!(
        "{serial},{},{},{},{},{},{}",
        row.true_rul,
        row.n,
        fixed2(clip(row.point_estimate)),
        fixed2(row.std_error),
        fixed2(clip(row.ci_low)),
        fixed2(clip(row.ci_high)),
    )
}

pub const REPORT_HEADER: &str = "serial,true_rul,n,point_estimate,std_error,ci_low,ci_high";
pub const TRACE_HEADER: &str = "serial,day,true_rul,predicted_rul";

/// Writes confidence rows; `clip_zero` clamps negative estimates and bounds.
pub fn emit_report(rows: &[(String, ConfidenceRow)], path: &Path, clip_zero: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{REPORT_HEADER}")?;
    for (serial, row) in rows {
        writeln!(w, "{}", format_row(serial, row, clip_zero))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_trace(trace: &[TracePoint], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRACE_HEADER}")?;
    for p in trace {
        writeln!(w, "{},{},{},{}", p.serial, p.day, p.true_rul, fixed2(p.predicted_rul))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-drive rows flattened in drive order.
pub fn report_rows(eval: &Evaluation) -> Vec<(String, ConfidenceRow)> {
    eval.drives
        .iter()
        .flat_map(|t| t.rows.iter().map(move |r| (t.serial.clone(), r.clone())))
        .collect()
}
