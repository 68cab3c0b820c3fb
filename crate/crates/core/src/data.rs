//! S.M.A.R.T. log ingestion, RUL labeling, normalization and windowing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Default cap on the RUL kept per drive: 60 days before failure plus the
/// failure day itself.
pub const DEFAULT_MAX_RUL: i64 = 60;

const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SmartRecord {
    pub date: NaiveDate,
    pub serial: String,
    pub model: String,
    pub failure: bool,
    /// Selected attribute values; `None` marks a missing cell.
    pub features: Vec<Option<f64>>,
}

/// Daily records of one failing drive, in strictly increasing date order,
/// ending with the failure-flagged record.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveHistory {
    serial: String,
    records: Vec<SmartRecord>,
    failure_date: NaiveDate,
}

impl DriveHistory {
    pub fn new(records: Vec<SmartRecord>) -> Result<Self> {
        let last = records.last().ok_or(Error::Empty("drive history"))?;
        let serial = last.serial.clone();
        if !last.failure {
            return Err(Error::InvalidArgument(format!(
                "history of {serial} does not end with a failure record"
            )));
        }
        for pair in records.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(Error::InvalidArgument(format!(
                    "history of {serial} is not strictly increasing at {}",
                    pair[1].date
                )));
            }
            if pair[0].failure {
                return Err(Error::InvalidArgument(format!(
                    "history of {serial} has a failure flag before its last record"
                )));
            }
        }
        let failure_date = last.date;
        Ok(DriveHistory {
            serial,
            records,
            failure_date,
        })
    }

    pub fn serial(&self) -> &str {
        &self.serial
    }

    pub fn records(&self) -> &[SmartRecord] {
        &self.records
    }

    pub fn failure_date(&self) -> NaiveDate {
        self.failure_date
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.records[0].features.len()
    }

    /// Keeps only the records whose RUL is at most `max_rul` days.
    pub fn capped(&self, max_rul: i64) -> DriveHistory {
        let records = self
            .records
            .iter()
            .filter(|r| (self.failure_date - r.date).num_days() <= max_rul)
            .cloned()
            .collect();
        DriveHistory {
            serial: self.serial.clone(),
            records,
            failure_date: self.failure_date,
        }
    }
}

/// Per-day RUL in whole days: `failure_date - date`. The failure day is 0.
pub fn label_rul(history: &DriveHistory) -> Result<Vec<i64>> {
    history
        .records
        .iter()
        .map(|r| {
            let rul = (history.failure_date - r.date).num_days();
            if rul < 0 {
                Err(Error::InvalidArgument(format!(
                    "{}: record dated {} is after the failure date {}",
                    history.serial, r.date, history.failure_date
                )))
            } else {
                Ok(rul)
            }
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub histories: Vec<DriveHistory>,
    pub rows_read: usize,
    pub duplicates_dropped: usize,
    pub rows_after_failure: usize,
    pub serials_without_failure: usize,
}

/// Reads Backblaze-style daily CSVs and groups failing drives by serial.
///
/// Duplicate `(serial, date)` rows keep the first occurrence. Rows of a
/// serial dated after its first failure are dropped. Serials that never
/// fail are skipped.
pub fn ingest_csv(
    paths: &[PathBuf],
    feature_columns: &[String],
    model_filter: Option<&str>,
) -> Result<Ingested> {
    let mut by_serial: BTreeMap<String, BTreeMap<NaiveDate, SmartRecord>> = BTreeMap::new();
    let mut out = Ingested::default();

    for path in paths {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = reader.headers()?.clone();
        let column = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn {
                    file: path.clone(),
                    column: name.to_string(),
                })
        };
        let date_col = column("date")?;
        let serial_col = column("serial_number")?;
        let model_col = column("model")?;
        let failure_col = column("failure")?;
        let feature_cols = feature_columns
            .iter()
            .map(|c| column(c))
            .collect::<Result<Vec<_>>>()?;

        for row in reader.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let parse_err = |msg: String| Error::Parse {
                file: path.clone(),
                line,
                msg,
            };
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            let model = field(model_col);
            if model_filter.is_some_and(|m| m != model) {
                continue;
            }
            out.rows_read += 1;
            let date = NaiveDate::parse_from_str(field(date_col), DATE_FORMAT)
                .map_err(|e| parse_err(format!("bad date `{}`: {e}", field(date_col))))?;
            let failure = match field(failure_col) {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(format!("bad failure flag `{other}`"))),
            };
            let features = feature_cols
                .iter()
                .zip(feature_columns)
                .map(|(&i, name)| {
                    let cell = field(i);
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .map(Some)
                            .ok_or_else(|| parse_err(format!("bad value `{cell}` in column {name}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let serial = field(serial_col).to_string();
            let days = by_serial.entry(serial.clone()).or_default();
            if days.contains_key(&date) {
                out.duplicates_dropped += 1;
                continue;
            }
            days.insert(
                date,
                SmartRecord {
                    date,
                    serial,
                    model: model.to_string(),
                    failure,
                    features,
                },
            );
        }
    }

    for (_, days) in by_serial {
        let mut records: Vec<SmartRecord> = days.into_values().collect();
        match records.iter().position(|r| r.failure) {
            Some(first_failure) => {
                out.rows_after_failure += records.len() - first_failure - 1;
                records.truncate(first_failure + 1);
                out.histories.push(DriveHistory::new(records)?);
            }
            None => out.serials_without_failure += 1,
        }
    }
    if out.duplicates_dropped > 0 {
        warn!("dropped {} duplicate (serial, date) rows", out.duplicates_dropped);
    }
    if out.rows_after_failure > 0 {
        warn!("dropped {} rows logged after a drive's failure", out.rows_after_failure);
    }
    Ok(out)
}

/// Per-feature mean and standard deviation from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over all present cells of the given histories. Standard
    /// deviations below a small floor are clamped to it.
    pub fn fit(columns: &[String], histories: &[DriveHistory]) -> Result<Self> {
        let f = columns.len();
        let mut sum = vec![0.0; f];
        let mut count = vec![0usize; f];
        for h in histories {
            for r in &h.records {
                if r.features.len() != f {
                    return Err(Error::shape("norm stats", &[f], &[r.features.len()]));
                }
                for (j, v) in r.features.iter().enumerate() {
                    if let Some(v) = v {
                        sum[j] += v;
                        count[j] += 1;
                    }
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; f];
        for h in histories {
            for r in &h.records {
                for (j, v) in r.features.iter().enumerate() {
                    if let Some(v) = v {
                        sq[j] += (v - mean[j]).powi(2);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n > 0 { (s / n as f64).sqrt().max(STD_FLOOR) } else { 1.0 })
            .collect();
        Ok(NormStats {
            columns: columns.to_vec(),
            mean,
            std,
        })
    }

    pub fn normalize(&self, j: usize, x: f64) -> f64 {
        (x - self.mean[j]) / self.std[j]
    }

    pub fn denormalize(&self, j: usize, z: f64) -> f64 {
        z * self.std[j] + self.mean[j]
    }

    /// Feature rows of `history` with missing cells forward-filled (or set to
    /// the training mean when no earlier value exists), then normalized.
    pub fn transform(&self, history: &DriveHistory) -> Result<Vec<Vec<f64>>> {
        let f = self.columns.len();
        let mut last: Vec<Option<f64>> = vec![None; f];
        history
            .records
            .iter()
            .map(|r| {
                if r.features.len() != f {
                    return Err(Error::ConfigMismatch(format!(
                        "{} has {} features, statistics have {f}",
                        history.serial,
                        r.features.len()
                    )));
                }
                Ok((0..f)
                    .map(|j| {
                        let raw = r.features[j].or(last[j]).unwrap_or(self.mean[j]);
                        last[j] = Some(raw);
                        self.normalize(j, raw)
                    })
                    .collect())
            })
            .collect()
    }
}

/// One `T`-step slice of a drive history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub serial: String,
    /// Position of each step within the drive history.
    pub day_index: Vec<usize>,
    /// RUL in days of each step.
    pub targets: Vec<i64>,
    /// `[T][F]` normalized features.
    pub features: Vec<Vec<f32>>,
}

impl WindowSample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Row-major `[T * F]` feature buffer.
    pub fn flat_features(&self) -> Vec<f32> {
        self.features.concat()
    }
}

/// All stride-1 windows of length `window`. Drives shorter than the window
/// produce none.
pub fn make_windows(
    history: &DriveHistory,
    window: usize,
    stats: &NormStats,
) -> Result<Vec<WindowSample>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    let d = history.len();
    if d < window {
        warn!(
            "skipping {}: {d} days of history is shorter than the window ({window})",
            history.serial
        );
        return Ok(Vec::new());
    }
    let rul = label_rul(history)?;
    let rows = stats.transform(history)?;
    Ok((0..=d - window)
        .map(|s| WindowSample {
            serial: history.serial.clone(),
            day_index: (s..s + window).collect(),
            targets: rul[s..s + window].to_vec(),
            features: rows[s..s + window]
                .iter()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect(),
        })
        .collect())
}

/// Closed-left date ranges: train `[train_start, val_start)`, validation
/// `[val_start, test_start)`, test `[test_start, test_end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub train_start: NaiveDate,
    pub val_start: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: Option<NaiveDate>,
}

impl Default for SplitBoundaries {
    fn default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        SplitBoundaries {
            train_start: d(2013, 1, 1),
            val_start: d(2020, 1, 1),
            test_start: d(2021, 1, 1),
            test_end: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct Splits {
    pub train: Vec<DriveHistory>,
    pub val: Vec<DriveHistory>,
    pub test: Vec<DriveHistory>,
    /// Drives whose failure date falls outside every split.
    pub unassigned: usize,
}

/// Assigns each drive to the split containing its failure date.
pub fn split_by_date(histories: Vec<DriveHistory>, b: &SplitBoundaries) -> Result<Splits> {
    let ordered = b.train_start < b.val_start
        && b.val_start < b.test_start
        && b.test_end.is_none_or(|end| b.test_start < end);
    if !ordered {
        return Err(Error::InvalidArgument(format!(
            "split boundaries overlap or are out of order: {b:?}"
        )));
    }
    let mut splits = Splits::default();
    for h in histories {
        let f = h.failure_date;
        if f < b.train_start || b.test_end.is_some_and(|end| f >= end) {
            splits.unassigned += 1;
        } else if f < b.val_start {
            splits.train.push(h);
        } else if f < b.test_start {
            splits.val.push(h);
        } else {
            splits.test.push(h);
        }
    }
    for (name, part) in [("train", &splits.train), ("validation", &splits.val), ("test", &splits.test)] {
        if part.is_empty() {
            warn!("{name} split is empty");
        }
    }
    Ok(splits)
}

/// Attribute ids used for synthetic column names.
const SMART_IDS: [u32; 24] = [
    1, 3, 4, 5, 7, 9, 10, 12, 183, 184, 187, 188, 189, 190, 191, 192, 193, 194, 195, 197, 198, 199,
    240, 241,
];

/// Column names for `count` synthetic attributes.
pub fn synthetic_columns(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| match i / SMART_IDS.len() {
            0 => format!("smart_{}_raw", SMART_IDS[i]),
            1 => format!("smart_{}_normalized", SMART_IDS[i % SMART_IDS.len()]),
            _ => format!("smart_{}_raw", 242 + i),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub drives: usize,
    pub features: usize,
    pub seed: u64,
    pub min_days: usize,
    pub max_days: usize,
    /// Fraction of feature cells left empty.
    pub missing_rate: f64,
    pub model: String,
}

impl SynthConfig {
    pub fn new(drives: usize, features: usize, seed: u64) -> Self {
        SynthConfig {
            drives,
            features,
            seed,
            min_days: 40,
            max_days: 120,
            missing_rate: 0.0,
            model: "ST4000DM000".into(),
        }
    }
}

struct FeatureLoading {
    offset: f64,
    loading: f64,
    season_amp: f64,
    season_phase: f64,
    noise: f64,
    scale: f64,
}

/// Synthetic failing drives.
///
/// Each drive carries a latent health that stays near 1 during a healthy
/// plateau, then drifts down with random-walk noise until it crosses 0, the
/// failure day. Features are `scale * (offset + loading * health + weekly
/// seasonal term + noise)`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<DriveHistory>> {
    if cfg.drives == 0 || cfg.features == 0 {
        return Err(Error::InvalidArgument("synthetic data needs >= 1 drive and feature".into()));
    }
    if cfg.min_days < 2 || cfg.min_days > cfg.max_days {
        return Err(Error::InvalidArgument(format!(
            "bad synthetic history length range [{}, {}]",
            cfg.min_days, cfg.max_days
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let loadings: Vec<FeatureLoading> = (0..cfg.features)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            FeatureLoading {
                offset: rng.random_range(-1.0..1.0),
                loading: sign * rng.random_range(0.4..1.6),
                season_amp: rng.random_range(0.0..0.25),
                season_phase: rng.random_range(0.0..7.0),
                noise: rng.random_range(0.03..0.15),
                scale: [1.0, 10.0, 100.0, 1000.0][rng.random_range(0..4)],
            }
        })
        .collect();
    let first = NaiveDate::from_ymd_opt(2013, 3, 1).expect("valid date");
    let span = (NaiveDate::from_ymd_opt(2022, 12, 31).expect("valid date") - first).num_days();

    let mut out = Vec::with_capacity(cfg.drives);
    for i in 0..cfg.drives {
        let health = loop {
            let decline = rng.random_range(40.0..75.0_f64);
            let plateau = rng.random_range(0..=70usize);
            let drift = 1.0 / decline;
            let mut h = vec![1.0; plateau];
            let mut level: f64 = 1.0;
            while level > 0.0 && h.len() <= cfg.max_days {
                h.push(level);
                level += -drift + 0.01 * standard_normal(&mut rng);
            }
            // Failure day: health has crossed zero.
            h.push(level.min(0.0));
            if (cfg.min_days..=cfg.max_days).contains(&h.len()) {
                break h;
            }
        };
        let days = health.len();
        let failure_date = first + Duration::days(rng.random_range(0..=span));
        let serial = format!("SYN{i:06}");
        let records = health
            .iter()
            .enumerate()
            .map(|(t, &h)| {
                let date = failure_date - Duration::days((days - 1 - t) as i64);
                let weekday = date.signed_duration_since(first).num_days() as f64;
                let features = loadings
                    .iter()
                    .map(|l| {
                        let season = l.season_amp
                            * (2.0 * std::f64::consts::PI * (weekday + l.season_phase) / 7.0).sin();
                        let v = l.scale
                            * (l.offset + l.loading * h + season + l.noise * standard_normal(&mut rng));
                        if cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate {
                            None
                        } else {
                            Some(v)
                        }
                    })
                    .collect();
                SmartRecord {
                    date,
                    serial: serial.clone(),
                    model: cfg.model.clone(),
                    failure: t == days - 1,
                    features,
                }
            })
            .collect();
        out.push(DriveHistory::new(records)?);
    }
    info!("generated {} synthetic drives", out.len());
    Ok(out)
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one variate per call keeps the stream simple.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Writes histories as one Backblaze-schema CSV sorted by (date, serial).
pub fn write_backblaze_csv(path: &Path, columns: &[String], histories: &[DriveHistory]) -> Result<()> {
    let mut rows: Vec<&SmartRecord> = histories.iter().flat_map(|h| h.records.iter()).collect();
    rows.sort_by(|a, b| (a.date, &a.serial).cmp(&(b.date, &b.serial)));
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["date", "serial_number", "model", "capacity_bytes", "failure"];
    header.extend(columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.date.format(DATE_FORMAT).to_string(),
            r.serial.clone(),
            r.model.clone(),
            "4000787030016".to_string(),
            if r.failure { "1" } else { "0" }.to_string(),
        ];
        rec.extend(r.features.iter().map(|v| v.map_or(String::new(), |v| format!("{v:.4}"))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_windows_ndjson(path: &Path, windows: &[WindowSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in windows {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_windows_ndjson(path: &Path) -> Result<Vec<WindowSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: WindowSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Sidecar written next to a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub window: usize,
    pub max_rul: i64,
    pub norm_stats: NormStats,
    pub boundaries: SplitBoundaries,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_drives: usize,
    pub val_drives: usize,
    pub test_drives: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

/// Windows for a split; drives shorter than the window are skipped.
pub fn windows_for(
    histories: &[DriveHistory],
    window: usize,
    stats: &NormStats,
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for h in histories {
        out.extend(make_windows(h, window, stats)?);
    }
    Ok(out)
}

/// Capped, split, normalized and windowed dataset.
pub struct Prepared {
    pub meta: DatasetMeta,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn prepare(
    histories: Vec<DriveHistory>,
    columns: &[String],
    window: usize,
    max_rul: i64,
    boundaries: &SplitBoundaries,
) -> Result<Prepared> {
    let capped = histories.iter().map(|h| h.capped(max_rul)).collect();
    let splits = split_by_date(capped, boundaries)?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let stats = NormStats::fit(columns, &splits.train)?;
    let train = windows_for(&splits.train, window, &stats)?;
    let val = windows_for(&splits.val, window, &stats)?;
    let test = windows_for(&splits.test, window, &stats)?;
    let counts = SplitCounts {
        train_drives: splits.train.len(),
        val_drives: splits.val.len(),
        test_drives: splits.test.len(),
        train_windows: train.len(),
        val_windows: val.len(),
        test_windows: test.len(),
    };
    Ok(Prepared {
        meta: DatasetMeta {
            window,
            max_rul,
            norm_stats: stats,
            boundaries: boundaries.clone(),
            counts,
        },
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap()
    }

    /// `days` consecutive records ending in failure on `failure`.
    fn history(serial: &str, failure: &str, days: usize, features: usize) -> DriveHistory {
        let end = day(failure);
        let records = (0..days)
            .map(|t| SmartRecord {
                date: end - Duration::days((days - 1 - t) as i64),
                serial: serial.into(),
                model: "M".into(),
                failure: t == days - 1,
                features: (0..features).map(|j| Some((t * (j + 1)) as f64)).collect(),
            })
            .collect();
        DriveHistory::new(records).unwrap()
    }

    fn identity_stats(features: usize) -> NormStats {
        NormStats {
            columns: (0..features).map(|j| format!("c{j}")).collect(),
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    #[test]
    fn rul_counts_calendar_days() {
        let mut h = history("A", "2020-03-10", 3, 1);
        assert_eq!(label_rul(&h).unwrap(), vec![2, 1, 0]);
        // A gap keeps the date arithmetic.
        h.records[0].date = day("2020-03-01");
        assert_eq!(label_rul(&h).unwrap(), vec![9, 1, 0]);
    }

    #[test]
    fn history_must_end_in_failure_and_increase() {
        let h = history("A", "2020-03-10", 3, 1);
        let mut recs = h.records().to_vec();
        recs[2].failure = false;
        assert!(DriveHistory::new(recs).is_err());
        let mut recs = h.records().to_vec();
        recs.swap(0, 1);
        assert!(DriveHistory::new(recs).is_err());
    }

    #[test]
    fn capping_keeps_sixty_one_days() {
        let h = history("A", "2020-06-01", 100, 1).capped(DEFAULT_MAX_RUL);
        assert_eq!(h.len(), 61);
        assert_eq!(label_rul(&h).unwrap()[0], 60);
    }

    #[test]
    fn windows_cover_days_with_expected_overlap() {
        let h = history("A", "2020-06-01", 61, 2);
        let w = make_windows(&h, 30, &identity_stats(2)).unwrap();
        assert_eq!(w.len(), 32);
        let mut counts = vec![0usize; 61];
        for s in &w {
            for &d in &s.day_index {
                counts[d] += 1;
            }
        }
        assert_eq!(counts[0], 1);
        assert_eq!(counts[1], 2);
        assert_eq!(counts[30], 30);
        assert_eq!(counts[60], 1);
        assert_eq!(w[0].targets[0], 60);
        assert_eq!(w[31].targets[29], 0);
    }

    #[test]
    fn short_history_yields_no_windows() {
        let h = history("A", "2020-06-01", 10, 1);
        assert!(make_windows(&h, 30, &identity_stats(1)).unwrap().is_empty());
    }

    #[test]
    fn split_is_by_failure_date_closed_left() {
        let hs = vec![
            history("A", "2019-12-31", 5, 1),
            history("B", "2020-01-01", 5, 1),
            history("C", "2021-01-01", 5, 1),
            history("D", "2012-06-01", 5, 1),
        ];
        let s = split_by_date(hs, &SplitBoundaries::default()).unwrap();
        assert_eq!(s.train[0].serial(), "A");
        assert_eq!(s.val[0].serial(), "B");
        assert_eq!(s.test[0].serial(), "C");
        assert_eq!(s.unassigned, 1);
    }

    #[test]
    fn norm_stats_standardize_and_forward_fill() {
        let mut h = history("A", "2020-06-01", 6, 2);
        let stats = NormStats::fit(&["a".into(), "b".into()], std::slice::from_ref(&h)).unwrap();
        let rows = stats.transform(&h).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12 && (var.sqrt() - 1.0).abs() < 1e-12);
        }
        h.records[3].features[0] = None;
        h.records[0].features[1] = None;
        let filled = stats.transform(&h).unwrap();
        assert_eq!(filled[3][0], filled[2][0]);
        assert!(filled[0][1].abs() < 1e-12, "missing first cell falls back to the mean");
    }

    #[test]
    fn ingest_sorts_dedups_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs.csv");
        std::fs::write(
            &path,
            "date,serial_number,model,capacity_bytes,failure,smart_5_raw\n\
             2020-01-03,X,M,1,1,3\n\
             2020-01-01,X,M,1,0,1\n\
             2020-01-02,X,M,1,0,\n\
             2020-01-02,X,M,1,0,9\n\
             2020-01-04,X,M,1,0,4\n\
             2020-01-01,Y,M,1,0,1\n\
             2020-01-01,Z,OTHER,1,1,1\n",
        )
        .unwrap();
        let got = ingest_csv(std::slice::from_ref(&path), &["smart_5_raw".into()], Some("M")).unwrap();
        assert_eq!(got.histories.len(), 1);
        assert_eq!(got.duplicates_dropped, 1);
        assert_eq!(got.rows_after_failure, 1);
        assert_eq!(got.serials_without_failure, 1);
        let h = &got.histories[0];
        assert_eq!(h.len(), 3);
        assert_eq!(h.records()[1].features[0], None);

        let missing = ingest_csv(&[path], &["smart_9_raw".into()], None).unwrap_err();
        assert!(matches!(missing, Error::MissingColumn { .. }));
    }

    #[test]
    fn synth_is_deterministic_and_ends_in_failure() {
        let cfg = SynthConfig::new(20, 4, 7);
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert_ne!(a, synth_generate(&SynthConfig::new(20, 4, 8)).unwrap());
        for h in &a {
            assert!(h.records().last().unwrap().failure);
            assert!((40..=120).contains(&h.len()));
        }
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let cols = synthetic_columns(4);
        write_backblaze_csv(&p1, &cols, &a).unwrap();
        write_backblaze_csv(&p2, &cols, &synth_generate(&cfg).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn synthetic_features_carry_rul_signal() {
        let hs: Vec<DriveHistory> = synth_generate(&SynthConfig::new(60, 6, 3))
            .unwrap()
            .iter()
            .map(|h| h.capped(DEFAULT_MAX_RUL))
            .collect();
        let stats = NormStats::fit(&synthetic_columns(6), &hs).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for h in &hs {
            let rows = stats.transform(h).unwrap();
            for (r, y) in rows.iter().zip(label_rul(h).unwrap()) {
                xs.push(r.clone());
                ys.push(y as f64);
            }
        }
        let n = ys.len();
        let design = nalgebra::DMatrix::from_fn(n, 7, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
        let y = nalgebra::DVector::from_vec(ys.clone());
        let beta = design.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let fitted = &design * beta;
        let mean = ys.iter().sum::<f64>() / n as f64;
        let sse: f64 = fitted.iter().zip(&ys).map(|(f, y)| (f - y).powi(2)).sum();
        let sst: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
        assert!(sse < 0.5 * sst, "linear fit explains too little: {sse} vs {sst}");
    }

    #[test]
    fn ndjson_round_trip() {
        let h = history("A", "2020-06-01", 8, 2);
        let w = make_windows(&h, 4, &identity_stats(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ndjson");
        write_windows_ndjson(&p, &w).unwrap();
        assert_eq!(read_windows_ndjson(&p).unwrap(), w);
    }

    proptest! {
        #[test]
        fn windows_are_consistent(d in 2usize..90, t in 1usize..40) {
            let h = history("P", "2021-06-01", d, 1);
            let w = make_windows(&h, t, &identity_stats(1)).unwrap();
            prop_assert_eq!(w.len(), (d + 1).saturating_sub(t));
            let rul = label_rul(&h).unwrap();
            for s in &w {
                for k in 1..s.len() {
                    prop_assert_eq!(s.targets[k], s.targets[k - 1] - 1);
                }
                for (k, &di) in s.day_index.iter().enumerate() {
                    prop_assert_eq!(s.targets[k], rul[di]);
                }
            }
        }

        #[test]
        fn normalize_round_trips(mean in -1e3f64..1e3, std in 1e-3f64..1e3, x in -1e4f64..1e4) {
            let s = NormStats { columns: vec!["c".into()], mean: vec![mean], std: vec![std] };
            prop_assert!((s.denormalize(0, s.normalize(0, x)) - x).abs() < 1e-5);
        }
    }
}
