//! `tfbest` command line: synth, prepare, train, eval, report, gradcheck.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Failures print one line to stderr: `tfbest: error[<kind>]: <message>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    ingest_csv, prepare, read_windows_ndjson, synth_generate, synthetic_columns,
    write_backblaze_csv, write_windows_ndjson, DatasetMeta, SplitBoundaries, SynthConfig,
    WindowSample, DATE_FORMAT,
};
use crate::error::Error;
use crate::eval::{emit_report, emit_trace, evaluate, fixed2, report_rows, DEFAULT_CONFIDENCE};
use crate::gradcheck::{run_suite, GRAD_TOL};
use crate::layers::{mix, AttentionScale};
use crate::model::{ModelConfig, TfbestModel, Variant};
use crate::train::{fit, write_report_csv, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Batch size used for small datasets unless one is given explicitly.
pub const DESK_BATCH: usize = 32;
pub const DESK_THRESHOLD: usize = 1000;

/// Stream ids for splitting the root seed per stage.
const STAGE_SYNTH: u64 = 1;
const STAGE_INIT: u64 = 2;
const STAGE_TRAIN: u64 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";

#[derive(Debug, Parser)]
#[command(name = "tfbest", version, about = "Hard-drive RUL prediction with a dual-aspect transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic failing-drive logs in the Backblaze CSV schema.
    Synth(SynthArgs),
    /// Ingest CSV logs and write windowed NDJSON splits plus statistics.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write confidence-interval reports.
    Eval(EvalArgs),
    /// Render a report CSV as a table.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub drives: usize,
    #[arg(long, default_value_t = 16)]
    pub features: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of feature cells left empty.
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Input CSV files (repeatable).
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Comma-separated feature columns; defaults to every smart_* column.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Keep only rows of this drive model.
    #[arg(long)]
    pub model_filter: Option<String>,
    /// Window length T.
    #[arg(long, default_value_t = 30)]
    pub window: usize,
    /// Largest RUL kept per drive (days before failure).
    #[arg(long, default_value_t = 60)]
    pub max_rul: i64,
    #[arg(long, default_value = "2013-01-01")]
    pub train_start: String,
    #[arg(long, default_value = "2020-01-01")]
    pub val_start: String,
    #[arg(long, default_value = "2021-01-01")]
    pub test_start: String,
    /// Exclusive end of the test split (open-ended when omitted).
    #[arg(long)]
    pub test_end: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Tfbest,
    Vanilla,
    Dast,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tfbest => Variant::Tfbest,
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::Dast => Variant::Dast,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    HeadDim,
    ModelDim,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Tfbest)]
    pub variant: VariantArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 1)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = ScaleArg::HeadDim)]
    pub attention_scale: ScaleArg,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Mini-batch size [default: 256, or 32 when the training set has
    /// fewer than 1000 windows]
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Early-stopping patience in epochs (off when omitted).
    #[arg(long)]
    pub patience: Option<usize>,
    /// Global gradient-norm clip (off when omitted).
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Per-epoch learning-rate decay factor (off when omitted).
    #[arg(long)]
    pub lr_decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f64,
    /// Clamp negative RUL estimates at zero in the report.
    #[arg(long)]
    pub clip_zero: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report CSV written by `eval`.
    #[arg(long)]
    pub input: PathBuf,
    /// Only rows of this serial.
    #[arg(long)]
    pub serial: Option<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            kind: "numeric",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::NonFinite(_) => (EXIT_NUMERIC, "numeric"),
            Error::ConfigMismatch(_) => (EXIT_DATA, "config-mismatch"),
            Error::InvalidArgument(_) => (EXIT_USAGE, "usage"),
            _ => (EXIT_DATA, "data"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = f.message.replace('\n', " ");
            eprintln!("tfbest: error[{}]: {msg}", f.kind);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn synth(a: SynthArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.missing_rate) {
        return Err(Failure::usage(format!("--missing-rate {} outside [0, 1)", a.missing_rate)));
    }
    let stage_seed = mix(a.seed, STAGE_SYNTH);
    let mut cfg = SynthConfig::new(a.drives, a.features, stage_seed);
    cfg.missing_rate = a.missing_rate;
    let histories = synth_generate(&cfg)?;
    let columns = synthetic_columns(a.features);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_backblaze_csv(&a.out, &columns, &histories)?;
    let mut meta_path = a.out.clone().into_os_string();
    meta_path.push(".meta.json");
    let meta = serde_json::json!({
        "root_seed": a.seed,
        "synth_seed": stage_seed,
        "drives": a.drives,
        "features": a.features,
        "missing_rate": a.missing_rate,
        "columns": columns,
    });
    write_json(Path::new(&meta_path), &meta)?;
    info!("wrote {} drives to {}", histories.len(), a.out.display());
    Ok(())
}

fn parse_date(flag: &str, s: &str) -> std::result::Result<NaiveDate, Failure> {
    NaiveDate::parse_from_str(s, DATE_FORMAT)
        .map_err(|e| Failure::usage(format!("--{flag} `{s}`: {e}")))
}

fn smart_columns(path: &Path) -> std::result::Result<Vec<String>, Failure> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = reader.headers().map_err(Error::from)?;
    Ok(headers
        .iter()
        .filter(|h| h.starts_with("smart_"))
        .map(str::to_string)
        .collect())
}

fn prepare_cmd(a: PrepareArgs) -> CliResult {
    if a.window < 2 {
        return Err(Failure::usage("--window must be >= 2"));
    }
    let boundaries = SplitBoundaries {
        train_start: parse_date("train-start", &a.train_start)?,
        val_start: parse_date("val-start", &a.val_start)?,
        test_start: parse_date("test-start", &a.test_start)?,
        test_end: a.test_end.as_deref().map(|s| parse_date("test-end", s)).transpose()?,
    };
    let columns = match a.columns {
        Some(c) => c,
        None => smart_columns(&a.inputs[0])?,
    };
    if columns.is_empty() {
        return Err(Failure::usage("no feature columns selected"));
    }
    let ingested = ingest_csv(&a.inputs, &columns, a.model_filter.as_deref())?;
    info!(
        "ingested {} rows, {} failing drives ({} serials without failure)",
        ingested.rows_read,
        ingested.histories.len(),
        ingested.serials_without_failure
    );
    let prepared = prepare(ingested.histories, &columns, a.window, a.max_rul, &boundaries)?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    write_windows_ndjson(&a.out_dir.join("train.ndjson"), &prepared.train)?;
    write_windows_ndjson(&a.out_dir.join("val.ndjson"), &prepared.val)?;
    write_windows_ndjson(&a.out_dir.join("test.ndjson"), &prepared.test)?;
    write_json(&a.out_dir.join("meta.json"), &prepared.meta)?;
    info!("prepared dataset: {:?}", prepared.meta.counts);
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> std::result::Result<Vec<WindowSample>, Failure> {
    let path = dir.join(format!("{name}.ndjson"));
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_windows_ndjson(&path)?)
}

fn check_windows(windows: &[WindowSample], meta: &DatasetMeta) -> CliResult {
    let f = meta.norm_stats.columns.len();
    for w in windows {
        if w.len() != meta.window || w.features.iter().any(|r| r.len() != f) {
            return Err(Error::ConfigMismatch(format!(
                "window of {} does not match dataset shape [{}, {f}]",
                w.serial, meta.window
            ))
            .into());
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let meta: DatasetMeta = read_json(&a.data.join("meta.json"))?;
    let train_set = load_split(&a.data, "train")?;
    let val_set = load_split(&a.data, "val")?;
    check_windows(&train_set, &meta)?;
    check_windows(&val_set, &meta)?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split").into());
    }
    let model_cfg = ModelConfig {
        window: meta.window,
        features: meta.norm_stats.columns.len(),
        d_model: a.d_model,
        heads: a.heads,
        enc_layers: a.enc_layers,
        dec_layers: a.dec_layers,
        d_ff: a.d_ff,
        dropout: a.dropout,
        variant: a.variant.into(),
        attention_scale: match a.attention_scale {
            ScaleArg::HeadDim => AttentionScale::HeadDim,
            ScaleArg::ModelDim => AttentionScale::ModelDim,
        },
    };
    model_cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let batch_size = match a.batch_size {
        Some(b) => b,
        None if train_set.len() < DESK_THRESHOLD => {
            warn!(
                "training set has {} windows (< {DESK_THRESHOLD}); using batch size {DESK_BATCH}",
                train_set.len()
            );
            DESK_BATCH
        }
        None => 256,
    };
    let init_seed = mix(a.seed, STAGE_INIT);
    let train_seed = mix(a.seed, STAGE_TRAIN);
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size,
        max_epochs: a.epochs,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.adam_eps,
        seed: train_seed,
        patience: a.patience,
        grad_clip: a.grad_clip,
        lr_decay: a.lr_decay,
        init_output_bias: true,
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let mut model = TfbestModel::<f32>::new(model_cfg, init_seed)?;
    info!(
        "training {} ({} parameters) on {} windows, validating on {}",
        a.variant_name(),
        model.params().scalar_count(),
        train_set.len(),
        val_set.len()
    );
    let report = fit(&mut model, &train_set, &val_set, &cfg)?;

    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let mut ckpt_meta = BTreeMap::new();
    ckpt_meta.insert("seed.root".into(), a.seed.to_string());
    ckpt_meta.insert("seed.init".into(), init_seed.to_string());
    ckpt_meta.insert("seed.train".into(), train_seed.to_string());
    ckpt_meta.insert("adam.lr".into(), cfg.lr.to_string());
    ckpt_meta.insert("adam.beta1".into(), cfg.beta1.to_string());
    ckpt_meta.insert("adam.beta2".into(), cfg.beta2.to_string());
    ckpt_meta.insert("adam.eps".into(), cfg.eps.to_string());
    ckpt_meta.insert("train.batch_size".into(), cfg.batch_size.to_string());
    ckpt_meta.insert("train.epochs_run".into(), report.epochs.len().to_string());
    ckpt_meta.insert("train.best_epoch".into(), report.best_epoch.to_string());
    ckpt_meta.insert("data.columns".into(), meta.norm_stats.columns.join(","));
    save_checkpoint(&model, &a.out_dir.join(CHECKPOINT_FILE), &ckpt_meta)?;
    write_report_csv(&a.out_dir.join(TRAIN_REPORT_FILE), &report)?;
    info!("best epoch {} with RMSE {:.4}", report.best_epoch, report.best_rmse);
    Ok(())
}

impl TrainArgs {
    fn variant_name(&self) -> String {
        Variant::from(self.variant).to_string()
    }
}

fn eval(a: EvalArgs) -> CliResult {
    if !(a.confidence > 0.0 && a.confidence < 1.0) {
        return Err(Failure::usage(format!("--confidence {} outside (0, 1)", a.confidence)));
    }
    let meta: DatasetMeta = read_json(&a.data.join("meta.json"))?;
    let (model, ckpt_meta) = load_checkpoint(&a.checkpoint)?;
    let cfg = model.config();
    let features = meta.norm_stats.columns.len();
    if cfg.features != features || cfg.window != meta.window {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects windows [{}, {}], dataset has [{}, {features}]",
            cfg.window, cfg.features, meta.window
        ))
        .into());
    }
    if let Some(cols) = ckpt_meta.get("data.columns") {
        if *cols != meta.norm_stats.columns.join(",") {
            return Err(Error::ConfigMismatch(
                "checkpoint was trained on different feature columns".into(),
            )
            .into());
        }
    }
    let split = match a.split {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    };
    let windows = load_split(&a.data, split)?;
    check_windows(&windows, &meta)?;
    let evaluation = evaluate(&model, &windows, a.confidence)?;

    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    emit_report(&report_rows(&evaluation), &a.out_dir.join("report.csv"), a.clip_zero)?;
    let pooled: Vec<_> = evaluation.pooled.iter().map(|r| ("pooled".to_string(), r.clone())).collect();
    emit_report(&pooled, &a.out_dir.join("pooled.csv"), a.clip_zero)?;
    emit_trace(&evaluation.trace, &a.out_dir.join("trace.csv"))?;
    write_json(&a.out_dir.join("summary.json"), &evaluation.summary())?;
    info!("{split} RMSE {:.4} over {} windows", evaluation.test_rmse, evaluation.n_windows);
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let mut reader = csv::Reader::from_path(&a.input).map_err(Error::from)?;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>4} {:>18} {:>20}\n",
        "serial", "true_rul", "n", "estimate", "interval"
    ));
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        if rec.len() != 7 {
            return Err(Error::Parse {
                file: a.input.clone(),
                line: i as u64 + 2,
                msg: format!("expected 7 fields, got {}", rec.len()),
            }
            .into());
        }
        if a.serial.as_deref().is_some_and(|s| s != &rec[0]) {
            continue;
        }
        let num = |k: usize| -> std::result::Result<f64, Failure> {
            rec[k].parse::<f64>().map_err(|_| {
                Failure::from(Error::Parse {
                    file: a.input.clone(),
                    line: i as u64 + 2,
                    msg: format!("bad number `{}`", &rec[k]),
                })
            })
        };
        let estimate = format!("{} ± {}", fixed2(num(3)?), fixed2(num(4)?));
        let interval = format!("({}, {})", fixed2(num(5)?), fixed2(num(6)?));
        out.push_str(&format!(
            "{:<12} {:>8} {:>4} {:>18} {:>20}\n",
            &rec[0], &rec[1], &rec[2], estimate, interval
        ));
    }
    match a.out {
        Some(path) => fs::write(path, out).map_err(Error::from)?,
        None => std::io::stdout().write_all(out.as_bytes()).map_err(Error::from)?,
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let checks = run_suite(a.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        let worst = c
            .tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map_or("-", |t| t.name.as_str());
        println!(
            "{:<16} max_rel_error={:.3e} worst={worst} {status}",
            c.name,
            c.max_rel_error()
        );
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check above {GRAD_TOL:e} for: {}",
            failed.join(", ")
        )))
    }
}
