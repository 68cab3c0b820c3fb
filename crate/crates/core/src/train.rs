//! RMSE training with Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::eval::predict_windows;
use crate::layers::{mix, Graph, ParamStore};
use crate::model::TfbestModel;
use crate::tensor::{Real, Tensor, Var};

/// Smoothing added under the square root while training so the loss stays
/// differentiable at zero error.
pub const RMSE_DELTA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Multiply the learning rate by this factor after every epoch.
    pub lr_decay: Option<f64>,
    /// Start the RUL head's bias at the mean training target.
    #[serde(default = "default_true")]
    pub init_output_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            patience: None,
            grad_clip: None,
            lr_decay: None,
            init_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config: {self:?}")))
        }
    }
}

/// Root mean squared error of two equal-length sequences.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("rmse", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// `sqrt(mean((pred - target)^2) + delta)` on the tape.
pub fn rmse_loss<T: Real>(g: &mut Graph<'_, T>, pred: Var, target: Var, delta: f64) -> Result<Var> {
    if g.tape.value(pred).numel() == 0 {
        return Err(Error::Empty("batch"));
    }
    let diff = g.tape.sub(pred, target)?;
    let sq = g.tape.mul(diff, diff)?;
    let mse = g.tape.mean(sq)?;
    let mse = if delta > 0.0 {
        let d = g.input(Tensor::scalar(T::lit(delta)));
        g.tape.add(mse, d)?
    } else {
        mse
    };
    g.tape.sqrt(mse)
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails without touching anything if a
/// gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
    }
    for ((name, p), g) in params.names().iter().zip(params.values()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam gradient", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let clip = match cfg.grad_clip {
        Some(max_norm) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| x.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm { max_norm / norm } else { 1.0 }
        }
        None => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let step = T::lit(cfg.lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);
    let clip = T::lit(clip);

    for (i, g) in grads.iter().enumerate() {
        let p = params.values_mut()[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j] * clip;
            m[j] = b1t * m[j] + one_b1 * gj;
            v[j] = b2t * v[j] + one_b2 * gj * gj;
            p[j] = p[j] - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn window_tensor<T: Real>(w: &WindowSample) -> Result<Tensor<T>> {
    let t = w.len();
    let f = w.feature_count();
    let data = w.features.iter().flatten().map(|&x| T::lit(f64::from(x))).collect();
    Tensor::new(vec![t, f], data)
}

pub struct BatchOutcome<T> {
    pub loss: f64,
    pub sq_error: f64,
    pub count: usize,
    pub grads: Vec<Tensor<T>>,
}

/// Forward and backward over a mini-batch on a single tape.
pub fn batch_gradients<T: Real>(
    model: &TfbestModel<T>,
    batch: &[&WindowSample],
    training: bool,
    dropout_seed: u64,
) -> Result<BatchOutcome<T>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut g = Graph::new(model.params(), training, dropout_seed);
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for w in batch {
        let x = g.input(window_tensor(w)?);
        preds.push(model.forward(&mut g, x)?);
        targets.extend(w.targets.iter().map(|&r| T::lit(r as f64)));
    }
    let pred = g.tape.concat(&preds, 0)?;
    let count = targets.len();
    let target = g.input(Tensor::new(vec![count, 1], targets)?);
    let loss = rmse_loss(&mut g, pred, target, RMSE_DELTA)?;
    let sq_error = g
        .value(pred)
        .data()
        .iter()
        .zip(g.value(target).data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.tape.backward(loss)?;
    let grads = g.param_grads(&grads)?;
    Ok(BatchOutcome {
        loss: loss_value,
        sq_error,
        count,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_rmse: f64,
    pub stopped_early: bool,
}

/// Mean RUL over every step of every window.
pub fn target_mean(windows: &[WindowSample]) -> f64 {
    let (sum, n) = windows
        .iter()
        .flat_map(|w| &w.targets)
        .fold((0.0, 0usize), |(s, n), &t| (s + t as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Eval-mode RMSE over every step of every window.
pub fn dataset_rmse<T: Real>(model: &TfbestModel<T>, windows: &[WindowSample]) -> Result<f64> {
    let preds = predict_windows(model, windows)?;
    let p: Vec<f64> = preds.into_iter().flatten().collect();
    let t: Vec<f64> = windows.iter().flat_map(|w| w.targets.iter().map(|&r| r as f64)).collect();
    rmse(&p, &t)
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// epoch (lowest validation RMSE, or training RMSE without a validation set).
pub fn fit<T: Real>(
    model: &mut TfbestModel<T>,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.init_output_bias {
        model.set_output_bias(T::lit(target_mean(train)));
    }
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        best_rmse: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best_params = model.params().clone();
    let mut since_best = 0;
    let mut step_cfg = cfg.clone();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let epoch_seed = mix(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let (mut sq, mut n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let out = batch_gradients(model, &batch, true, mix(epoch_seed, b as u64 + 1))?;
            adam_step(model.params_mut(), &out.grads, &mut state, &step_cfg)?;
            sq += out.sq_error;
            n += out.count;
            debug!("epoch {epoch} batch {b}: loss {:.4}", out.loss);
        }
        let train_rmse = (sq / n as f64).sqrt();
        let val_rmse = if val.is_empty() {
            None
        } else {
            Some(dataset_rmse(model, val)?)
        };
        let stats = EpochStats {
            epoch,
            train_rmse,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train {train_rmse:.4} val {} ({:.1}s)",
            val_rmse.map_or("-".into(), |v| format!("{v:.4}")),
            stats.seconds
        );
        report.epochs.push(stats);

        let score = val_rmse.unwrap_or(train_rmse);
        if score < report.best_rmse {
            report.best_rmse = score;
            report.best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                report.stopped_early = true;
                info!("early stop after epoch {epoch}");
                break;
            }
        }
        if let Some(decay) = cfg.lr_decay {
            step_cfg.lr *= decay;
        }
    }
    *model.params_mut() = best_params;
    Ok(report)
}

/// Training report CSV: `epoch,train_rmse,val_rmse,seconds`.
pub fn write_report_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_rmse,val_rmse,seconds")?;
    for e in &report.epochs {
        let val = e.val_rmse.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(w, "{},{:.6},{},{:.3}", e.epoch, e.train_rmse, val, e.seconds)?;
    }
    w.flush()?;
    Ok(())
}
