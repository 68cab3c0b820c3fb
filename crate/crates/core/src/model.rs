//! Bi-encoder/decoder RUL network and its baselines.
//!
//! ```text
//!   X [T,F] --time_embed--> E --(+PE)--> time encoder ----> O_t [T,d]
//!   X^T [F,T] --sensor_embed--> sensor encoder -----------> O_s [F,d]
//!   O_r = concat(O_s, O_t) [F+T, d]
//!   decoder(E + PE, memory = O_r) --head--> RUL sequence [T]
//! ```
//!
//! The vanilla baseline drops the sensor branch and uses `O_t` as memory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    sinusoidal_pe, AttentionScale, DecoderLayer, EncoderLayer, Graph, Init, LinearLayer, LstmLayer,
    ParamStore,
};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Bi-encoder with LSTM positional encoding.
    Tfbest,
    /// Single time encoder with sinusoidal encoding.
    Vanilla,
    /// Bi-encoder with sinusoidal encoding.
    Dast,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Tfbest => "tfbest",
            Variant::Vanilla => "vanilla",
            Variant::Dast => "dast",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tfbest" => Ok(Variant::Tfbest),
            "vanilla" => Ok(Variant::Vanilla),
            "dast" => Ok(Variant::Dast),
            other => Err(Error::InvalidArgument(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Source of position information added to the time embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    Lstm,
    Sinusoidal,
    /// No position signal. Only used for ablation checks.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub window: usize,
    pub features: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub variant: Variant,
    #[serde(default)]
    pub attention_scale: AttentionScale,
}

impl ModelConfig {
    pub fn new(variant: Variant, features: usize) -> Self {
        ModelConfig {
            window: 30,
            features,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 1,
            d_ff: 64,
            dropout: 0.1,
            variant,
            attention_scale: AttentionScale::HeadDim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.window < 2 {
            return bad(format!("window length {} < 2", self.window));
        }
        if self.features < 1 {
            return bad("feature count must be >= 1".into());
        }
        if !self.d_model.is_multiple_of(2) && self.variant != Variant::Tfbest {
            return bad(format!("sinusoidal encoding needs even d_model, got {}", self.d_model));
        }
        if self.dec_layers < 1 {
            return bad("at least one decoder layer is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let (t, f, d, ff) = (self.window, self.features, self.d_model, self.d_ff);
        let enc = EncoderLayer::param_count(d, ff);
        let mut total = LinearLayer::param_count(f, d)
            + self.enc_layers * enc
            + self.dec_layers * DecoderLayer::param_count(d, ff)
            + LinearLayer::param_count(d, 1);
        if self.variant != Variant::Vanilla {
            total += LinearLayer::param_count(t, d) + self.enc_layers * enc;
        }
        if self.variant == Variant::Tfbest {
            total += LstmLayer::param_count(d, d);
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct TfbestModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    positional: Positional,
    time_embed: LinearLayer,
    sensor_embed: Option<LinearLayer>,
    lstm_pe: Option<LstmLayer>,
    sensor_encoder: Vec<EncoderLayer>,
    time_encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: LinearLayer,
}

impl<T: Real> TfbestModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c = &config;
        let (d, ff, p, scale) = (c.d_model, c.d_ff, c.dropout, c.attention_scale);
        let bi_encoder = c.variant != Variant::Vanilla;

        let time_embed = LinearLayer::new(&mut store, &mut init, "time_embed", c.features, d);
        let sensor_embed =
            bi_encoder.then(|| LinearLayer::new(&mut store, &mut init, "sensor_embed", c.window, d));
        let lstm_pe = (c.variant == Variant::Tfbest)
            .then(|| LstmLayer::new(&mut store, &mut init, "lstm_pe", d, d));
        let mut sensor_encoder = Vec::new();
        if bi_encoder {
            for i in 0..c.enc_layers {
                let name = format!("sensor_encoder.{i}");
                sensor_encoder.push(EncoderLayer::new(&mut store, &mut init, &name, d, c.heads, ff, p, scale)?);
            }
        }
        let mut time_encoder = Vec::new();
        for i in 0..c.enc_layers {
            let name = format!("time_encoder.{i}");
            time_encoder.push(EncoderLayer::new(&mut store, &mut init, &name, d, c.heads, ff, p, scale)?);
        }
        let mut decoder = Vec::new();
        for i in 0..c.dec_layers {
            let name = format!("decoder.{i}");
            decoder.push(DecoderLayer::new(&mut store, &mut init, &name, d, c.heads, ff, p, scale)?);
        }
        let head = LinearLayer::new(&mut store, &mut init, "head", d, 1);
        let positional = match c.variant {
            Variant::Tfbest => Positional::Lstm,
            Variant::Vanilla | Variant::Dast => Positional::Sinusoidal,
        };

        Ok(TfbestModel {
            config,
            params: store,
            positional,
            time_embed,
            sensor_embed,
            lstm_pe,
            sensor_encoder,
            time_encoder,
            decoder,
            head,
        })
    }

    /// Baseline constructor; rejects the tfbest variant.
    pub fn baseline(mut config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        if variant == Variant::Tfbest {
            return Err(Error::InvalidArgument(
                "`tfbest` is not a baseline variant; use TfbestModel::new".into(),
            ));
        }
        config.variant = variant;
        Self::new(config, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn positional(&self) -> Positional {
        self.positional
    }

    /// Overrides the position signal; an LSTM encoding needs LSTM weights.
    pub fn with_positional(mut self, positional: Positional) -> Result<Self> {
        if positional == Positional::Lstm && self.lstm_pe.is_none() {
            return Err(Error::InvalidArgument(format!(
                "variant {} has no LSTM encoding parameters",
                self.config.variant
            )));
        }
        self.positional = positional;
        Ok(self)
    }

    /// Same structure at a different precision.
    pub fn cast<U: Real>(&self) -> TfbestModel<U> {
        TfbestModel {
            config: self.config.clone(),
            params: self.params.cast(),
            positional: self.positional,
            time_embed: self.time_embed.clone(),
            sensor_embed: self.sensor_embed.clone(),
            lstm_pe: self.lstm_pe.clone(),
            sensor_encoder: self.sensor_encoder.clone(),
            time_encoder: self.time_encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    fn check_window(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let shape = g.tape.shape(x);
        let want = [self.config.window, self.config.features];
        if shape != want {
            return Err(Error::ConfigMismatch(format!(
                "window shape {shape:?} does not match model config {want:?}"
            )));
        }
        Ok(())
    }

    /// Time-embedded window plus the variant's positional signal, before
    /// dropout.
    pub fn embed_time(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_window(g, x)?;
        let e = self.time_embed.forward(g, x)?;
        match self.positional {
            Positional::Zero => Ok(e),
            Positional::Sinusoidal => {
                let pe = sinusoidal_pe(self.config.window, self.config.d_model)?;
                let pe = g.input(pe);
                g.tape.add(e, pe)
            }
            Positional::Lstm => {
                let lstm = self.lstm_pe.as_ref().expect("checked by with_positional");
                let pe = lstm.forward(g, e)?;
                g.tape.add(e, pe)
            }
        }
    }

    fn run_time_encoder(&self, g: &mut Graph<'_, T>, embedded: Var) -> Result<Var> {
        let mut h = g.dropout(embedded, self.config.dropout)?;
        for layer in &self.time_encoder {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    /// `O_t`: `[T, d_model]`.
    pub fn time_encode(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let embedded = self.embed_time(g, x)?;
        self.run_time_encoder(g, embedded)
    }

    /// `O_s`: `[F, d_model]`. Attention mixes sensor positions; there is no
    /// positional signal, so the output is equivariant to sensor order.
    pub fn sensor_encode(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_window(g, x)?;
        let embed = self.sensor_embed.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("variant {} has no sensor encoder", self.config.variant))
        })?;
        let xt = g.tape.transpose(x)?;
        let e = embed.forward(g, xt)?;
        let mut h = g.dropout(e, self.config.dropout)?;
        for layer in &self.sensor_encoder {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    /// `O_r = concat(O_s, O_t)` along rows, sensor rows first.
    pub fn fuse(&self, g: &mut Graph<'_, T>, o_s: Var, o_t: Var) -> Result<Var> {
        let (a, b) = (g.tape.shape(o_s).to_vec(), g.tape.shape(o_t).to_vec());
        if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
            return Err(Error::shape("fuse", &a, &b));
        }
        g.tape.concat(&[o_s, o_t], 0)
    }

    /// RUL sequence `[T, 1]` for one window `[T, F]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let embedded = self.embed_time(g, x)?;
        let o_t = self.run_time_encoder(g, embedded)?;
        let memory = if self.sensor_embed.is_some() {
            let o_s = self.sensor_encode(g, x)?;
            self.fuse(g, o_s, o_t)?
        } else {
            o_t
        };
        let mut y = g.dropout(embedded, self.config.dropout)?;
        for layer in &self.decoder {
            y = layer.forward(g, y, memory)?;
        }
        self.head.forward(g, y)
    }

    /// Sets the bias of the RUL head, the constant part of every prediction.
    pub fn set_output_bias(&mut self, value: T) {
        let bias = self.head.bias.expect("head has a bias");
        *self.params.get_mut(bias) = Tensor::new(vec![1], vec![value]).expect("one element");
    }

    /// Eval-mode prediction for one window.
    pub fn predict(&self, window: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new(&self.params, false, 0);
        let x = g.input(window.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }
}
