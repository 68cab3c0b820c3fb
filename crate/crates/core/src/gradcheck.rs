//! Central finite-difference checks of the tape gradients, run at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    attention, causal_mask, AttentionScale, DecoderLayer, EncoderLayer, FeedForward, Graph, Init,
    LayerNorm, LinearLayer, LstmLayer, MultiHeadAttention, ParamStore,
};
use crate::model::{ModelConfig, TfbestModel, Variant};
use crate::tensor::{Tensor, Var};
use crate::train::rmse_loss;

pub const FD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

/// Gradient norms below this are treated as zero when forming the relative
/// error.
const GRAD_FLOOR: f64 = 1e-8;

/// Central differences are only valid away from ReLU kinks. A check point
/// whose ReLU inputs come closer to zero than this is redrawn.
pub const KINK_MARGIN: f64 = 1e-2;
const MAX_DRAWS: usize = 32;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub tensors: Vec<TensorCheck>,
    /// Smallest ReLU input at the check point, if the graph has any ReLU.
    pub relu_margin: Option<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn near_kink(&self) -> bool {
        self.relu_margin.is_some_and(|m| m < KINK_MARGIN)
    }

    pub fn passed(&self) -> bool {
        !self.near_kink() && !self.tensors.is_empty() && self.max_rel_error() < GRAD_TOL
    }
}

/// Relative error of one tensor: largest absolute deviation over the larger
/// of the two gradient magnitudes.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|x| x.abs())
        .fold(GRAD_FLOOR, f64::max);
    (abs, abs / scale)
}

/// Compares tape gradients of a scalar loss against central differences for
/// every parameter in `store` and every tensor in `inputs`.
pub fn check<F>(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, false, 0);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new(store, false, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let relu_margin = g.tape.relu_margin();
    if relu_margin.is_some_and(|m| m < KINK_MARGIN) {
        return Ok(GradCheck {
            name: name.to_string(),
            tensors: Vec::new(),
            relu_margin,
        });
    }
    let grads = g.tape.backward(loss)?;
    let param_grads = g.param_grads(&grads)?;
    let input_grads = vars.iter().map(|&v| grads.get(v)).collect::<Result<Vec<_>>>()?;

    let mut tensors = Vec::new();
    let mut work = store.clone();
    for (i, analytic) in param_grads.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work.values()[i].data()[j];
            work.values_mut()[i].data_mut()[j] = orig + FD_EPS;
            let up = eval(&work, inputs)?;
            work.values_mut()[i].data_mut()[j] = orig - FD_EPS;
            let down = eval(&work, inputs)?;
            work.values_mut()[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        let (abs, rel) = relative_error(analytic.data(), &numeric);
        tensors.push(TensorCheck {
            name: store.names()[i].clone(),
            max_abs_error: abs,
            max_rel_error: rel,
        });
    }

    let mut work_inputs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work_inputs[k].data()[j];
            work_inputs[k].data_mut()[j] = orig + FD_EPS;
            let up = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[j] = orig - FD_EPS;
            let down = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        let (abs, rel) = relative_error(analytic.data(), &numeric);
        tensors.push(TensorCheck {
            name: format!("input.{k}"),
            max_abs_error: abs,
            max_rel_error: rel,
        });
    }
    Ok(GradCheck {
        name: name.to_string(),
        tensors,
        relu_margin,
    })
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * w)` with a fixed random weighting `w`, so every output element
/// carries a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(random_tensor(&mut rng, shape));
    let prod = g.tape.mul(y, w)?;
    g.tape.sum(prod)
}

/// Randomizes every parameter so checks do not sit on special values such as
/// all-zero biases or unit gains.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

/// Small TFBEST configuration used by the gradient checks.
pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        window: 4,
        features: 3,
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 8,
        dropout: 0.1,
        variant,
        attention_scale: AttentionScale::HeadDim,
    }
}

/// Redraws a check point until it is clear of ReLU kinks.
fn smooth<F>(rng: &mut ChaCha8Rng, mut case: F) -> Result<GradCheck>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<GradCheck>,
{
    let mut last = case(rng)?;
    for _ in 1..MAX_DRAWS {
        if !last.near_kink() {
            break;
        }
        last = case(rng)?;
    }
    Ok(last)
}

/// Gradient check of a full model at the small configuration.
pub fn check_model(variant: Variant, enc_layers: usize, seed: u64) -> Result<GradCheck> {
    let mut cfg = small_config(variant);
    cfg.enc_layers = enc_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    smooth(&mut rng, |rng| {
        let mut model = TfbestModel::<f64>::new(cfg.clone(), rng.random())?;
        jitter(model.params_mut(), rng);
        let x = random_tensor(rng, vec![cfg.window, cfg.features]);
        let model_ref = &model;
        check(&format!("model.{variant}"), model.params(), &[x], |g, v| {
            let y = model_ref.forward(g, v[0])?;
            weighted_sum(g, y, seed)
        })
    })
}

/// Runs the finite-difference suite over every layer and the full models.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d, heads, ff) = (3usize, 8usize, 2usize, 8usize);

    // Linear.
    {
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, &mut Init::new(seed), "linear", 5, 4);
        jitter(&mut store, &mut rng);
        let x = random_tensor(&mut rng, vec![3, 5]);
        out.push(check("linear", &store, &[x], |g, v| {
            let y = layer.forward(g, v[0])?;
            weighted_sum(g, y, 1)
        })?);
    }
    // Layer norm.
    {
        let mut store = ParamStore::new();
        let layer = LayerNorm::new(&mut store, "norm", 6);
        jitter(&mut store, &mut rng);
        let x = random_tensor(&mut rng, vec![4, 6]);
        out.push(check("layer_norm", &store, &[x], |g, v| {
            let y = layer.forward(g, v[0])?;
            weighted_sum(g, y, 2)
        })?);
    }
    // Scaled dot-product attention with a causal mask.
    {
        let store = ParamStore::new();
        let inputs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, vec![l, d])).collect();
        let mask = causal_mask(l);
        out.push(check("attention", &store, &inputs, |g, v| {
            let y = attention(g, v[0], v[1], v[2], Some(&mask), d)?;
            weighted_sum(g, y, 3)
        })?);
    }
    // Multi-head attention (cross form: queries and keys differ).
    {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut Init::new(seed), "mha", d, heads, AttentionScale::HeadDim)?;
        jitter(&mut store, &mut rng);
        let xq = random_tensor(&mut rng, vec![l, d]);
        let xkv = random_tensor(&mut rng, vec![l + 1, d]);
        out.push(check("multi_head", &store, &[xq, xkv], |g, v| {
            let y = mha.forward(g, v[0], v[1], None)?;
            weighted_sum(g, y, 4)
        })?);
    }
    // Feed-forward.
    out.push(smooth(&mut rng, |rng| {
        let mut store = ParamStore::new();
        let layer = FeedForward::new(&mut store, &mut Init::new(seed), "ff", d, ff);
        jitter(&mut store, rng);
        let x = random_tensor(rng, vec![l, d]);
        check("feed_forward", &store, &[x], |g, v| {
            let y = layer.forward(g, v[0])?;
            weighted_sum(g, y, 5)
        })
    })?);
    // Encoder layer.
    out.push(smooth(&mut rng, |rng| {
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut Init::new(seed), "enc", d, heads, ff, 0.1, AttentionScale::HeadDim)?;
        jitter(&mut store, rng);
        let x = random_tensor(rng, vec![l, d]);
        check("encoder_layer", &store, &[x], |g, v| {
            let y = layer.forward(g, v[0])?;
            weighted_sum(g, y, 6)
        })
    })?);
    // Decoder layer.
    out.push(smooth(&mut rng, |rng| {
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, &mut Init::new(seed), "dec", d, heads, ff, 0.1, AttentionScale::HeadDim)?;
        jitter(&mut store, rng);
        let y0 = random_tensor(rng, vec![l, d]);
        let mem = random_tensor(rng, vec![l + 2, d]);
        check("decoder_layer", &store, &[y0, mem], |g, v| {
            let y = layer.forward(g, v[0], v[1])?;
            weighted_sum(g, y, 7)
        })
    })?);
    // LSTM.
    {
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, &mut Init::new(seed), "lstm", 5, 4);
        jitter(&mut store, &mut rng);
        let x = random_tensor(&mut rng, vec![4, 5]);
        out.push(check("lstm", &store, &[x], |g, v| {
            let y = layer.forward(g, v[0])?;
            weighted_sum(g, y, 8)
        })?);
    }
    // RMSE loss.
    {
        let store = ParamStore::new();
        let p = random_tensor(&mut rng, vec![6, 1]);
        let t = random_tensor(&mut rng, vec![6, 1]);
        out.push(check("rmse_loss", &store, &[p, t], |g, v| rmse_loss(g, v[0], v[1], 0.0))?);
    }
    // Encoder branches.
    let cfg = small_config(Variant::Tfbest);
    out.push(smooth(&mut rng, |rng| {
        let mut model = TfbestModel::<f64>::new(cfg.clone(), seed)?;
        jitter(model.params_mut(), rng);
        let x = random_tensor(rng, vec![cfg.window, cfg.features]);
        let m = &model;
        check("time_encode", model.params(), &[x], |g, v| {
            let y = m.time_encode(g, v[0])?;
            weighted_sum(g, y, 9)
        })
    })?);
    out.push(smooth(&mut rng, |rng| {
        let mut model = TfbestModel::<f64>::new(cfg.clone(), seed)?;
        jitter(model.params_mut(), rng);
        let x = random_tensor(rng, vec![cfg.window, cfg.features]);
        let m = &model;
        check("sensor_encode", model.params(), &[x], |g, v| {
            let y = m.sensor_encode(g, v[0])?;
            weighted_sum(g, y, 10)
        })
    })?);
    for variant in [Variant::Tfbest, Variant::Dast, Variant::Vanilla] {
        out.push(check_model(variant, 2, seed)?);
    }
    Ok(out)
}
