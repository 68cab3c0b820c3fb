//! Parameterized layers built on the tape.
//!
//! Layers only hold [`ParamId`]s into a [`ParamStore`]; the same layer
//! structure can therefore be evaluated at either precision by casting the
//! store. A forward pass runs inside a [`Graph`], which owns the tape, binds
//! parameters lazily and hands out dropout masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Glorot-uniform initializer plus constants, driven by one seeded stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn glorot<T: Real>(&mut self, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor<T> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-limit..limit)))
    }
}

/// One forward (and optionally backward) pass over a tape.
pub struct Graph<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, training: bool, dropout_seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            training,
            dropout_seed,
            dropout_calls: 0,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Leaf for parameter `id`, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Dropout with a mask stream derived from the graph seed and the call
    /// index, so every dropout site gets its own reproducible generator.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p == 0.0 {
            return self.tape.dropout(x, p, false, &mut NoRng);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.dropout_seed, call));
        self.tape.dropout(x, p, true, &mut rng)
    }

    /// Gradient for every parameter in store order (zeros if unused).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.bound
            .iter()
            .zip(self.params.values())
            .map(|(b, v)| match b {
                Some(var) => grads.get(*var),
                None => Ok(Tensor::zeros(v.shape().to_vec())),
            })
            .collect()
    }
}

/// SplitMix64-style mixing of a seed with a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Never sampled: dropout is the identity on this path.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("identity dropout does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("identity dropout does not sample")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("identity dropout does not sample")
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.glorot(in_dim, out_dim, vec![in_dim, out_dim]),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x W` only.
    pub fn without_bias<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.glorot(in_dim, out_dim, vec![in_dim, out_dim]),
        );
        LinearLayer {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let normed = g.tape.layer_norm(x, T::lit(self.eps))?;
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        let scaled = g.tape.mul_row(normed, gain)?;
        g.tape.add_row(scaled, bias)
    }
}

/// Denominator used for the square-root scaling of attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// Per-head width `d_model / h`.
    #[default]
    HeadDim,
    /// Full model width.
    ModelDim,
}

/// `softmax(q k^T / sqrt(scale_dim)) v`, with `mask[i * L_k + j] == false`
/// excluding key `j` for query `i`.
pub fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
    scale_dim: usize,
) -> Result<Var> {
    let (qs, ks, vs) = (g.tape.shape(q).to_vec(), g.tape.shape(k).to_vec(), g.tape.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention q/k", &qs, &ks));
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(Error::shape("attention k/v", &ks, &vs));
    }
    if let Some(m) = mask {
        if m.len() != qs[0] * ks[0] {
            return Err(Error::shape("attention mask", &[qs[0], ks[0]], &[m.len()]));
        }
    }
    let kt = g.tape.transpose(k)?;
    let logits = g.tape.matmul(q, kt)?;
    let scaled = g.tape.scale(logits, T::one() / T::lit(scale_dim as f64).sqrt())?;
    let weights = g.tape.masked_softmax(scaled, 1, mask)?;
    g.tape.matmul(weights, v)
}

/// Lower-triangular mask: query `i` may attend to keys `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|idx| idx % len <= idx / len).collect()
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub scale: AttentionScale,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        heads: usize,
        scale: AttentionScale,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            d_model,
            query: LinearLayer::new(store, init, &format!("{name}.query"), d_model, d_model),
            // A key bias shifts every logit of a query row equally, which the
            // softmax cancels; it would never receive gradient.
            key: LinearLayer::without_bias(store, init, &format!("{name}.key"), d_model, d_model),
            value: LinearLayer::new(store, init, &format!("{name}.value"), d_model, d_model),
            output: LinearLayer::new(store, init, &format!("{name}.output"), d_model, d_model),
            scale,
        })
    }

    pub fn param_count(d_model: usize) -> usize {
        4 * LinearLayer::param_count(d_model, d_model) - d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale_dim(&self) -> usize {
        match self.scale {
            AttentionScale::HeadDim => self.head_dim(),
            AttentionScale::ModelDim => self.d_model,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x_q: Var,
        x_kv: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.query.forward(g, x_q)?;
        let k = self.key.forward(g, x_kv)?;
        let v = self.value.forward(g, x_kv)?;
        let dk = self.head_dim();
        let heads = if self.heads == 1 {
            attention(g, q, k, v, mask, self.scale_dim())?
        } else {
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.tape.slice(q, 1, h * dk, dk)?;
                let kh = g.tape.slice(k, 1, h * dk, dk)?;
                let vh = g.tape.slice(v, 1, h * dk, dk)?;
                outs.push(attention(g, qh, kh, vh, mask, self.scale_dim())?);
            }
            g.tape.concat(&outs, 1)?
        };
        self.output.forward(g, heads)
    }
}

/// Position-wise `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: LinearLayer,
    pub outer: LinearLayer,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Self {
        FeedForward {
            inner: LinearLayer::new(store, init, &format!("{name}.inner"), d_model, d_ff),
            outer: LinearLayer::new(store, init, &format!("{name}.outer"), d_ff, d_model),
        }
    }

    pub fn param_count(d_model: usize, d_ff: usize) -> usize {
        LinearLayer::param_count(d_model, d_ff) + LinearLayer::param_count(d_ff, d_model)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.tape.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// `x + Dropout(sublayer)` followed by layer norm.
fn residual_norm<T: Real>(
    g: &mut Graph<'_, T>,
    norm: &LayerNorm,
    x: Var,
    sub: Var,
    dropout: f64,
) -> Result<Var> {
    let sub = g.dropout(sub, dropout)?;
    let sum = g.tape.add(x, sub)?;
    norm.forward(g, sum)
}

/// Post-norm encoder layer: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ff: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        scale: AttentionScale,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d_model, heads, scale)?,
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d_model, d_ff),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d_model),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
            dropout,
        })
    }

    pub fn param_count(d_model: usize, d_ff: usize) -> usize {
        MultiHeadAttention::param_count(d_model) + FeedForward::param_count(d_model, d_ff) + 4 * d_model
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x, x, None)?;
        let x = residual_norm(g, &self.norm_attn, x, a, self.dropout)?;
        let f = self.ff.forward(g, x)?;
        residual_norm(g, &self.norm_ff, x, f, self.dropout)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// encoder memory, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ff: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        scale: AttentionScale,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d_model, heads, scale)?,
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), d_model, heads, scale)?,
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d_model, d_ff),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d_model),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d_model),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
            dropout,
        })
    }

    pub fn param_count(d_model: usize, d_ff: usize) -> usize {
        2 * MultiHeadAttention::param_count(d_model) + FeedForward::param_count(d_model, d_ff) + 6 * d_model
    }

    /// Output of the masked self-attention sublayer alone.
    pub fn self_attention_block<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let len = g.tape.shape(y)[0];
        let mask = causal_mask(len);
        let a = self.self_attn.forward(g, y, y, Some(&mask))?;
        residual_norm(g, &self.norm_self, y, a, self.dropout)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, y: Var, memory: Var) -> Result<Var> {
        let y = self.self_attention_block(g, y)?;
        let c = self.cross_attn.forward(g, y, memory, None)?;
        let y = residual_norm(g, &self.norm_cross, y, c, self.dropout)?;
        let f = self.ff.forward(g, y)?;
        residual_norm(g, &self.norm_ff, y, f, self.dropout)
    }
}

/// Single-layer LSTM. Gate blocks along the `4 * hidden` axis are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub input_weight: ParamId,
    pub recurrent_weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let input_weight = store.add(
            format!("{name}.input_weight"),
            init.glorot(input_dim, hidden, vec![input_dim, 4 * hidden]),
        );
        let recurrent_weight = store.add(
            format!("{name}.recurrent_weight"),
            init.glorot(hidden, hidden, vec![hidden, 4 * hidden]),
        );
        // Forget-gate bias starts at one.
        let bias = Tensor::from_fn(vec![4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                T::one()
            } else {
                T::zero()
            }
        });
        let bias = store.add(format!("{name}.bias"), bias);
        LstmLayer {
            input_weight,
            recurrent_weight,
            bias,
            input_dim,
            hidden,
        }
    }

    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        4 * hidden * (input_dim + hidden + 1)
    }

    /// Hidden-state sequence `[T, hidden]` from a zero initial state.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape("lstm input", &shape, &[shape[0], self.input_dim]));
        }
        let steps = shape[0];
        let d = self.hidden;
        let (wi, wh, b) = (
            g.param(self.input_weight),
            g.param(self.recurrent_weight),
            g.param(self.bias),
        );
        let projected = g.tape.matmul(x, wi)?;
        let projected = g.tape.add_row(projected, b)?;

        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut pre = g.tape.slice(projected, 0, t, 1)?;
            if let Some(h_prev) = h {
                let rec = g.tape.matmul(h_prev, wh)?;
                pre = g.tape.add(pre, rec)?;
            }
            let i_gate = g.tape.slice(pre, 1, 0, d)?;
            let i_gate = g.tape.sigmoid(i_gate)?;
            let f_gate = g.tape.slice(pre, 1, d, d)?;
            let f_gate = g.tape.sigmoid(f_gate)?;
            let cand = g.tape.slice(pre, 1, 2 * d, d)?;
            let cand = g.tape.tanh(cand)?;
            let o_gate = g.tape.slice(pre, 1, 3 * d, d)?;
            let o_gate = g.tape.sigmoid(o_gate)?;

            let write = g.tape.mul(i_gate, cand)?;
            let c_next = match c {
                Some(c_prev) => {
                    let keep = g.tape.mul(f_gate, c_prev)?;
                    g.tape.add(keep, write)?
                }
                None => write,
            };
            let squashed = g.tape.tanh(c_next)?;
            let h_next = g.tape.mul(o_gate, squashed)?;
            outputs.push(h_next);
            h = Some(h_next);
            c = Some(c_next);
        }
        g.tape.concat(&outputs, 0)
    }
}

/// Fixed sine/cosine position table `[len, d_model]`.
pub fn sinusoidal_pe<T: Real>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if len == 0 || d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal encoding needs len >= 1 and even d_model, got len={len} d_model={d_model}"
        )));
    }
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for j in 0..d_model {
            let pair = (j / 2) * 2;
            let angle = pos as f64 / 10_000_f64.powf(pair as f64 / d_model as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn store_with<F: FnOnce(&mut ParamStore<f64>, &mut Init) -> R, R>(seed: u64, f: F) -> (ParamStore<f64>, R) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let r = f(&mut store, &mut init);
        (store, r)
    }

    fn random(seed: u64, shape: Vec<usize>) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sinusoidal_values() {
        let pe = sinusoidal_pe::<f64>(2, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.row(1).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((pe.at(1, 0) - 0.841471).abs() < 1e-6);
        assert!((pe.at(1, 3) - 0.999950).abs() < 1e-6);
        assert!(sinusoidal_pe::<f64>(3, 5).is_err());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn linear_forward_matches_hand_computation() {
        let (mut store, lin) = store_with(0, |s, i| LinearLayer::new(s, i, "lin", 2, 1));
        *store.get_mut(lin.weight) = Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap();
        *store.get_mut(lin.bias.unwrap()) = Tensor::new(vec![1], vec![0.5]).unwrap();
        let mut g = Graph::new(&store, false, 0);
        let x = g.input(Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 4.0]).unwrap());
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let (store, ln) = store_with(0, |s, _| LayerNorm::new(s, "ln", 5));
        let mut g = Graph::new(&store, false, 0);
        let x = g.input(random(3, vec![4, 5]));
        let y = ln.forward(&mut g, x).unwrap();
        for row in g.value(y).to_rows() {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn identity_projections_reduce_to_plain_attention() {
        let d = 4;
        let (mut store, mha) =
            store_with(1, |s, i| MultiHeadAttention::new(s, i, "mha", d, 1, AttentionScale::HeadDim).unwrap());
        let eye = Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            *store.get_mut(lin.weight) = eye.clone();
            if let Some(b) = lin.bias {
                *store.get_mut(b) = Tensor::zeros(vec![d]);
            }
        }
        let x = random(2, vec![3, d]);
        let mut g = Graph::new(&store, false, 0);
        let xv = g.input(x.clone());
        let got = mha.forward(&mut g, xv, xv, None).unwrap();
        let plain = attention(&mut g, xv, xv, xv, None, d).unwrap();
        let (a, b) = (g.value(got).data(), g.value(plain).data());
        assert!(a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        assert!(MultiHeadAttention::new(&mut store, &mut init, "m", 6, 4, AttentionScale::HeadDim).is_err());
    }

    #[test]
    fn decoder_self_attention_is_causal() {
        let (store, dec) = store_with(4, |s, i| {
            DecoderLayer::new(s, i, "dec", 4, 2, 8, 0.0, AttentionScale::HeadDim).unwrap()
        });
        let y = random(5, vec![4, 4]);
        let run = |y: &Tensor<f64>| {
            let mut g = Graph::new(&store, false, 0);
            let v = g.input(y.clone());
            let out = dec.self_attention_block(&mut g, v).unwrap();
            g.value(out).clone()
        };
        let base = run(&y);
        let mut bumped = y.clone();
        bumped.data_mut()[2 * 4 + 1] += 0.7;
        let moved = run(&bumped);
        for t in 0..2 {
            assert_eq!(base.row(t), moved.row(t), "row {t} saw the future");
        }
        assert_ne!(base.row(2), moved.row(2));
    }

    #[test]
    fn decoder_memory_reaches_every_position() {
        let (store, dec) = store_with(6, |s, i| {
            DecoderLayer::new(s, i, "dec", 4, 2, 8, 0.0, AttentionScale::HeadDim).unwrap()
        });
        let y = random(7, vec![3, 4]);
        let mem = random(8, vec![5, 4]);
        let run = |m: &Tensor<f64>| {
            let mut g = Graph::new(&store, false, 0);
            let (yv, mv) = (g.input(y.clone()), g.input(m.clone()));
            let out = dec.forward(&mut g, yv, mv).unwrap();
            g.value(out).clone()
        };
        let base = run(&mem);
        let mut bumped = mem.clone();
        bumped.data_mut()[3] += 0.5;
        let moved = run(&bumped);
        for t in 0..3 {
            assert_ne!(base.row(t), moved.row(t));
        }
    }

    #[test]
    fn lstm_single_step_matches_cell_formula() {
        let (input, hidden) = (3, 2);
        let (store, lstm) = store_with(9, |s, i| LstmLayer::new(s, i, "lstm", input, hidden));
        let x = random(10, vec![1, input]);
        let mut g = Graph::new(&store, false, 0);
        let xv = g.input(x.clone());
        let h = lstm.forward(&mut g, xv).unwrap();
        let got = g.value(h).data().to_vec();

        let wi = store.get(lstm.input_weight);
        let b = store.get(lstm.bias);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pre: Vec<f64> = (0..4 * hidden)
            .map(|j| (0..input).map(|k| x.data()[k] * wi.at(k, j)).sum::<f64>() + b.data()[j])
            .collect();
        for u in 0..hidden {
            let i = sig(pre[u]);
            let c = i * pre[2 * hidden + u].tanh();
            let o = sig(pre[3 * hidden + u]);
            assert!((got[u] - o * c.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let (store, lstm) = store_with(0, |s, i| LstmLayer::new(s, i, "lstm", 2, 3));
        assert_eq!(store.get(lstm.bias).data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn every_encoder_and_decoder_parameter_gets_gradient() {
        let (store, (enc, dec)) = store_with(11, |s, i| {
            (
                EncoderLayer::new(s, i, "enc", 4, 2, 8, 0.0, AttentionScale::HeadDim).unwrap(),
                DecoderLayer::new(s, i, "dec", 4, 2, 8, 0.0, AttentionScale::HeadDim).unwrap(),
            )
        });
        let mut g = Graph::new(&store, true, 3);
        let x = g.input(random(12, vec![5, 4]));
        let target = g.input(random(13, vec![5, 4]));
        let m = enc.forward(&mut g, x).unwrap();
        let y = dec.forward(&mut g, x, m).unwrap();
        let diff = g.tape.sub(y, target).unwrap();
        let sq = g.tape.mul(diff, diff).unwrap();
        let loss = g.tape.sum(sq).unwrap();
        let grads = g.tape.backward(loss).unwrap();
        let pg = g.param_grads(&grads).unwrap();
        for (name, gr) in store.names().iter().zip(&pg) {
            assert!(gr.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn param_count_formulas_match_stores() {
        let (d, ff) = (8, 12);
        let (s, _) = store_with(0, |s, i| MultiHeadAttention::new(s, i, "m", d, 2, AttentionScale::HeadDim).unwrap());
        assert_eq!(s.scalar_count(), MultiHeadAttention::param_count(d));
        let (s, _) = store_with(0, |s, i| EncoderLayer::new(s, i, "e", d, 2, ff, 0.1, AttentionScale::HeadDim).unwrap());
        assert_eq!(s.scalar_count(), EncoderLayer::param_count(d, ff));
        let (s, _) = store_with(0, |s, i| DecoderLayer::new(s, i, "d", d, 2, ff, 0.1, AttentionScale::HeadDim).unwrap());
        assert_eq!(s.scalar_count(), DecoderLayer::param_count(d, ff));
        let (s, _) = store_with(0, |s, i| LstmLayer::new(s, i, "l", 5, d));
        assert_eq!(s.scalar_count(), LstmLayer::param_count(5, d));
    }

    proptest! {
        #[test]
        fn sinusoidal_values_bounded(len in 1usize..40, half in 1usize..16) {
            let pe = sinusoidal_pe::<f64>(len, 2 * half).unwrap();
            prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn lstm_outputs_bounded(seed in any::<u64>(), steps in 1usize..6) {
            let (store, lstm) = store_with(seed, |s, i| LstmLayer::new(s, i, "l", 3, 4));
            let mut g = Graph::new(&store, false, 0);
            let x = g.input(random(seed ^ 1, vec![steps, 3]).cast::<f64>());
            let h = lstm.forward(&mut g, x).unwrap();
            prop_assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
