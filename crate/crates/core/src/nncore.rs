//! Dense-layer engine: parameter blocks, activations, softmax and
//! cross-entropy, Glorot initialisation and the Adam optimiser.
//!
//! The free functions taking a [`ParameterBlock`] are the reference API. The
//! `pub(crate)` slice kernels below them are what the networks in
//! [`crate::architectures`] run on, against one flat parameter vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used inside `ln` by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`, given the output `y = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// Weights (`out_dim x in_dim`, row-major) and bias of one dense layer.
///
/// Blocks carrying the same `tie_tag` are one parameter set: networks store a
/// single canonical copy and point every use at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default)]
    pub tie_tag: Option<String>,
}

impl ParameterBlock {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        ParameterBlock { out_dim, in_dim, weights: vec![0.0; out_dim * in_dim], bias: vec![0.0; out_dim], tie_tag: None }
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Self::zeros(n, n);
        for i in 0..n {
            b.weights[i * n + i] = 1.0;
        }
        b
    }

    pub fn with_tie_tag(mut self, tag: &str) -> Self {
        self.tie_tag = Some(tag.to_string());
        self
    }

    pub fn n_parameters(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Glorot/Xavier uniform weights on `[-sqrt(6/(in+out)), sqrt(6/(in+out))]`, zero bias.
pub fn glorot_init<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> ParameterBlock {
    let mut block = ParameterBlock::zeros(out_dim, in_dim);
    glorot_fill(&mut block.weights, out_dim, in_dim, rng);
    block
}

pub(crate) fn glorot_fill<R: Rng + ?Sized>(weights: &mut [f64], out_dim: usize, in_dim: usize, rng: &mut R) {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    for w in weights {
        *w = rng.gen_range(-limit..=limit);
    }
}

/// What [`dense_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub output: Vec<f64>,
    pub activation: Activation,
    weights: Vec<f64>,
    out_dim: usize,
    in_dim: usize,
}

/// Gradients of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrad {
    pub out_dim: usize,
    pub in_dim: usize,
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl BlockGrad {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        BlockGrad { out_dim, in_dim, d_weights: vec![0.0; out_dim * in_dim], d_bias: vec![0.0; out_dim] }
    }
}

pub fn dense_forward(x: &[f64], p: &ParameterBlock, a: Activation) -> Result<(Vec<f64>, DenseCache)> {
    if x.len() != p.in_dim {
        return Err(Error::Dimension { expected: p.in_dim, got: x.len() });
    }
    let mut pre = vec![0.0; p.out_dim];
    affine(&p.weights, &p.bias, x, &mut pre);
    let output: Vec<f64> = pre.iter().map(|&z| a.apply(z)).collect();
    let cache = DenseCache { input: x.to_vec(), pre_activation: pre, output: output.clone(), activation: a, weights: p.weights.clone(), out_dim: p.out_dim, in_dim: p.in_dim };
    Ok((output, cache))
}

/// Exact gradients of the cached forward map; returns `(dW, db)` and `dx`.
pub fn dense_backward(cache: &DenseCache, upstream: &[f64]) -> Result<(BlockGrad, Vec<f64>)> {
    if upstream.len() != cache.out_dim {
        return Err(Error::Dimension { expected: cache.out_dim, got: upstream.len() });
    }
    let mut grad = BlockGrad::zeros(cache.out_dim, cache.in_dim);
    let delta: Vec<f64> = upstream.iter().zip(cache.pre_activation.iter().zip(&cache.output)).map(|(&u, (&z, &y))| u * cache.activation.derivative(z, y)).collect();
    let mut dx = vec![0.0; cache.in_dim];
    accumulate_layer_grad(&cache.weights, &delta, &cache.input, &mut grad.d_weights, &mut grad.d_bias, Some(&mut dx));
    Ok((grad, dx))
}

/// Gradient of a tied block: the elementwise sum over all of its uses.
pub fn accumulate_tied_gradients(grads: &[BlockGrad]) -> Result<BlockGrad> {
    let first = grads.first().ok_or_else(|| Error::InvalidArgument("no gradients to accumulate".into()))?;
    let mut total = BlockGrad::zeros(first.out_dim, first.in_dim);
    for g in grads {
        if g.out_dim != first.out_dim || g.in_dim != first.in_dim {
            return Err(Error::Dimension { expected: first.out_dim * first.in_dim, got: g.out_dim * g.in_dim });
        }
        for (t, v) in total.d_weights.iter_mut().zip(&g.d_weights) {
            *t += v;
        }
        for (t, v) in total.d_bias.iter_mut().zip(&g.d_bias) {
            *t += v;
        }
    }
    Ok(total)
}

/// Numerically stable softmax.
pub fn softmax(u: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("utility {bad} passed to softmax")));
    }
    let mut p = vec![0.0; u.len()];
    softmax_into(u, &mut p);
    Ok(p)
}

#[inline]
pub(crate) fn softmax_into(u: &[f64], out: &mut [f64]) {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(u) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `ln p_chosen` from utilities, floored at `ln(PROB_FLOOR)`. Flags whether the floor applied.
#[inline]
pub(crate) fn chosen_log_prob(u: &[f64], chosen: usize) -> (f64, bool) {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + u.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let lp = u[chosen] - lse;
    let floor = PROB_FLOOR.ln();
    if lp < floor {
        (floor, true)
    } else {
        (lp, false)
    }
}

/// Mean categorical cross-entropy and the number of clamped rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: usize,
}

/// `-(1/N) * sum_n ln p[n][y_n]`, with `p` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(p: &[Vec<f64>], y: &[usize]) -> Result<CrossEntropy> {
    if p.len() != y.len() {
        return Err(Error::Dimension { expected: p.len(), got: y.len() });
    }
    if p.is_empty() {
        return Err(Error::Empty("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (row, &c) in p.iter().zip(y) {
        let pc = *row.get(c).ok_or(Error::Dimension { expected: c + 1, got: row.len() })?;
        if pc < PROB_FLOOR {
            clamped += 1;
        }
        total -= pc.max(PROB_FLOOR).ln();
    }
    Ok(CrossEntropy { value: total / p.len() as f64, clamped })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_parameters: usize, config: AdamConfig) -> Self {
        AdamState { config, first_moment: vec![0.0; n_parameters], second_moment: vec![0.0; n_parameters], step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension { expected: state.first_moment.len(), got: grads.len() });
    }
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= learning_rate * (m / c1) / ((v / c2).sqrt() + epsilon);
    }
    Ok(())
}

/// `out = W x + b` for row-major `W`.
#[inline]
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Adds `delta x^T` into `dw`, `delta` into `db`, and writes `W^T delta` into `dx` when given.
#[inline]
pub(crate) fn accumulate_layer_grad(w: &[f64], delta: &[f64], input: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let n_in = input.len();
    for (o, &d) in delta.iter().enumerate() {
        db[o] += d;
        if d != 0.0 {
            for (g, &x) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                *g += d * x;
            }
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                for (v, &wv) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *v += wv * d;
                }
            }
        }
    }
}
