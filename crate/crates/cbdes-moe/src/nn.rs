//! Layers: parameter containers plus graph-building forward passes.

use crate::autodiff::{Graph, Mode, Value};
use crate::error::Result;
use crate::param::Parameter;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Walks every parameter of a model component in a fixed order.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Accumulates gradients from a backward pass into parameter slots.
    fn accumulate_grads(&mut self, store: &crate::autodiff::GradStore) {
        self.visit_params_mut(&mut |p| {
            if let Some(g) = store.get(p.id()) {
                p.accumulate_grad(g);
            }
        });
    }
}

/// He-normal initialization for conv/ReLU-family weights.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_normal(shape, 0.0, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier-uniform initialization for linear weights.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

// ── Conv2d ──────────────────────────────────────────────────────────────────

pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::grouped(name, cin, cout, kernel, stride, padding, 1, rng)
    }

    pub fn grouped(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cpg = cin / groups;
        let fan_in = cpg * kernel * kernel;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                he_normal(&[cout, cpg, kernel, kernel], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d_grouped(x, w, b, self.stride, self.padding, self.groups)
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

// ── ChannelNorm (per-channel batch norm) ────────────────────────────────────

pub struct ChannelNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    // running statistics ride along as gradient-free parameters so they
    // persist through checkpoints; the optimizer never sees a gradient for
    // them and leaves them untouched
    running_mean: Parameter,
    running_var: Parameter,
    momentum: f64,
}

impl ChannelNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Parameter::new(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
            ),
            running_var: Parameter::new(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Value) -> Result<Value> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        match g.mode() {
            Mode::Train => {
                let shape = g.shape_of(x);
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let (out, mean, var) = g.channel_norm_train(x, gamma, beta)?;
                // running variance uses the unbiased estimate
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = self.running_mean.value_mut().data_mut();
                let rv = self.running_var.value_mut().data_mut();
                for c in 0..mean.len() {
                    rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                    rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c] * unbias;
                }
                Ok(out)
            }
            Mode::Eval => {
                let rm = self.running_mean.value().data();
                let rv = self.running_var.value().data();
                g.channel_norm_eval(x, gamma, beta, rm, rv)
            }
        }
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (
            self.running_mean.value().data(),
            self.running_var.value().data(),
        )
    }
}

impl Module for ChannelNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

// ── PReLU ───────────────────────────────────────────────────────────────────

pub struct PRelu {
    pub alpha: Parameter,
}

impl PRelu {
    /// `channels == 1` gives a single shared slope.
    pub fn new(name: &str, channels: usize) -> Self {
        PRelu {
            alpha: Parameter::new(format!("{name}.alpha"), Tensor::full(&[channels], 0.25)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let a = g.param(&self.alpha);
        g.prelu(x, a)
    }
}

impl Module for PRelu {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.alpha);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.alpha);
    }
}

// ── Linear ──────────────────────────────────────────────────────────────────

pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                xavier_uniform(&[d_out, d_in], d_in, d_out, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    /// All-zero weights and bias; used for the router's final scoring layer
    /// so a fresh router emits exactly uniform probabilities.
    pub fn new_zeroed(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[d_out, d_in])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

// ── LayerNorm ───────────────────────────────────────────────────────────────

pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta)
    }

    /// Layer norm over the channel dim of a `[B,C,H,W]` map.
    pub fn forward_channels_last(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let nhwc = g.permute(x, &[0, 2, 3, 1])?;
        let normed = self.forward(g, nhwc)?;
        g.permute(normed, &[0, 3, 1, 2])
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

// ── Multi-head attention ────────────────────────────────────────────────────

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::Error::InvalidConfig(format!(
                "attention dim {} not divisible by {} heads",
                dim, heads
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Standard self-attention over `[B, N, D]` tokens.
    pub fn forward(&self, g: &mut Graph, tokens: Value) -> Result<Value> {
        self.forward_kv(g, tokens, tokens)
    }

    /// Cross-attention: queries from `q_tokens` `[B, Nq, D]`, keys/values
    /// from `kv_tokens` `[B, Nkv, D]`. Scale is `1/sqrt(D/heads)`.
    pub fn forward_kv(&self, g: &mut Graph, q_tokens: Value, kv_tokens: Value) -> Result<Value> {
        let qshape = g.shape_of(q_tokens).to_vec();
        let (b, nq) = (qshape[0], qshape[1]);
        let nkv = g.shape_of(kv_tokens)[1];
        let (h, dh) = (self.heads, self.dim / self.heads);

        let q = self.wq.forward(g, q_tokens)?;
        let k = self.wk.forward(g, kv_tokens)?;
        let v = self.wv.forward(g, kv_tokens)?;

        let split = |g: &mut Graph, t: Value, n: usize| -> Result<Value> {
            let t = g.reshape(t, vec![b, n, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, vec![b * h, n, dh])
        };
        let q = split(g, q, nq)?;
        let k = split(g, k, nkv)?;
        let v = split(g, v, nkv)?;

        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores)?;
        let ctx = g.bmm(attn, v, false)?;

        let ctx = g.reshape(ctx, vec![b, h, nq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b, nq, self.dim])?;
        self.wo.forward(g, ctx)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
    }
}
