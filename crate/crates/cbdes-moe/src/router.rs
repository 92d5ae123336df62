//! Self-attention router: image to per-expert routing probabilities.
//!
//! Pipeline: a three-stage conv pyramid (channels C -> c1 -> c2 -> d_emb,
//! each stage conv3x3 + channel norm + PReLU + 2x2 max pool), spatial tokens
//! through one multi-head self-attention layer followed by layer norm, a mean
//! over tokens into a global descriptor, a 3-layer PReLU MLP producing one
//! logit per expert, and a row softmax.

use crate::autodiff::{Graph, Mode, Value};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, Linear, LayerNorm, Module, MultiHeadAttention, PRelu};
use crate::param::Parameter;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Router hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SarConfig {
    /// Attention embedding dim; also the final pyramid channel count.
    pub d_emb: usize,
    pub heads: usize,
    pub num_experts: usize,
    /// Channel progression of the first two pyramid stages.
    pub channels: (usize, usize),
    pub mlp_hidden: usize,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig {
            d_emb: 128,
            heads: 4,
            num_experts: 4,
            channels: (32, 64),
            mlp_hidden: 64,
        }
    }
}

impl SarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_emb % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_emb {} must divide into {} heads",
                self.d_emb, self.heads
            )));
        }
        if self.num_experts < 2 {
            return Err(Error::InvalidConfig("need at least 2 experts".into()));
        }
        let (c1, c2) = self.channels;
        if !(c1 < c2 && c2 <= self.d_emb) {
            return Err(Error::InvalidConfig(format!(
                "channel progression must satisfy c1 < c2 <= d_emb, got ({}, {}, {})",
                c1, c2, self.d_emb
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic per-image expert probabilities.
#[derive(Debug, Clone)]
pub struct RoutingMatrix {
    probs: Tensor,
}

impl RoutingMatrix {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 2 {
            return Err(Error::shape(
                "RoutingMatrix",
                "[B,K] matrix",
                format!("{:?}", probs.shape()),
            ));
        }
        Ok(RoutingMatrix { probs })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.num_experts();
        &self.probs.data()[i * k..][..k]
    }

    /// Index of the row maximum; ties resolve to the lowest index.
    pub fn argmax_row(&self, i: usize) -> usize {
        argmax_tie_low(self.row(i))
    }

    /// Per-column mean activation (Eq-11-style column means).
    pub fn mean_per_expert(&self) -> Vec<f64> {
        let (n, k) = (self.batch(), self.num_experts());
        let mut mean = vec![0.0; k];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += self.probs.data()[i * k + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        mean
    }

    /// Largest |row sum - 1| over the batch.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.batch())
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes one row per image with 6-decimal probabilities, plus a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.num_experts())
            .map(|k| format!("expert_{k}"))
            .collect();
        writeln!(file, "{}", header.join(","))?;
        for i in 0..self.batch() {
            let cells: Vec<String> = self.row(i).iter().map(|p| format!("{p:.6}")).collect();
            writeln!(file, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// First maximal index under strict comparison.
pub fn argmax_tie_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct PyramidStage {
    conv: Conv2d,
    norm: ChannelNorm,
    act: PRelu,
}

impl PyramidStage {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        PyramidStage {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 1, 1, rng),
            norm: ChannelNorm::new(&format!("{name}.norm"), cout),
            act: PRelu::new(&format!("{name}.act"), cout),
        }
    }

    fn forward(&mut self, g: &mut Graph, x: Value) -> Result<Value> {
        let x = self.conv.forward(g, x)?;
        let x = self.norm.forward(g, x)?;
        let x = self.act.forward(g, x)?;
        g.maxpool2x2(x)
    }
}

impl Module for PyramidStage {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
        self.act.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
        self.act.visit_params_mut(f);
    }
}

/// The router network.
pub struct SelfAttentionRouter {
    config: SarConfig,
    stage1: PyramidStage,
    stage2: PyramidStage,
    stage3: PyramidStage,
    pub attention: MultiHeadAttention,
    pub token_norm: LayerNorm,
    pub score1: Linear,
    pub score_act1: PRelu,
    pub score2: Linear,
    pub score_act2: PRelu,
    pub score3: Linear,
}

impl SelfAttentionRouter {
    /// Builds a router for `in_channels` input planes. The final scoring
    /// layer starts at zero so a fresh router emits exactly uniform rows.
    pub fn new(config: SarConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c1, c2) = config.channels;
        Ok(SelfAttentionRouter {
            stage1: PyramidStage::new("router.stage1", in_channels, c1, rng),
            stage2: PyramidStage::new("router.stage2", c1, c2, rng),
            stage3: PyramidStage::new("router.stage3", c2, config.d_emb, rng),
            attention: MultiHeadAttention::new("router.mha", config.d_emb, config.heads, rng)?,
            token_norm: LayerNorm::new("router.token_norm", config.d_emb),
            score1: Linear::new("router.score1", config.d_emb, config.mlp_hidden, rng),
            score_act1: PRelu::new("router.score_act1", 1),
            score2: Linear::new("router.score2", config.mlp_hidden, config.mlp_hidden, rng),
            score_act2: PRelu::new("router.score_act2", 1),
            score3: Linear::new_zeroed("router.score3", config.mlp_hidden, config.num_experts),
            config,
        })
    }

    pub fn config(&self) -> &SarConfig {
        &self.config
    }

    /// Three conv/norm/act/pool stages: `[B,C,H,W] -> [B,d_emb,H/8,W/8]`.
    pub fn extract_pyramid(&mut self, g: &mut Graph, image: Value) -> Result<Value> {
        let shape = g.shape_of(image);
        if shape.len() != 4 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(Error::InvalidDimension(format!(
                "router input must be [B,C,H,W] with H,W divisible by 8, got {:?}",
                shape
            )));
        }
        let x = self.stage1.forward(g, image)?;
        let x = self.stage2.forward(g, x)?;
        self.stage3.forward(g, x)
    }

    /// Flattens the grid to tokens, applies attention then layer norm, and
    /// averages over tokens: `[B,d_emb,H',W'] -> [B,d_emb]`.
    pub fn attend_and_pool(&self, g: &mut Graph, feature: Value) -> Result<Value> {
        let shape = g.shape_of(feature).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        // row-major spatial tokens
        let tokens = g.permute(feature, &[0, 2, 3, 1])?;
        let tokens = g.reshape(tokens, vec![b, h * w, c])?;
        let attended = self.attention.forward(g, tokens)?;
        let normed = self.token_norm.forward(g, attended)?;
        g.mean_tokens(normed)
    }

    /// 3-layer MLP with PReLU activations between: `[B,d_emb] -> [B,K]`.
    pub fn score_experts(&self, g: &mut Graph, descriptor: Value) -> Result<Value> {
        let x = self.score1.forward(g, descriptor)?;
        let x = self.score_act1.forward(g, x)?;
        let x = self.score2.forward(g, x)?;
        let x = self.score_act2.forward(g, x)?;
        self.score3.forward(g, x)
    }

    /// Full pipeline producing the routing probabilities node `[B,K]`.
    pub fn route(&mut self, g: &mut Graph, image: Value) -> Result<Value> {
        let pyramid = self.extract_pyramid(g, image)?;
        let descriptor = self.attend_and_pool(g, pyramid)?;
        let logits = self.score_experts(g, descriptor)?;
        g.softmax(logits)
    }

    /// Eval-mode routing of a batch into a [`RoutingMatrix`].
    pub fn route_eval(&mut self, image: &Tensor, threads: usize) -> Result<RoutingMatrix> {
        let mut g = Graph::with_threads(Mode::Eval, threads);
        let x = g.constant(image.clone());
        let p = self.route(&mut g, x)?;
        RoutingMatrix::new(g.detach(p))
    }
}

impl Module for SelfAttentionRouter {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stage1.visit_params(f);
        self.stage2.visit_params(f);
        self.stage3.visit_params(f);
        self.attention.visit_params(f);
        self.token_norm.visit_params(f);
        self.score1.visit_params(f);
        self.score_act1.visit_params(f);
        self.score2.visit_params(f);
        self.score_act2.visit_params(f);
        self.score3.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stage1.visit_params_mut(f);
        self.stage2.visit_params_mut(f);
        self.stage3.visit_params_mut(f);
        self.attention.visit_params_mut(f);
        self.token_norm.visit_params_mut(f);
        self.score1.visit_params_mut(f);
        self.score_act1.visit_params_mut(f);
        self.score2.visit_params_mut(f);
        self.score_act2.visit_params_mut(f);
        self.score3.visit_params_mut(f);
    }
}
