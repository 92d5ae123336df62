//! Four structurally heterogeneous expert backbones plus 1x1-conv adapters
//! that project every expert into one common feature shape.
//!
//! Each expert downsamples x8 over three stages and ends with a wide
//! capacity block at low resolution, but the mechanisms differ:
//!
//! * `WindowedAttention` - conv stems plus self-attention inside
//!   non-overlapping 2x2 token windows.
//! * `ResidualConv` - 3x3 conv blocks with additive skip connections.
//! * `ModernConv` - depthwise 3x3 + pointwise expansion blocks with
//!   layer-norm style normalization and strided-conv downsampling.
//! * `PyramidAttention` - self-attention whose keys/values come from a
//!   spatially reduced (2x2-pooled) grid.

use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, PRelu};
use crate::param::Parameter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The four expert paradigms, with stable ids 0..3 in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpertKind {
    WindowedAttention,
    ResidualConv,
    ModernConv,
    PyramidAttention,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::WindowedAttention,
        ExpertKind::ResidualConv,
        ExpertKind::ModernConv,
        ExpertKind::PyramidAttention,
    ];

    pub fn index(self) -> usize {
        match self {
            ExpertKind::WindowedAttention => 0,
            ExpertKind::ResidualConv => 1,
            ExpertKind::ModernConv => 2,
            ExpertKind::PyramidAttention => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown expert kind index {i}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            ExpertKind::WindowedAttention => "windowed_attention",
            ExpertKind::ResidualConv => "residual_conv",
            ExpertKind::ModernConv => "modern_conv",
            ExpertKind::PyramidAttention => "pyramid_attention",
        }
    }
}

/// Width schedule of one expert: per-stage channels plus the width of the
/// capacity block at the 2x2 tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertDims {
    pub stage_channels: [usize; 3],
    pub tail_width: usize,
    pub heads: usize,
}

impl ExpertDims {
    /// Production widths. The tails are sized so every expert dwarfs the
    /// router by well over the 20x margin the routing design assumes.
    pub fn default_for(kind: ExpertKind) -> Self {
        match kind {
            ExpertKind::WindowedAttention => ExpertDims {
                stage_channels: [16, 32, 96],
                tail_width: 944,
                heads: 4,
            },
            ExpertKind::ResidualConv => ExpertDims {
                stage_channels: [16, 40, 128],
                tail_width: 13_568,
                heads: 4,
            },
            ExpertKind::ModernConv => ExpertDims {
                stage_channels: [24, 48, 112],
                tail_width: 15_360,
                heads: 4,
            },
            ExpertKind::PyramidAttention => ExpertDims {
                stage_channels: [16, 32, 80],
                tail_width: 864,
                heads: 4,
            },
        }
    }

    /// Small widths for fast tests.
    pub fn tiny_for(kind: ExpertKind) -> Self {
        match kind {
            ExpertKind::WindowedAttention => ExpertDims {
                stage_channels: [8, 12, 16],
                tail_width: 24,
                heads: 4,
            },
            ExpertKind::ResidualConv => ExpertDims {
                stage_channels: [8, 12, 20],
                tail_width: 48,
                heads: 4,
            },
            ExpertKind::ModernConv => ExpertDims {
                stage_channels: [8, 16, 20],
                tail_width: 56,
                heads: 4,
            },
            ExpertKind::PyramidAttention => ExpertDims {
                stage_channels: [8, 12, 16],
                tail_width: 28,
                heads: 4,
            },
        }
    }
}

/// Factor by which every expert reduces the input resolution.
pub const DOWNSAMPLE_FACTOR: usize = 8;

// ── Shared graph helpers ────────────────────────────────────────────────────

/// `[B,C,H,W]` -> row-major spatial tokens `[B, H*W, C]`.
fn grid_to_tokens(g: &mut Graph, x: Value) -> Result<Value> {
    let s = g.shape_of(x).to_vec();
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, vec![s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`grid_to_tokens`].
fn tokens_to_grid(g: &mut Graph, tokens: Value, h: usize, w: usize) -> Result<Value> {
    let s = g.shape_of(tokens).to_vec();
    let t = g.reshape(tokens, vec![s[0], h, w, s[2]])?;
    g.permute(t, &[0, 3, 1, 2])
}

/// Partitions a grid into non-overlapping 2x2 windows of 4 tokens each:
/// `[B,C,H,W] -> [B*(H/2)*(W/2), 4, C]`. Grids with an odd side fall back to
/// one window covering the whole grid.
fn window_partition(g: &mut Graph, x: Value) -> Result<(Value, usize, usize)> {
    let s = g.shape_of(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 == 0 && w % 2 == 0 {
        let t = g.reshape(x, vec![b, c, h / 2, 2, w / 2, 2])?;
        let t = g.permute(t, &[0, 2, 4, 3, 5, 1])?;
        let t = g.reshape(t, vec![b * (h / 2) * (w / 2), 4, c])?;
        Ok((t, h, w))
    } else {
        let t = grid_to_tokens(g, x)?;
        Ok((t, h, w))
    }
}

fn window_merge(g: &mut Graph, tokens: Value, b: usize, c: usize, h: usize, w: usize) -> Result<Value> {
    if h % 2 == 0 && w % 2 == 0 {
        let t = g.reshape(tokens, vec![b, h / 2, w / 2, 2, 2, c])?;
        let t = g.permute(t, &[0, 5, 1, 3, 2, 4])?;
        g.reshape(t, vec![b, c, h, w])
    } else {
        tokens_to_grid(g, tokens, h, w)
    }
}

// ── Shared layer blocks ─────────────────────────────────────────────────────

struct ConvBnAct {
    conv: Conv2d,
    norm: ChannelNorm,
    act: PRelu,
}

impl ConvBnAct {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBnAct {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 1, 1, rng),
            norm: ChannelNorm::new(&format!("{name}.norm"), cout),
            act: PRelu::new(&format!("{name}.act"), cout),
        }
    }

    fn forward(&mut self, g: &mut Graph, x: Value) -> Result<Value> {
        let x = self.conv.forward(g, x)?;
        let x = self.norm.forward(g, x)?;
        self.act.forward(g, x)
    }
}

impl Module for ConvBnAct {
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

/// Pre-norm window self-attention with a residual connection.
struct WindowBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl WindowBlock {
    fn new(name: &str, channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(WindowBlock {
            norm: LayerNorm::new(&format!("{name}.norm"), channels),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), channels, heads, rng)?,
        })
    }

    fn forward(&mut self, g: &mut Graph, x: Value) -> Result<Value> {
        let s = g.shape_of(x).to_vec();
        let (tokens, h, w) = window_partition(g, x)?;
        let normed = self.norm.forward(g, tokens)?;
        let attended = self.attn.forward(g, normed)?;
        let fused = g.add(tokens, attended)?;
        window_merge(g, fused, s[0], s[1], h, w)
    }
}

impl Module for WindowBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit_params(f);
        self.attn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_params_mut(f);
        self.attn.visit_params_mut(f);
    }
}

/// Pre-norm attention whose keys/values come from a 2x2-pooled grid.
struct SraBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl SraBlock {
    fn new(name: &str, channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(SraBlock {
            norm: LayerNorm::new(&format!("{name}.norm"), channels),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), channels, heads, rng)?,
        })
    }

    fn forward(&mut self, g: &mut Graph, x: Value) -> Result<Value> {
        let s = g.shape_of(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let tokens = grid_to_tokens(g, x)?;
        let q = self.norm.forward(g, tokens)?;
        // reduce keys/values spatially, but never below two tokens: a single
        // key makes the attention weights constant and stops gradient flow
        // through the query/key projections
        let kv = if h % 2 == 0 && w % 2 == 0 && (h / 2) * (w / 2) >= 2 {
            let reduced = g.maxpool2x2(x)?;
            let kv_tokens = grid_to_tokens(g, reduced)?;
            self.norm.forward(g, kv_tokens)?
        } else {
            q
        };
        let attended = self.attn.forward_kv(g, q, kv)?;
        let fused = g.add(tokens, attended)?;
        tokens_to_grid(g, fused, h, w)
    }
}

impl Module for SraBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit_params(f);
        self.attn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_params_mut(f);
        self.attn.visit_params_mut(f);
    }
}

/// Pre-norm token MLP with a residual connection (scalar-slope PReLU).
struct TokenMlp {
    norm: LayerNorm,
    fc1: Linear,
    act: PRelu,
    fc2: Linear,
}

impl TokenMlp {
    fn new(name: &str, channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        TokenMlp {
            norm: LayerNorm::new(&format!("{name}.norm"), channels),
            fc1: Linear::new(&format!("{name}.fc1"), channels, hidden, rng),
            act: PRelu::new(&format!("{name}.act"), 1),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, channels, rng),
        }
    }

    fn forward_tokens(&self, g: &mut Graph, tokens: Value) -> Result<Value> {
        let n = self.norm.forward(g, tokens)?;
        let h = self.fc1.forward(g, n)?;
        let h = self.act.forward(g, h)?;
        let h = self.fc2.forward(g, h)?;
        g.add(tokens, h)
    }
}

impl Module for TokenMlp {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit_params(f);
        self.fc1.visit_params(f);
        self.act.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_params_mut(f);
        self.fc1.visit_params_mut(f);
        self.act.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Wraps the capacity block shared by all experts: pool the /8 grid to 2x2,
/// run `inner` there, then upsample and add back. Odd grids skip the pooling.
fn with_pooled_tail<F>(g: &mut Graph, x: Value, mut inner: F) -> Result<Value>
where
    F: FnMut(&mut Graph, Value) -> Result<Value>,
{
    let s = g.shape_of(x).to_vec();
    let (h, w) = (s[2], s[3]);
    if h % 2 == 0 && w % 2 == 0 && h * w > 1 {
        let pooled = g.maxpool2x2(x)?;
        let refined = inner(g, pooled)?;
        let up = g.upsample2x(refined)?;
        g.add(x, up)
    } else {
        let refined = inner(g, x)?;
        g.add(x, refined)
    }
}

// ── Expert trait ────────────────────────────────────────────────────────────

/// One expert backbone: image in, pre-adapter feature map out.
pub trait ExpertNet: Module + Send {
    fn kind(&self) -> ExpertKind;
    /// Channel count of the feature map this expert emits (pre-adapter).
    fn out_channels(&self) -> usize;
    fn forward(&mut self, g: &mut Graph, image: Value) -> Result<Value>;
    /// Ordered op descriptors; used to assert structural heterogeneity.
    fn op_signature(&self) -> Vec<String>;
}

// ── WindowedAttention ───────────────────────────────────────────────────────

pub struct WindowedAttentionExpert {
    dims: ExpertDims,
    stem1: ConvBnAct,
    stem2: ConvBnAct,
    attn2: WindowBlock,
    stem3: ConvBnAct,
    attn3: WindowBlock,
    tail_embed: Linear,
    tail_attn: WindowBlock,
    tail_proj: Linear,
}

impl WindowedAttentionExpert {
    fn new(name: &str, in_channels: usize, dims: ExpertDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [c0, c1, c2] = dims.stage_channels;
        Ok(WindowedAttentionExpert {
            stem1: ConvBnAct::new(&format!("{name}.stem1"), in_channels, c0, rng),
            stem2: ConvBnAct::new(&format!("{name}.stem2"), c0, c1, rng),
            attn2: WindowBlock::new(&format!("{name}.attn2"), c1, dims.heads, rng)?,
            stem3: ConvBnAct::new(&format!("{name}.stem3"), c1, c2, rng),
            attn3: WindowBlock::new(&format!("{name}.attn3"), c2, dims.heads, rng)?,
            tail_embed: Linear::new(&format!("{name}.tail_embed"), c2, dims.tail_width, rng),
            tail_attn: WindowBlock::new(&format!("{name}.tail_attn"), dims.tail_width, dims.heads, rng)?,
            tail_proj: Linear::new(&format!("{name}.tail_proj"), dims.tail_width, c2, rng),
            dims,
        })
    }
}

impl ExpertNet for WindowedAttentionExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::WindowedAttention
    }

    fn out_channels(&self) -> usize {
        self.dims.stage_channels[2]
    }

    fn forward(&mut self, g: &mut Graph, image: Value) -> Result<Value> {
        let x = self.stem1.forward(g, image)?;
        let x = g.maxpool2x2(x)?;
        let x = self.stem2.forward(g, x)?;
        let x = g.maxpool2x2(x)?;
        let x = self.attn2.forward(g, x)?;
        let x = self.stem3.forward(g, x)?;
        let x = g.maxpool2x2(x)?;
        let x = self.attn3.forward(g, x)?;
        let (embed, attn, proj) = (&self.tail_embed, &mut self.tail_attn, &self.tail_proj);
        with_pooled_tail(g, x, |g, pooled| {
            let s = g.shape_of(pooled).to_vec();
            let tokens = grid_to_tokens(g, pooled)?;
            let wide = embed.forward(g, tokens)?;
            let grid = tokens_to_grid(g, wide, s[2], s[3])?;
            let refined = attn.forward(g, grid)?;
            let tokens = grid_to_tokens(g, refined)?;
            let narrow = proj.forward(g, tokens)?;
            tokens_to_grid(g, narrow, s[2], s[3])
        })
    }

    fn op_signature(&self) -> Vec<String> {
        let [c0, c1, c2] = self.dims.stage_channels;
        vec![
            format!("conv3x3({c0})+bn+prelu+pool"),
            format!("conv3x3({c1})+bn+prelu+pool"),
            format!("window2x2_mha({c1})"),
            format!("conv3x3({c2})+bn+prelu+pool"),
            format!("window2x2_mha({c2})"),
            format!("tail:window2x2_mha({})", self.dims.tail_width),
        ]
    }
}

impl Module for WindowedAttentionExpert {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stem1.visit_params(f);
        self.stem2.visit_params(f);
        self.attn2.visit_params(f);
        self.stem3.visit_params(f);
        self.attn3.visit_params(f);
        self.tail_embed.visit_params(f);
        self.tail_attn.visit_params(f);
        self.tail_proj.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem1.visit_params_mut(f);
        self.stem2.visit_params_mut(f);
        self.attn2.visit_params_mut(f);
        self.stem3.visit_params_mut(f);
        self.attn3.visit_params_mut(f);
        self.tail_embed.visit_params_mut(f);
        self.tail_attn.visit_params_mut(f);
        self.tail_proj.visit_params_mut(f);
    }
}

// ── ResidualConv ────────────────────────────────────────────────────────────

struct ResBlock {
    conv1: Conv2d,
    bn1: ChannelNorm,
    act1: PRelu,
    conv2: Conv2d,
    bn2: ChannelNorm,
    skip: Option<Conv2d>,
    act2: PRelu,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            bn1: ChannelNorm::new(&format!("{name}.bn1"), cout),
            act1: PRelu::new(&format!("{name}.act1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: ChannelNorm::new(&format!("{name}.bn2"), cout),
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, 0, rng))
            },
            act2: PRelu::new(&format!("{name}.act2"), cout),
        }
    }

    fn forward(&mut self, g: &mut Graph, x: Value) -> Result<Value> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = self.act1.forward(g, h)?;
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        let sum = g.add(h, shortcut)?;
        self.act2.forward(g, sum)
    }
}

impl Module for ResBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.act1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(s) = &self.skip {
            s.visit_params(f);
        }
        self.act2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.act1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_params_mut(f);
        }
        self.act2.visit_params_mut(f);
    }
}

pub struct ResidualConvExpert {
    dims: ExpertDims,
    stem: ConvBnAct,
    block2: ResBlock,
    block3: ResBlock,
    tail: TokenMlp,
}

impl ResidualConvExpert {
    fn new(name: &str, in_channels: usize, dims: ExpertDims, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, c2] = dims.stage_channels;
        ResidualConvExpert {
            stem: ConvBnAct::new(&format!("{name}.stem"), in_channels, c0, rng),
            block2: ResBlock::new(&format!("{name}.block2"), c0, c1, rng),
            block3: ResBlock::new(&format!("{name}.block3"), c1, c2, rng),
            tail: TokenMlp::new(&format!("{name}.tail"), c2, dims.tail_width, rng),
            dims,
        }
    }
}

impl ExpertNet for ResidualConvExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::ResidualConv
    }

    fn out_channels(&self) -> usize {
        self.dims.stage_channels[2]
    }

    fn forward(&mut self, g: &mut Graph, image: Value) -> Result<Value> {
        let x = self.stem.forward(g, image)?;
        let x = g.maxpool2x2(x)?;
        let x = self.block2.forward(g, x)?;
        let x = g.maxpool2x2(x)?;
        let x = self.block3.forward(g, x)?;
        let x = g.maxpool2x2(x)?;
        let tail = &self.tail;
        with_pooled_tail(g, x, |g, pooled| {
            let s = g.shape_of(pooled).to_vec();
            let tokens = grid_to_tokens(g, pooled)?;
            let refined = tail.forward_tokens(g, tokens)?;
            tokens_to_grid(g, refined, s[2], s[3])
        })
    }

    fn op_signature(&self) -> Vec<String> {
        let [c0, c1, c2] = self.dims.stage_channels;
        vec![
            format!("conv3x3({c0})+bn+prelu+pool"),
            format!("resblock({c0}->{c1})+pool"),
            format!("resblock({c1}->{c2})+pool"),
            format!("tail:res_mlp({})", self.dims.tail_width),
        ]
    }
}

impl Module for ResidualConvExpert {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stem.visit_params(f);
        self.block2.visit_params(f);
        self.block3.visit_params(f);
        self.tail.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_params_mut(f);
        self.block2.visit_params_mut(f);
        self.block3.visit_params_mut(f);
        self.tail.visit_params_mut(f);
    }
}

// ── ModernConv ──────────────────────────────────────────────────────────────

struct CnDown {
    conv: Conv2d,
    norm: LayerNorm,
}

impl CnDown {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        CnDown {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 2, 1, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let x = self.conv.forward(g, x)?;
        self.norm.forward_channels_last(g, x)
    }
}

impl Module for CnDown {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

/// Depthwise 3x3, channel layer norm, then a pointwise expansion MLP with a
/// residual connection.
struct CnBlock {
    dw: Conv2d,
    norm: LayerNorm,
    pw1: Linear,
    act: PRelu,
    pw2: Linear,
}

impl CnBlock {
    fn new(name: &str, channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        CnBlock {
            dw: Conv2d::grouped(&format!("{name}.dw"), channels, channels, 3, 1, 1, channels, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), channels),
            pw1: Linear::new(&format!("{name}.pw1"), channels, hidden, rng),
            act: PRelu::new(&format!("{name}.act"), 1),
            pw2: Linear::new(&format!("{name}.pw2"), hidden, channels, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let s = g.shape_of(x).to_vec();
        let d = self.dw.forward(g, x)?;
        let tokens = grid_to_tokens(g, d)?;
        let n = self.norm.forward(g, tokens)?;
        let h = self.pw1.forward(g, n)?;
        let h = self.act.forward(g, h)?;
        let h = self.pw2.forward(g, h)?;
        let grid = tokens_to_grid(g, h, s[2], s[3])?;
        g.add(x, grid)
    }
}

impl Module for CnBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.dw.visit_params(f);
        self.norm.visit_params(f);
        self.pw1.visit_params(f);
        self.act.visit_params(f);
        self.pw2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.dw.visit_params_mut(f);
        self.norm.visit_params_mut(f);
        self.pw1.visit_params_mut(f);
        self.act.visit_params_mut(f);
        self.pw2.visit_params_mut(f);
    }
}

pub struct ModernConvExpert {
    dims: ExpertDims,
    down1: CnDown,
    block1: CnBlock,
    down2: CnDown,
    block2: CnBlock,
    down3: CnDown,
    block3: CnBlock,
    tail: CnBlock,
}

impl ModernConvExpert {
    fn new(name: &str, in_channels: usize, dims: ExpertDims, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, c2] = dims.stage_channels;
        ModernConvExpert {
            down1: CnDown::new(&format!("{name}.down1"), in_channels, c0, rng),
            block1: CnBlock::new(&format!("{name}.block1"), c0, 4 * c0, rng),
            down2: CnDown::new(&format!("{name}.down2"), c0, c1, rng),
            block2: CnBlock::new(&format!("{name}.block2"), c1, 4 * c1, rng),
            down3: CnDown::new(&format!("{name}.down3"), c1, c2, rng),
            block3: CnBlock::new(&format!("{name}.block3"), c2, 4 * c2, rng),
            tail: CnBlock::new(&format!("{name}.tail"), c2, dims.tail_width, rng),
            dims,
        }
    }
}

impl ExpertNet for ModernConvExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::ModernConv
    }

    fn out_channels(&self) -> usize {
        self.dims.stage_channels[2]
    }

    fn forward(&mut self, g: &mut Graph, image: Value) -> Result<Value> {
        let x = self.down1.forward(g, image)?;
        let x = self.block1.forward(g, x)?;
        let x = self.down2.forward(g, x)?;
        let x = self.block2.forward(g, x)?;
        let x = self.down3.forward(g, x)?;
        let x = self.block3.forward(g, x)?;
        let tail = &self.tail;
        with_pooled_tail(g, x, |g, pooled| tail.forward(g, pooled))
    }

    fn op_signature(&self) -> Vec<String> {
        let [c0, c1, c2] = self.dims.stage_channels;
        vec![
            format!("strided_conv3x3({c0})+ln"),
            format!("dw3x3+pw_mlp({c0}x4)"),
            format!("strided_conv3x3({c1})+ln"),
            format!("dw3x3+pw_mlp({c1}x4)"),
            format!("strided_conv3x3({c2})+ln"),
            format!("dw3x3+pw_mlp({c2}x4)"),
            format!("tail:dw3x3+pw_mlp({})", self.dims.tail_width),
        ]
    }
}

impl Module for ModernConvExpert {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.down1.visit_params(f);
        self.block1.visit_params(f);
        self.down2.visit_params(f);
        self.block2.visit_params(f);
        self.down3.visit_params(f);
        self.block3.visit_params(f);
        self.tail.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.down1.visit_params_mut(f);
        self.block1.visit_params_mut(f);
        self.down2.visit_params_mut(f);
        self.block2.visit_params_mut(f);
        self.down3.visit_params_mut(f);
        self.block3.visit_params_mut(f);
        self.tail.visit_params_mut(f);
    }
}

// ── PyramidAttention ────────────────────────────────────────────────────────

pub struct PyramidAttentionExpert {
    dims: ExpertDims,
    stem1: ConvBnAct,
    stem2: ConvBnAct,
    sra2: SraBlock,
    stem3: ConvBnAct,
    sra3: SraBlock,
    tail_embed: Linear,
    tail_sra: SraBlock,
    tail_mlp: TokenMlp,
    tail_proj: Linear,
}

impl PyramidAttentionExpert {
    fn new(name: &str, in_channels: usize, dims: ExpertDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [c0, c1, c2] = dims.stage_channels;
        let tw = dims.tail_width;
        Ok(PyramidAttentionExpert {
            stem1: ConvBnAct::new(&format!("{name}.stem1"), in_channels, c0, rng),
            stem2: ConvBnAct::new(&format!("{name}.stem2"), c0, c1, rng),
            sra2: SraBlock::new(&format!("{name}.sra2"), c1, dims.heads, rng)?,
            stem3: ConvBnAct::new(&format!("{name}.stem3"), c1, c2, rng),
            sra3: SraBlock::new(&format!("{name}.sra3"), c2, dims.heads, rng)?,
            tail_embed: Linear::new(&format!("{name}.tail_embed"), c2, tw, rng),
            tail_sra: SraBlock::new(&format!("{name}.tail_sra"), tw, dims.heads, rng)?,
            tail_mlp: TokenMlp::new(&format!("{name}.tail_mlp"), tw, tw / 2, rng),
            tail_proj: Linear::new(&format!("{name}.tail_proj"), tw, c2, rng),
            dims,
        })
    }
}

impl ExpertNet for PyramidAttentionExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::PyramidAttention
    }

    fn out_channels(&self) -> usize {
        self.dims.stage_channels[2]
    }

    fn forward(&mut self, g: &mut Graph, image: Value) -> Result<Value> {
        let x = self.stem1.forward(g, image)?;
        let x = g.maxpool2x2(x)?;
        let x = self.stem2.forward(g, x)?;
        let x = g.maxpool2x2(x)?;
        let x = self.sra2.forward(g, x)?;
        let x = self.stem3.forward(g, x)?;
        let x = g.maxpool2x2(x)?;
        let x = self.sra3.forward(g, x)?;
        let (embed, sra, mlp, proj) = (
            &self.tail_embed,
            &mut self.tail_sra,
            &self.tail_mlp,
            &self.tail_proj,
        );
        with_pooled_tail(g, x, |g, pooled| {
            let s = g.shape_of(pooled).to_vec();
            let tokens = grid_to_tokens(g, pooled)?;
            let wide = embed.forward(g, tokens)?;
            let grid = tokens_to_grid(g, wide, s[2], s[3])?;
            let refined = sra.forward(g, grid)?;
            let tokens = grid_to_tokens(g, refined)?;
            let tokens = mlp.forward_tokens(g, tokens)?;
            let narrow = proj.forward(g, tokens)?;
            tokens_to_grid(g, narrow, s[2], s[3])
        })
    }

    fn op_signature(&self) -> Vec<String> {
        let [c0, c1, c2] = self.dims.stage_channels;
        vec![
            format!("conv3x3({c0})+bn+prelu+pool"),
            format!("conv3x3({c1})+bn+prelu+pool"),
            format!("sra_mha({c1},kv/2)"),
            format!("conv3x3({c2})+bn+prelu+pool"),
            format!("sra_mha({c2},kv/2)"),
            format!("tail:sra_mha({},kv/2)+mlp", self.dims.tail_width),
        ]
    }
}

impl Module for PyramidAttentionExpert {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stem1.visit_params(f);
        self.stem2.visit_params(f);
        self.sra2.visit_params(f);
        self.stem3.visit_params(f);
        self.sra3.visit_params(f);
        self.tail_embed.visit_params(f);
        self.tail_sra.visit_params(f);
        self.tail_mlp.visit_params(f);
        self.tail_proj.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem1.visit_params_mut(f);
        self.stem2.visit_params_mut(f);
        self.sra2.visit_params_mut(f);
        self.stem3.visit_params_mut(f);
        self.sra3.visit_params_mut(f);
        self.tail_embed.visit_params_mut(f);
        self.tail_sra.visit_params_mut(f);
        self.tail_mlp.visit_params_mut(f);
        self.tail_proj.visit_params_mut(f);
    }
}

// ── Construction ────────────────────────────────────────────────────────────

/// Builds one expert of the requested paradigm with production widths,
/// deterministically from the seed.
pub fn build_expert(kind: ExpertKind, in_channels: usize, seed: u64) -> Result<Box<dyn ExpertNet>> {
    build_expert_with_dims(kind, in_channels, ExpertDims::default_for(kind), seed, kind.label())
}

/// Fully parameterized construction; `name` prefixes every parameter.
pub fn build_expert_with_dims(
    kind: ExpertKind,
    in_channels: usize,
    dims: ExpertDims,
    seed: u64,
    name: &str,
) -> Result<Box<dyn ExpertNet>> {
    if in_channels == 0 {
        return Err(Error::InvalidConfig("expert needs at least one input channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        ExpertKind::WindowedAttention => {
            Box::new(WindowedAttentionExpert::new(name, in_channels, dims, &mut rng)?)
        }
        ExpertKind::ResidualConv => Box::new(ResidualConvExpert::new(name, in_channels, dims, &mut rng)),
        ExpertKind::ModernConv => Box::new(ModernConvExpert::new(name, in_channels, dims, &mut rng)),
        ExpertKind::PyramidAttention => {
            Box::new(PyramidAttentionExpert::new(name, in_channels, dims, &mut rng)?)
        }
    })
}

// ── ExpertBundle ────────────────────────────────────────────────────────────

/// The expert pool plus per-expert 1x1-conv adapters mapping every output to
/// a common `[B, out_channels, H/8, W/8]` shape.
pub struct ExpertBundle {
    experts: Vec<Box<dyn ExpertNet>>,
    adapters: Vec<Conv2d>,
    in_channels: usize,
    out_channels: usize,
}

impl ExpertBundle {
    /// The default four-paradigm bundle.
    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        Self::with_count(4, in_channels, out_channels, seed, false)
    }

    /// Same structure with test-sized experts.
    pub fn new_tiny(in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        Self::with_count(4, in_channels, out_channels, seed, true)
    }

    /// A bundle of `count >= 2` experts; paradigms cycle through the four
    /// kinds when `count != 4`.
    pub fn with_count(
        count: usize,
        in_channels: usize,
        out_channels: usize,
        seed: u64,
        tiny: bool,
    ) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidConfig(format!(
                "bundle needs at least 2 experts, got {count}"
            )));
        }
        let dims_for = if tiny {
            ExpertDims::tiny_for
        } else {
            ExpertDims::default_for
        };
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut experts: Vec<Box<dyn ExpertNet>> = Vec::new();
        let mut adapters = Vec::new();
        for i in 0..count {
            let kind = ExpertKind::ALL[i % ExpertKind::ALL.len()];
            let sub_seed: u64 = master.gen();
            let name = format!("experts.{i}.{}", kind.label());
            let expert =
                build_expert_with_dims(kind, in_channels, dims_for(kind), sub_seed, &name)?;
            let mut arng = ChaCha8Rng::seed_from_u64(master.gen());
            adapters.push(Conv2d::new(
                &format!("adapters.{i}"),
                expert.out_channels(),
                out_channels,
                1,
                1,
                0,
                &mut arng,
            ));
            experts.push(expert);
        }
        Ok(ExpertBundle {
            experts,
            adapters,
            in_channels,
            out_channels,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Common post-adapter resolution for an input of the given size.
    pub fn out_resolution(&self, h: usize, w: usize) -> (usize, usize) {
        (h / DOWNSAMPLE_FACTOR, w / DOWNSAMPLE_FACTOR)
    }

    pub fn expert(&self, k: usize) -> &dyn ExpertNet {
        self.experts[k].as_ref()
    }

    /// Post-adapter forward of expert `k`.
    pub fn expert_forward(&mut self, g: &mut Graph, k: usize, image: Value) -> Result<Value> {
        if k >= self.experts.len() {
            return Err(Error::InvalidConfig(format!(
                "expert index {k} out of range for {} experts",
                self.experts.len()
            )));
        }
        let shape = g.shape_of(image);
        if shape.len() != 4
            || shape[2] % DOWNSAMPLE_FACTOR != 0
            || shape[3] % DOWNSAMPLE_FACTOR != 0
        {
            return Err(Error::InvalidDimension(format!(
                "expert input must be [B,C,H,W] with H,W divisible by {DOWNSAMPLE_FACTOR}, got {:?}",
                shape
            )));
        }
        let feature = self.experts[k].forward(g, image)?;
        self.adapters[k].forward(g, feature)
    }

    /// Runs every expert on the same image batch.
    pub fn forward_all(&mut self, g: &mut Graph, image: Value) -> Result<Vec<Value>> {
        (0..self.num_experts())
            .map(|k| self.expert_forward(g, k, image))
            .collect()
    }

    /// Parameter count of expert `k` alone (adapter excluded).
    pub fn expert_param_count(&self, k: usize) -> usize {
        self.experts[k].param_count()
    }
}

impl Module for ExpertBundle {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for (expert, adapter) in self.experts.iter().zip(self.adapters.iter()) {
            expert.visit_params(f);
            adapter.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for (expert, adapter) in self.experts.iter_mut().zip(self.adapters.iter_mut()) {
            expert.visit_params_mut(f);
            adapter.visit_params_mut(f);
        }
    }
}
