//! Pre-LN Transformer blocks, the per-modality encoders and the bidirectional
//! cross-modal fusion encoder.
//!
//! Blocks operate on one sample at a time: tokens are `N x C` variables on a
//! [`Graph`]. Attention projections are `C x C` matrices whose column block
//! `h*d_h .. (h+1)*d_h` holds head `h`. Queries and values carry a bias, keys
//! do not (a key bias only shifts every logit of a row by the same amount and
//! never receives gradient).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Tiny,
    Small,
    Base,
    /// Desk-scale configuration used by tests and smoke runs.
    Micro,
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tiny" | "t" | "T" => Self::Tiny,
            "small" | "s" | "S" => Self::Small,
            "base" | "b" | "B" => Self::Base,
            "micro" => Self::Micro,
            _ => bail!(Config, "unknown model size {s:?} (tiny, small, base, micro)"),
        })
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Base => "base",
            Self::Micro => "micro",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    /// Modality-specific depth `N_s`.
    pub depth: usize,
    /// Fusion depth `N_f`.
    pub fusion_depth: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn for_size(size: ModelSize) -> Self {
        match size {
            ModelSize::Tiny => Self::standard(256),
            ModelSize::Small => Self::standard(384),
            ModelSize::Base => Self::standard(512),
            ModelSize::Micro => Self { width: 64, depth: 4, fusion_depth: 1, heads: 2 },
        }
    }

    fn standard(width: usize) -> Self {
        Self { width, depth: 10, fusion_depth: 2, heads: width / 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            bail!(Config, "{} heads do not divide width {}", self.heads, self.width);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.declare(format!("{prefix}.gamma"), &[width], Init::Ones),
            beta: store.declare(format!("{prefix}.beta"), &[width], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), T::c(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: store.declare(format!("{prefix}.weight"), &[inputs, outputs], Init::Xavier),
            bias: store.declare(format!("{prefix}.bias"), &[outputs], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.linear(x, g.param(self.weight), g.param(self.bias))
    }
}

/// Multi-head scaled dot-product attention. Self-attention is the case
/// `target == source`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "{heads} heads do not divide {width}");
        let w = |s: &mut ParamStore<T>, n: &str| s.declare(format!("{prefix}.{n}"), &[width, width], Init::Xavier);
        let b = |s: &mut ParamStore<T>, n: &str| s.declare(format!("{prefix}.{n}"), &[width], Init::Zeros);
        Self {
            w_q: w(store, "w_q"),
            b_q: b(store, "b_q"),
            w_k: w(store, "w_k"),
            w_v: w(store, "w_v"),
            b_v: b(store, "b_v"),
            out: Linear::declare(store, &format!("{prefix}.out"), width, width),
            heads,
            width,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Per-head attention matrices `N_t x N_src` and the value projection.
    fn heads_of<T: Real>(&self, g: &Graph<'_, T>, target: Var, source: Var) -> (Vec<Var>, Var) {
        let q = g.linear(target, g.param(self.w_q), g.param(self.b_q));
        let k = g.matmul(source, g.param(self.w_k));
        let v = g.linear(source, g.param(self.w_v), g.param(self.b_v));
        let d = self.head_dim();
        let scale = T::c(1.0 / (d as f64).sqrt());
        let weights = (0..self.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * d, d);
                let kh = g.slice_cols(k, h * d, d);
                let logits = g.scale(g.matmul(qh, g.transpose(kh)), scale);
                g.softmax(logits)
            })
            .collect();
        (weights, v)
    }

    pub fn attention_weights<T: Real>(&self, g: &Graph<'_, T>, target: Var, source: Var) -> Vec<Var> {
        self.heads_of(g, target, source).0
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, target: Var, source: Var) -> Var {
        let (weights, v) = self.heads_of(g, target, source);
        let d = self.head_dim();
        let heads: Vec<Var> =
            weights.iter().enumerate().map(|(h, &a)| g.matmul(a, g.slice_cols(v, h * d, d))).collect();
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        Self {
            fc1: Linear::declare(store, &format!("{prefix}.fc1"), width, 4 * width),
            fc2: Linear::declare(store, &format!("{prefix}.fc2"), 4 * width, width),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        self.fc2.forward(g, g.gelu(self.fc1.forward(g, x)))
    }
}

/// `x + MHSA(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerLayer {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::declare(store, &format!("{prefix}.norm1"), width),
            attn: Attention::declare(store, &format!("{prefix}.attn"), width, heads),
            norm2: LayerNorm::declare(store, &format!("{prefix}.norm2"), width),
            ffn: Ffn::declare(store, &format!("{prefix}.ffn"), width),
        }
    }

    /// Scalars in one layer of width `c`, layer norms included.
    pub fn num_params(c: usize) -> usize {
        12 * c * c + 8 * c + 4 * c
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let x = g.add(x, self.attn.forward(g, h, h));
        let h = self.norm2.forward(g, x);
        g.add(x, self.ffn.forward(g, h))
    }
}

/// `t + MHCA(LN(t), LN(s))` with separate norms for target and source.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_target: LayerNorm,
    pub norm_source: LayerNorm,
    pub attn: Attention,
}

impl CrossBlock {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, heads: usize) -> Self {
        Self {
            norm_target: LayerNorm::declare(store, &format!("{prefix}.norm_t"), width),
            norm_source: LayerNorm::declare(store, &format!("{prefix}.norm_s"), width),
            attn: Attention::declare(store, &format!("{prefix}.attn"), width, heads),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, target: Var, source: Var) -> Var {
        let t = self.norm_target.forward(g, target);
        let s = self.norm_source.forward(g, source);
        g.add(target, self.attn.forward(g, t, s))
    }
}

/// Per-layer outputs `E^1..E^{N_s}` of one encoder, plus its input `E^0`.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub input: Var,
    pub per_layer: Vec<Var>,
}

impl LayerTrace {
    /// `E^j` for `j` in `0..=N_s`.
    pub fn layer(&self, j: usize) -> Option<Var> {
        if j == 0 {
            Some(self.input)
        } else {
            self.per_layer.get(j - 1).copied()
        }
    }

    pub fn last(&self) -> Var {
        self.per_layer.last().copied().unwrap_or(self.input)
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub width: usize,
}

impl ModalityEncoder {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig) -> Self {
        Self {
            layers: (0..cfg.depth)
                .map(|i| TransformerLayer::declare(store, &format!("{prefix}.layers.{i}"), cfg.width, cfg.heads))
                .collect(),
            norm: LayerNorm::declare(store, &format!("{prefix}.norm"), cfg.width),
            width: cfg.width,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, tokens: Var) -> LayerTrace {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(g, x);
            per_layer.push(x);
        }
        LayerTrace { input: tokens, per_layer }
    }

    /// Final layer norm over the last trace entry; this is what leaves the
    /// encoder.
    pub fn output<T: Real>(&self, g: &Graph<'_, T>, trace: &LayerTrace) -> Var {
        self.norm.forward(g, trace.last())
    }

    /// Tensor-level convenience returning every trace entry.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if tokens.shape().len() != 2 || tokens.cols() != self.width {
            bail!(Argument, "encoder of width {} got tokens of shape {:?}", self.width, tokens.shape());
        }
        let g = Graph::new(store);
        let x = g.constant(tokens.clone());
        let trace = self.forward(&g, x);
        Ok(trace.per_layer.iter().map(|&v| g.value(v).clone()).collect())
    }
}

/// Order and inputs of the two fusion halves within a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionFlow {
    /// Both halves attend to the other half's previous-layer output.
    #[default]
    Default,
    /// Both halves always attend to the other modality's encoder output.
    RawInput,
    /// The audio-to-video half updates first; video-to-audio attends to its
    /// fresh output.
    VideoFirst,
    /// Mirror of `VideoFirst`.
    AudioFirst,
}

impl FusionFlow {
    pub const ALL: [FusionFlow; 4] = [Self::Default, Self::RawInput, Self::VideoFirst, Self::AudioFirst];

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::RawInput => "raw-input",
            Self::VideoFirst => "video-first",
            Self::AudioFirst => "audio-first",
        }
    }
}

impl FromStr for FusionFlow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion flow {s:?}")))
    }
}

impl fmt::Display for FusionFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One fusion layer of one half: cross-attention into the other modality,
/// then a regular Transformer layer.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub cross: CrossBlock,
    pub layer: TransformerLayer,
}

impl FusionLayer {
    fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, heads: usize) -> Self {
        Self {
            cross: CrossBlock::declare(store, &format!("{prefix}.cross"), width, heads),
            layer: TransformerLayer::declare(store, &format!("{prefix}.layer"), width, heads),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, target: Var, source: Var) -> Var {
        self.layer.forward(g, self.cross.forward(g, target, source))
    }
}

#[derive(Clone, Debug)]
pub struct FusionTrace {
    /// Audio-to-video outputs (video token count).
    pub a2v: Vec<Var>,
    /// Video-to-audio outputs (audio token count).
    pub v2a: Vec<Var>,
    pub flow: FusionFlow,
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub a2v: Vec<FusionLayer>,
    pub v2a: Vec<FusionLayer>,
}

impl FusionEncoder {
    pub fn declare<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig) -> Self {
        let half = |s: &mut ParamStore<T>, name: &str| {
            (0..cfg.fusion_depth)
                .map(|i| FusionLayer::declare(s, &format!("{prefix}.{name}.{i}"), cfg.width, cfg.heads))
                .collect()
        };
        let a2v = half(store, "a2v");
        let v2a = half(store, "v2a");
        Self { a2v, v2a }
    }

    pub fn depth(&self) -> usize {
        self.a2v.len()
    }

    /// `audio` and `video` are the encoder outputs `E^{N_s}_a`, `E^{N_s}_v`.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, audio: Var, video: Var, flow: FusionFlow) -> FusionTrace {
        let (mut av, mut va) = (video, audio);
        let mut trace = FusionTrace { a2v: Vec::new(), v2a: Vec::new(), flow };
        for (fa, fv) in self.a2v.iter().zip(&self.v2a) {
            let (next_av, next_va) = match flow {
                FusionFlow::Default => (fa.forward(g, av, va), fv.forward(g, va, av)),
                FusionFlow::RawInput => (fa.forward(g, av, audio), fv.forward(g, va, video)),
                FusionFlow::VideoFirst => {
                    let a = fa.forward(g, av, va);
                    (a, fv.forward(g, va, a))
                }
                FusionFlow::AudioFirst => {
                    let v = fv.forward(g, va, av);
                    (fa.forward(g, av, v), v)
                }
            };
            av = next_av;
            va = next_va;
            trace.a2v.push(av);
            trace.v2a.push(va);
        }
        trace
    }
}
