//! Waveform encoder: strided convolutional subsampler, a stack of
//! Branchformer or Conformer blocks with a switchable global branch
//! (multi-head attention or SummaryMixing), and token / mel heads.

mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Scalar, Var};
use crate::error::{ensure, Error, Result};
use crate::frontend::Waveform;
use crate::params::{Component, Initializer, ParamStore};
use crate::seed;

pub use layers::{
    subsampler_channels, Block, BranchformerBlock, Cgmlp, ConformerBlock, ConvLayer, ConvModule, Depthwise,
    FeedForward, GlobalBranch, Linear, Mhsa, Norm, Subsampler, SummaryMixing, SUBSAMPLER_STRIDES,
};

/// Samples per output frame (product of the subsampler strides).
pub const HOP_SAMPLES: usize = 960;
pub const SAMPLE_RATE: u32 = 24_000;
pub const FRAME_RATE: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Branchformer,
    Conformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalBranchKind {
    Attention,
    SummaryMixing,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Branchformer => "branchformer",
            Self::Conformer => "conformer",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branchformer" => Ok(Self::Branchformer),
            "conformer" => Ok(Self::Conformer),
            _ => Err(Error::Config(format!("unknown block kind {s:?}"))),
        }
    }
}

impl fmt::Display for GlobalBranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::SummaryMixing => "summary_mixing",
        })
    }
}

impl FromStr for GlobalBranchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "mhsa" => Ok(Self::Attention),
            "summary_mixing" | "summary" => Ok(Self::SummaryMixing),
            _ => Err(Error::Config(format!("unknown global branch {s:?}"))),
        }
    }
}

/// Encoder hyper-parameters. `ffn_mult` and `cgmlp_mult` are integer
/// multiples of `model_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub block_kind: BlockKind,
    pub global_branch: GlobalBranchKind,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub cgmlp_mult: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub mel_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl EncoderConfig {
    /// 2 layers, width 128, SummaryMixing Branchformer: trains on a CPU.
    pub fn desk() -> Self {
        Self {
            block_kind: BlockKind::Branchformer,
            global_branch: GlobalBranchKind::SummaryMixing,
            num_layers: 2,
            model_dim: 128,
            num_heads: 4,
            ffn_mult: 4,
            cgmlp_mult: 3,
            conv_kernel: 31,
            dropout: 0.1,
            vocab_size: 8192,
            mel_dim: 512,
            seed: 0,
        }
    }

    pub fn small() -> Self {
        Self {
            num_layers: 4,
            model_dim: 768,
            num_heads: 12,
            ..Self::desk()
        }
    }

    pub fn large() -> Self {
        Self {
            num_layers: 12,
            model_dim: 1024,
            num_heads: 16,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            "large" => Ok(Self::large()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected desk, small or large)"))),
        }
    }

    pub fn with_kinds(mut self, block: BlockKind, global: GlobalBranchKind) -> Self {
        self.block_kind = block;
        self.global_branch = global;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, Config, "num_layers must be at least 1");
        ensure!(
            self.model_dim >= 4 && self.model_dim % 4 == 0,
            Config,
            "model_dim {} must be a positive multiple of 4",
            self.model_dim
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Config,
            "dropout {} outside [0, 1)",
            self.dropout
        );
        ensure!(
            self.conv_kernel % 2 == 1,
            Config,
            "conv_kernel {} must be odd",
            self.conv_kernel
        );
        ensure!(self.ffn_mult >= 1 && self.cgmlp_mult >= 1, Config, "ffn_mult and cgmlp_mult must be ≥ 1");
        ensure!(
            (self.cgmlp_mult * self.model_dim) % 2 == 0,
            Config,
            "cgMLP hidden size must be even"
        );
        ensure!(self.vocab_size >= 1 && self.mel_dim >= 1, Config, "vocab_size and mel_dim must be ≥ 1");
        if self.global_branch == GlobalBranchKind::Attention {
            ensure!(
                self.num_heads >= 1 && self.model_dim % self.num_heads == 0,
                Config,
                "model_dim {} not divisible by num_heads {}",
                self.model_dim,
                self.num_heads
            );
            ensure!(
                (self.model_dim / self.num_heads) % 2 == 0,
                Config,
                "rotary encoding needs an even head dimension"
            );
        }
        Ok(())
    }

    /// Output frames for a clip of `num_samples`.
    pub fn output_len(num_samples: usize) -> usize {
        num_samples / HOP_SAMPLES
    }
}

/// Per-frame hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence<F = f32> {
    pub frames: Array2<F>,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<F = f32> {
    pub token_logits: Array2<F>,
    pub mel_logits: Array2<F>,
}

impl<F> ModelOutput<F> {
    pub fn len(&self) -> usize {
        self.token_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Final hidden states after the closing layer norm.
    pub hidden: Var,
    pub token_logits: Var,
    pub mel_logits: Var,
}

/// Trainable scalar counts grouped by component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCensus {
    pub total: usize,
    pub per_component: BTreeMap<String, usize>,
}

impl ParameterCensus {
    fn from_components(counts: BTreeMap<Component, usize>) -> Self {
        let per_component: BTreeMap<String, usize> = counts
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(c, n)| (c.name().to_string(), n))
            .collect();
        Self {
            total: per_component.values().sum(),
            per_component,
        }
    }

    pub fn get(&self, component: &str) -> usize {
        self.per_component.get(component).copied().unwrap_or(0)
    }
}

fn linear_count(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Analytic parameter count; equals the scalar count of an instantiated
/// [`Encoder`] for the same configuration.
pub fn count_parameters(cfg: &EncoderConfig) -> ParameterCensus {
    let d = cfg.model_dim;
    let mut c: BTreeMap<Component, usize> = BTreeMap::new();
    let mut add = |comp: Component, n: usize| *c.entry(comp).or_default() += n;

    let ch = subsampler_channels(d);
    for (i, &s) in SUBSAMPLER_STRIDES.iter().enumerate() {
        add(Component::Subsampler, linear_count(2 * s * ch[i], ch[i + 1]));
    }

    let global = match cfg.global_branch {
        GlobalBranchKind::Attention => 4 * linear_count(d, d),
        GlobalBranchKind::SummaryMixing => {
            let h = d / 2;
            2 * linear_count(d, h) + linear_count(2 * h, h) + linear_count(h, d)
        }
    };
    for _ in 0..cfg.num_layers {
        add(Component::GlobalBranch, global);
        match cfg.block_kind {
            BlockKind::Branchformer => {
                let hidden = cfg.cgmlp_mult * d;
                let half = hidden / 2;
                add(Component::Norms, 2 * d);
                add(
                    Component::Cgmlp,
                    linear_count(d, hidden) + 2 * half + (cfg.conv_kernel + 1) * half + linear_count(half, d),
                );
                add(Component::Merge, linear_count(2 * d, d));
            }
            BlockKind::Conformer => {
                let hidden = cfg.ffn_mult * d;
                add(Component::Norms, 4 * 2 * d);
                add(Component::Ffn, 2 * (linear_count(d, hidden) + linear_count(hidden, d)));
                add(
                    Component::ConvModule,
                    2 * d + linear_count(d, 2 * d) + (cfg.conv_kernel + 1) * d + 2 * d + linear_count(d, d),
                );
            }
        }
    }
    add(Component::Norms, 2 * d);
    add(Component::Heads, linear_count(d, cfg.vocab_size) + linear_count(d, cfg.mel_dim));
    ParameterCensus::from_components(c)
}

/// Relative size reduction `(attention − summary) / attention` of swapping
/// the global branch, for the given config's other settings.
pub fn summary_mixing_reduction(cfg: &EncoderConfig) -> f64 {
    let att = count_parameters(&cfg.clone().with_kinds(cfg.block_kind, GlobalBranchKind::Attention)).total;
    let sum = count_parameters(&cfg.clone().with_kinds(cfg.block_kind, GlobalBranchKind::SummaryMixing)).total;
    (att as f64 - sum as f64) / att as f64
}

/// Contraction FLOPs (2 per multiply-add) of one global branch on `t` frames.
pub fn global_branch_flops(kind: GlobalBranchKind, t: usize, d: usize) -> u64 {
    let (t, d) = (t as u64, d as u64);
    match kind {
        GlobalBranchKind::Attention => 8 * t * d * d + 4 * t * t * d,
        // local, summary, and the two combiner layers at width d/2
        GlobalBranchKind::SummaryMixing => 4 * t * d * d,
    }
}

/// Contraction FLOPs of one block on `t` frames.
pub fn block_flops(cfg: &EncoderConfig, t: usize) -> u64 {
    let d = cfg.model_dim as u64;
    let t64 = t as u64;
    let k = cfg.conv_kernel as u64;
    let global = global_branch_flops(cfg.global_branch, t, cfg.model_dim);
    match cfg.block_kind {
        BlockKind::Branchformer => {
            let h = (cfg.cgmlp_mult as u64) * d;
            let cgmlp = 2 * t64 * d * h + 2 * t64 * k * (h / 2) + 2 * t64 * (h / 2) * d;
            global + cgmlp + 2 * t64 * 2 * d * d
        }
        BlockKind::Conformer => {
            let f = (cfg.ffn_mult as u64) * d;
            let ffn = 2 * (2 * t64 * d * f + 2 * t64 * f * d);
            let conv = 2 * t64 * d * 2 * d + 2 * t64 * k * d + 2 * t64 * d * d;
            global + ffn + conv
        }
    }
}

/// Contraction FLOPs of a full forward pass over `num_samples` samples.
pub fn forward_flops(cfg: &EncoderConfig, num_samples: usize) -> u64 {
    let ch = subsampler_channels(cfg.model_dim);
    let mut len = num_samples;
    let mut total = 0u64;
    for (i, &s) in SUBSAMPLER_STRIDES.iter().enumerate() {
        len /= s;
        total += 2 * (len * 2 * s * ch[i] * ch[i + 1]) as u64;
    }
    let t = len;
    total += cfg.num_layers as u64 * block_flops(cfg, t);
    total + 2 * (t * cfg.model_dim * (cfg.vocab_size + cfg.mel_dim)) as u64
}

/// Rotary position encoding with the row index as position.
pub fn apply_rotary<F: Scalar>(x: ArrayView2<'_, F>, heads: usize) -> Result<Array2<F>> {
    let d = x.ncols();
    ensure!(heads >= 1 && d % heads == 0, Config, "dim {d} not divisible by {heads} heads");
    ensure!((d / heads) % 2 == 0, Config, "rotary encoding needs an even head dimension, got {}", d / heads);
    Ok(kernels::rotary(x, heads, false))
}

/// Encoder parameters together with the layout that addresses them.
#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar = f32> {
    cfg: EncoderConfig,
    params: ParamStore<F>,
    subsampler: Subsampler,
    blocks: Vec<Block>,
    final_norm: Norm,
    token_head: Linear,
    mel_head: Linear,
}

impl<F: Scalar> Encoder<F> {
    /// Freshly initialized from `cfg.seed`.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = layers::Builder {
            store: &mut params,
            init: Initializer::new(seed::rng(&[seed::TAG_MODEL_INIT, cfg.seed])),
        };
        let subsampler = Subsampler::build(&mut b, cfg.model_dim);
        let blocks = (0..cfg.num_layers).map(|l| Block::build(&mut b, l, &cfg)).collect();
        let d = cfg.model_dim;
        let final_norm = b.norm("final_norm", Component::Norms, d);
        let token_head = b.linear("heads.token", Component::Heads, d, cfg.vocab_size);
        let mel_head = b.linear("heads.mel", Component::Heads, d, cfg.mel_dim);
        Ok(Self {
            cfg,
            params,
            subsampler,
            blocks,
            final_norm,
            token_head,
            mel_head,
        })
    }

    /// Rebuilds the layout for `cfg` and adopts `params`, which must hold
    /// exactly the expected tensor names and shapes in canonical order.
    pub fn from_params(cfg: EncoderConfig, params: ParamStore<F>) -> Result<Self> {
        let mut enc = Self::new(cfg)?;
        ensure!(
            params.len() == enc.params.len(),
            Config,
            "expected {} parameter tensors, found {}",
            enc.params.len(),
            params.len()
        );
        for (want, got) in enc.params.iter().zip(params.iter()) {
            ensure!(
                want.name == got.name && want.value.dim() == got.value.dim(),
                Config,
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                want.name,
                want.value.dim(),
                got.name,
                got.value.dim()
            );
        }
        enc.params = params;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn subsampler(&self) -> &Subsampler {
        &self.subsampler
    }

    pub fn token_head(&self) -> Linear {
        self.token_head
    }

    pub fn mel_head(&self) -> Linear {
        self.mel_head
    }

    pub fn census(&self) -> ParameterCensus {
        ParameterCensus::from_components(self.params.scalars_by_component())
    }

    pub fn cast<G: Scalar>(&self) -> Encoder<G> {
        Encoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            subsampler: self.subsampler.clone(),
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            token_head: self.token_head,
            mel_head: self.mel_head,
        }
    }

    fn check_samples(&self, num_samples: usize) -> Result<()> {
        ensure!(
            num_samples >= HOP_SAMPLES,
            Input,
            "waveform of {num_samples} samples is shorter than one {HOP_SAMPLES}-sample frame"
        );
        Ok(())
    }

    /// Subsampler on a graph; `samples` are at 24 kHz.
    pub fn subsample_graph(&self, g: &mut Graph<'_, F>, samples: &[f32]) -> Result<Var> {
        self.check_samples(samples.len())?;
        let x = Array2::from_shape_fn((samples.len(), 1), |(i, _)| F::of(samples[i] as f64));
        let x = g.input(x);
        Ok(self.subsampler.forward(g, x))
    }

    /// Blocks and the closing layer norm applied to subsampled frames.
    pub fn encode_frames(&self, g: &mut Graph<'_, F>, h: Var) -> Var {
        let dropout = self.cfg.dropout;
        let mut h = h;
        for block in &self.blocks {
            h = block.forward(g, h, dropout);
            debug_assert!(g.value(h).iter().all(|v| v.is_finite()), "non-finite hidden state");
        }
        self.final_norm.forward(g, h)
    }

    pub fn forward_graph(&self, g: &mut Graph<'_, F>, samples: &[f32]) -> Result<ForwardVars> {
        let h = self.subsample_graph(g, samples)?;
        let hidden = self.encode_frames(g, h);
        let token_logits = self.token_head.forward(g, hidden);
        let mel_logits = self.mel_head.forward(g, hidden);
        Ok(ForwardVars {
            hidden,
            token_logits,
            mel_logits,
        })
    }

    fn check_wave(&self, w: &Waveform) -> Result<()> {
        ensure!(
            w.sample_rate == SAMPLE_RATE,
            Input,
            "encoder expects {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate
        );
        Ok(())
    }

    /// Evaluation-mode subsampling.
    pub fn subsample(&self, w: &Waveform) -> Result<HiddenSequence<F>> {
        self.check_wave(w)?;
        let mut g = Graph::eval(&self.params);
        let h = self.subsample_graph(&mut g, &w.samples)?;
        Ok(HiddenSequence {
            frames: g.value(h).to_owned(),
            frame_rate: FRAME_RATE,
        })
    }

    /// Evaluation-mode final hidden states.
    pub fn encode(&self, w: &Waveform) -> Result<HiddenSequence<F>> {
        self.check_wave(w)?;
        let mut g = Graph::eval(&self.params);
        let h = self.subsample_graph(&mut g, &w.samples)?;
        let h = self.encode_frames(&mut g, h);
        Ok(HiddenSequence {
            frames: g.value(h).to_owned(),
            frame_rate: FRAME_RATE,
        })
    }

    /// Evaluation-mode forward pass producing both heads.
    pub fn model_forward(&self, w: &Waveform) -> Result<ModelOutput<F>> {
        self.check_wave(w)?;
        let mut g = Graph::eval(&self.params);
        let vars = self.forward_graph(&mut g, &w.samples)?;
        Ok(ModelOutput {
            token_logits: g.value(vars.token_logits).to_owned(),
            mel_logits: g.value(vars.mel_logits).to_owned(),
        })
    }

    /// Applies one block (evaluation mode) to `h`.
    pub fn block_forward(&self, layer: usize, h: &HiddenSequence<F>) -> HiddenSequence<F> {
        let mut g = Graph::eval(&self.params);
        let x = g.input(h.frames.clone());
        let y = self.blocks[layer].forward(&mut g, x, 0.0);
        HiddenSequence {
            frames: g.value(y).to_owned(),
            frame_rate: h.frame_rate,
        }
    }

    /// Applies the global branch of `layer` (evaluation mode) to `h`.
    pub fn global_branch_forward(&self, layer: usize, h: &HiddenSequence<F>) -> Result<HiddenSequence<F>> {
        ensure!(h.frames.nrows() > 0, Input, "global branch on an empty sequence");
        let mut g = Graph::eval(&self.params);
        let x = g.input(h.frames.clone());
        let y = self.blocks[layer].global().forward(&mut g, x);
        Ok(HiddenSequence {
            frames: g.value(y).to_owned(),
            frame_rate: h.frame_rate,
        })
    }
}
