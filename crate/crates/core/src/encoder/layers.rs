//! Parameter groups and their forward passes on a [`Graph`].

use crate::autodiff::{Graph, Scalar, Var};
use crate::params::{Component, Initializer, ParamId, ParamStore};

use super::{BlockKind, EncoderConfig, GlobalBranchKind};

pub(crate) struct Builder<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub init: Initializer,
}

impl<F: Scalar> Builder<'_, F> {
    pub fn linear(&mut self, name: &str, component: Component, d_in: usize, d_out: usize) -> Linear {
        let w = self.init.xavier_uniform(d_in, d_out, d_in, d_out);
        Linear {
            w: self.store.add(format!("{name}.w"), component, w),
            b: self.store.add(format!("{name}.b"), component, ndarray::Array2::zeros((1, d_out))),
        }
    }

    pub fn norm(&mut self, name: &str, component: Component, dim: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), component, ndarray::Array2::ones((1, dim))),
            beta: self.store.add(format!("{name}.beta"), component, ndarray::Array2::zeros((1, dim))),
        }
    }

    /// Depthwise kernel `kernel × channels`; fan-in is the kernel length.
    pub fn depthwise(&mut self, name: &str, component: Component, kernel: usize, channels: usize) -> Depthwise {
        let w = self.init.xavier_uniform(kernel, channels, kernel, 1);
        Depthwise {
            w: self.store.add(format!("{name}.w"), component, w),
            b: self.store.add(format!("{name}.b"), component, ndarray::Array2::zeros((1, channels))),
        }
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Depthwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Depthwise {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.depthwise_conv(x, w, b)
    }
}

/// Strides of the waveform subsampler; their product is 960 samples,
/// i.e. 25 Hz at 24 kHz.
pub const SUBSAMPLER_STRIDES: [usize; 4] = [8, 6, 5, 4];

pub fn subsampler_channels(model_dim: usize) -> [usize; 5] {
    [1, model_dim / 4, model_dim / 2, model_dim, model_dim]
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvLayer {
    pub fn kernel(&self) -> usize {
        2 * self.stride
    }

    /// Padding chosen so that the output length is `floor(len / stride)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let s = self.stride;
        g.conv1d(x, w, b, 2 * s, s, s / 2, s - s / 2)
    }
}

#[derive(Debug, Clone)]
pub struct Subsampler {
    pub layers: Vec<ConvLayer>,
}

impl Subsampler {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, model_dim: usize) -> Self {
        let ch = subsampler_channels(model_dim);
        let layers = SUBSAMPLER_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let k = 2 * stride;
                let (c_in, c_out) = (ch[i], ch[i + 1]);
                let w = b.init.xavier_uniform(k * c_in, c_out, k * c_in, k * c_out);
                ConvLayer {
                    w: b.store.add(format!("subsampler.conv{i}.w"), Component::Subsampler, w),
                    b: b.store.add(
                        format!("subsampler.conv{i}.b"),
                        Component::Subsampler,
                        ndarray::Array2::zeros((1, c_out)),
                    ),
                    stride,
                }
            })
            .collect();
        Self { layers }
    }

    /// `x` is the waveform as a `samples × 1` column.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }
}

/// Multi-head self-attention with rotary queries and keys.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, dim: usize, heads: usize) -> Self {
        let c = Component::GlobalBranch;
        Self {
            q: b.linear(&format!("{name}.q"), c, dim, dim),
            k: b.linear(&format!("{name}.k"), c, dim, dim),
            v: b.linear(&format!("{name}.v"), c, dim, dim),
            out: b.linear(&format!("{name}.out"), c, dim, dim),
            heads,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let q = g.rotary(q, self.heads);
        let k = g.rotary(k, self.heads);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }
}

/// Linear-time global mixing: each frame is combined with the time
/// average of a per-frame summary vector.
#[derive(Debug, Clone)]
pub struct SummaryMixing {
    pub local: Linear,
    pub summary: Linear,
    pub combine_hidden: Linear,
    pub combine_out: Linear,
}

impl SummaryMixing {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, dim: usize) -> Self {
        let c = Component::GlobalBranch;
        let h = dim / 2;
        Self {
            local: b.linear(&format!("{name}.local"), c, dim, h),
            summary: b.linear(&format!("{name}.summary"), c, dim, h),
            combine_hidden: b.linear(&format!("{name}.combine_hidden"), c, 2 * h, h),
            combine_out: b.linear(&format!("{name}.combine_out"), c, h, dim),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let t = g.shape(x).0;
        let f = self.local.forward(g, x);
        let f = g.gelu(f);
        let s = self.summary.forward(g, x);
        let s = g.gelu(s);
        let s_bar = g.mean_rows(s);
        let s_bar = g.broadcast_rows(s_bar, t);
        let z = g.concat_cols(f, s_bar);
        let z = self.combine_hidden.forward(g, z);
        let z = g.gelu(z);
        self.combine_out.forward(g, z)
    }
}

#[derive(Debug, Clone)]
pub enum GlobalBranch {
    Attention(Mhsa),
    SummaryMixing(SummaryMixing),
}

impl GlobalBranch {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, cfg: &EncoderConfig) -> Self {
        match cfg.global_branch {
            GlobalBranchKind::Attention => Self::Attention(Mhsa::build(b, name, cfg.model_dim, cfg.num_heads)),
            GlobalBranchKind::SummaryMixing => Self::SummaryMixing(SummaryMixing::build(b, name, cfg.model_dim)),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        match self {
            Self::Attention(m) => m.forward(g, x),
            Self::SummaryMixing(s) => s.forward(g, x),
        }
    }

    pub fn output_projection(&self) -> Linear {
        match self {
            Self::Attention(m) => m.out,
            Self::SummaryMixing(s) => s.combine_out,
        }
    }
}

/// Convolutional gating MLP.
#[derive(Debug, Clone)]
pub struct Cgmlp {
    pub up: Linear,
    pub norm: Norm,
    pub conv: Depthwise,
    pub down: Linear,
    pub hidden: usize,
}

impl Cgmlp {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, dim: usize, mult: usize, kernel: usize) -> Self {
        let c = Component::Cgmlp;
        let hidden = mult * dim;
        Self {
            up: b.linear(&format!("{name}.up"), c, dim, hidden),
            norm: b.norm(&format!("{name}.norm"), c, hidden / 2),
            conv: b.depthwise(&format!("{name}.conv"), c, kernel, hidden / 2),
            down: b.linear(&format!("{name}.down"), c, hidden / 2, dim),
            hidden,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let half = self.hidden / 2;
        let u = self.up.forward(g, x);
        let u = g.gelu(u);
        let a = g.slice_cols(u, 0, half);
        let b = g.slice_cols(u, half, half);
        let b = self.norm.forward(g, b);
        let b = self.conv.forward(g, b);
        let gated = g.mul(a, b);
        self.down.forward(g, gated)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, dropout: f64) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.down.forward(g, h)
    }
}

/// Conformer convolution module. LayerNorm stands in for batch norm so the
/// forward pass stays per-clip.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: Norm,
    pub pointwise_in: Linear,
    pub conv: Depthwise,
    pub conv_norm: Norm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let d = g.shape(x).1;
        let h = self.norm.forward(g, x);
        let h = self.pointwise_in.forward(g, h);
        let a = g.slice_cols(h, 0, d);
        let gate = g.slice_cols(h, d, d);
        let gate = g.sigmoid(gate);
        let h = g.mul(a, gate);
        let h = self.conv.forward(g, h);
        let h = self.conv_norm.forward(g, h);
        let h = g.silu(h);
        self.pointwise_out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct BranchformerBlock {
    pub norm: Norm,
    pub global: GlobalBranch,
    pub cgmlp: Cgmlp,
    pub merge: Linear,
}

impl BranchformerBlock {
    /// `h + Merge([Global(LN h), CgMLP(LN h)])`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var, dropout: f64) -> Var {
        let x = self.norm.forward(g, h);
        let gl = self.global.forward(g, x);
        let gl = g.dropout(gl, dropout);
        let lo = self.cgmlp.forward(g, x);
        let lo = g.dropout(lo, dropout);
        let cat = g.concat_cols(gl, lo);
        let y = self.merge.forward(g, cat);
        g.add(h, y)
    }
}

#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub ffn1_norm: Norm,
    pub ffn1: FeedForward,
    pub global_norm: Norm,
    pub global: GlobalBranch,
    pub conv: ConvModule,
    pub ffn2_norm: Norm,
    pub ffn2: FeedForward,
    pub final_norm: Norm,
}

impl ConformerBlock {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var, dropout: f64) -> Var {
        let x = self.ffn1_norm.forward(g, h);
        let y = self.ffn1.forward(g, x, dropout);
        let y = g.dropout(y, dropout);
        let y = g.scale(y, 0.5);
        let h = g.add(h, y);

        let x = self.global_norm.forward(g, h);
        let y = self.global.forward(g, x);
        let y = g.dropout(y, dropout);
        let h = g.add(h, y);

        let y = self.conv.forward(g, h);
        let y = g.dropout(y, dropout);
        let h = g.add(h, y);

        let x = self.ffn2_norm.forward(g, h);
        let y = self.ffn2.forward(g, x, dropout);
        let y = g.dropout(y, dropout);
        let y = g.scale(y, 0.5);
        let h = g.add(h, y);

        self.final_norm.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Branchformer(BranchformerBlock),
    Conformer(ConformerBlock),
}

impl Block {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, layer: usize, cfg: &EncoderConfig) -> Self {
        let p = format!("blocks.{layer}");
        let d = cfg.model_dim;
        match cfg.block_kind {
            BlockKind::Branchformer => Self::Branchformer(BranchformerBlock {
                norm: b.norm(&format!("{p}.norm"), Component::Norms, d),
                global: GlobalBranch::build(b, &format!("{p}.global"), cfg),
                cgmlp: Cgmlp::build(b, &format!("{p}.cgmlp"), d, cfg.cgmlp_mult, cfg.conv_kernel),
                merge: b.linear(&format!("{p}.merge"), Component::Merge, 2 * d, d),
            }),
            BlockKind::Conformer => {
                let hidden = cfg.ffn_mult * d;
                let ffn = |b: &mut Builder<'_, F>, name: &str| FeedForward {
                    up: b.linear(&format!("{p}.{name}.up"), Component::Ffn, d, hidden),
                    down: b.linear(&format!("{p}.{name}.down"), Component::Ffn, hidden, d),
                };
                let ffn1_norm = b.norm(&format!("{p}.ffn1_norm"), Component::Norms, d);
                let ffn1 = ffn(b, "ffn1");
                let global_norm = b.norm(&format!("{p}.global_norm"), Component::Norms, d);
                let global = GlobalBranch::build(b, &format!("{p}.global"), cfg);
                let c = Component::ConvModule;
                let conv = ConvModule {
                    norm: b.norm(&format!("{p}.conv.norm"), c, d),
                    pointwise_in: b.linear(&format!("{p}.conv.pointwise_in"), c, d, 2 * d),
                    conv: b.depthwise(&format!("{p}.conv.depthwise"), c, cfg.conv_kernel, d),
                    conv_norm: b.norm(&format!("{p}.conv.conv_norm"), c, d),
                    pointwise_out: b.linear(&format!("{p}.conv.pointwise_out"), c, d, d),
                };
                let ffn2_norm = b.norm(&format!("{p}.ffn2_norm"), Component::Norms, d);
                let ffn2 = ffn(b, "ffn2");
                let final_norm = b.norm(&format!("{p}.final_norm"), Component::Norms, d);
                Self::Conformer(ConformerBlock {
                    ffn1_norm,
                    ffn1,
                    global_norm,
                    global,
                    conv,
                    ffn2_norm,
                    ffn2,
                    final_norm,
                })
            }
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var, dropout: f64) -> Var {
        match self {
            Self::Branchformer(b) => b.forward(g, h, dropout),
            Self::Conformer(c) => c.forward(g, h, dropout),
        }
    }

    pub fn global(&self) -> &GlobalBranch {
        match self {
            Self::Branchformer(b) => &b.global,
            Self::Conformer(c) => &c.global,
        }
    }
}
