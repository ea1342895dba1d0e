//! A small reverse-mode automatic differentiation tape over 2-D arrays.
//!
//! Every value is a row-major `rows × cols` matrix; sequences are laid out
//! as `time × channels`. Parameters live in a [`ParamStore`] and are read
//! in place, so building a graph never copies weights.
//!
//! The tape also tallies contraction FLOPs (`2·m·k·n` per matrix product,
//! likewise for convolutions and the attention score/value products).
//! Elementwise work is not counted.

pub mod gradcheck;
pub(crate) mod kernels;
mod scalar;
#[cfg(test)]
mod tests;

pub use kernels::{attention_weights, gelu, softmax_rows};
pub use scalar::Scalar;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Array1<F>,
    },
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    BroadcastRows(Var),
    Rotary {
        x: Var,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: kernels::ConvGeom,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Array2<F>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        target: Array2<F>,
        rows: Vec<usize>,
    },
}

struct Node<F> {
    value: Option<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Forward tape. Dropout is active only when built with [`Graph::training`].
pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
    flops: u64,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            dropout_rng: None,
            flops: 0,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(params: &'p ParamStore<F>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::eval(params);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    /// Contraction FLOPs executed so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id).view(),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter node without value")
                .view(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Reads a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input that still gets a gradient slot, for probing
    /// gradients with respect to intermediate quantities.
    pub fn input_with_grad(&mut self, value: Array2<F>) -> Var {
        let v = self.input(value);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        self.flops += 2 * (m * k * n) as u64;
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, n) = self.shape(x);
        assert_eq!(self.shape(bias), (1, n), "bias shape mismatch");
        let out = &self.value(x) + &self.value(bias);
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = self.value(x).mapv(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * kernels::sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (_, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let (xhat, rstd) = kernels::normalize_rows(self.value(x), F::of(LN_EPS));
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat row mismatch");
        let out = ndarray::concatenate(Axis(1), &[self.value(a), self.value(b)])
            .expect("concat");
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Slice { x, start }, &[x])
    }

    /// Mean over rows, producing `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let val = self.value(x);
        assert!(val.nrows() > 0, "mean over zero rows");
        let out = val.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let (r, n) = self.shape(x);
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let out = self.value(x).broadcast((rows, n)).expect("broadcast").to_owned();
        self.push(out, Op::BroadcastRows(x), &[x])
    }

    /// Rotary position encoding applied per head; row index is the position.
    pub fn rotary(&mut self, x: Var, heads: usize) -> Var {
        let out = kernels::rotary(self.value(x), heads, false);
        self.push(out, Op::Rotary { x, heads }, &[x])
    }

    /// Fused multi-head scaled dot-product attention. The `T × T` weights
    /// are recomputed head by head in the backward pass instead of stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (t, d) = self.shape(q);
        assert_eq!(self.shape(k), (t, d));
        assert_eq!(self.shape(v), (t, d));
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        self.flops += 4 * (t * t * d) as u64;
        let out = kernels::attention_forward(self.value(q), self.value(k), self.value(v), heads);
        self.push(out, Op::Attention { q, k, v, heads }, &[q, k, v])
    }

    /// Strided 1-D convolution over time. `w` is `(kernel·c_in) × c_out`
    /// with row `j·c_in + c` holding tap `j` of input channel `c`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Var {
        let (len, c_in) = self.shape(x);
        let (wk, c_out) = self.shape(w);
        assert_eq!(wk, kernel * c_in, "conv weight shape mismatch");
        assert_eq!(self.shape(b), (1, c_out));
        let geom = kernels::ConvGeom::new(len, c_in, kernel, stride, pad_left, pad_right);
        self.flops += 2 * (geom.out_len * kernel * c_in * c_out) as u64;
        let patches = kernels::im2col(self.value(x), &geom);
        let out = &patches.dot(&self.value(w)) + &self.value(b);
        self.push(out, Op::Conv1d { x, w, b, geom }, &[x, w, b])
    }

    /// Depthwise 1-D convolution with "same" zero padding; `w` is
    /// `kernel × channels`, kernel must be odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (t, c) = self.shape(x);
        let (k, wc) = self.shape(w);
        assert_eq!(wc, c, "depthwise weight channel mismatch");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        assert_eq!(self.shape(b), (1, c));
        self.flops += 2 * (t * k * c) as u64;
        let out = kernels::depthwise_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::DepthwiseConv { x, w, b }, &[x, w, b])
    }

    /// Inverted dropout; the identity on evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = F::of(1.0 / (1.0 - p));
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        });
        let out = &self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean cross-entropy over `rows` of `logits` against integer targets
    /// (`targets[i]` is the class of row `i`). Zero when `rows` is empty.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], rows: &[usize]) -> Var {
        let (t, n) = self.shape(logits);
        assert_eq!(targets.len(), t, "targets length mismatch");
        assert!(rows.iter().all(|&r| r < t), "masked row out of range");
        assert!(targets.iter().all(|&c| c < n), "target class out of range");
        let (loss, _) = kernels::masked_ce(self.value(logits), targets, rows, false);
        let out = Array2::from_elem((1, 1), loss);
        self.push(
            out,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows: rows.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean squared error over `rows` (all columns). Zero when `rows` is empty.
    pub fn masked_mse(&mut self, pred: Var, target: Array2<F>, rows: &[usize]) -> Var {
        assert_eq!(self.shape(pred), target.dim(), "mse shape mismatch");
        let loss = kernels::masked_mse(self.value(pred), target.view(), rows);
        let out = Array2::from_elem((1, 1), loss);
        self.push(
            out,
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
            &[pred],
        )
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(&node.op, i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, op: &Op<F>, idx: usize, gout: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let out_val = || self.nodes[idx].value.as_ref().expect("value").view();
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = gout.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t().dot(gout);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gout.clone());
                let gb = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = gout * &self.value(*b);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = gout * &self.value(*a);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gout.mapv(|g| g * c));
            }
            Op::Gelu(x) => {
                let mut gx = self.value(*x).mapv(kernels::gelu_grad);
                gx *= gout;
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = gout.clone();
                gx.zip_mut_with(&self.value(*x), |g, &v| {
                    if v <= F::zero() {
                        *g = F::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = out_val().mapv(|s| s * (F::one() - s));
                gx *= gout;
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let mut gx = self.value(*x).mapv(|v| {
                    let s = kernels::sigmoid(v);
                    s * (F::one() + v * (F::one() - s))
                });
                gx *= gout;
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.nodes[gamma.0].needs_grad {
                    let gg = (gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, gg);
                }
                if self.nodes[beta.0].needs_grad {
                    let gb = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *beta, gb);
                }
                if self.nodes[x.0].needs_grad {
                    let dxhat = gout * &self.value(*gamma);
                    let gx = kernels::layer_norm_backward(dxhat.view(), xhat.view(), rstd.view());
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Concat(a, b) => {
                let na = self.shape(*a).1;
                self.accumulate(grads, *a, gout.slice(s![.., ..na]).to_owned());
                self.accumulate(grads, *b, gout.slice(s![.., na..]).to_owned());
            }
            Op::Slice { x, start } => {
                let (r, c) = self.shape(*x);
                let len = gout.ncols();
                let mut gx = Array2::zeros((r, c));
                gx.slice_mut(s![.., *start..*start + len]).assign(gout);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let inv = F::of(1.0 / r as f64);
                let gx = gout.mapv(|g| g * inv).broadcast((r, c)).expect("bc").to_owned();
                self.accumulate(grads, *x, gx);
            }
            Op::BroadcastRows(x) => {
                let gx = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *x, gx);
            }
            Op::Rotary { x, heads } => {
                self.accumulate(grads, *x, kernels::rotary(gout.view(), *heads, true));
            }
            Op::Attention { q, k, v, heads } => {
                let (gq, gk, gv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    gout.view(),
                    *heads,
                );
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::Conv1d { x, w, b, geom } => {
                if self.nodes[w.0].needs_grad {
                    let patches = kernels::im2col(self.value(*x), geom);
                    self.accumulate(grads, *w, patches.t().dot(gout));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[x.0].needs_grad {
                    let gpatches = gout.dot(&self.value(*w).t());
                    self.accumulate(grads, *x, kernels::col2im(gpatches.view(), geom));
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (gx, gw) = kernels::depthwise_backward(self.value(*x), self.value(*w), gout.view());
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gout * mask);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                rows,
            } => {
                let (_, g) = kernels::masked_ce(self.value(*logits), targets, rows, true);
                let scale = gout[[0, 0]];
                let g = g.expect("grad requested").mapv(|v| v * scale);
                self.accumulate(grads, *logits, g);
            }
            Op::MaskedMse { pred, target, rows } => {
                let scale = gout[[0, 0]];
                let g = kernels::masked_mse_grad(self.value(*pred), target.view(), rows)
                    .mapv(|v| v * scale);
                self.accumulate(grads, *pred, g);
            }
        }
    }

    /// Collects gradients for every parameter touched by this graph.
    pub fn param_grads(&self, grads: &Grads<F>) -> ParamGrads<F> {
        let mut out = ParamGrads::zeros_like(self.params);
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(var) = var {
                if let Some(g) = &grads.grads[var.0] {
                    out.grads[id].assign(g);
                }
            }
        }
        out
    }
}

/// Gradients for every node of one backward pass.
pub struct Grads<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }
}

/// One gradient array per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    pub grads: Vec<Array2<F>>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: store.iter().map(|p| Array2::zeros(p.value.dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    /// Global L2 norm across all parameters, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
