//! Masked-prediction objective and training loop.
//!
//! The loss is cross-entropy on teacher tokens plus MSE on normalized
//! stacked mel frames, both averaged over masked frames only. Cross-entropy
//! is computed from raw logits with log-sum-exp; there is no extra softmax.

mod data;
mod trainer;
#[cfg(test)]
mod tests;

pub use data::{Clip, Dataset, SynthKind, SyntheticSpec};
pub use trainer::{
    batch_indices, evaluate, pretrain_step, read_metrics, run_pretraining, BatchItem, EvalReport, MetricsRow,
    PreparedClip, RunOptions, RunSummary, StepReport, Teacher, TrainConfig, TrainState, METRICS_HEADER,
};

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, Scalar, Var};
use crate::encoder::ModelOutput;
use crate::error::{ensure, Error, Result};
use crate::frontend::StackedMelSequence;
use crate::params::ParamStore;
use crate::quantizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
    pub num_masked_frames: usize,
}

/// Graph handles of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub mse: Var,
    pub total: Var,
}

fn check_rows(masked: &[usize], t: usize) -> Result<Vec<usize>> {
    let mut rows = masked.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
        return Err(Error::Input(format!("masked frame {bad} out of range for {t} frames")));
    }
    Ok(rows)
}

/// Builds the masked loss on a graph. `masked` must be sorted, unique and
/// in range (see [`compute_loss`] for the checked entry point).
pub fn loss_on_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    token_logits: Var,
    mel_logits: Var,
    tokens: &[usize],
    mel_target: Array2<F>,
    masked: &[usize],
) -> LossVars {
    let ce = g.masked_cross_entropy(token_logits, tokens, masked);
    let mse = g.masked_mse(mel_logits, mel_target, masked);
    let total = g.add(ce, mse);
    LossVars { ce, mse, total }
}

/// Masked loss of a finished forward pass.
pub fn compute_loss(
    out: &ModelOutput,
    tokens: &TokenSequence,
    mel_target: &StackedMelSequence,
    masked: &[usize],
) -> Result<LossBreakdown> {
    let t = out.token_logits.nrows();
    ensure!(
        tokens.len() == t && mel_target.frames.nrows() == t && out.mel_logits.nrows() == t,
        Input,
        "length mismatch: logits {t}, tokens {}, mel targets {}",
        tokens.len(),
        mel_target.frames.nrows()
    );
    ensure!(
        mel_target.frames.ncols() == out.mel_logits.ncols(),
        Input,
        "mel target width {} differs from head width {}",
        mel_target.frames.ncols(),
        out.mel_logits.ncols()
    );
    let vocab = out.token_logits.ncols();
    ensure!(
        tokens.tokens.iter().all(|&k| (k as usize) < vocab),
        Input,
        "token id outside the {vocab}-entry vocabulary"
    );
    let rows = check_rows(masked, t)?;
    let empty = ParamStore::<f32>::new();
    let mut g = Graph::eval(&empty);
    let tl = g.input(out.token_logits.clone());
    let ml = g.input(out.mel_logits.clone());
    let vars = loss_on_graph(&mut g, tl, ml, &tokens.as_indices(), mel_target.frames.clone(), &rows);
    Ok(LossBreakdown {
        ce: g.scalar(vars.ce) as f64,
        mse: g.scalar(vars.mse) as f64,
        total: g.scalar(vars.total) as f64,
        num_masked_frames: rows.len(),
    })
}

/// Top-1 hits of `logits` against `targets` over `rows`.
pub fn top1_hits(logits: ndarray::ArrayView2<'_, f32>, targets: &[usize], rows: &[usize]) -> usize {
    rows.iter()
        .filter(|&&r| {
            let row = logits.row(r);
            // lowest index wins ties
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == targets[r]
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::for_steps(10_000)
    }
}

impl ScheduleConfig {
    pub const WARMUP_FRACTION: f64 = 0.05;

    /// Default rates with 5% warmup.
    pub fn for_steps(total_steps: u64) -> Self {
        Self {
            peak_lr: 1e-4,
            final_lr: 1e-5,
            warmup_steps: Self::warmup_for(total_steps),
            total_steps,
            clip_norm: 1.0,
        }
    }

    pub fn warmup_for(total_steps: u64) -> u64 {
        ((total_steps as f64 * Self::WARMUP_FRACTION).round() as u64).clamp(1, total_steps.saturating_sub(1).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.final_lr > 0.0 && self.final_lr <= self.peak_lr,
            Config,
            "need 0 < final_lr ({}) ≤ peak_lr ({})",
            self.final_lr,
            self.peak_lr
        );
        ensure!(
            self.warmup_steps > 0 && self.warmup_steps < self.total_steps,
            Config,
            "need 0 < warmup_steps ({}) < total_steps ({})",
            self.warmup_steps,
            self.total_steps
        );
        ensure!(self.clip_norm > 0.0, Config, "clip_norm must be positive");
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay from `peak_lr` to `final_lr`.
/// Steps past `total_steps` stay at `final_lr`.
pub fn lr_at_step(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.final_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub pre_norm: f64,
    pub post_norm: f64,
    pub clipped: bool,
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`.
pub fn clip_gradients<F: Scalar>(grads: &mut ParamGrads<F>, clip_norm: f64, step: u64) -> Result<ClipReport> {
    ensure!(clip_norm > 0.0, Config, "clip_norm must be positive");
    let pre = grads.global_norm();
    if !pre.is_finite() || !grads.all_finite() {
        return Err(Error::Training {
            step,
            msg: format!("non-finite gradient (global norm {pre})"),
        });
    }
    if pre <= clip_norm {
        return Ok(ClipReport {
            pre_norm: pre,
            post_norm: pre,
            clipped: false,
        });
    }
    grads.scale(F::of(clip_norm / pre));
    Ok(ClipReport {
        pre_norm: pre,
        post_norm: grads.global_norm(),
        clipped: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Array2<f32>> = params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies update number `t` (1-based) with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64, t: u64) {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(&grads.grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
