use std::collections::VecDeque;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, loss_on_graph, lr_at_step, top1_hits, Adam, AdamConfig, Dataset, LossBreakdown, ScheduleConfig};
use crate::autodiff::{Graph, ParamGrads};
use crate::checkpoint::{Checkpoint, ADAM_M_PREFIX, ADAM_V_PREFIX};
use crate::encoder::{Encoder, EncoderConfig, HOP_SAMPLES};
use crate::error::{ensure, Error, Result};
use crate::frontend::{FeatureNormalizer, FeaturePipeline, MelConfig, StackedMelSequence, Waveform};
use crate::masking::{apply_waveform_mask, epoch_seed, sample_mask, MaskConfig};
use crate::quantizer::{QuantizerConfig, RandomQuantizer, TokenSequence};
use crate::seed;

pub const METRICS_HEADER: [&str; 7] = ["step", "lr", "ce", "mse", "total", "masked_acc", "wallclock_s"];

/// Stacking factor from 100 Hz mel frames to the 25 Hz model rate.
const STACK_FACTOR: usize = 4;
/// Epoch index reserved for evaluation masks.
const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub mask: MaskConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps averaged for the smoothed loss.
    pub smoothing_window: usize,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// CPU-sized defaults: desk encoder, batch 8, and a higher peak rate
    /// than the full-scale 1e-4 so a few hundred steps make progress.
    pub fn desk(total_steps: u64) -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            quantizer: QuantizerConfig::default(),
            mask: MaskConfig::default(),
            schedule: ScheduleConfig {
                peak_lr: 2e-3,
                final_lr: 1e-4,
                ..ScheduleConfig::for_steps(total_steps)
            },
            adam: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            smoothing_window: 50,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        self.mask.validate()?;
        self.schedule.validate()?;
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.smoothing_window >= 1, Config, "smoothing_window must be at least 1");
        ensure!(
            self.quantizer.codebook_size == self.encoder.vocab_size,
            Config,
            "codebook size {} differs from vocab size {}",
            self.quantizer.codebook_size,
            self.encoder.vocab_size
        );
        ensure!(
            self.quantizer.input_dim == self.encoder.mel_dim,
            Config,
            "quantizer input dim {} differs from mel head width {}",
            self.quantizer.input_dim,
            self.encoder.mel_dim
        );
        Ok(())
    }
}

/// Frozen target generator: features → normalization → tokens.
pub struct Teacher {
    pipeline: FeaturePipeline,
    normalizer: FeatureNormalizer,
    quantizer: RandomQuantizer,
}

/// A clip with its cached (unmasked) targets.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: u64,
    pub waveform: Waveform,
    pub tokens: Vec<usize>,
    /// Normalized stacked mel frames, `T × mel_dim`.
    pub target: Array2<f32>,
}

impl Teacher {
    pub fn new(normalizer: FeatureNormalizer, quantizer: QuantizerConfig) -> Result<Self> {
        let pipeline = FeaturePipeline::new(MelConfig::default(), STACK_FACTOR)?;
        ensure!(
            normalizer.dim() == pipeline.feature_dim(),
            Config,
            "normalizer has {} dims, features have {}",
            normalizer.dim(),
            pipeline.feature_dim()
        );
        Ok(Self {
            pipeline,
            normalizer,
            quantizer: RandomQuantizer::new(quantizer)?,
        })
    }

    /// Fits the feature normalizer on `dataset`.
    pub fn fit(dataset: &Dataset, quantizer: QuantizerConfig) -> Result<Self> {
        let pipeline = FeaturePipeline::new(MelConfig::default(), STACK_FACTOR)?;
        let feats: Vec<StackedMelSequence> = dataset
            .clips
            .par_iter()
            .map(|c| pipeline.run(&c.waveform))
            .collect::<Result<_>>()?;
        let normalizer = FeatureNormalizer::fit(&feats)?;
        Self::new(normalizer, quantizer)
    }

    pub fn normalizer(&self) -> &FeatureNormalizer {
        &self.normalizer
    }

    pub fn quantizer(&self) -> &RandomQuantizer {
        &self.quantizer
    }

    pub fn features(&self, w: &Waveform) -> Result<StackedMelSequence> {
        self.normalizer.apply(&self.pipeline.run(w)?)
    }

    /// Tokens and normalized mel targets of an unmasked waveform.
    pub fn targets(&self, w: &Waveform) -> Result<(TokenSequence, StackedMelSequence)> {
        let feats = self.features(w)?;
        Ok((self.quantizer.quantize_sequence(&feats)?, feats))
    }

    pub fn prepare(&self, dataset: &Dataset) -> Result<Vec<PreparedClip>> {
        dataset
            .clips
            .par_iter()
            .map(|c| {
                let (tokens, feats) = self.targets(&c.waveform)?;
                ensure!(
                    tokens.len() == c.waveform.len() / HOP_SAMPLES,
                    Input,
                    "clip {} yields {} tokens for {} encoder frames",
                    c.name,
                    tokens.len(),
                    c.waveform.len() / HOP_SAMPLES
                );
                Ok(PreparedClip {
                    id: c.id,
                    waveform: c.waveform.clone(),
                    tokens: tokens.as_indices(),
                    target: feats.frames,
                })
            })
            .collect()
    }
}

pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: Encoder<f32>,
    pub adam: Adam,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss_window: VecDeque<f64>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let adam = Adam::new(config.adam, encoder.params());
        Ok(Self {
            config,
            encoder,
            adam,
            step: 0,
            loss_window: VecDeque::new(),
        })
    }

    /// Mean total loss over the most recent window.
    pub fn smoothed_loss(&self) -> Option<f64> {
        (!self.loss_window.is_empty()).then(|| self.loss_window.iter().sum::<f64>() / self.loss_window.len() as f64)
    }

    pub fn to_checkpoint(&self, normalizer: &FeatureNormalizer) -> Checkpoint {
        let mut ck = Checkpoint::from_encoder(&self.encoder, self.config.quantizer, self.step);
        ck.meta.train = Some(self.config.clone());
        ck.meta.loss_window = self.loss_window.iter().copied().collect();
        for (p, (m, v)) in self.encoder.params().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.push(format!("{ADAM_M_PREFIX}{}", p.name), m.clone());
            ck.push(format!("{ADAM_V_PREFIX}{}", p.name), v.clone());
        }
        ck.set_normalizer(normalizer);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck
            .meta
            .train
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))?;
        let encoder = ck.encoder()?;
        let adam = Adam {
            cfg: config.adam,
            m: ck.group(ADAM_M_PREFIX, &encoder)?,
            v: ck.group(ADAM_V_PREFIX, &encoder)?,
        };
        Ok(Self {
            config,
            encoder,
            adam,
            step: ck.meta.step,
            loss_window: ck.meta.loss_window.iter().copied().collect(),
        })
    }
}

/// One clip occurrence in a batch; the epoch selects its mask seed.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub clip: &'a PreparedClip,
    pub epoch: u64,
}

/// Clip indices and epochs for step `step` (0-based). The data stream is
/// the concatenation of per-epoch shuffles, consumed `batch_size` at a time.
pub fn batch_indices(step: u64, num_clips: usize, batch_size: usize, seed_val: u64) -> Vec<(usize, u64)> {
    let n = num_clips as u64;
    let start = step * batch_size as u64;
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (start..start + batch_size as u64)
        .map(|pos| {
            let epoch = pos / n;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..num_clips).collect();
                order.shuffle(&mut seed::rng(&[seed::TAG_SHUFFLE, seed_val, epoch]));
                cache = Some((epoch, order));
            }
            (cache.as_ref().expect("cached order").1[(pos % n) as usize], epoch)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Step count after the update.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub masked_acc: f64,
    pub grad_norm: f64,
}

struct ClipOutcome {
    loss: LossBreakdown,
    hits: usize,
    grads: Option<ParamGrads<f32>>,
}

fn clip_forward_backward(state: &TrainState, item: &BatchItem<'_>) -> Result<ClipOutcome> {
    let cfg = &state.config;
    let clip = item.clip;
    let es = epoch_seed(cfg.seed, item.epoch);
    let mask = sample_mask(clip.waveform.len(), clip.waveform.sample_rate, &cfg.mask, es, clip.id)?;
    if mask.frame_indices.is_empty() {
        return Ok(ClipOutcome {
            loss: LossBreakdown::default(),
            hits: 0,
            grads: None,
        });
    }
    let masked = apply_waveform_mask(&clip.waveform, &mask)?;
    let rng = seed::rng(&[seed::TAG_DROPOUT, cfg.seed, state.step, clip.id, item.epoch]);
    let mut g = Graph::training(state.encoder.params(), rng);
    let vars = state.encoder.forward_graph(&mut g, &masked.samples)?;
    let rows = &mask.frame_indices;
    let loss = loss_on_graph(&mut g, vars.token_logits, vars.mel_logits, &clip.tokens, clip.target.clone(), rows);
    let hits = top1_hits(g.value(vars.token_logits), &clip.tokens, rows);
    let breakdown = LossBreakdown {
        ce: g.scalar(loss.ce) as f64,
        mse: g.scalar(loss.mse) as f64,
        total: g.scalar(loss.total) as f64,
        num_masked_frames: rows.len(),
    };
    let back = g.backward(loss.total);
    Ok(ClipOutcome {
        loss: breakdown,
        hits,
        grads: Some(g.param_grads(&back)),
    })
}

/// One optimizer step on `batch`: per-clip masked losses averaged over
/// the batch, gradient clipping, and an Adam update.
pub fn pretrain_step(state: &mut TrainState, batch: &[BatchItem<'_>]) -> Result<StepReport> {
    ensure!(!batch.is_empty(), Input, "empty batch");
    let outcomes: Vec<ClipOutcome> = {
        let st = &*state;
        batch.par_iter().map(|item| clip_forward_backward(st, item)).collect::<Result<_>>()?
    };
    let b = batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut hits = 0;
    let mut grads = ParamGrads::zeros_like(state.encoder.params());
    for o in &outcomes {
        loss.ce += o.loss.ce;
        loss.mse += o.loss.mse;
        loss.total += o.loss.total;
        loss.num_masked_frames += o.loss.num_masked_frames;
        hits += o.hits;
        if let Some(g) = &o.grads {
            grads.add_assign(g);
        }
    }
    loss.ce /= b;
    loss.mse /= b;
    loss.total /= b;
    if !loss.total.is_finite() {
        return Err(Error::Training {
            step: state.step + 1,
            msg: format!("non-finite loss (ce {}, mse {})", loss.ce, loss.mse),
        });
    }
    grads.scale(1.0 / batch.len() as f32);
    let clip = clip_gradients(&mut grads, state.config.schedule.clip_norm, state.step + 1)?;
    let t = state.step + 1;
    let lr = lr_at_step(t, &state.config.schedule);
    state.adam.update(state.encoder.params_mut(), &grads, lr, t);
    state.step = t;
    state.loss_window.push_back(loss.total);
    while state.loss_window.len() > state.config.smoothing_window {
        state.loss_window.pop_front();
    }
    Ok(StepReport {
        step: t,
        lr,
        loss,
        masked_acc: if loss.num_masked_frames == 0 {
            0.0
        } else {
            hits as f64 / loss.num_masked_frames as f64
        },
        grad_norm: clip.pre_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
    pub masked_acc: f64,
    pub wallclock_s: f64,
}

impl MetricsRow {
    /// Equality ignoring the timing column.
    pub fn same_metrics(&self, other: &Self) -> bool {
        (self.step, self.lr, self.ce, self.mse, self.total, self.masked_acc)
            == (other.step, other.lr, other.ce, other.mse, other.total, other.masked_acc)
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(METRICS_HEADER).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint (its training config wins).
    pub resume_from: Option<PathBuf>,
    /// Checked after every step; when set, the run checkpoints and returns
    /// early with [`RunSummary::interrupted`] set.
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    /// Rows produced by this invocation.
    pub rows: Vec<MetricsRow>,
    /// Clips dropped before training, with reasons.
    pub warnings: Vec<String>,
    /// The run stopped early on request; `final_checkpoint` is the
    /// checkpoint written at the stopping step.
    pub interrupted: bool,
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Full training run: prepares targets, then steps until
/// `schedule.total_steps`, writing `metrics.csv`, periodic
/// `step-NNNNNN.ckpt` files and `final.ckpt` into `out_dir`.
pub fn run_pretraining(
    dataset: &Dataset,
    config: &TrainConfig,
    opts: &RunOptions,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let metrics_path = opts.out_dir.join("metrics.csv");

    let (mut state, normalizer) = match &opts.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let normalizer = ck
                .normalizer()
                .ok_or_else(|| Error::Config(format!("{} has no feature normalizer", path.display())))?;
            (TrainState::from_checkpoint(&ck)?, Some(normalizer))
        }
        None => (TrainState::new(config.clone())?, None),
    };
    let cfg = state.config.clone();

    let segment = cfg.mask.segment_len(crate::encoder::SAMPLE_RATE);
    let mut warnings = Vec::new();
    let usable = Dataset {
        clips: dataset
            .clips
            .iter()
            .filter(|c| {
                let ok = c.waveform.len() >= segment;
                if !ok {
                    warnings.push(format!("skipping {}: shorter than one mask segment", c.name));
                }
                ok
            })
            .cloned()
            .collect(),
    };
    ensure!(!usable.is_empty(), Input, "no usable clips (empty epoch)");

    let teacher = match normalizer {
        Some(n) => Teacher::new(n, cfg.quantizer)?,
        None => Teacher::fit(&usable, cfg.quantizer)?,
    };
    let clips = teacher.prepare(&usable)?;

    let mut previous = if opts.resume_from.is_some() && metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    previous.retain(|r| r.step <= state.step);
    write_metrics(&metrics_path, &previous)?;
    let file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut last_good: Option<PathBuf> = opts.resume_from.clone();
    while state.step < cfg.schedule.total_steps {
        let picks = batch_indices(state.step, clips.len(), cfg.batch_size, cfg.seed);
        let batch: Vec<BatchItem<'_>> = picks
            .iter()
            .map(|&(i, epoch)| BatchItem { clip: &clips[i], epoch })
            .collect();
        let report = pretrain_step(&mut state, &batch).map_err(|e| match e {
            Error::Training { step, msg } => Error::Training {
                step,
                msg: format!(
                    "{msg}; last good checkpoint: {}",
                    last_good.as_ref().map_or("none".into(), |p| p.display().to_string())
                ),
            },
            other => other,
        })?;
        let row = MetricsRow {
            step: report.step,
            lr: report.lr,
            ce: report.loss.ce,
            mse: report.loss.mse,
            total: report.loss.total,
            masked_acc: report.masked_acc,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        writer.serialize(&row).map_err(|e| Error::format(&metrics_path, e.to_string()))?;
        writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&row);
        rows.push(row);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let p = checkpoint_path(&opts.out_dir, state.step);
            state.to_checkpoint(teacher.normalizer()).save(&p)?;
            last_good = Some(p);
        }
        if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) && state.step < cfg.schedule.total_steps {
            let p = checkpoint_path(&opts.out_dir, state.step);
            state.to_checkpoint(teacher.normalizer()).save(&p)?;
            return Ok(RunSummary {
                final_checkpoint: p,
                metrics_path,
                rows,
                warnings,
                interrupted: true,
            });
        }
    }
    let final_checkpoint = opts.out_dir.join("final.ckpt");
    state.to_checkpoint(teacher.normalizer()).save(&final_checkpoint)?;
    Ok(RunSummary {
        final_checkpoint,
        metrics_path,
        rows,
        warnings,
        interrupted: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Batch-style mean over clips.
    pub loss: LossBreakdown,
    pub masked_acc: f64,
    pub num_clips: usize,
}

/// Evaluation-mode masked loss and top-1 token accuracy, with masks drawn
/// from a reserved epoch of `seed_val`.
pub fn evaluate(encoder: &Encoder<f32>, clips: &[PreparedClip], mask: &MaskConfig, seed_val: u64) -> Result<EvalReport> {
    ensure!(!clips.is_empty(), Input, "nothing to evaluate");
    let es = epoch_seed(seed_val, EVAL_EPOCH);
    let per_clip: Vec<(LossBreakdown, usize)> = clips
        .par_iter()
        .map(|clip| {
            let m = sample_mask(clip.waveform.len(), clip.waveform.sample_rate, mask, es, clip.id)?;
            if m.frame_indices.is_empty() {
                return Ok((LossBreakdown::default(), 0));
            }
            let w = apply_waveform_mask(&clip.waveform, &m)?;
            let mut g = Graph::eval(encoder.params());
            let vars = encoder.forward_graph(&mut g, &w.samples)?;
            let rows = &m.frame_indices;
            let l = loss_on_graph(&mut g, vars.token_logits, vars.mel_logits, &clip.tokens, clip.target.clone(), rows);
            let hits = top1_hits(g.value(vars.token_logits), &clip.tokens, rows);
            Ok((
                LossBreakdown {
                    ce: g.scalar(l.ce) as f64,
                    mse: g.scalar(l.mse) as f64,
                    total: g.scalar(l.total) as f64,
                    num_masked_frames: rows.len(),
                },
                hits,
            ))
        })
        .collect::<Result<_>>()?;
    let n = clips.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut hits = 0;
    for (l, h) in &per_clip {
        loss.ce += l.ce / n;
        loss.mse += l.mse / n;
        loss.total += l.total / n;
        loss.num_masked_frames += l.num_masked_frames;
        hits += h;
    }
    Ok(EvalReport {
        loss,
        masked_acc: if loss.num_masked_frames == 0 {
            0.0
        } else {
            hits as f64 / loss.num_masked_frames as f64
        },
        num_clips: clips.len(),
    })
}

