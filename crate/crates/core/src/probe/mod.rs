//! Frozen-backbone downstream evaluation: pooled clip embeddings feed a
//! single hidden dense layer plus a task output layer.

mod tasks;

pub use tasks::{
    am_tone, estimate_am_rate, make_synthetic_task, SyntheticTask, TaskData, AM_DEPTH, AM_RATE_RANGE, MAX_TONES,
    MIN_TASK_SIZE, PITCH_CLASSES,
};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::encoder::{Encoder, SAMPLE_RATE};
use crate::error::{ensure, Error, Result};
use crate::frontend::Waveform;
use crate::params::{Component, Initializer, ParamId, ParamStore};
use crate::pretrain::{top1_hits, Adam, AdamConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (mean, max)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression { target_dim: usize },
}

impl TaskKind {
    pub fn output_dim(self) -> usize {
        match self {
            Self::Classification { num_classes } => num_classes,
            Self::Regression { target_dim } => target_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// One target vector per clip.
    Targets(Vec<Vec<f64>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes(c) => c.len(),
            Self::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden_units: usize,
    pub dropout: f64,
    pub task_kind: TaskKind,
    pub pooling: Pooling,
    pub batch_size: usize,
    /// Upper bound on training epochs.
    pub epochs: usize,
    pub lr: f64,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl ProbeConfig {
    pub fn new(task_kind: TaskKind) -> Self {
        Self {
            hidden_units: 512,
            dropout: 0.25,
            task_kind,
            pooling: Pooling::Mean,
            batch_size: 32,
            epochs: 200,
            lr: 1e-3,
            patience: 10,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden_units >= 1, Config, "hidden_units must be at least 1");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout {} outside [0, 1)", self.dropout);
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(self.lr > 0.0, Config, "lr must be positive");
        ensure!(
            self.val_fraction > 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0,
            Config,
            "split fractions must be positive and leave a training split"
        );
        match self.task_kind {
            TaskKind::Classification { num_classes } => {
                ensure!(num_classes >= 2, Config, "classification needs at least 2 classes")
            }
            TaskKind::Regression { target_dim } => ensure!(target_dim >= 1, Config, "target_dim must be at least 1"),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    R2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub metric: Metric,
    /// Test-split value of `metric`.
    pub value: f64,
    pub splits: SplitSizes,
    pub seed: u64,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let metric = match self.metric {
            Metric::Accuracy => "accuracy",
            Metric::R2 => "r2",
        };
        write!(
            f,
            "{}: test {metric} {:.4} (train/val/test {}/{}/{}, seed {}, best epoch {} of {})",
            self.task,
            self.value,
            self.splits.train,
            self.splits.val,
            self.splits.test,
            self.seed,
            self.best_epoch,
            self.epochs_trained
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }
}

/// Deterministic train/val/test split. Each clip's position is keyed by
/// `(seed, id)`, so the assignment depends only on the seed and the ids,
/// never on input order. Returned indices point into `ids`.
pub fn split_ids(ids: &[u64], seed_val: u64, val_fraction: f64, test_fraction: f64) -> Split {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (seed::derive(&[seed::TAG_PROBE, seed_val, ids[i]]), ids[i]));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    Split { train, val, test }
}

/// Coefficient of determination, averaged over target dimensions. A
/// constant target scores 1 for an exact fit and 0 otherwise.
pub fn r_squared(y: &[Vec<f64>], pred: &[Vec<f64>]) -> f64 {
    assert_eq!(y.len(), pred.len(), "r² length mismatch");
    if y.is_empty() {
        return 0.0;
    }
    let dims = y[0].len();
    let per_dim: Vec<f64> = (0..dims)
        .map(|d| {
            let col: Vec<f64> = y.iter().map(|r| r[d]).collect();
            let mean = mean(&col);
            let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = col.iter().zip(pred).map(|(v, p)| (v - p[d]).powi(2)).sum();
            if ss_tot == 0.0 {
                if ss_res == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - ss_res / ss_tot
            }
        })
        .collect();
    mean(&per_dim)
}

/// Left-to-right arithmetic mean.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pooled clip embeddings with the backbone digest observed before and
/// after extraction.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub values: Array2<f32>,
    pub backbone_digest: u64,
}

pub fn pool(frames: &Array2<f32>, pooling: Pooling) -> Vec<f32> {
    match pooling {
        Pooling::Mean => frames
            .axis_iter(Axis(1))
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / c.len() as f64) as f32)
            .collect(),
        Pooling::Max => frames
            .axis_iter(Axis(1))
            .map(|c| c.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect(),
    }
}

/// Runs the frozen encoder in evaluation mode over each clip (in
/// parallel) and pools the final hidden sequence over time.
pub fn extract_embeddings(encoder: &Encoder<f32>, clips: &[Waveform], pooling: Pooling) -> Result<Embeddings> {
    ensure!(!clips.is_empty(), Input, "no clips to embed");
    if let Some(w) = clips.iter().find(|w| w.sample_rate != SAMPLE_RATE) {
        return Err(Error::Config(format!(
            "checkpoint expects {SAMPLE_RATE} Hz audio, clip is {} Hz",
            w.sample_rate
        )));
    }
    let before = encoder.params().digest();
    let rows: Vec<Vec<f32>> = clips
        .par_iter()
        .map(|w| encoder.encode(w).map(|h| pool(&h.frames, pooling)))
        .collect::<Result<_>>()?;
    let after = encoder.params().digest();
    assert_eq!(before, after, "backbone parameters changed during extraction");
    let dim = encoder.config().model_dim;
    let values = Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("pooled rows have model_dim entries");
    Ok(Embeddings {
        values,
        backbone_digest: after,
    })
}

pub fn extract_from_checkpoint(ck: &Checkpoint, clips: &[Waveform], pooling: Pooling) -> Result<Embeddings> {
    extract_embeddings(&ck.encoder()?, clips, pooling)
}

const EMBEDDING_MAGIC: &[u8; 4] = b"LMEB";

/// Writes `"LMEB"`, `num_clips: u64`, `dim: u64`, then f32 values in
/// row-major order, all little-endian.
pub fn write_embeddings(path: impl AsRef<Path>, values: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(20 + values.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(values.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(values.ncols() as u64).to_le_bytes());
    for v in values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::format(path, "not an embedding file"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(4), word(12));
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(20));
    if expected != Some(bytes.len()) {
        return Err(Error::format(path, format!("size does not match a {rows}×{cols} matrix")));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("checked size"))
}

/// Trained probe: input standardization, hidden layer and output layer.
#[derive(Debug, Clone)]
pub struct Probe {
    pub params: ParamStore<f32>,
    pub kind: TaskKind,
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
    /// Regression targets are standardized for training; predictions are
    /// mapped back with these.
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    ids: [ParamId; 4],
    dropout: f64,
}

impl Probe {
    fn new(kind: TaskKind, dim: usize, cfg: &ProbeConfig, seed_val: u64) -> Self {
        let mut init = Initializer::new(seed::rng(&[seed::TAG_PROBE, seed_val, 0xA]));
        let mut params = ParamStore::new();
        let (h, out) = (cfg.hidden_units, kind.output_dim());
        let ids = [
            params.add("probe.hidden.w", Component::Probe, init.xavier_uniform(dim, h, dim, h)),
            params.add("probe.hidden.b", Component::Probe, Array2::zeros((1, h))),
            params.add("probe.out.w", Component::Probe, init.xavier_uniform(h, out, h, out)),
            params.add("probe.out.b", Component::Probe, Array2::zeros((1, out))),
        ];
        Self {
            params,
            kind,
            input_mean: vec![0.0; dim],
            input_std: vec![1.0; dim],
            target_mean: vec![0.0; out],
            target_std: vec![1.0; out],
            ids,
            dropout: cfg.dropout,
        }
    }

    fn standardize(&self, x: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
        Array2::from_shape_fn((rows.len(), x.ncols()), |(i, j)| {
            (x[[rows[i], j]] - self.input_mean[j]) / self.input_std[j]
        })
    }

    fn logits(&self, g: &mut Graph<'_, f32>, x: Array2<f32>) -> crate::autodiff::Var {
        let x = g.input(x);
        let [hw, hb, ow, ob] = self.ids.map(|id| g.param(id));
        let h = g.matmul(x, hw);
        let h = g.add_bias(h, hb);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let y = g.matmul(h, ow);
        g.add_bias(y, ob)
    }

    /// Raw outputs (logits, or de-standardized regression predictions) for
    /// unstandardized embeddings.
    pub fn predict(&self, embeddings: &Array2<f32>) -> Array2<f64> {
        let rows: Vec<usize> = (0..embeddings.nrows()).collect();
        let mut g = Graph::eval(&self.params);
        let y = self.logits(&mut g, self.standardize(embeddings, &rows));
        let mut out = g.value(y).mapv(|v| v as f64);
        if matches!(self.kind, TaskKind::Regression { .. }) {
            for mut r in out.rows_mut() {
                for (j, v) in r.iter_mut().enumerate() {
                    *v = *v * self.target_std[j] + self.target_mean[j];
                }
            }
        }
        out
    }
}

struct Data<'a> {
    x: Array2<f32>,
    labels: &'a Labels,
    rows: Vec<usize>,
}

fn loss_and_metric(probe: &Probe, x: &Array2<f32>, labels: &Labels, rows: &[usize]) -> (f64, f64) {
    let xs = probe.standardize(x, rows);
    let mut g = Graph::eval(&probe.params);
    let y = probe.logits(&mut g, xs);
    let all: Vec<usize> = (0..rows.len()).collect();
    match labels {
        Labels::Classes(c) => {
            let t: Vec<usize> = rows.iter().map(|&r| c[r]).collect();
            let loss = g.masked_cross_entropy(y, &t, &all);
            let acc = top1_hits(g.value(y), &t, &all) as f64 / rows.len() as f64;
            (g.scalar(loss) as f64, acc)
        }
        Labels::Targets(t) => {
            let target = standardized_targets(probe, t, rows);
            let loss = g.masked_mse(y, target, &all);
            let loss = g.scalar(loss) as f64;
            let pred = probe.predict(&Array2::from_shape_fn((rows.len(), x.ncols()), |(i, j)| x[[rows[i], j]]));
            let pred: Vec<Vec<f64>> = pred.rows().into_iter().map(|r| r.to_vec()).collect();
            let truth: Vec<Vec<f64>> = rows.iter().map(|&r| t[r].clone()).collect();
            (loss, r_squared(&truth, &pred))
        }
    }
}

fn standardized_targets(probe: &Probe, t: &[Vec<f64>], rows: &[usize]) -> Array2<f32> {
    Array2::from_shape_fn((rows.len(), probe.target_mean.len()), |(i, j)| {
        ((t[rows[i]][j] - probe.target_mean[j]) / probe.target_std[j]) as f32
    })
}

fn column_stats(cols: usize, rows: &[usize], get: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    (0..cols)
        .map(|j| {
            let m = rows.iter().map(|&r| get(r, j)).sum::<f64>() / n;
            let var = rows.iter().map(|&r| (get(r, j) - m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (m, if sd > 1e-8 { sd } else { 1.0 })
        })
        .unzip()
}

fn check_labels(embeddings: &Array2<f32>, labels: &Labels, kind: TaskKind) -> Result<()> {
    ensure!(
        embeddings.nrows() == labels.len(),
        Input,
        "{} embeddings but {} labels",
        embeddings.nrows(),
        labels.len()
    );
    ensure!(embeddings.iter().all(|v| v.is_finite()), Input, "non-finite embedding values");
    match (labels, kind) {
        (Labels::Classes(c), TaskKind::Classification { num_classes }) => {
            ensure!(
                c.iter().all(|&k| k < num_classes),
                Input,
                "class label outside 0..{num_classes}"
            );
        }
        (Labels::Targets(t), TaskKind::Regression { target_dim }) => {
            ensure!(
                t.iter().all(|r| r.len() == target_dim && r.iter().all(|v| v.is_finite())),
                Input,
                "regression targets must be finite {target_dim}-vectors"
            );
        }
        _ => return Err(Error::Config("labels do not match the task kind".into())),
    }
    Ok(())
}

/// Trains the probe with Adam and early stopping on validation loss,
/// keeping the best validation parameters, and reports the test metric.
/// Clip ids for the split are the row indices.
pub fn train_probe(
    embeddings: &Array2<f32>,
    labels: &Labels,
    cfg: &ProbeConfig,
    task: &str,
    seed_val: u64,
) -> Result<(Probe, ProbeReport)> {
    cfg.validate()?;
    check_labels(embeddings, labels, cfg.task_kind)?;
    let ids: Vec<u64> = (0..embeddings.nrows() as u64).collect();
    let split = split_ids(&ids, seed_val, cfg.val_fraction, cfg.test_fraction);
    ensure!(
        !split.train.is_empty() && !split.val.is_empty() && !split.test.is_empty(),
        Task,
        "{} clips are too few for a train/val/test split",
        ids.len()
    );
    if let Labels::Classes(c) = labels {
        let first = c[split.train[0]];
        ensure!(
            split.train.iter().any(|&r| c[r] != first),
            Task,
            "training split contains a single class"
        );
    }

    let dim = embeddings.ncols();
    let mut probe = Probe::new(cfg.task_kind, dim, cfg, seed_val);
    let (m, s) = column_stats(dim, &split.train, |r, j| embeddings[[r, j]] as f64);
    probe.input_mean = m.iter().map(|&v| v as f32).collect();
    probe.input_std = s.iter().map(|&v| v as f32).collect();
    if let Labels::Targets(t) = labels {
        let (m, s) = column_stats(cfg.task_kind.output_dim(), &split.train, |r, j| t[r][j]);
        probe.target_mean = m;
        probe.target_std = s;
    }

    let train = Data {
        x: probe.standardize(embeddings, &split.train),
        labels,
        rows: split.train.clone(),
    };
    let mut adam = Adam::new(AdamConfig::default(), &probe.params);
    let mut best = (f64::INFINITY, 0usize, probe.params.clone());
    let mut order: Vec<usize> = (0..train.rows.len()).collect();
    let mut t = 0u64;
    let mut epochs_trained = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(&[seed::TAG_PROBE, seed_val, 1, epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = Array2::from_shape_fn((chunk.len(), dim), |(i, j)| train.x[[chunk[i], j]]);
            let rng = seed::rng(&[seed::TAG_PROBE, seed_val, 2, epoch as u64, b as u64]);
            let mut g = Graph::training(&probe.params, rng);
            let y = probe.logits(&mut g, x);
            let all: Vec<usize> = (0..chunk.len()).collect();
            let rows: Vec<usize> = chunk.iter().map(|&i| train.rows[i]).collect();
            let loss = match train.labels {
                Labels::Classes(c) => {
                    let tg: Vec<usize> = rows.iter().map(|&r| c[r]).collect();
                    g.masked_cross_entropy(y, &tg, &all)
                }
                Labels::Targets(tv) => {
                    let target = standardized_targets(&probe, tv, &rows);
                    g.masked_mse(y, target, &all)
                }
            };
            let grads = g.param_grads(&g.backward(loss));
            t += 1;
            adam.update(&mut probe.params, &grads, cfg.lr, t);
        }
        epochs_trained = epoch + 1;
        let (val_loss, _) = loss_and_metric(&probe, embeddings, labels, &split.val);
        if val_loss < best.0 {
            best = (val_loss, epochs_trained, probe.params.clone());
        } else if epochs_trained - best.1 >= cfg.patience {
            break;
        }
    }
    probe.params = best.2;
    let (_, value) = loss_and_metric(&probe, embeddings, labels, &split.test);
    let report = ProbeReport {
        task: task.to_string(),
        metric: match cfg.task_kind {
            TaskKind::Classification { .. } => Metric::Accuracy,
            TaskKind::Regression { .. } => Metric::R2,
        },
        value,
        splits: split.sizes(),
        seed: seed_val,
        epochs_trained,
        best_epoch: best.1,
        best_val_loss: best.0,
    };
    Ok((probe, report))
}

/// Random permutation of class labels, keeping the class balance.
pub fn shuffled_labels(labels: &[usize], seed_val: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut seed::rng(&[seed::TAG_PROBE, seed_val, 3]));
    out
}

/// Result of running one synthetic task end to end.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub report: ProbeReport,
    pub embeddings: Embeddings,
    pub labels: Labels,
}

/// Default clip length for synthetic downstream tasks.
pub const TASK_CLIP_SECONDS: f64 = 2.0;

/// Builds the synthetic task, embeds it with the frozen encoder and trains
/// a probe.
pub fn run_task(
    encoder: &Encoder<f32>,
    task: SyntheticTask,
    size: usize,
    cfg: &ProbeConfig,
    seed_val: u64,
) -> Result<TaskOutcome> {
    ensure!(cfg.task_kind == task.kind(), Config, "probe config does not match task {task}");
    let data = make_synthetic_task(task, size, TASK_CLIP_SECONDS, seed_val)?;
    let waves: Vec<Waveform> = data.clips.into_iter().map(|c| c.waveform).collect();
    let embeddings = extract_embeddings(encoder, &waves, cfg.pooling)?;
    let (_, report) = train_probe(&embeddings.values, &data.labels, cfg, &task.to_string(), seed_val)?;
    Ok(TaskOutcome {
        report,
        embeddings,
        labels: data.labels,
    })
}
