//! Forward-pass wallclock scaling in sequence length.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::{Duration, Instant};

use linmir_core::encoder::{
    block_flops, global_branch_flops, BlockKind, Encoder, EncoderConfig, GlobalBranchKind, HiddenSequence, FRAME_RATE,
};
use linmir_core::seed;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alloc::peak_bytes_during;
use crate::{Error, Result};

pub const MIN_REPS: usize = 20;
/// Timed samples shorter than this are batched over several calls.
pub const MIN_SAMPLE: Duration = Duration::from_millis(2);

/// What one timed call runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchScope {
    /// The global branch alone (attention or SummaryMixing).
    GlobalBranch,
    /// A whole encoder block, including its local branch or modules.
    Block,
}

impl fmt::Display for BenchScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GlobalBranch => "global_branch",
            Self::Block => "block",
        })
    }
}

impl FromStr for BenchScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_branch" => Ok(Self::GlobalBranch),
            "block" => Ok(Self::Block),
            _ => Err(Error::Config(format!("unknown scope {s:?} (global_branch, block)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub block_kind: BlockKind,
    pub branch_kind: GlobalBranchKind,
    pub scope: BenchScope,
    pub dim: usize,
    pub heads: usize,
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            block_kind: BlockKind::Branchformer,
            branch_kind: GlobalBranchKind::SummaryMixing,
            scope: BenchScope::GlobalBranch,
            dim: 256,
            heads: 4,
            lengths: vec![512, 1024, 2048, 4096, 8192],
            reps: MIN_REPS,
            seed: 0,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 2 || self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config("lengths must be positive and strictly ascending (at least two)".into()));
        }
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!("reps {} below the minimum of {MIN_REPS}", self.reps)));
        }
        self.encoder_config().validate()?;
        Ok(())
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            model_dim: self.dim,
            num_heads: self.heads,
            dropout: 0.0,
            vocab_size: 16,
            mel_dim: 8,
            seed: self.seed,
            ..EncoderConfig::desk().with_kinds(self.block_kind, self.branch_kind)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub seq_len: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Timed samples (after one discarded warmup sample).
    pub reps: usize,
    /// Calls per timed sample.
    pub batch: usize,
    pub flops: u64,
    /// Peak bytes allocated by one call, when the allocation tracker is
    /// installed.
    pub peak_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub block_kind: BlockKind,
    pub branch_kind: GlobalBranchKind,
    pub scope: BenchScope,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
    pub points: Vec<ScalingPoint>,
    /// Least-squares log-log slope of median time over the largest half
    /// of the lengths.
    pub slope: f64,
    /// Same fit applied to the analytic FLOP counts.
    pub flop_slope: f64,
}

/// Least-squares slope of `ln y` against `ln x` over the largest half of
/// the points (`⌈n/2⌉` points, at least two).
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let start = (n / 2).min(n.saturating_sub(2));
    let lx: Vec<f64> = x[start..].iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y[start..].iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times forward passes on random frames, one sequence length at a time,
/// on a single worker thread.
pub fn bench_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    bench_scaling_with(cfg, |_| {})
}

/// [`bench_scaling`] with a callback after each length.
pub fn bench_scaling_with(cfg: &ScalingConfig, mut on_point: impl FnMut(&ScalingPoint)) -> Result<ScalingReport> {
    cfg.validate()?;
    let enc_cfg = cfg.encoder_config();
    let encoder = Encoder::<f32>::new(enc_cfg.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut points = Vec::with_capacity(cfg.lengths.len());
    for &t in &cfg.lengths {
        let mut rng = seed::rng(&[cfg.seed, t as u64]);
        let h = HiddenSequence {
            frames: Array2::from_shape_fn((t, cfg.dim), |_| rng.random_range(-1.0f32..1.0)),
            frame_rate: FRAME_RATE,
        };
        let run = || -> Result<()> {
            match cfg.scope {
                BenchScope::GlobalBranch => {
                    black_box(encoder.global_branch_forward(0, black_box(&h))?);
                }
                BenchScope::Block => {
                    black_box(encoder.block_forward(0, black_box(&h)));
                }
            }
            Ok(())
        };
        let point = pool.install(|| -> Result<ScalingPoint> {
            // warmup, also used to size the batch and measure memory
            let start = Instant::now();
            let (r, peak_bytes) = peak_bytes_during(run);
            r?;
            let once = start.elapsed();
            let batch = if once >= MIN_SAMPLE {
                1
            } else {
                (MIN_SAMPLE.as_secs_f64() / once.as_secs_f64().max(1e-9)).ceil() as usize
            };
            let mut samples = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let start = Instant::now();
                for _ in 0..batch {
                    run()?;
                }
                samples.push(start.elapsed().as_secs_f64() * 1e3 / batch as f64);
            }
            let (min_ms, max_ms) = samples
                .iter()
                .fold((f64::INFINITY, 0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            Ok(ScalingPoint {
                seq_len: t,
                median_ms: median(&mut samples),
                min_ms,
                max_ms,
                reps: cfg.reps,
                batch,
                flops: match cfg.scope {
                    BenchScope::GlobalBranch => global_branch_flops(cfg.branch_kind, t, cfg.dim),
                    BenchScope::Block => block_flops(&enc_cfg, t),
                },
                peak_bytes,
            })
        })?;
        on_point(&point);
        points.push(point);
    }
    Ok(ScalingReport::from_points(cfg, points))
}

impl ScalingReport {
    fn from_points(cfg: &ScalingConfig, points: Vec<ScalingPoint>) -> Self {
        let x: Vec<f64> = points.iter().map(|p| p.seq_len as f64).collect();
        let y: Vec<f64> = points.iter().map(|p| p.median_ms).collect();
        let f: Vec<f64> = points.iter().map(|p| p.flops as f64).collect();
        Self {
            block_kind: cfg.block_kind,
            branch_kind: cfg.branch_kind,
            scope: cfg.scope,
            dim: cfg.dim,
            heads: cfg.heads,
            seed: cfg.seed,
            slope: fit_loglog_slope(&x, &y),
            flop_slope: fit_loglog_slope(&x, &f),
            points,
        }
    }
}
