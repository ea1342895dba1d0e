//! Labeled synthetic clip sets standing in for downstream audio tasks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::frontend::{synthesize_test_waveform, Signal, SynthParams, Waveform, DEFAULT_SAMPLE_RATE};
use crate::pretrain::Clip;
use crate::seed;

use super::{Labels, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Pure sine whose fundamental falls in one of `PITCH_CLASSES` bands.
    PitchClass,
    /// Number of simultaneous tones, 1 to `MAX_TONES`.
    ToneCount,
    /// Amplitude-modulation rate in Hz of a modulated sine.
    AmRateRegression,
}

pub const PITCH_CLASSES: usize = 8;
pub const MAX_TONES: usize = 4;
pub const AM_RATE_RANGE: (f64, f64) = (2.0, 12.0);
pub const AM_DEPTH: f64 = 0.8;
pub const MIN_TASK_SIZE: usize = 50;

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 3] = [Self::PitchClass, Self::ToneCount, Self::AmRateRegression];

    pub fn kind(self) -> TaskKind {
        match self {
            Self::PitchClass => TaskKind::Classification {
                num_classes: PITCH_CLASSES,
            },
            Self::ToneCount => TaskKind::Classification { num_classes: MAX_TONES },
            Self::AmRateRegression => TaskKind::Regression { target_dim: 1 },
        }
    }

    /// Centre frequency of pitch class `k`: eight log-spaced bands from
    /// 110 Hz to 3520 Hz.
    pub fn pitch_centre(k: usize) -> f64 {
        110.0 * 32f64.powf(k as f64 / (PITCH_CLASSES - 1) as f64)
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PitchClass => "pitch_class",
            Self::ToneCount => "tone_count",
            Self::AmRateRegression => "am_rate_regression",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (pitch_class, tone_count, am_rate_regression)")))
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: SyntheticTask,
    pub clips: Vec<Clip>,
    pub labels: Labels,
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

/// Amplitude-modulated sine: `a · (1 + m sin(2π r t + φ)) / (1 + m) · sin(2π f t + θ)`.
pub fn am_tone(carrier: f64, rate: f64, depth: f64, amplitude: f64, phases: (f64, f64), params: &SynthParams) -> Waveform {
    let sr = params.sample_rate as f64;
    let n = (sr * params.duration_s).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = (1.0 + depth * (2.0 * PI * rate * t + phases.0).sin()) / (1.0 + depth);
            (amplitude * env * (2.0 * PI * carrier * t + phases.1).sin()) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: params.sample_rate,
    }
}

/// Builds `size` labeled clips. Clip `i` of a classification task has
/// label `i mod K`, so classes are balanced within one clip.
pub fn make_synthetic_task(task: SyntheticTask, size: usize, duration_s: f64, seed_val: u64) -> Result<TaskData> {
    ensure!(size >= MIN_TASK_SIZE, Config, "task size {size} below the minimum of {MIN_TASK_SIZE}");
    ensure!(duration_s > 0.0, Config, "clip duration must be positive");
    let mut clips = Vec::with_capacity(size);
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for i in 0..size {
        let mut rng = seed::rng(&[seed::TAG_SYNTH, seed_val, task as u64, i as u64]);
        let amplitude = rng.random_range(0.3..0.8);
        let params = SynthParams {
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration_s,
            amplitude,
        };
        let clip_seed = seed::derive(&[seed_val, task as u64, i as u64]);
        let waveform = match task {
            SyntheticTask::PitchClass => {
                let k = i % PITCH_CLASSES;
                // ±5% jitter stays well inside the 64% spacing between bands
                let freq = SyntheticTask::pitch_centre(k) * rng.random_range(0.95..1.05);
                classes.push(k);
                synthesize_test_waveform(&Signal::Sine { freq }, clip_seed, &params)?
            }
            SyntheticTask::ToneCount => {
                let k = i % MAX_TONES;
                let freqs = (0..=k).map(|_| log_uniform(&mut rng, 110.0, 3520.0)).collect();
                classes.push(k);
                synthesize_test_waveform(&Signal::ToneMixture { freqs }, clip_seed, &params)?
            }
            SyntheticTask::AmRateRegression => {
                let rate = rng.random_range(AM_RATE_RANGE.0..AM_RATE_RANGE.1);
                let carrier = log_uniform(&mut rng, 220.0, 1760.0);
                let phases = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                targets.push(rate);
                am_tone(carrier, rate, AM_DEPTH, amplitude, phases, &params)
            }
        };
        clips.push(Clip {
            id: i as u64,
            name: format!("{task}-{i:05}"),
            waveform,
        });
    }
    let labels = match task.kind() {
        TaskKind::Classification { .. } => Labels::Classes(classes),
        TaskKind::Regression { .. } => Labels::Targets(targets.into_iter().map(|t| vec![t]).collect()),
    };
    Ok(TaskData { task, clips, labels })
}

/// Recovers an amplitude-modulation rate from the waveform alone: squared
/// signal averaged over 10 ms blocks, Hann-windowed, zero-padded FFT, peak
/// search in `[lo, hi]` Hz refined by parabolic interpolation.
pub fn estimate_am_rate(w: &Waveform, lo: f64, hi: f64) -> Result<f64> {
    let block = (w.sample_rate / 100) as usize;
    ensure!(block > 0 && w.len() >= 4 * block, Input, "clip too short for an envelope estimate");
    let env_rate = w.sample_rate as f64 / block as f64;
    let mut env: Vec<f64> = w
        .samples
        .chunks_exact(block)
        .map(|c| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / block as f64)
        .collect();
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let n = env.len();
    for (i, e) in env.iter_mut().enumerate() {
        let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
        *e = (*e - mean) * hann;
    }
    let fft_len = (16 * n).next_power_of_two().max(4096);
    let mut buf: Vec<Complex<f64>> = env.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(fft_len, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(fft_len).process(&mut buf);
    let bin_hz = env_rate / fft_len as f64;
    let (lo_bin, hi_bin) = ((lo / bin_hz).floor() as usize, (hi / bin_hz).ceil() as usize);
    ensure!(hi_bin + 1 < fft_len / 2 && lo_bin >= 1, Config, "search band outside the envelope spectrum");
    let mag = |k: usize| buf[k].norm();
    let peak = (lo_bin..=hi_bin).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).expect("nonempty band");
    let (a, b, c) = (mag(peak - 1), mag(peak), mag(peak + 1));
    let denom = a - 2.0 * b + c;
    let offset = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Ok((peak as f64 + offset) * bin_hz)
}
