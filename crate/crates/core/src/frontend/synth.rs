use std::f64::consts::PI;

use rand::Rng;

use super::Waveform;
use crate::error::{ensure, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Sine { freq: f64 },
    /// Linear frequency sweep.
    Chirp { start: f64, end: f64 },
    /// Uniform white noise.
    Noise,
    /// Equal-amplitude sum of sines.
    ToneMixture { freqs: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Peak amplitude; output stays within `[-amplitude, amplitude]`.
    pub amplitude: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            duration_s: 1.0,
            amplitude: 0.5,
        }
    }
}

/// Deterministic test signal. Phases (and noise) are drawn from `seed`.
pub fn synthesize_test_waveform(signal: &Signal, seed_val: u64, params: &SynthParams) -> Result<Waveform> {
    let sr = params.sample_rate as f64;
    let nyquist = sr / 2.0;
    ensure!(
        (0.0..=1.0).contains(&params.amplitude),
        Config,
        "amplitude must lie in [0, 1]"
    );
    ensure!(params.duration_s > 0.0, Config, "duration must be positive");
    let check = |f: f64| -> Result<()> {
        ensure!(f >= 0.0 && f < nyquist, Config, "frequency {f} Hz not below Nyquist {nyquist} Hz");
        Ok(())
    };
    let n = (sr * params.duration_s).round() as usize;
    let mut rng = seed::rng(&[seed::TAG_SYNTH, seed_val]);
    let a = params.amplitude;

    let samples: Vec<f32> = match signal {
        Signal::Sine { freq } => {
            check(*freq)?;
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| (a * (2.0 * PI * freq * i as f64 / sr + phase).sin()) as f32)
                .collect()
        }
        Signal::Chirp { start, end } => {
            check(*start)?;
            check(*end)?;
            let phase = rng.random_range(0.0..2.0 * PI);
            let rate = (end - start) / params.duration_s;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (a * (2.0 * PI * (start * t + 0.5 * rate * t * t) + phase).sin()) as f32
                })
                .collect()
        }
        Signal::Noise => (0..n).map(|_| (a * rng.random_range(-1.0..=1.0)) as f32).collect(),
        Signal::ToneMixture { freqs } => {
            ensure!(!freqs.is_empty(), Config, "tone mixture needs at least one frequency");
            for &f in freqs {
                check(f)?;
            }
            let phases: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let each = a / freqs.len() as f64;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let v: f64 = freqs
                        .iter()
                        .zip(&phases)
                        .map(|(f, p)| (2.0 * PI * f * t + p).sin())
                        .sum();
                    (each * v) as f32
                })
                .collect()
        }
    };
    Waveform::new(samples, params.sample_rate)
}
