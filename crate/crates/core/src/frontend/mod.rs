//! Waveform to log-mel features, and frame stacking down to the model rate.
//!
//! Conventions:
//! - periodic Hann window of `fft_size` samples, reflect padding of
//!   `fft_size / 2` on both ends, and exactly `floor(num_samples / hop)`
//!   frames (the trailing centered frame is dropped);
//! - Slaney mel scale and area-normalized triangular filters spanning
//!   0 Hz to Nyquist;
//! - natural log of mel power, floored at `1e-10`.

mod io;
mod synth;

pub use io::{read_features, read_raw_f32, read_wav, write_features, FEATURE_MAGIC};
pub use synth::{synthesize_test_waveform, Signal, SynthParams};

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        ensure!(sample_rate > 0, Config, "sample rate must be positive");
        ensure!(
            samples.iter().all(|v| v.is_finite()),
            Input,
            "waveform contains non-finite samples"
        );
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(num_samples: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; num_samples],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            fft_size: 2048,
            hop: 240,
            n_mels: 128,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hop > 0, Config, "hop must be positive");
        ensure!(self.fft_size >= self.hop, Config, "fft_size must be at least hop");
        ensure!(self.n_mels >= 1, Config, "n_mels must be at least 1");
        ensure!(self.sample_rate > 0, Config, "sample rate must be positive");
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.hop
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `T_mel × n_mels`
    pub frames: Array2<f32>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Stacked features at the model frame rate; the quantizer input and the
/// mel regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedMelSequence {
    /// `T × (n_mels · stack_factor)`
    pub frames: Array2<f32>,
    pub frame_rate: f64,
    pub stack_factor: usize,
}

impl StackedMelSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Precomputed window, filterbank and FFT plan for one [`MelConfig`].
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    /// `n_mels × (fft_size / 2 + 1)`
    filters: Array2<f64>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();

        let n_freqs = n / 2 + 1;
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_freqs)
            .map(|k| k as f64 * cfg.sample_rate as f64 / n as f64)
            .collect();
        let mut filters = Array2::zeros((cfg.n_mels, n_freqs));
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (hi - lo);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rising = (f - lo) / (center - lo);
                let falling = (hi - f) / (hi - center);
                filters[[m, k]] = rising.min(falling).max(0.0) * norm;
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg,
            window,
            filters,
            centers_hz: points[1..=cfg.n_mels].to_vec(),
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Center frequency (Hz) of every mel filter.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn filters(&self) -> &Array2<f64> {
        &self.filters
    }

    /// Log-mel energies in double precision, `T_mel × n_mels`.
    pub fn log_mel_f64(&self, w: &Waveform) -> Result<Array2<f64>> {
        ensure!(!w.is_empty(), Input, "empty waveform");
        ensure!(
            w.samples.iter().all(|v| v.is_finite()),
            Input,
            "waveform contains non-finite samples"
        );
        ensure!(
            w.sample_rate == self.cfg.sample_rate,
            Input,
            "waveform sample rate {} does not match mel config {}",
            w.sample_rate,
            self.cfg.sample_rate
        );
        let n = self.cfg.fft_size;
        let pad = n / 2;
        let len = w.len();
        let num_frames = self.cfg.num_frames(len);
        let n_freqs = n / 2 + 1;

        let mut out = Array2::zeros((num_frames, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = ndarray::Array1::<f64>::zeros(n_freqs);
        for t in 0..num_frames {
            let start = t * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let src = reflect_index(start as isize + i as isize - pad as isize, len);
                *slot = Complex::new(w.samples[src] as f64 * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..n_freqs]) {
                *p = c.norm_sqr();
            }
            let mel = self.filters.dot(&power);
            for (o, m) in out.row_mut(t).iter_mut().zip(mel.iter()) {
                *o = m.max(LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let frames = self.log_mel_f64(w)?.mapv(|v| v as f32);
        Ok(MelSpectrogram {
            frames,
            frame_rate: self.cfg.frame_rate(),
        })
    }
}

/// Mirror index into `[0, len)` without repeating the edge sample.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// One-shot log-mel computation.
pub fn compute_log_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(*cfg)?.compute(w)
}

/// Concatenates each run of `stack_factor` consecutive frames; a trailing
/// partial run is dropped.
pub fn stack_frames(m: &MelSpectrogram, stack_factor: usize) -> Result<StackedMelSequence> {
    ensure!(stack_factor >= 1, Config, "stack factor must be at least 1");
    let t_out = m.num_frames() / stack_factor;
    let dim = m.n_mels() * stack_factor;
    let kept = m.frames.slice(ndarray::s![..t_out * stack_factor, ..]);
    let frames = kept
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((t_out, dim))
        .map_err(|e| Error::Input(format!("stacking reshape failed: {e}")))?;
    Ok(StackedMelSequence {
        frames,
        frame_rate: m.frame_rate / stack_factor as f64,
        stack_factor,
    })
}

/// Full feature chain: log-mel then stacking.
#[derive(Debug)]
pub struct FeaturePipeline {
    extractor: MelExtractor,
    stack_factor: usize,
}

impl FeaturePipeline {
    pub fn new(mel: MelConfig, stack_factor: usize) -> Result<Self> {
        ensure!(stack_factor >= 1, Config, "stack factor must be at least 1");
        Ok(Self {
            extractor: MelExtractor::new(mel)?,
            stack_factor,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.cfg.n_mels * self.stack_factor
    }

    pub fn stack_factor(&self) -> usize {
        self.stack_factor
    }

    pub fn extractor(&self) -> &MelExtractor {
        &self.extractor
    }

    pub fn run(&self, w: &Waveform) -> Result<StackedMelSequence> {
        stack_frames(&self.extractor.compute(w)?, self.stack_factor)
    }
}

/// Per-feature standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNormalizer {
    const MIN_STD: f64 = 1e-5;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a StackedMelSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            }
            ensure!(s.dim() == sum.len(), Config, "feature dims differ across sequences");
            for row in s.frames.rows() {
                for ((a, b), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
                    *a += v as f64;
                    *b += v as f64 * v as f64;
                }
            }
            count += s.len();
        }
        ensure!(count > 0, Input, "cannot fit normalizer on zero frames");
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt().max(Self::MIN_STD)) as f32
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, s: &StackedMelSequence) -> Result<StackedMelSequence> {
        ensure!(
            s.dim() == self.dim(),
            Config,
            "normalizer dim {} does not match features {}",
            self.dim(),
            s.dim()
        );
        let mut frames = s.frames.clone();
        for mut row in frames.axis_iter_mut(Axis(0)) {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / sd;
            }
        }
        Ok(StackedMelSequence {
            frames,
            frame_rate: s.frame_rate,
            stack_factor: s.stack_factor,
        })
    }
}
