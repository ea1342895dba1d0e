//! Random time masking on the raw waveform.
//!
//! The clip is tiled into fixed-length segments; each full segment is
//! selected independently with probability `mask_prob`, and a trailing
//! partial segment is never selected. The selection is a pure function of
//! `(epoch_seed, clip_id, mask_prob)`, so worker scheduling cannot change
//! it. Only model frames lying entirely inside a selected segment count as
//! masked.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::frontend::Waveform;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskFill {
    Zero,
    /// Gaussian noise with the given standard deviation.
    Noise { std: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub segment_ms: f64,
    pub mask_prob: f64,
    /// Frame rate of the model outputs the mask is mapped onto.
    pub frame_rate: f64,
    pub fill: MaskFill,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            segment_ms: 400.0,
            mask_prob: 0.2,
            frame_rate: 25.0,
            fill: MaskFill::Zero,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.mask_prob),
            Config,
            "mask probability {} outside [0, 1]",
            self.mask_prob
        );
        ensure!(self.segment_ms > 0.0, Config, "segment length must be positive");
        ensure!(self.frame_rate > 0.0, Config, "frame rate must be positive");
        Ok(())
    }

    pub fn segment_len(&self, sample_rate: u32) -> usize {
        (self.segment_ms / 1000.0 * sample_rate as f64).round() as usize
    }
}

/// Seed for one epoch of masks.
pub fn epoch_seed(global_seed: u64, epoch: u64) -> u64 {
    seed::derive(&[seed::TAG_MASK_EPOCH, global_seed, epoch])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub num_samples: usize,
    pub sample_rate: u32,
    pub segment_len: usize,
    pub mask_prob: f64,
    pub fill: MaskFill,
    pub epoch_seed: u64,
    pub clip_id: u64,
    /// Sorted, unique.
    pub selected_segments: Vec<usize>,
    /// Sorted, unique frame indices at `frame_rate`.
    pub frame_indices: Vec<usize>,
    pub frame_rate: f64,
}

impl MaskSpec {
    pub fn num_full_segments(&self) -> usize {
        self.num_samples / self.segment_len
    }

    /// Selected fraction of full segments.
    pub fn selected_fraction(&self) -> f64 {
        match self.num_full_segments() {
            0 => 0.0,
            n => self.selected_segments.len() as f64 / n as f64,
        }
    }

    pub fn is_masked_sample(&self, i: usize) -> bool {
        i < self.num_full_segments() * self.segment_len
            && self.selected_segments.binary_search(&(i / self.segment_len)).is_ok()
    }

    pub fn record(&self) -> MaskRecord {
        MaskRecord {
            epoch_seed: self.epoch_seed,
            clip_id: self.clip_id,
            mask_prob: self.mask_prob,
            segments: self.selected_segments.clone(),
        }
    }
}

pub fn sample_mask(
    num_samples: usize,
    sample_rate: u32,
    cfg: &MaskConfig,
    epoch_seed: u64,
    clip_id: u64,
) -> Result<MaskSpec> {
    cfg.validate()?;
    let segment_len = cfg.segment_len(sample_rate);
    ensure!(segment_len > 0, Config, "segment shorter than one sample");
    ensure!(
        num_samples >= segment_len,
        Input,
        "clip of {num_samples} samples is shorter than one {segment_len}-sample segment"
    );
    let mut rng = seed::rng(&[seed::TAG_MASK_CLIP, epoch_seed, clip_id]);
    let selected_segments: Vec<usize> = (0..num_samples / segment_len)
        .filter(|_| rng.random::<f64>() < cfg.mask_prob)
        .collect();
    let mut spec = MaskSpec {
        num_samples,
        sample_rate,
        segment_len,
        mask_prob: cfg.mask_prob,
        fill: cfg.fill,
        epoch_seed,
        clip_id,
        selected_segments,
        frame_indices: Vec::new(),
        frame_rate: cfg.frame_rate,
    };
    spec.frame_indices = mask_to_frame_indices(&spec, cfg.frame_rate);
    Ok(spec)
}

/// Frames `t` whose span `[t/fr, (t+1)/fr)` lies inside a selected segment.
pub fn mask_to_frame_indices(m: &MaskSpec, frame_rate: f64) -> Vec<usize> {
    let spf = m.sample_rate as f64 / frame_rate;
    let tol = 1e-9;
    let mut out = Vec::new();
    for &k in &m.selected_segments {
        let start = (k * m.segment_len) as f64;
        let end = ((k + 1) * m.segment_len) as f64;
        let first = (start / spf - tol).ceil().max(0.0) as usize;
        let stop = (end / spf + tol).floor() as usize;
        out.extend(first..stop);
    }
    out.dedup();
    out
}

/// Fills the selected segments; every other sample is returned unchanged.
pub fn apply_waveform_mask(w: &Waveform, m: &MaskSpec) -> Result<Waveform> {
    ensure!(
        w.len() == m.num_samples,
        Input,
        "mask built for {} samples applied to {}",
        m.num_samples,
        w.len()
    );
    ensure!(
        w.sample_rate == m.sample_rate,
        Input,
        "mask built for {} Hz applied to {} Hz",
        m.sample_rate,
        w.sample_rate
    );
    let mut samples = w.samples.clone();
    let mut noise = match m.fill {
        MaskFill::Zero => None,
        MaskFill::Noise { std } => Some((std, seed::rng(&[seed::TAG_MASK_CLIP, m.epoch_seed, m.clip_id, 1]))),
    };
    for &k in &m.selected_segments {
        let span = &mut samples[k * m.segment_len..(k + 1) * m.segment_len];
        match noise.as_mut() {
            None => span.fill(0.0),
            Some((std, rng)) => span
                .iter_mut()
                .for_each(|s| *s = *std * rng.sample::<f32, _>(StandardNormal)),
        }
    }
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Compact reproducibility log entry: `epoch_seed,clip_id,prob,[seg,...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub epoch_seed: u64,
    pub clip_id: u64,
    pub mask_prob: f64,
    pub segments: Vec<usize>,
}

impl fmt::Display for MaskRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},[", self.epoch_seed, self.clip_id, self.mask_prob)?;
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str("]")
    }
}

impl FromStr for MaskRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("malformed mask record {s:?}"));
        let (head, list) = s.trim().split_once('[').ok_or_else(bad)?;
        let list = list.strip_suffix(']').ok_or_else(bad)?;
        let mut parts = head.trim_end_matches(',').split(',');
        let epoch_seed = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let clip_id = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let mask_prob = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let segments = if list.is_empty() {
            Vec::new()
        } else {
            list.split(',')
                .map(|p| p.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            epoch_seed,
            clip_id,
            mask_prob,
            segments,
        })
    }
}
