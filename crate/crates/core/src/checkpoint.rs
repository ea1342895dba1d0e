//! Self-describing checkpoint container.
//!
//! Layout (little-endian):
//! `"LMCK"`, version `u32`, JSON metadata length `u64`, JSON metadata,
//! tensor count `u32`, then per tensor: name length `u32`, UTF-8 name,
//! rows `u32`, cols `u32`, `rows·cols` f32 values in row-major order.
//!
//! Tensor names are canonical paths: `params/<layer path>` for model
//! weights, `adam.m/…` and `adam.v/…` for optimizer moments, and
//! `normalizer/mean`, `normalizer/std` for the feature statistics.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::FeatureNormalizer;
use crate::pretrain::TrainConfig;
use crate::quantizer::QuantizerConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const PARAM_PREFIX: &str = "params/";
pub const ADAM_M_PREFIX: &str = "adam.m/";
pub const ADAM_V_PREFIX: &str = "adam.v/";
const NORM_MEAN: &str = "normalizer/mean";
const NORM_STD: &str = "normalizer/std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    /// Optimizer steps taken.
    pub step: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Recent per-step total losses (oldest first).
    #[serde(default)]
    pub loss_window: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl Checkpoint {
    /// Model weights only, plus the quantizer configuration.
    pub fn from_encoder(encoder: &Encoder<f32>, quantizer: QuantizerConfig, step: u64) -> Self {
        let tensors = encoder
            .params()
            .iter()
            .map(|p| (format!("{PARAM_PREFIX}{}", p.name), p.value.clone()))
            .collect();
        Self {
            meta: CheckpointMeta {
                encoder: encoder.config().clone(),
                quantizer,
                step,
                train: None,
                loss_window: Vec::new(),
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f32>) {
        self.tensors.push((name.into(), value));
    }

    /// Tensors under `prefix`, matched to the encoder's parameter order.
    pub fn group(&self, prefix: &str, template: &Encoder<f32>) -> Result<Vec<Array2<f32>>> {
        template
            .params()
            .iter()
            .map(|p| {
                let name = format!("{prefix}{}", p.name);
                let t = self
                    .tensor(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
                if t.dim() != p.value.dim() {
                    return Err(Error::Config(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.dim(),
                        p.value.dim()
                    )));
                }
                Ok(t.clone())
            })
            .collect()
    }

    /// Rebuilds the encoder described by the metadata and loads its weights.
    pub fn encoder(&self) -> Result<Encoder<f32>> {
        let mut enc = Encoder::<f32>::new(self.meta.encoder.clone())?;
        let values = self.group(PARAM_PREFIX, &enc)?;
        for (p, v) in enc.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
        Ok(enc)
    }

    pub fn set_normalizer(&mut self, n: &FeatureNormalizer) {
        self.tensors.retain(|(name, _)| name != NORM_MEAN && name != NORM_STD);
        let row = |v: &[f32]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector");
        self.push(NORM_MEAN, row(&n.mean));
        self.push(NORM_STD, row(&n.std));
    }

    pub fn normalizer(&self) -> Option<FeatureNormalizer> {
        let mean = self.tensor(NORM_MEAN)?;
        let std = self.tensor(NORM_STD)?;
        Some(FeatureNormalizer {
            mean: mean.iter().copied().collect(),
            std: std.iter().copied().collect(),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(std::io::Error::other)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.nrows() as u32).to_le_bytes())?;
            w.write_all(&(t.ncols() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("bad metadata: {e}"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
