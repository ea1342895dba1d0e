use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{StackedMelSequence, Waveform};
use crate::error::{Error, Result};

/// Magic bytes of the feature dump format: `magic | T: u32 | dim: u32 |
/// frame_rate: f32` (16 bytes, little-endian) followed by `T·dim` f32.
pub const FEATURE_MAGIC: [u8; 4] = *b"LMFT";

/// Reads a mono WAV file (16-bit PCM or 32-bit float). The file's rate
/// must equal `expected_rate`; no resampling is done.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("expected mono audio, got {} channels", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::Input(format!(
            "{}: sample rate {} Hz, expected {} Hz",
            path.display(),
            spec.sample_rate,
            expected_rate
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect(),
        (fmt, bits) => {
            return Err(Error::format(path, format!("unsupported sample format {fmt:?}/{bits} bit")));
        }
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Reads headerless little-endian f32 samples.
pub fn read_raw_f32(path: impl AsRef<Path>, sample_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "raw f32 file length is not a multiple of 4"));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn write_features(path: impl AsRef<Path>, seq: &StackedMelSequence) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&FEATURE_MAGIC)?;
        w.write_all(&(seq.len() as u32).to_le_bytes())?;
        w.write_all(&(seq.dim() as u32).to_le_bytes())?;
        w.write_all(&(seq.frame_rate as f32).to_le_bytes())?;
        for v in seq.frames.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Reads a feature dump. The stack factor is not stored; it is reported as 1.
pub fn read_features(path: impl AsRef<Path>) -> Result<StackedMelSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if header[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad feature file magic"));
    }
    let t = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let frame_rate = f32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as f64;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != t * dim * 4 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", t * dim * 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let frames = Array2::from_shape_vec((t, dim), data).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(StackedMelSequence {
        frames,
        frame_rate,
        stack_factor: 1,
    })
}
