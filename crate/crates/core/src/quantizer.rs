//! Frozen random-projection tokenizer.
//!
//! A frame `x` is projected by a fixed Xavier-uniform matrix `A` (`h × d`),
//! L2-normalized, and assigned to the nearest L2-normalized row of a fixed
//! standard-normal codebook `C` (`n × h`). On the unit sphere the nearest
//! row by Euclidean distance is the row with the largest dot product, which
//! is what [`RandomQuantizer::quantize_frame`] computes. Nothing here is
//! ever updated after construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::frontend::StackedMelSequence;
use crate::seed;

/// Guard for normalizing a zero projection.
pub const NORM_EPS: f64 = 1e-12;

const SNAPSHOT_MAGIC: [u8; 4] = *b"RPQZ";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 8192,
            codebook_dim: 16,
            input_dim: 512,
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.codebook_size >= 2, Config, "codebook size must be at least 2");
        ensure!(self.codebook_dim >= 1, Config, "codebook dim must be at least 1");
        ensure!(self.input_dim >= 1, Config, "input dim must be at least 1");
        ensure!(
            self.codebook_size <= u32::MAX as usize,
            Config,
            "codebook size must fit in u32"
        );
        Ok(())
    }
}

/// Discrete targets for one clip, one per stacked frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomQuantizer {
    cfg: QuantizerConfig,
    projection: Array2<f32>,
    codebook: Array2<f32>,
    normalized: Array2<f32>,
}

impl RandomQuantizer {
    pub fn new(cfg: QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, h, d) = (cfg.codebook_size, cfg.codebook_dim, cfg.input_dim);
        let mut rng = seed::rng(&[seed::TAG_QUANTIZER, cfg.seed]);
        let bound = (6.0 / (h + d) as f64).sqrt();
        let projection = Array2::from_shape_fn((h, d), |_| rng.random_range(-bound..=bound) as f32);
        let codebook = Array2::from_shape_fn((n, h), |_| rng.sample::<f64, _>(StandardNormal) as f32);
        Ok(Self::from_parts(cfg, projection, codebook))
    }

    fn from_parts(cfg: QuantizerConfig, projection: Array2<f32>, codebook: Array2<f32>) -> Self {
        let mut normalized = codebook.clone();
        for mut row in normalized.rows_mut() {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let inv = 1.0 / norm.max(NORM_EPS);
            row.mapv_inplace(|v| (v as f64 * inv) as f32);
        }
        Self {
            cfg,
            projection,
            codebook,
            normalized,
        }
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    /// `h × d`
    pub fn projection(&self) -> &Array2<f32> {
        &self.projection
    }

    /// `n × h`
    pub fn codebook(&self) -> &Array2<f32> {
        &self.codebook
    }

    pub fn normalized_codebook(&self) -> &Array2<f32> {
        &self.normalized
    }

    /// Unit-normalized projection `A·x / max(‖A·x‖, eps)`, in f64.
    pub fn project(&self, x: ArrayView1<f32>) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.cfg.input_dim,
            Config,
            "frame has {} dims, quantizer expects {}",
            x.len(),
            self.cfg.input_dim
        );
        ensure!(x.iter().all(|v| v.is_finite()), Input, "frame contains non-finite values");
        let mut p: Vec<f64> = self
            .projection
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect();
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / norm.max(NORM_EPS);
        p.iter_mut().for_each(|v| *v *= inv);
        Ok(p)
    }

    /// Token of one frame; ties go to the lowest index.
    pub fn quantize_frame(&self, x: ArrayView1<f32>) -> Result<u32> {
        let p = self.project(x)?;
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, row) in self.normalized.rows().into_iter().enumerate() {
            let sim: f64 = row.iter().zip(&p).map(|(&c, &q)| c as f64 * q).sum();
            if sim > best_sim {
                best_sim = sim;
                best = i;
            }
        }
        Ok(best as u32)
    }

    pub fn quantize_sequence(&self, s: &StackedMelSequence) -> Result<TokenSequence> {
        ensure!(
            s.dim() == self.cfg.input_dim,
            Config,
            "feature dim {} does not match quantizer input dim {}",
            s.dim(),
            self.cfg.input_dim
        );
        let tokens = s
            .frames
            .rows()
            .into_iter()
            .map(|row| self.quantize_frame(row))
            .collect::<Result<_>>()?;
        Ok(TokenSequence { tokens })
    }

    /// Writes `magic | version | n | h | d (u32) | seed (u64)` then `A` and
    /// `C` as row-major little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        for v in [self.cfg.codebook_size, self.cfg.codebook_dim, self.cfg.input_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.cfg.seed.to_le_bytes())?;
        for v in self.projection.iter().chain(self.codebook.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        const HEADER: usize = 28;
        if bytes.len() < HEADER || bytes[..4] != SNAPSHOT_MAGIC {
            return Err("not a quantizer snapshot".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != SNAPSHOT_VERSION {
            return Err(format!("unsupported snapshot version {version}"));
        }
        let (n, h, d) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let seed = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        let expected = HEADER + 4 * (h * d + n * h);
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes, found {}", bytes.len()));
        }
        let floats: Vec<f32> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let projection = Array2::from_shape_vec((h, d), floats[..h * d].to_vec()).map_err(|e| e.to_string())?;
        let codebook = Array2::from_shape_vec((n, h), floats[h * d..].to_vec()).map_err(|e| e.to_string())?;
        let cfg = QuantizerConfig {
            codebook_size: n,
            codebook_dim: h,
            input_dim: d,
            seed,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(Self::from_parts(cfg, projection, codebook))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Axis};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> RandomQuantizer {
        RandomQuantizer::new(QuantizerConfig {
            codebook_size: 64,
            codebook_dim: 4,
            input_dim: 12,
            seed: 3,
        })
        .unwrap()
    }

    /// Exhaustive wide-precision argmin of Euclidean distance between
    /// unit vectors, normalizing the raw codebook itself.
    fn oracle(q: &RandomQuantizer, x: ArrayView1<f32>) -> u32 {
        let a = q.projection().mapv(|v| v as f64);
        let xs = x.mapv(|v| v as f64);
        let p = a.dot(&xs);
        let pn = &p / p.dot(&p).sqrt().max(NORM_EPS);
        let mut best = (f64::INFINITY, 0u32);
        for (i, c) in q.codebook().rows().into_iter().enumerate() {
            let c = c.mapv(|v| v as f64);
            let cn = &c / c.dot(&c).sqrt();
            let diff = &cn - &pn;
            let dist = diff.dot(&diff).sqrt();
            if dist < best.0 {
                best = (dist, i as u32);
            }
        }
        best.1
    }

    fn gaussian_frame(rng: &mut ChaCha8Rng, d: usize) -> Array1<f32> {
        Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal) as f32)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        let b = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = RandomQuantizer::new(QuantizerConfig {
            seed: 1,
            ..QuantizerConfig::default()
        })
        .unwrap();
        assert_ne!(a.codebook(), c.codebook());
    }

    #[test]
    fn projection_respects_xavier_bound() {
        let q = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        let bound = (6.0f64 / (16.0 + 512.0)).sqrt() as f32;
        assert!(q.projection().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn codebook_moments_are_standard_normal() {
        let q = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        let n = q.codebook().len() as f64;
        let mean = q.codebook().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = q.codebook().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let q = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        for row in q.normalized_codebook().rows() {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_codeword_projection_maps_to_its_index() {
        // Choose x in the row space of A so that A·x == c_7 (least squares,
        // solved through the normal equations A Aᵀ y = c_7, x = Aᵀ y).
        let q = small();
        let a = q.projection().mapv(|v| v as f64);
        let target = q.codebook().row(7).mapv(|v| v as f64);
        let gram = a.dot(&a.t());
        let y = solve(gram, target.to_vec());
        let x = a.t().dot(&Array1::from(y)).mapv(|v| v as f32);
        assert_eq!(q.quantize_frame(x.view()).unwrap(), 7);
    }

    fn solve(mut m: Array2<f64>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs())).unwrap();
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            b.swap(col, piv);
            for r in col + 1..n {
                let f = m[[r, col]] / m[[col, col]];
                for k in col..n {
                    m[[r, k]] -= f * m[[col, k]];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| m[[r, k]] * x[k]).sum();
            x[r] = (b[r] - s) / m[[r, r]];
        }
        x
    }

    #[test]
    fn production_matches_oracle_on_random_frames() {
        let q = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let x = gaussian_frame(&mut rng, 512);
            assert_eq!(q.quantize_frame(x.view()).unwrap(), oracle(&q, x.view()));
        }
    }

    #[test]
    fn zero_frame_is_defined_and_nan_is_rejected() {
        let q = small();
        let zero = Array1::<f32>::zeros(12);
        assert_eq!(q.quantize_frame(zero.view()).unwrap(), 0);
        let mut bad = Array1::<f32>::zeros(12);
        bad[3] = f32::NAN;
        assert!(matches!(q.quantize_frame(bad.view()), Err(Error::Input(_))));
        let short = Array1::<f32>::zeros(5);
        assert!(matches!(q.quantize_frame(short.view()), Err(Error::Config(_))));
    }

    #[test]
    fn sequence_quantization_is_framewise() {
        let q = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = Array2::from_shape_fn((25, 12), |_| rng.sample::<f64, _>(StandardNormal) as f32);
        let seq = StackedMelSequence {
            frames: frames.clone(),
            frame_rate: 25.0,
            stack_factor: 4,
        };
        let toks = q.quantize_sequence(&seq).unwrap();
        assert_eq!(toks.len(), 25);
        for (row, &t) in frames.axis_iter(Axis(0)).zip(&toks.tokens) {
            assert_eq!(q.quantize_frame(row).unwrap(), t);
        }

        let same = StackedMelSequence {
            frames: Array2::from_shape_fn((6, 12), |(_, j)| j as f32 - 3.0),
            frame_rate: 25.0,
            stack_factor: 4,
        };
        let toks = q.quantize_sequence(&same).unwrap();
        assert!(toks.tokens.windows(2).all(|w| w[0] == w[1]));

        let wrong = StackedMelSequence {
            frames: Array2::zeros((3, 11)),
            frame_rate: 25.0,
            stack_factor: 4,
        };
        assert!(matches!(q.quantize_sequence(&wrong), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let q = RandomQuantizer::new(QuantizerConfig {
            seed: 17,
            ..QuantizerConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.bin");
        q.save(&path).unwrap();
        let back = RandomQuantizer::load(&path).unwrap();
        assert_eq!(back.config(), q.config());
        let bits = |a: &Array2<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.projection()), bits(q.projection()));
        assert_eq!(bits(back.codebook()), bits(q.codebook()));
        assert_eq!(bits(back.normalized_codebook()), bits(q.normalized_codebook()));

        let bytes = std::fs::read(&path).unwrap();
        assert!(RandomQuantizer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn random_frames_cover_most_of_the_codebook() {
        // Harness threshold: at least half of the 8192 words are hit by
        // 100k standard-normal frames.
        let q = RandomQuantizer::new(QuantizerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut used = vec![false; 8192];
        for _ in 0..100_000 {
            let x = gaussian_frame(&mut rng, 512);
            used[q.quantize_frame(x.view()).unwrap() as usize] = true;
        }
        let frac = used.iter().filter(|&&u| u).count() as f64 / 8192.0;
        assert!(frac >= 0.5, "codebook usage {frac}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn positive_scaling_does_not_change_the_token(seed in any::<u64>(), alpha in 1e-3f32..1e3) {
            let q = small();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian_frame(&mut rng, 12);
            let scaled = x.mapv(|v| v * alpha);
            prop_assert_eq!(q.quantize_frame(x.view()).unwrap(), q.quantize_frame(scaled.view()).unwrap());
        }

        #[test]
        fn argmax_cosine_equals_argmin_distance(seed in any::<u64>()) {
            let q = small();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian_frame(&mut rng, 12);
            prop_assert_eq!(q.quantize_frame(x.view()).unwrap(), oracle(&q, x.view()));
        }
    }
}
