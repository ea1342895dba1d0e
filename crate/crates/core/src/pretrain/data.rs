use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::frontend::{read_wav, synthesize_test_waveform, Signal, SynthParams, Waveform, DEFAULT_SAMPLE_RATE};
use crate::seed;

#[derive(Debug, Clone)]
pub struct Clip {
    pub id: u64,
    pub name: String,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sine,
    Chirp,
    Noise,
    ToneMixture,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sine => "sine",
            Self::Chirp => "chirp",
            Self::Noise => "noise",
            Self::ToneMixture => "tone_mixture",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "chirp" => Ok(Self::Chirp),
            "noise" => Ok(Self::Noise),
            "tone_mixture" => Ok(Self::ToneMixture),
            _ => Err(Error::Config(format!("unknown synthetic kind {s:?}"))),
        }
    }
}

/// Generated stand-in for an audio corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Clip `i` uses `kinds[i % kinds.len()]`.
    pub kinds: Vec<SynthKind>,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 64,
            kinds: vec![SynthKind::Sine, SynthKind::ToneMixture, SynthKind::Chirp, SynthKind::Sine],
            duration_s: 2.0,
            seed: 0,
        }
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

impl SyntheticSpec {
    pub fn signal(&self, i: usize) -> (Signal, f64) {
        let mut rng = seed::rng(&[seed::TAG_SYNTH, self.seed, i as u64, 1]);
        let amplitude = rng.random_range(0.3..0.8);
        let signal = match self.kinds[i % self.kinds.len()] {
            SynthKind::Sine => Signal::Sine {
                freq: log_uniform(&mut rng, 110.0, 3520.0),
            },
            SynthKind::Chirp => Signal::Chirp {
                start: log_uniform(&mut rng, 110.0, 3520.0),
                end: log_uniform(&mut rng, 110.0, 3520.0),
            },
            SynthKind::Noise => Signal::Noise,
            SynthKind::ToneMixture => {
                let n = rng.random_range(2..=3);
                Signal::ToneMixture {
                    freqs: (0..n).map(|_| log_uniform(&mut rng, 110.0, 3520.0)).collect(),
                }
            }
        };
        (signal, amplitude)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        ensure!(spec.count > 0, Config, "synthetic dataset needs at least one clip");
        ensure!(!spec.kinds.is_empty(), Config, "synthetic dataset needs at least one kind");
        let clips = (0..spec.count)
            .map(|i| {
                let (signal, amplitude) = spec.signal(i);
                let params = SynthParams {
                    sample_rate: DEFAULT_SAMPLE_RATE,
                    duration_s: spec.duration_s,
                    amplitude,
                };
                Ok(Clip {
                    id: i as u64,
                    name: format!("synth-{i:05}"),
                    waveform: synthesize_test_waveform(&signal, seed::derive(&[spec.seed, i as u64]), &params)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { clips })
    }

    /// Loads WAV files listed one per line in `path` (relative entries
    /// resolve against the manifest's directory; blank lines and `#`
    /// comments are ignored), or every `.wav` file in `path` if it is a
    /// directory. Unreadable clips are skipped and reported in the second
    /// return value.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let path = path.as_ref();
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            v.sort();
            v
        } else {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = path.parent().unwrap_or(Path::new("."));
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| base.join(l))
                .collect()
        };
        let mut clips = Vec::new();
        let mut warnings = Vec::new();
        for (i, f) in files.iter().enumerate() {
            match read_wav(f, DEFAULT_SAMPLE_RATE) {
                Ok(waveform) => clips.push(Clip {
                    id: i as u64,
                    name: f.display().to_string(),
                    waveform,
                }),
                Err(e) => warnings.push(format!("skipping {}: {e}", f.display())),
            }
        }
        ensure!(!clips.is_empty(), Input, "no readable clips in {}", path.display());
        Ok((Self { clips }, warnings))
    }
}
