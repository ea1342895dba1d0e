//! Config-file sections, flag overrides and the resolved-config snapshot.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. The output directory additionally honours
//! `LINMIR_OUT_DIR`, which sits between the file and the flag.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use linmir_core::encoder::{BlockKind, GlobalBranchKind};
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "LINMIR_OUT_DIR";
pub const SNAPSHOT_FILE: &str = "resolved_config.json";
pub const DEFAULT_OUT_DIR: &str = "linmir-out";

/// Everything a config file may set. A resolved snapshot has the same
/// shape (with only the active section present) and can be fed back in.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Informational in snapshots; ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenize: Option<TokenizeSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub census: Option<CensusSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export_embeddings: Option<ExportSettings>,
}

impl FileConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }
}

/// Seed and output directory after applying every override.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub fn resolve_globals(file: &FileConfig, seed: Option<u64>, out_dir: Option<PathBuf>) -> Globals {
    let env_dir = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    Globals {
        seed: seed.or(file.seed).unwrap_or(0),
        out_dir: out_dir
            .or(env_dir)
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

/// Writes the snapshot for `command` into the output directory.
pub fn write_snapshot(globals: &Globals, command: &str, section: impl FnOnce(&mut FileConfig)) -> Result<PathBuf> {
    let mut snap = FileConfig {
        command: Some(command.to_string()),
        seed: Some(globals.seed),
        out_dir: Some(globals.out_dir.clone()),
        ..FileConfig::default()
    };
    section(&mut snap);
    fs::create_dir_all(&globals.out_dir).with_context(|| format!("creating {}", globals.out_dir.display()))?;
    let path = globals.out_dir.join(SNAPSHOT_FILE);
    let mut text = serde_json::to_string_pretty(&snap)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Overwrites `$slot` when the flag was given.
macro_rules! set {
    ($slot:expr, $flag:expr) => {
        if let Some(v) = $flag {
            $slot = v.into();
        }
    };
}
pub(crate) use set;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeSettings {
    /// WAV file, manifest, or directory of WAV files.
    pub input: Option<PathBuf>,
    /// Number of synthetic clips when no input is given.
    pub synthetic: Option<usize>,
    /// Take the feature normalizer and quantizer from this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub codebook_size: usize,
    pub duration_s: f64,
}

impl Default for TokenizeSettings {
    fn default() -> Self {
        Self {
            input: None,
            synthetic: None,
            checkpoint: None,
            codebook_size: 8192,
            duration_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub synthetic: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub duration_s: f64,
    pub preset: String,
    pub block: Option<BlockKind>,
    pub branch: Option<GlobalBranchKind>,
    pub steps: u64,
    pub batch_size: Option<usize>,
    pub peak_lr: Option<f64>,
    pub final_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub mask_prob: f64,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            synthetic: None,
            manifest: None,
            duration_s: 2.0,
            preset: "desk".into(),
            block: None,
            branch: None,
            steps: 500,
            batch_size: None,
            peak_lr: None,
            final_lr: None,
            warmup_steps: None,
            mask_prob: 0.2,
            checkpoint_every: 100,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub checkpoint: Option<PathBuf>,
    pub task: String,
    pub size: usize,
    pub pooling: String,
    pub hidden_units: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    /// Also train on shuffled labels as a chance-level control.
    pub control: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            task: "pitch_class".into(),
            size: 400,
            pooling: "mean".into(),
            hidden_units: 512,
            dropout: 0.25,
            batch_size: 32,
            epochs: 200,
            lr: 1e-3,
            patience: 10,
            control: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CensusSettings {
    pub preset: String,
    pub block: Option<BlockKind>,
    pub branch: Option<GlobalBranchKind>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub format: String,
}

impl Default for CensusSettings {
    fn default() -> Self {
        Self {
            preset: "small".into(),
            block: None,
            branch: None,
            dim: None,
            layers: None,
            heads: None,
            format: "table".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// `scaling` or `size`.
    pub mode: String,
    pub block: BlockKind,
    /// `attention`, `summary_mixing` or `both`.
    pub branch: String,
    pub scope: String,
    /// Defaults: 256 wide with 4 heads for scaling, the large preset for size.
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    /// Encoder depth for size reports.
    pub layers: Option<usize>,
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub format: String,
    /// Report file; defaults to `bench_<mode>.<ext>` in the output directory.
    pub out: Option<PathBuf>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            mode: "scaling".into(),
            block: BlockKind::Branchformer,
            branch: "both".into(),
            scope: "global_branch".into(),
            dim: None,
            heads: None,
            layers: None,
            lengths: vec![512, 1024, 2048, 4096, 8192],
            reps: 20,
            format: "markdown".into(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSettings {
    pub checkpoint: Option<PathBuf>,
    /// Synthetic task to embed when no input is given.
    pub task: String,
    pub input: Option<PathBuf>,
    pub size: usize,
    pub pooling: String,
    /// Output file; defaults to `embeddings.bin` in the output directory.
    pub out: Option<PathBuf>,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            task: "pitch_class".into(),
            input: None,
            size: 400,
            pooling: "mean".into(),
            out: None,
        }
    }
}

pub fn require<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    match v {
        Some(p) => Ok(p),
        None => bail!("missing {what} (flag or config file)"),
    }
}
