//! CSV, JSON and markdown serialization of benchmark reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use linmir_core::encoder::{BlockKind, GlobalBranchKind, ParameterCensus};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::scaling::{BenchScope, ScalingPoint, ScalingReport};
use crate::size::{SizeReport, SizeRow};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Markdown => "md",
        }
    }
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(Error::Config(format!("unknown format {s:?} (csv, json, markdown)"))),
        }
    }
}

pub trait Report: Serialize + DeserializeOwned + Sized {
    fn to_csv(&self) -> String;
    fn from_csv(text: &str) -> Result<Self>;
    fn to_markdown(&self) -> String;

    fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
            Format::Markdown => self.to_markdown(),
        }
    }
}

/// Writes `report` to `path` in `format`.
pub fn emit_report<R: Report>(report: &R, format: Format, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.render(format)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is UTF-8")
}

fn read_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalingCsvRow {
    block_kind: BlockKind,
    branch_kind: GlobalBranchKind,
    scope: BenchScope,
    dim: usize,
    heads: usize,
    seed: u64,
    seq_len: usize,
    median_ms: f64,
    min_ms: f64,
    max_ms: f64,
    reps: usize,
    batch: usize,
    flops: u64,
    peak_bytes: Option<u64>,
    slope: f64,
    flop_slope: f64,
}

impl Report for ScalingReport {
    /// One row per length; report-level fields repeat on every row.
    fn to_csv(&self) -> String {
        write_csv(self.points.iter().map(|p| ScalingCsvRow {
            block_kind: self.block_kind,
            branch_kind: self.branch_kind,
            scope: self.scope,
            dim: self.dim,
            heads: self.heads,
            seed: self.seed,
            seq_len: p.seq_len,
            median_ms: p.median_ms,
            min_ms: p.min_ms,
            max_ms: p.max_ms,
            reps: p.reps,
            batch: p.batch,
            flops: p.flops,
            peak_bytes: p.peak_bytes,
            slope: self.slope,
            flop_slope: self.flop_slope,
        }))
    }

    fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<ScalingCsvRow> = read_csv(text)?;
        let first = rows.first().ok_or_else(|| Error::Parse("empty scaling csv".into()))?;
        let same = |r: &ScalingCsvRow| {
            (r.block_kind, r.branch_kind, r.scope, r.dim, r.heads, r.seed)
                == (first.block_kind, first.branch_kind, first.scope, first.dim, first.heads, first.seed)
                && r.slope.to_bits() == first.slope.to_bits()
                && r.flop_slope.to_bits() == first.flop_slope.to_bits()
        };
        if !rows.iter().all(same) {
            return Err(Error::Parse("rows disagree on report-level fields".into()));
        }
        Ok(Self {
            block_kind: first.block_kind,
            branch_kind: first.branch_kind,
            scope: first.scope,
            dim: first.dim,
            heads: first.heads,
            seed: first.seed,
            slope: first.slope,
            flop_slope: first.flop_slope,
            points: rows
                .iter()
                .map(|r| ScalingPoint {
                    seq_len: r.seq_len,
                    median_ms: r.median_ms,
                    min_ms: r.min_ms,
                    max_ms: r.max_ms,
                    reps: r.reps,
                    batch: r.batch,
                    flops: r.flops,
                    peak_bytes: r.peak_bytes,
                })
                .collect(),
        })
    }

    fn to_markdown(&self) -> String {
        let mut s = format!(
            "### {} {} ({}), dim {}, {} heads\n\n",
            self.block_kind, self.branch_kind, self.scope, self.dim, self.heads
        );
        s.push_str("| T | median ms | min ms | max ms | GFLOP | peak MiB |\n");
        s.push_str("|---:|---:|---:|---:|---:|---:|\n");
        for p in &self.points {
            let mem = p
                .peak_bytes
                .map_or_else(|| "n/a".to_string(), |b| format!("{:.1}", b as f64 / (1 << 20) as f64));
            let _ = writeln!(
                s,
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                p.seq_len,
                p.median_ms,
                p.min_ms,
                p.max_ms,
                p.flops as f64 / 1e9,
                mem
            );
        }
        let _ = writeln!(
            s,
            "\nlog-log slope (largest half): wallclock {:.3}, FLOPs {:.3}",
            self.slope, self.flop_slope
        );
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SizeCsvRow {
    block_kind: BlockKind,
    dim: usize,
    layers: usize,
    attention_total: usize,
    summary_mixing_total: usize,
    reduction_pct: f64,
    reference_pct: f64,
}

fn totals_only(total: usize) -> ParameterCensus {
    ParameterCensus {
        total,
        per_component: BTreeMap::new(),
    }
}

impl Report for SizeReport {
    fn to_csv(&self) -> String {
        write_csv(self.rows.iter().map(|r| SizeCsvRow {
            block_kind: r.block_kind,
            dim: r.dim,
            layers: r.layers,
            attention_total: r.attention.total,
            summary_mixing_total: r.summary_mixing.total,
            reduction_pct: r.reduction_pct,
            reference_pct: r.reference_pct,
        }))
    }

    /// CSV carries totals only, so parsed censuses have no per-component
    /// breakdown.
    fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<SizeCsvRow> = read_csv(text)?;
        Ok(Self {
            rows: rows
                .into_iter()
                .map(|r| SizeRow {
                    block_kind: r.block_kind,
                    dim: r.dim,
                    layers: r.layers,
                    attention: totals_only(r.attention_total),
                    summary_mixing: totals_only(r.summary_mixing_total),
                    reduction_pct: r.reduction_pct,
                    reference_pct: r.reference_pct,
                })
                .collect(),
        })
    }

    fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| block | dim | layers | attention params | summary_mixing params | reduction % | reference % |\n\
             |---|---:|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.2} | {:.1} |",
                r.block_kind, r.dim, r.layers, r.attention.total, r.summary_mixing.total, r.reduction_pct, r.reference_pct
            );
        }
        s
    }
}
