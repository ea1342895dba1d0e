//! Parameter-count comparison of attention and SummaryMixing encoders.

use linmir_core::encoder::{count_parameters, BlockKind, EncoderConfig, GlobalBranchKind, ParameterCensus};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Published relative size reduction (percent) for large encoders of the
/// given block kind.
pub fn published_reduction_pct(kind: BlockKind) -> f64 {
    match kind {
        BlockKind::Branchformer => 12.3,
        BlockKind::Conformer => 8.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub block_kind: BlockKind,
    pub dim: usize,
    pub layers: usize,
    pub attention: ParameterCensus,
    pub summary_mixing: ParameterCensus,
    /// `(attention − summary_mixing) / attention`, in percent.
    pub reduction_pct: f64,
    pub reference_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
}

/// Attention/SummaryMixing pairs for both block kinds at `base`'s size.
pub fn size_pairs(base: &EncoderConfig) -> Vec<(EncoderConfig, EncoderConfig)> {
    [BlockKind::Branchformer, BlockKind::Conformer]
        .into_iter()
        .map(|b| {
            (
                base.clone().with_kinds(b, GlobalBranchKind::Attention),
                base.clone().with_kinds(b, GlobalBranchKind::SummaryMixing),
            )
        })
        .collect()
}

/// Censuses each `(attention, summary_mixing)` pair. The two configs of a
/// pair must differ only in their global branch.
pub fn bench_size(pairs: &[(EncoderConfig, EncoderConfig)]) -> Result<SizeReport> {
    let rows = pairs
        .iter()
        .map(|(att, sum)| {
            if att.global_branch != GlobalBranchKind::Attention || sum.global_branch != GlobalBranchKind::SummaryMixing {
                return Err(Error::Config("each pair must be (attention, summary_mixing)".into()));
            }
            if att.clone().with_kinds(sum.block_kind, sum.global_branch) != *sum {
                return Err(Error::Config("paired configs differ in more than the global branch".into()));
            }
            att.validate()?;
            sum.validate()?;
            let (a, s) = (count_parameters(att), count_parameters(sum));
            Ok(SizeRow {
                block_kind: att.block_kind,
                dim: att.model_dim,
                layers: att.num_layers,
                reduction_pct: 100.0 * (a.total as f64 - s.total as f64) / a.total as f64,
                reference_pct: published_reduction_pct(att.block_kind),
                attention: a,
                summary_mixing: s,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SizeReport { rows })
}
