use linmir_bench::{
    bench_scaling, bench_size, emit_report, fit_loglog_slope, size_pairs, BenchScope, Error, Format, Report,
    ScalingConfig, ScalingPoint, ScalingReport, SizeReport,
};
use linmir_core::encoder::{global_branch_flops, BlockKind, EncoderConfig, GlobalBranchKind};
use proptest::prelude::*;

fn schema(name: &str) -> serde_json::Value {
    let path = format!("{}/schemas/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn quick_config(kind: GlobalBranchKind) -> ScalingConfig {
    ScalingConfig {
        branch_kind: kind,
        dim: 32,
        heads: 2,
        lengths: vec![16, 32, 64],
        ..ScalingConfig::default()
    }
}

fn sample_report() -> ScalingReport {
    ScalingReport {
        block_kind: BlockKind::Conformer,
        branch_kind: GlobalBranchKind::Attention,
        scope: BenchScope::Block,
        dim: 64,
        heads: 4,
        seed: 3,
        points: (0..4)
            .map(|i| ScalingPoint {
                seq_len: 100 << i,
                median_ms: 0.1 * 3f64.powi(i) + 1.0 / 7.0,
                min_ms: 0.05 * (i + 1) as f64,
                max_ms: 2.0 / 3.0 + i as f64,
                reps: 20,
                batch: 4 - i as usize,
                flops: 123_456_789 << i,
                peak_bytes: if i == 2 { None } else { Some(1 << (20 + i)) },
            })
            .collect(),
        slope: 1.5849625007211563,
        flop_slope: 1.0,
    }
}

#[test]
fn scaling_report_csv_round_trip_is_identical() {
    let r = sample_report();
    let csv = r.to_csv();
    let back = ScalingReport::from_csv(&csv).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_csv(), csv);
}

#[test]
fn scaling_report_json_round_trip_and_schema() {
    let r = sample_report();
    let json = r.to_json();
    assert_eq!(ScalingReport::from_json(&json).unwrap(), r);
    let validator = jsonschema::validator_for(&schema("scaling_report.schema.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(validator.is_valid(&value));
    let mut broken = value.clone();
    broken["points"][0]["reps"] = serde_json::json!(5);
    assert!(!validator.is_valid(&broken));
}

#[test]
fn markdown_has_one_row_per_length() {
    let r = sample_report();
    let md = r.to_markdown();
    let body = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| T ")).count();
    assert_eq!(body, r.points.len());
    assert!(md.contains("n/a"));
}

#[test]
fn csv_rows_must_agree_on_report_fields() {
    let csv = sample_report().to_csv();
    let tampered = csv.replacen("conformer", "branchformer", 2);
    assert!(matches!(ScalingReport::from_csv(&tampered), Err(Error::Parse(_))));
    assert!(matches!(ScalingReport::from_csv(""), Err(Error::Parse(_))));
}

#[test]
fn slope_fit_recovers_power_laws() {
    let x = [512.0, 1024.0, 2048.0, 4096.0, 8192.0];
    let lin: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
    let quad: Vec<f64> = x.iter().map(|v| 1e-3 * v * v).collect();
    assert!((fit_loglog_slope(&x, &lin) - 1.0).abs() < 1e-12);
    assert!((fit_loglog_slope(&x, &quad) - 2.0).abs() < 1e-12);
    // only the largest half is fitted: an overhead floor at small x is ignored
    let floored: Vec<f64> = x.iter().map(|&v| if v < 2048.0 { 1e6 } else { v * v }).collect();
    assert!((fit_loglog_slope(&x, &floored) - 2.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn slope_fit_is_exact_on_noise_free_power_laws(p in 0.1f64..3.0, c in 1e-3f64..1e3) {
        let x: Vec<f64> = (0..6).map(|i| 256.0 * 2f64.powi(i)).collect();
        let y: Vec<f64> = x.iter().map(|v| c * v.powf(p)).collect();
        prop_assert!((fit_loglog_slope(&x, &y) - p).abs() < 1e-9);
    }
}

#[test]
fn analytic_flop_ratios_on_doubling() {
    let s = |t| global_branch_flops(GlobalBranchKind::SummaryMixing, t, 256) as f64;
    let a = |t| global_branch_flops(GlobalBranchKind::Attention, t, 256) as f64;
    assert_eq!(s(2048) / s(1024), 2.0);
    let r = a(2048) / a(1024);
    assert!(r > 2.0 && r <= 4.0);
    assert!(a(1 << 20) / a(1 << 19) > 3.9);
}

#[test]
fn quick_scaling_run_fills_the_report() {
    for kind in [GlobalBranchKind::SummaryMixing, GlobalBranchKind::Attention] {
        let r = bench_scaling(&quick_config(kind)).unwrap();
        assert_eq!(r.points.len(), 3);
        for p in &r.points {
            assert_eq!(p.reps, 20);
            assert!(p.batch >= 1);
            assert!(p.min_ms <= p.median_ms && p.median_ms <= p.max_ms);
            assert_eq!(p.flops, global_branch_flops(kind, p.seq_len, 32));
            assert!(p.peak_bytes.is_none(), "tracker not installed in this test binary");
        }
        if kind == GlobalBranchKind::SummaryMixing {
            assert!((r.flop_slope - 1.0).abs() < 1e-12);
        } else {
            assert!(r.flop_slope > 1.0 && r.flop_slope < 2.0);
        }
    }
}

#[test]
fn block_scope_runs() {
    let cfg = ScalingConfig {
        scope: BenchScope::Block,
        block_kind: BlockKind::Conformer,
        ..quick_config(GlobalBranchKind::Attention)
    };
    let r = bench_scaling(&cfg).unwrap();
    assert_eq!(r.scope, BenchScope::Block);
    assert!(r.points.windows(2).all(|w| w[0].flops < w[1].flops));
}

#[test]
fn scaling_config_is_validated() {
    let base = quick_config(GlobalBranchKind::Attention);
    for bad in [
        ScalingConfig { reps: 19, ..base.clone() },
        ScalingConfig { lengths: vec![64, 32], ..base.clone() },
        ScalingConfig { lengths: vec![64], ..base.clone() },
        ScalingConfig { heads: 3, ..base.clone() },
    ] {
        assert!(bench_scaling(&bad).is_err());
    }
}

fn large() -> EncoderConfig {
    EncoderConfig::large()
}

#[test]
fn size_report_for_large_encoders() {
    let r = bench_size(&size_pairs(&large())).unwrap();
    assert_eq!(r.rows.len(), 2);
    let (bf, cf) = (&r.rows[0], &r.rows[1]);
    assert_eq!((bf.block_kind, cf.block_kind), (BlockKind::Branchformer, BlockKind::Conformer));
    assert_eq!((bf.reference_pct, cf.reference_pct), (12.3, 8.5));
    for row in &r.rows {
        assert!(row.summary_mixing.total < row.attention.total);
        let expected =
            100.0 * (row.attention.total as f64 - row.summary_mixing.total as f64) / row.attention.total as f64;
        assert_eq!(row.reduction_pct, expected);
        assert!((4.0..=20.0).contains(&row.reduction_pct), "{row:?}");
    }
    assert!(bf.reduction_pct > cf.reduction_pct);
}

#[test]
fn size_report_ignores_the_seed() {
    let a = bench_size(&size_pairs(&large())).unwrap();
    let b = bench_size(&size_pairs(&EncoderConfig { seed: 99, ..large() })).unwrap();
    assert_eq!(a.rows.iter().map(|r| r.reduction_pct).collect::<Vec<_>>(), b.rows.iter().map(|r| r.reduction_pct).collect::<Vec<_>>());
}

#[test]
fn mismatched_pairs_are_rejected() {
    let att = large().with_kinds(BlockKind::Branchformer, GlobalBranchKind::Attention);
    let sum = EncoderConfig {
        num_layers: 6,
        ..large().with_kinds(BlockKind::Branchformer, GlobalBranchKind::SummaryMixing)
    };
    assert!(matches!(bench_size(&[(att.clone(), sum)]), Err(Error::Config(_))));
    assert!(matches!(bench_size(&[(att.clone(), att)]), Err(Error::Config(_))));
}

#[test]
fn size_report_formats() {
    let r = bench_size(&size_pairs(&EncoderConfig::small())).unwrap();
    let csv = r.to_csv();
    assert_eq!(SizeReport::from_csv(&csv).unwrap().to_csv(), csv);
    let validator = jsonschema::validator_for(&schema("size_report.schema.json")).unwrap();
    assert!(validator.is_valid(&serde_json::from_str(&r.to_json()).unwrap()));
    assert_eq!(SizeReport::from_json(&r.to_json()).unwrap(), r);
    let md = r.to_markdown();
    assert_eq!(md.lines().count(), 2 + r.rows.len());

    let dir = tempfile::tempdir().unwrap();
    for f in [Format::Csv, Format::Json, Format::Markdown] {
        let p = dir.path().join(format!("size.{}", f.extension()));
        emit_report(&r, f, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), r.render(f));
    }
    let bad = dir.path().join("missing/size.csv");
    assert!(matches!(emit_report(&r, Format::Csv, bad), Err(Error::Io { .. })));
    assert_eq!("md".parse::<Format>().unwrap(), Format::Markdown);
    assert!("xml".parse::<Format>().is_err());
}
