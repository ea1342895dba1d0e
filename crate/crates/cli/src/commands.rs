use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use linmir_bench::{bench_scaling_with, bench_size, emit_report, size_pairs, Format, Report, ScalingConfig};
use linmir_core::checkpoint::Checkpoint;
use linmir_core::encoder::{count_parameters, EncoderConfig, GlobalBranchKind};
use linmir_core::frontend::{read_wav, DEFAULT_SAMPLE_RATE};
use linmir_core::pretrain::{
    run_pretraining, Clip, Dataset, RunOptions, ScheduleConfig, SyntheticSpec, Teacher, TrainConfig,
};
use linmir_core::probe::{
    extract_embeddings, make_synthetic_task, shuffled_labels, train_probe, write_embeddings, Labels, Pooling,
    ProbeConfig, SyntheticTask, TASK_CLIP_SECONDS,
};
use linmir_core::quantizer::QuantizerConfig;
use log::{info, warn};

use crate::config::{
    require, resolve_globals, set, write_snapshot, BenchSettings, CensusSettings, ExportSettings, FileConfig, Globals,
    PretrainSettings, ProbeSettings, TokenizeSettings,
};
use crate::{BenchArgs, CensusArgs, Cli, Command, ExportArgs, PretrainArgs, ProbeArgs, TokenizeArgs};

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let g = resolve_globals(&file, cli.seed, cli.out_dir.clone());
    match cli.command {
        Command::Tokenize(a) => tokenize(&g, file.tokenize.unwrap_or_default(), a),
        Command::Pretrain(a) => pretrain(&g, file.pretrain.unwrap_or_default(), a),
        Command::Probe(a) => probe(&g, file.probe.unwrap_or_default(), a),
        Command::Census(a) => census(&g, file.census.unwrap_or_default(), a),
        Command::Bench(a) => bench(&g, file.bench.unwrap_or_default(), a),
        Command::ExportEmbeddings(a) => export(&g, file.export_embeddings.unwrap_or_default(), a),
    }
}

/// Short category for the one-line error message.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<linmir_core::Error>() {
            return match core {
                linmir_core::Error::Input(_) => "input",
                linmir_core::Error::Config(_) => "config",
                linmir_core::Error::Training { .. } => "training",
                linmir_core::Error::Task(_) => "task",
                linmir_core::Error::Format { .. } => "format",
                linmir_core::Error::Io { .. } => "io",
            };
        }
        if let Some(b) = cause.downcast_ref::<linmir_bench::Error>() {
            return match b {
                linmir_bench::Error::Core(_) => "core",
                linmir_bench::Error::Config(_) => "config",
                linmir_bench::Error::Io { .. } => "io",
                linmir_bench::Error::Parse(_) => "format",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "runtime"
}

fn stdout_line(s: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Single WAV file, or a manifest/directory of them.
fn load_clips(input: &Path) -> Result<Dataset> {
    if input.is_file() && input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        let waveform = read_wav(input, DEFAULT_SAMPLE_RATE)?;
        return Ok(Dataset {
            clips: vec![Clip {
                id: 0,
                name: input.display().to_string(),
                waveform,
            }],
        });
    }
    let (ds, warnings) = Dataset::from_manifest(input)?;
    for w in warnings {
        warn!("{w}");
    }
    Ok(ds)
}

fn synthetic(count: usize, duration_s: f64, seed: u64) -> Result<Dataset> {
    Ok(Dataset::synthetic(&SyntheticSpec {
        count,
        duration_s,
        seed,
        ..SyntheticSpec::default()
    })?)
}

fn tokenize(g: &Globals, mut s: TokenizeSettings, a: TokenizeArgs) -> Result<()> {
    set!(s.input, a.input);
    set!(s.synthetic, a.synthetic);
    set!(s.checkpoint, a.checkpoint);
    set!(s.codebook_size, a.codebook_size);
    if s.input.is_some() {
        s.synthetic = None;
    } else if s.synthetic.is_none() {
        s.synthetic = Some(8);
    }
    write_snapshot(g, "tokenize", |f| f.tokenize = Some(s.clone()))?;

    let ds = match (&s.input, s.synthetic) {
        (Some(p), _) => load_clips(p)?,
        (None, Some(n)) => synthetic(n, s.duration_s, g.seed)?,
        (None, None) => unreachable!("defaulted above"),
    };
    let teacher = match &s.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let n = ck.normalizer().context("checkpoint has no feature normalizer")?;
            Teacher::new(n, ck.meta.quantizer)?
        }
        None => Teacher::fit(
            &ds,
            QuantizerConfig {
                codebook_size: s.codebook_size,
                seed: g.seed,
                ..QuantizerConfig::default()
            },
        )?,
    };
    let path = g.out_dir.join("tokens.jsonl");
    let mut text = String::new();
    for clip in &ds.clips {
        let (tokens, _) = teacher.targets(&clip.waveform)?;
        let line = serde_json::json!({ "clip": clip.name, "tokens": tokens.tokens });
        writeln!(text, "{line}")?;
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    stdout_line(&format!("tokenized {} clips -> {}\n", ds.len(), path.display()))
}

fn train_config(s: &PretrainSettings, seed: u64) -> Result<TrainConfig> {
    let mut enc = EncoderConfig::preset(&s.preset)?;
    enc.seed = seed;
    if let Some(b) = s.block {
        enc.block_kind = b;
    }
    if let Some(b) = s.branch {
        enc.global_branch = b;
    }
    let mut cfg = if s.preset == "desk" {
        TrainConfig::desk(s.steps)
    } else {
        TrainConfig {
            schedule: ScheduleConfig::for_steps(s.steps),
            ..TrainConfig::desk(s.steps)
        }
    };
    cfg.encoder = enc;
    cfg.seed = seed;
    cfg.quantizer.seed = seed;
    cfg.mask.mask_prob = s.mask_prob;
    cfg.checkpoint_every = s.checkpoint_every;
    if let Some(b) = s.batch_size {
        cfg.batch_size = b;
    }
    if let Some(v) = s.peak_lr {
        cfg.schedule.peak_lr = v;
    }
    if let Some(v) = s.final_lr {
        cfg.schedule.final_lr = v;
    }
    if let Some(v) = s.warmup_steps {
        cfg.schedule.warmup_steps = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(g: &Globals, mut s: PretrainSettings, a: PretrainArgs) -> Result<()> {
    set!(s.synthetic, a.synthetic);
    set!(s.manifest, a.manifest);
    set!(s.steps, a.steps);
    set!(s.preset, a.preset);
    set!(s.block, a.block);
    set!(s.branch, a.branch);
    set!(s.batch_size, a.batch_size);
    set!(s.peak_lr, a.peak_lr);
    set!(s.final_lr, a.final_lr);
    set!(s.mask_prob, a.mask_prob);
    set!(s.checkpoint_every, a.checkpoint_every);
    set!(s.resume, a.resume);
    if s.manifest.is_some() {
        s.synthetic = None;
    } else if s.synthetic.is_none() {
        s.synthetic = Some(SyntheticSpec::default().count);
    }
    let cfg = train_config(&s, g.seed)?;
    // record effective values, not just the overrides
    s.block = Some(cfg.encoder.block_kind);
    s.branch = Some(cfg.encoder.global_branch);
    s.batch_size = Some(cfg.batch_size);
    s.peak_lr = Some(cfg.schedule.peak_lr);
    s.final_lr = Some(cfg.schedule.final_lr);
    s.warmup_steps = Some(cfg.schedule.warmup_steps);
    write_snapshot(g, "pretrain", |f| f.pretrain = Some(s.clone()))?;

    let ds = match (&s.manifest, s.synthetic) {
        (Some(p), _) => load_clips(p)?,
        (None, Some(n)) => synthetic(n, s.duration_s, g.seed)?,
        (None, None) => unreachable!("defaulted above"),
    };
    info!(
        "pretraining {} {} ({} params) on {} clips for {} steps",
        cfg.encoder.block_kind,
        cfg.encoder.global_branch,
        count_parameters(&cfg.encoder).total,
        ds.len(),
        cfg.schedule.total_steps
    );

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        warn!("no interrupt handler: {e}");
    }
    let opts = RunOptions {
        out_dir: g.out_dir.clone(),
        resume_from: s.resume.clone(),
        stop: Some(stop),
    };
    let mut window = std::collections::VecDeque::new();
    let summary = run_pretraining(&ds, &cfg, &opts, |row| {
        window.push_back(row.total);
        if window.len() > cfg.smoothing_window {
            window.pop_front();
        }
        if row.step % 25 == 0 || row.step == cfg.schedule.total_steps {
            let smoothed = window.iter().sum::<f64>() / window.len() as f64;
            info!(
                "step {:>6}  lr {:.2e}  ce {:.4}  mse {:.4}  loss {:.4} (smoothed {:.4})  masked acc {:.4}",
                row.step, row.lr, row.ce, row.mse, row.total, smoothed, row.masked_acc
            );
        }
    })?;
    for w in &summary.warnings {
        warn!("{w}");
    }
    if summary.interrupted {
        stdout_line(&format!(
            "interrupted at step {}; checkpoint {}\n",
            summary.rows.last().map_or(0, |r| r.step),
            summary.final_checkpoint.display()
        ))?;
        bail!("interrupted");
    }
    let last = summary.rows.last();
    stdout_line(&format!(
        "trained {} steps; final loss {:.4}, masked acc {:.4}; checkpoint {}; metrics {}\n",
        summary.rows.len(),
        last.map_or(f64::NAN, |r| r.total),
        last.map_or(f64::NAN, |r| r.masked_acc),
        summary.final_checkpoint.display(),
        summary.metrics_path.display()
    ))
}

fn probe(g: &Globals, mut s: ProbeSettings, a: ProbeArgs) -> Result<()> {
    set!(s.checkpoint, a.checkpoint);
    set!(s.task, a.task);
    set!(s.size, a.size);
    set!(s.pooling, a.pooling);
    set!(s.epochs, a.epochs);
    set!(s.batch_size, a.batch_size);
    s.control |= a.control;
    let task: SyntheticTask = s.task.parse()?;
    let pooling: Pooling = s.pooling.parse()?;
    let cfg = ProbeConfig {
        hidden_units: s.hidden_units,
        dropout: s.dropout,
        pooling,
        batch_size: s.batch_size,
        epochs: s.epochs,
        lr: s.lr,
        patience: s.patience,
        ..ProbeConfig::new(task.kind())
    };
    cfg.validate()?;
    let ck_path = require(&s.checkpoint, "--checkpoint")?.clone();
    write_snapshot(g, "probe", |f| f.probe = Some(s.clone()))?;

    let ck = Checkpoint::load(&ck_path)?;
    let encoder = ck.encoder()?;
    let data = make_synthetic_task(task, s.size, TASK_CLIP_SECONDS, g.seed)?;
    let waves: Vec<_> = data.clips.iter().map(|c| c.waveform.clone()).collect();
    info!("embedding {} clips for {task}", waves.len());
    let emb = extract_embeddings(&encoder, &waves, pooling)?;
    let (_, report) = train_probe(&emb.values, &data.labels, &cfg, &task.to_string(), g.seed)?;
    let mut reports = vec![report];
    if s.control {
        let Labels::Classes(c) = &data.labels else {
            bail!("the shuffled-label control needs a classification task");
        };
        let shuffled = Labels::Classes(shuffled_labels(c, g.seed));
        let (_, r) = train_probe(&emb.values, &shuffled, &cfg, &format!("{task}_shuffled_labels"), g.seed)?;
        reports.push(r);
    }
    let path = g.out_dir.join("probe_report.json");
    fs::write(&path, serde_json::to_string_pretty(&reports)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    let mut out = String::new();
    for r in &reports {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    stdout_line(&out)
}

fn census_config(s: &CensusSettings, seed: u64) -> Result<EncoderConfig> {
    let mut cfg = EncoderConfig::preset(&s.preset)?;
    cfg.seed = seed;
    if let Some(v) = s.block {
        cfg.block_kind = v;
    }
    if let Some(v) = s.branch {
        cfg.global_branch = v;
    }
    if let Some(v) = s.dim {
        cfg.model_dim = v;
    }
    if let Some(v) = s.layers {
        cfg.num_layers = v;
    }
    // keep 64-wide heads unless told otherwise
    cfg.num_heads = s.heads.unwrap_or(if s.dim.is_some() { (cfg.model_dim / 64).max(1) } else { cfg.num_heads });
    cfg.validate()?;
    Ok(cfg)
}

fn census(g: &Globals, mut s: CensusSettings, a: CensusArgs) -> Result<()> {
    set!(s.preset, a.preset);
    set!(s.block, a.block);
    set!(s.branch, a.branch);
    set!(s.dim, a.dim);
    set!(s.layers, a.layers);
    set!(s.heads, a.heads);
    set!(s.format, a.format);
    let cfg = census_config(&s, g.seed)?;
    s.block = Some(cfg.block_kind);
    s.branch = Some(cfg.global_branch);
    s.dim = Some(cfg.model_dim);
    s.layers = Some(cfg.num_layers);
    s.heads = Some(cfg.num_heads);
    write_snapshot(g, "census", |f| f.census = Some(s.clone()))?;

    let c = count_parameters(&cfg);
    let out = match s.format.as_str() {
        "json" => serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "census": c }))? + "\n",
        "table" => {
            let mut t = format!(
                "{} / {}: dim {}, {} layers, {} heads\n",
                cfg.block_kind, cfg.global_branch, cfg.model_dim, cfg.num_layers, cfg.num_heads
            );
            writeln!(t, "{:<16} {:>14} {:>8}", "component", "parameters", "share")?;
            for (name, n) in &c.per_component {
                writeln!(t, "{name:<16} {n:>14} {:>7.2}%", 100.0 * *n as f64 / c.total as f64)?;
            }
            writeln!(t, "{:<16} {:>14} {:>7.2}%", "total", c.total, 100.0)?;
            let other = cfg.clone().with_kinds(
                cfg.block_kind,
                match cfg.global_branch {
                    GlobalBranchKind::Attention => GlobalBranchKind::SummaryMixing,
                    GlobalBranchKind::SummaryMixing => GlobalBranchKind::Attention,
                },
            );
            let o = count_parameters(&other).total;
            let (att, sum) = match cfg.global_branch {
                GlobalBranchKind::Attention => (c.total, o),
                GlobalBranchKind::SummaryMixing => (o, c.total),
            };
            writeln!(
                t,
                "attention {att} vs summary_mixing {sum}: {:.2}% smaller with summary_mixing",
                100.0 * (att as f64 - sum as f64) / att as f64
            )?;
            t
        }
        f => bail!("unknown census format {f:?} (table, json)"),
    };
    stdout_line(&out)
}

fn bench(g: &Globals, mut s: BenchSettings, a: BenchArgs) -> Result<()> {
    set!(s.mode, a.mode);
    set!(s.block, a.block);
    set!(s.branch, a.branch);
    set!(s.scope, a.scope);
    set!(s.dim, a.dim);
    set!(s.heads, a.heads);
    set!(s.layers, a.layers);
    set!(s.lengths, a.lengths);
    set!(s.reps, a.reps);
    set!(s.format, a.format);
    set!(s.out, a.out);
    let (dim, heads, layers) = match s.mode.as_str() {
        "size" => {
            let l = EncoderConfig::large();
            (s.dim.unwrap_or(l.model_dim), s.heads.unwrap_or(l.num_heads), s.layers.unwrap_or(l.num_layers))
        }
        _ => (s.dim.unwrap_or(256), s.heads.unwrap_or(4), s.layers.unwrap_or(1)),
    };
    (s.dim, s.heads, s.layers) = (Some(dim), Some(heads), Some(layers));
    let format: Format = s.format.parse()?;
    let out = s
        .out
        .clone()
        .unwrap_or_else(|| g.out_dir.join(format!("bench_{}.{}", s.mode, format.extension())));
    s.out = Some(out.clone());
    let branches = match s.branch.as_str() {
        "both" => vec![GlobalBranchKind::SummaryMixing, GlobalBranchKind::Attention],
        b => vec![b.parse::<GlobalBranchKind>()?],
    };
    write_snapshot(g, "bench", |f| f.bench = Some(s.clone()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }

    match s.mode.as_str() {
        "scaling" => {
            let mut text = String::new();
            let mut summary = String::new();
            for (i, &branch) in branches.iter().enumerate() {
                let cfg = ScalingConfig {
                    block_kind: s.block,
                    branch_kind: branch,
                    scope: s.scope.parse()?,
                    dim,
                    heads,
                    lengths: s.lengths.clone(),
                    reps: s.reps,
                    seed: g.seed,
                };
                let r = bench_scaling_with(&cfg, |p| info!("{branch} T={} median {:.3} ms", p.seq_len, p.median_ms))?;
                writeln!(summary, "{branch}: log-log slope {:.3} (FLOPs {:.3})", r.slope, r.flop_slope)?;
                if branches.len() == 1 {
                    emit_report(&r, format, &out)?;
                } else {
                    let body = r.render(format);
                    // json becomes an array, csv keeps one header
                    match format {
                        Format::Json => {
                            text.push_str(if i == 0 { "[\n" } else { ",\n" });
                            text.push_str(body.trim_end());
                        }
                        Format::Csv if i > 0 => text.push_str(body.split_once('\n').map_or("", |(_, rest)| rest)),
                        _ => {
                            if i > 0 {
                                text.push('\n');
                            }
                            text.push_str(&body);
                        }
                    }
                }
            }
            if branches.len() > 1 {
                if format == Format::Json {
                    text.push_str("\n]\n");
                }
                fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            }
            stdout_line(&format!("{summary}report: {}\n", out.display()))
        }
        "size" => {
            let base = EncoderConfig {
                num_layers: layers,
                model_dim: dim,
                num_heads: heads,
                seed: g.seed,
                ..EncoderConfig::large()
            };
            let r = bench_size(&size_pairs(&base))?;
            emit_report(&r, format, &out)?;
            stdout_line(&(r.to_markdown() + &format!("report: {}\n", out.display())))
        }
        m => bail!("unknown bench mode {m:?} (scaling, size)"),
    }
}

fn export(g: &Globals, mut s: ExportSettings, a: ExportArgs) -> Result<()> {
    set!(s.checkpoint, a.checkpoint);
    set!(s.task, a.task);
    set!(s.input, a.input);
    set!(s.size, a.size);
    set!(s.pooling, a.pooling);
    set!(s.out, a.out);
    let pooling: Pooling = s.pooling.parse()?;
    let ck_path = require(&s.checkpoint, "--checkpoint")?.clone();
    let out: PathBuf = s.out.clone().unwrap_or_else(|| g.out_dir.join("embeddings.bin"));
    s.out = Some(out.clone());
    write_snapshot(g, "export_embeddings", |f| f.export_embeddings = Some(s.clone()))?;

    let encoder = Checkpoint::load(&ck_path)?.encoder()?;
    let (names, waves): (Vec<String>, Vec<_>) = match &s.input {
        Some(p) => load_clips(p)?.clips.into_iter().map(|c| (c.name, c.waveform)).unzip(),
        None => {
            let task: SyntheticTask = s.task.parse()?;
            make_synthetic_task(task, s.size, TASK_CLIP_SECONDS, g.seed)?
                .clips
                .into_iter()
                .map(|c| (c.name, c.waveform))
                .unzip()
        }
    };
    let emb = extract_embeddings(&encoder, &waves, pooling)?;
    write_embeddings(&out, &emb.values)?;
    let list = out.with_extension("clips.txt");
    fs::write(&list, names.join("\n") + "\n").with_context(|| format!("writing {}", list.display()))?;
    stdout_line(&format!(
        "wrote {}x{} embeddings to {} (clip order in {})\n",
        emb.values.nrows(),
        emb.values.ncols(),
        out.display(),
        list.display()
    ))
}
