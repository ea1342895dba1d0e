use ndarray::{array, Array2};

use super::*;
use crate::autodiff::gradcheck::check_params;
use crate::encoder::{BlockKind, Encoder, EncoderConfig, GlobalBranchKind};
use crate::masking::MaskConfig;
use crate::quantizer::QuantizerConfig;

fn output(token_logits: Array2<f32>, mel_logits: Array2<f32>) -> ModelOutput {
    ModelOutput {
        token_logits,
        mel_logits,
    }
}

fn mel(frames: Array2<f32>) -> StackedMelSequence {
    StackedMelSequence {
        frames,
        frame_rate: 25.0,
        stack_factor: 4,
    }
}

fn tokens(v: &[u32]) -> TokenSequence {
    TokenSequence { tokens: v.to_vec() }
}

// ---------------------------------------------------------------- loss

#[test]
fn empty_mask_gives_zero_loss() {
    let out = output(Array2::from_elem((3, 5), 0.3), Array2::from_elem((3, 2), 1.0));
    let l = compute_loss(&out, &tokens(&[0, 1, 2]), &mel(Array2::zeros((3, 2))), &[]).unwrap();
    assert_eq!(l, LossBreakdown::default());
}

#[test]
fn uniform_logits_give_log_vocab() {
    let out = output(Array2::from_elem((6, 8192), 1.7), Array2::zeros((6, 4)));
    let l = compute_loss(&out, &tokens(&[5, 8191, 0, 17, 4000, 3]), &mel(Array2::zeros((6, 4))), &[0, 2, 5]).unwrap();
    assert!((l.ce - 8192f64.ln()).abs() < 1e-4, "{}", l.ce);
    assert_eq!(l.mse, 0.0);
    assert_eq!(l.num_masked_frames, 3);
}

#[test]
fn hand_computed_two_frame_toy() {
    let out = output(
        array![[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]],
        array![[0.5, -0.5], [2.0, 1.0]],
    );
    let target = mel(array![[0.0, 0.0], [1.0, 3.0]]);
    let l = compute_loss(&out, &tokens(&[1, 0]), &target, &[0, 1]).unwrap();
    // frame 0: lse(1, 2, 0.5) − 2; frame 1: lse(0, −1, 3) − 0
    let lse = |v: [f64; 3]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
    let ce = 0.5 * ((lse([1.0, 2.0, 0.5]) - 2.0) + lse([0.0, -1.0, 3.0]));
    // squared errors 0.25, 0.25, 1, 4 over 4 entries
    let mse = (0.25 + 0.25 + 1.0 + 4.0) / 4.0;
    assert!((l.ce - ce).abs() < 1e-6, "{} vs {ce}", l.ce);
    assert!((l.mse - mse).abs() < 1e-6);
    assert_eq!(l.total, (l.ce as f32 + l.mse as f32) as f64);

    let only_second = compute_loss(&out, &tokens(&[1, 0]), &target, &[1]).unwrap();
    assert!((only_second.ce - lse([0.0, -1.0, 3.0])).abs() < 1e-6);
    assert!((only_second.mse - 2.5).abs() < 1e-6);
}

#[test]
fn out_of_range_mask_is_an_input_error() {
    let out = output(Array2::zeros((2, 3)), Array2::zeros((2, 2)));
    let r = compute_loss(&out, &tokens(&[0, 0]), &mel(Array2::zeros((2, 2))), &[2]);
    assert!(matches!(r, Err(Error::Input(_))));
    let r = compute_loss(&out, &tokens(&[0]), &mel(Array2::zeros((2, 2))), &[0]);
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn unmasked_frames_do_not_affect_the_loss() {
    use rand::Rng;
    let mut rng = crate::seed::rng(&[4]);
    let mut logits = Array2::from_shape_fn((10, 16), |_| rng.random_range(-2.0f32..2.0));
    let mut mel_logits = Array2::from_shape_fn((10, 6), |_| rng.random_range(-2.0f32..2.0));
    let mut target = Array2::from_shape_fn((10, 6), |_| rng.random_range(-2.0f32..2.0));
    let mut toks: Vec<u32> = (0..10).map(|i| (i * 5 % 16) as u32).collect();
    let masked = [1usize, 4, 5, 9];
    let base = compute_loss(&output(logits.clone(), mel_logits.clone()), &tokens(&toks), &mel(target.clone()), &masked).unwrap();
    for t in [0usize, 2, 3, 6, 7, 8] {
        logits.row_mut(t).mapv_inplace(|v| v * 3.0 + 1.0);
        mel_logits.row_mut(t).fill(100.0);
        target.row_mut(t).fill(-7.0);
        toks[t] = (toks[t] + 3) % 16;
    }
    let after = compute_loss(&output(logits, mel_logits), &tokens(&toks), &mel(target), &masked).unwrap();
    assert_eq!(base, after);
}

#[test]
fn gradient_is_zero_on_unmasked_rows() {
    let empty = ParamStore::<f32>::new();
    let mut g = Graph::eval(&empty);
    let tl = g.input_with_grad(Array2::from_shape_fn((6, 5), |(i, j)| (i * j) as f32 * 0.1));
    let ml = g.input_with_grad(Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f32 * 0.2));
    let masked = [1usize, 3];
    let l = loss_on_graph(&mut g, tl, ml, &[0, 1, 2, 3, 4, 0], Array2::ones((6, 3)), &masked);
    let grads = g.backward(l.total);
    for v in [tl, ml] {
        let gr = grads.wrt(v).unwrap();
        for t in 0..6 {
            let zero = gr.row(t).iter().all(|&x| x == 0.0);
            assert_eq!(zero, !masked.contains(&t), "row {t}");
        }
    }
}

#[test]
fn top1_prefers_lowest_index_on_ties() {
    let logits = array![[1.0f32, 3.0, 3.0], [0.0, 0.0, 0.0]];
    assert_eq!(top1_hits(logits.view(), &[1, 0], &[0, 1]), 2);
    assert_eq!(top1_hits(logits.view(), &[2, 1], &[0, 1]), 0);
}

// ---------------------------------------------------------------- schedule and clipping

#[test]
fn schedule_endpoints_and_midpoint() {
    let cfg = ScheduleConfig {
        peak_lr: 1e-4,
        final_lr: 1e-5,
        warmup_steps: 100,
        total_steps: 1100,
        clip_norm: 1.0,
    };
    assert_eq!(lr_at_step(0, &cfg), 0.0);
    assert_eq!(lr_at_step(100, &cfg), 1e-4);
    assert_eq!(lr_at_step(1100, &cfg), 1e-5);
    assert!((lr_at_step(600, &cfg) - (1e-5 + 0.5 * 9e-5)).abs() < 1e-12);
    assert!((lr_at_step(50, &cfg) - 5e-5).abs() < 1e-18);
    // continuity at the end of warmup
    assert!((lr_at_step(99, &cfg) - 1e-4).abs() < 2e-6);
    assert!((lr_at_step(101, &cfg) - 1e-4).abs() < 1e-9);
    let mut prev = f64::INFINITY;
    for s in 100..=1100 {
        let lr = lr_at_step(s, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn schedule_validation_and_warmup_fraction() {
    let cfg = ScheduleConfig::for_steps(500);
    assert_eq!(cfg.warmup_steps, 25);
    assert!(cfg.validate().is_ok());
    for bad in [
        ScheduleConfig { final_lr: 0.0, ..cfg },
        ScheduleConfig { final_lr: 1e-3, ..cfg },
        ScheduleConfig { warmup_steps: 500, ..cfg },
        ScheduleConfig { warmup_steps: 0, ..cfg },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

fn grads_with_norm(norm: f64) -> ParamGrads<f64> {
    // direction (1, 2, 2, 4) / 5
    let unit = [0.2, 0.4, 0.4, 0.8];
    ParamGrads {
        grads: vec![
            array![[unit[0] * norm, unit[1] * norm]],
            array![[unit[2] * norm], [unit[3] * norm]],
        ],
    }
}

#[test]
fn clipping_below_threshold_is_a_no_op() {
    let mut g = grads_with_norm(0.5);
    let before = g.clone();
    let r = clip_gradients(&mut g, 1.0, 1).unwrap();
    assert!(!r.clipped);
    assert_eq!(g.grads, before.grads);
}

#[test]
fn clipping_rescales_to_the_threshold() {
    let mut g = grads_with_norm(4.0);
    let before = g.clone();
    let r = clip_gradients(&mut g, 1.0, 1).unwrap();
    assert!(r.clipped);
    assert!((r.pre_norm - 4.0).abs() < 1e-12);
    assert!((g.global_norm() - 1.0).abs() < 1e-6);
    let flat = |p: &ParamGrads<f64>| p.grads.iter().flat_map(|a| a.iter().copied()).collect::<Vec<_>>();
    let (a, b) = (flat(&before), flat(&g));
    for (x, y) in a.iter().zip(&b) {
        assert!((y - 0.25 * x).abs() < 1e-12);
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cos = dot / (before.global_norm() * g.global_norm());
    assert!((cos - 1.0).abs() < 1e-9);
}

#[test]
fn clipping_handles_huge_gradients_in_single_precision() {
    let mut g = ParamGrads {
        grads: vec![Array2::from_elem((64, 64), 1e3f32), Array2::from_elem((1, 64), -5e2f32)],
    };
    let r = clip_gradients(&mut g, 1.0, 3).unwrap();
    assert!(r.post_norm <= 1.0 + 1e-6, "{}", r.post_norm);
}

#[test]
fn non_finite_gradients_are_training_errors() {
    let mut g = grads_with_norm(1.0);
    g.grads[1][[0, 0]] = f64::NAN;
    assert!(matches!(clip_gradients(&mut g, 1.0, 42), Err(Error::Training { step: 42, .. })));
}

#[test]
fn adam_first_step_matches_closed_form() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", crate::params::Component::Heads, array![[1.0f32, -2.0]]);
    let grads = ParamGrads {
        grads: vec![array![[0.5f32, -0.25]]],
    };
    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.update(&mut store, &grads, 0.1, 1);
    // bias-corrected first step moves each weight by lr·sign(g)·|g|/(|g|+ε)
    let w = store.value(id);
    for (j, (&w0, &g0)) in [1.0f64, -2.0].iter().zip(&[0.5f64, -0.25]).enumerate() {
        let expected = w0 - 0.1 * g0 / (g0.abs() + 1e-8);
        assert!((w[[0, j]] as f64 - expected).abs() < 1e-6);
    }
}

// ---------------------------------------------------------------- data

#[test]
fn epochs_cover_every_clip_once() {
    let n = 10;
    let mut seen = vec![0usize; n];
    let picks: Vec<(usize, u64)> = (0..5).flat_map(|s| batch_indices(s, n, 4, 9)).collect();
    for &(i, e) in &picks[..10] {
        assert_eq!(e, 0);
        seen[i] += 1;
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert!(picks[10..].iter().all(|&(_, e)| e == 1));
    assert_eq!(batch_indices(3, n, 4, 9), batch_indices(3, n, 4, 9));
    assert_ne!(
        (0..3).flat_map(|s| batch_indices(s, n, 4, 9)).collect::<Vec<_>>(),
        (0..3).flat_map(|s| batch_indices(s, n, 4, 10)).collect::<Vec<_>>()
    );
}

#[test]
fn synthetic_dataset_is_deterministic() {
    let spec = SyntheticSpec {
        count: 6,
        duration_s: 0.5,
        ..SyntheticSpec::default()
    };
    let a = Dataset::synthetic(&spec).unwrap();
    let b = Dataset::synthetic(&spec).unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.clips.iter().zip(&b.clips) {
        assert_eq!(x.waveform, y.waveform);
        assert_eq!(x.waveform.len(), 12_000);
    }
    assert_ne!(a.clips[0].waveform, a.clips[1].waveform);
}

#[test]
fn manifest_skips_unreadable_clips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 24_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(dir.path().join("a.wav"), spec).unwrap();
    for i in 0..24_000 {
        w.write_sample(((i as f32 * 0.05).sin() * 10_000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
    std::fs::write(dir.path().join("broken.wav"), b"not audio").unwrap();
    let manifest = dir.path().join("list.txt");
    std::fs::write(&manifest, "# clips\na.wav\n\nbroken.wav\nmissing.wav\n").unwrap();

    let (ds, warnings) = Dataset::from_manifest(&manifest).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(warnings.len(), 2);
    let (ds, warnings) = Dataset::from_manifest(dir.path()).unwrap();
    assert_eq!((ds.len(), warnings.len()), (1, 1));

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "broken.wav\n").unwrap();
    assert!(matches!(Dataset::from_manifest(&empty), Err(Error::Input(_))));
}

// ---------------------------------------------------------------- training

fn tiny_train_config(steps: u64) -> TrainConfig {
    let vocab = 64;
    TrainConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            conv_kernel: 5,
            vocab_size: vocab,
            ..EncoderConfig::desk()
        },
        quantizer: QuantizerConfig {
            codebook_size: vocab,
            ..QuantizerConfig::default()
        },
        mask: MaskConfig {
            mask_prob: 0.5,
            ..MaskConfig::default()
        },
        batch_size: 3,
        checkpoint_every: 5,
        ..TrainConfig::desk(steps)
    }
}

fn tiny_dataset() -> Dataset {
    Dataset::synthetic(&SyntheticSpec {
        count: 5,
        duration_s: 1.0,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn targets_come_from_the_unmasked_waveform() {
    let ds = tiny_dataset();
    let cfg = tiny_train_config(10);
    let teacher = Teacher::fit(&ds, cfg.quantizer).unwrap();
    let prepared = teacher.prepare(&ds).unwrap();
    let clip = &ds.clips[0];
    let (tok, feats) = teacher.targets(&clip.waveform).unwrap();
    assert_eq!(prepared[0].tokens, tok.as_indices());
    assert_eq!(prepared[0].target, feats.frames);
    assert_eq!(prepared[0].tokens.len(), 25);

    let mut cfg_mask = cfg.mask;
    cfg_mask.mask_prob = 1.0;
    let m = crate::masking::sample_mask(clip.waveform.len(), 24_000, &cfg_mask, 0, clip.id).unwrap();
    let masked = crate::masking::apply_waveform_mask(&clip.waveform, &m).unwrap();
    let (masked_tok, _) = teacher.targets(&masked).unwrap();
    assert_ne!(masked_tok.as_indices(), prepared[0].tokens);
}

fn prepared(cfg: &TrainConfig) -> Vec<PreparedClip> {
    let ds = tiny_dataset();
    Teacher::fit(&ds, cfg.quantizer).unwrap().prepare(&ds).unwrap()
}

#[test]
fn pretrain_step_is_bit_reproducible() {
    let cfg = tiny_train_config(10);
    let clips = prepared(&cfg);
    let batch: Vec<BatchItem<'_>> = clips.iter().take(3).map(|c| BatchItem { clip: c, epoch: 0 }).collect();
    let mut a = TrainState::new(cfg.clone()).unwrap();
    let mut b = TrainState::new(cfg).unwrap();
    let ra = pretrain_step(&mut a, &batch).unwrap();
    let rb = pretrain_step(&mut b, &batch).unwrap();
    assert_eq!(ra, rb);
    assert!(a.encoder.params().bit_eq(b.encoder.params()));
    assert_eq!(a.step, 1);
    assert!(ra.loss.num_masked_frames > 0);
    // per-clip terms are summed in single precision
    assert!((ra.loss.total - ra.loss.ce - ra.loss.mse).abs() < 1e-5 * ra.loss.total);
}

#[test]
fn empty_masks_leave_parameters_unchanged() {
    let mut cfg = tiny_train_config(10);
    cfg.mask.mask_prob = 0.0;
    let clips = prepared(&cfg);
    let batch: Vec<BatchItem<'_>> = clips.iter().map(|c| BatchItem { clip: c, epoch: 0 }).collect();
    let mut state = TrainState::new(cfg).unwrap();
    let before = state.encoder.params().clone();
    let r = pretrain_step(&mut state, &batch).unwrap();
    assert_eq!(r.loss, LossBreakdown::default());
    assert!(state.encoder.params().bit_eq(&before));
    assert_eq!(state.step, 1);
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let cfg = tiny_train_config(12);
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let opts = |name: &str, resume: Option<std::path::PathBuf>| RunOptions {
        out_dir: dir.path().join(name),
        resume_from: resume,
        ..RunOptions::default()
    };
    let a = run_pretraining(&ds, &cfg, &opts("a", None), |_| {}).unwrap();
    let b = run_pretraining(&ds, &cfg, &opts("b", None), |_| {}).unwrap();
    assert_eq!(a.rows.len(), 12);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!(x.same_metrics(y), "{x:?} vs {y:?}");
    }
    let on_disk = read_metrics(&a.metrics_path).unwrap();
    assert_eq!(on_disk.len(), 12);
    assert!(on_disk.iter().zip(&a.rows).all(|(x, y)| x.same_metrics(y)));

    // resume from the step-5 checkpoint into a copy of run a's directory
    let resume_dir = dir.path().join("c");
    std::fs::create_dir_all(&resume_dir).unwrap();
    std::fs::copy(&a.metrics_path, resume_dir.join("metrics.csv")).unwrap();
    let c = run_pretraining(&ds, &cfg, &opts("c", Some(dir.path().join("a/step-000005.ckpt"))), |_| {}).unwrap();
    assert_eq!(c.rows.len(), 7);
    for (x, y) in c.rows.iter().zip(&a.rows[5..]) {
        assert!(x.same_metrics(y), "{x:?} vs {y:?}");
    }
    let merged = read_metrics(&c.metrics_path).unwrap();
    assert_eq!(merged.len(), 12);
    let fa = crate::checkpoint::Checkpoint::load(&a.final_checkpoint).unwrap().encoder().unwrap();
    let fc = crate::checkpoint::Checkpoint::load(&c.final_checkpoint).unwrap().encoder().unwrap();
    assert!(fa.params().bit_eq(fc.params()));
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = tiny_train_config(10);
    let clips = prepared(&cfg);
    let enc = Encoder::<f32>::new(cfg.encoder.clone()).unwrap();
    let a = evaluate(&enc, &clips, &cfg.mask, 1).unwrap();
    let b = evaluate(&enc, &clips, &cfg.mask, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.loss.num_masked_frames > 0);
    assert!(a.loss.ce > 0.0);
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for global in [GlobalBranchKind::SummaryMixing, GlobalBranchKind::Attention] {
        let cfg = EncoderConfig {
            block_kind: BlockKind::Branchformer,
            global_branch: global,
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            conv_kernel: 3,
            dropout: 0.0,
            vocab_size: 7,
            mel_dim: 5,
            ..EncoderConfig::desk()
        };
        let enc = Encoder::<f64>::new(cfg).unwrap();
        let samples: Vec<f32> = (0..960 * 6).map(|i| ((i as f32) * 0.013).sin() * 0.5).collect();
        let toks = vec![1usize, 6, 0, 3, 3, 2];
        let target = Array2::from_shape_fn((6, 5), |(i, j)| ((i + 2 * j) % 5) as f64 * 0.3 - 0.5);
        let report = check_params(
            enc.params(),
            |g| {
                let v = enc.forward_graph(g, &samples).unwrap();
                loss_on_graph(g, v.token_logits, v.mel_logits, &toks, target.clone(), &[1, 2, 4]).total
            },
            1e-5,
            1e-6,
            8,
        );
        assert!(report.max_rel_error < 1e-4, "{global}: {report:?}");
    }
}

#[test]
fn stop_flag_checkpoints_and_returns_early() {
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;
    let cfg = tiny_train_config(12);
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        stop: Some(stop),
        ..RunOptions::default()
    };
    let s = run_pretraining(&ds, &cfg, &opts, |row| {
        if row.step == 3 {
            flag.store(true, Ordering::SeqCst);
        }
    })
    .unwrap();
    assert!(s.interrupted);
    assert_eq!(s.rows.len(), 3);
    assert_eq!(s.final_checkpoint, dir.path().join("step-000003.ckpt"));
    assert_eq!(crate::checkpoint::Checkpoint::load(&s.final_checkpoint).unwrap().meta.step, 3);
    assert!(!dir.path().join("final.ckpt").exists());
}
