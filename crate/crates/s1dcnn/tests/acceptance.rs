//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with the measured numbers (run with `--nocapture` to see them).

use std::time::Instant;

use s1dcnn::cli::verify_equivalence;
use s1dcnn::evaluation::{evaluate, frr_at_fa};
use s1dcnn::frontend::FeatureSequence;
use s1dcnn::layers::Activation;
use s1dcnn::network::{
    build, count_macs, count_params, load, output_delay, receptive_field, save, Arch, Model,
    ModelConfig,
};
use s1dcnn::numerics::{Matrix, Rng};
use s1dcnn::streaming::{batch_scores, events_in_trace, stream_scores, suppression_frames};
use s1dcnn::training::{
    frame_accuracy, grad_check, relu_margin, schedule_epoch, synth_dataset, synth_negative_stream,
    train, ScheduleAction, ScheduleState, Stage, TrainHyper,
};

fn random_feats(seed: u64, dim: usize, t: usize) -> FeatureSequence {
    let mut rng = Rng::new(seed);
    FeatureSequence::new(
        Matrix::from_vec(dim, t, (0..dim * t).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap(),
    )
}

/// Criterion 1: over >= 100 random seeds the full-network SVDF route and the
/// reduced unit route agree below 1e-5 in f32, and the nonzero-bias negative
/// control separates the routes by more than 1e-3. Under one minute.
#[test]
fn criterion_1_equivalence() {
    let start = Instant::now();
    let report = verify_equivalence(100, false).unwrap();
    assert!(
        report.max_deviation < 1e-5,
        "equivalence deviation {}",
        report.max_deviation
    );
    let control = verify_equivalence(100, true).unwrap();
    assert!(
        control.max_deviation > 1e-3,
        "negative control too small: {}",
        control.max_deviation
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "PASS criterion 1: equivalence over 100 seeds, max deviation {:.3e} (< 1e-5), negative control {:.3e} (> 1e-3), {:?}",
        report.max_deviation, control.max_deviation, elapsed
    );
}

/// Criterion 2: receptive field and output delay take their exact expected
/// values for every lookahead.
#[test]
fn criterion_2_receptive_field_and_delay() {
    let expected = [(610, 50), (540, 120), (470, 190), (400, 260), (330, 330)];
    for (l, &want) in expected.iter().enumerate() {
        let cfg = ModelConfig::reference(Arch::S1dcnn, l);
        let got = receptive_field(&cfg);
        assert_eq!(got, want, "receptive field at L={l}");
        assert_eq!(output_delay(&cfg), ((7 * l + 5) * 10) as u32, "delay at L={l}");
    }
    println!(
        "PASS criterion 2: receptive field (610,50),(540,120),(470,190),(400,260),(330,330) and delay (7L+5)*10 ms exact for L=0..4"
    );
}

/// Criterion 3: the s1dcnn/svdf parameter-count difference is exactly the two
/// bias vectors per block: 448 at the reference config, 2*N*D in general.
#[test]
fn criterion_3_parameter_accounting() {
    let s1 = build(&ModelConfig::reference(Arch::S1dcnn, 0), &mut Rng::new(1)).unwrap();
    let sv = build(&ModelConfig::reference(Arch::Svdf, 0), &mut Rng::new(1)).unwrap();
    let diff = count_params(&s1).total() - count_params(&sv).total();
    assert_eq!(diff, 448);

    let mut rng = Rng::new(33);
    for i in 0..20 {
        let cfg = ModelConfig {
            feature_dim: 1 + rng.uniform_usize(24),
            context: rng.uniform_usize(7),
            depth: 1 + rng.uniform_usize(9),
            filters: 1 + rng.uniform_usize(48),
            memory: 2 + rng.uniform_usize(12),
            lookahead: 0,
            classes: 1 + rng.uniform_usize(4),
            arch: Arch::S1dcnn,
            frame_hop_ms: 10,
        };
        let mut svdf_cfg = cfg;
        svdf_cfg.arch = Arch::Svdf;
        let a = build(&cfg, &mut Rng::new(100 + i)).unwrap();
        let b = build(&svdf_cfg, &mut Rng::new(100 + i)).unwrap();
        assert_eq!(
            count_params(&a).total() - count_params(&b).total(),
            2 * cfg.filters * cfg.depth,
            "config {i}"
        );
    }
    println!(
        "PASS criterion 3: param(s1dcnn) - param(svdf) == 448 at reference config and 2*N*D across 20 random configs"
    );
}

/// Criterion 4: MACs per frame at the reference config are exactly 13024
/// under the documented rule, within 5% of the ~13.0k design budget.
#[test]
fn criterion_4_mac_accounting() {
    let m = build(&ModelConfig::reference(Arch::S1dcnn, 2), &mut Rng::new(2)).unwrap();
    let macs = count_macs(&m).total();
    assert_eq!(macs, 13_024);
    assert!((macs as f64 - 13_000.0).abs() / 13_000.0 < 0.05);
    println!("PASS criterion 4: MACs per frame = 13024 (within 5% of ~13.0k)");
}

/// Criterion 5: streaming scores (push + flush) equal the batch-convention
/// scores within 1e-5 per frame with identical counts, on >= 20 random
/// inputs with T up to 1000. Under one minute.
#[test]
fn criterion_5_streaming_parity() {
    let start = Instant::now();
    let mut worst = 0.0f32;
    let mut cases = 0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(4000 + seed);
        let (cfg, t) = if seed < 3 {
            // Include the full-size configuration at the maximum length.
            (ModelConfig::reference(Arch::S1dcnn, seed as usize), 1000)
        } else {
            (
                ModelConfig {
                    feature_dim: 2 + rng.uniform_usize(12),
                    context: rng.uniform_usize(4),
                    depth: 1 + rng.uniform_usize(4),
                    filters: 1 + rng.uniform_usize(8),
                    memory: 1 + rng.uniform_usize(9),
                    lookahead: 0,
                    classes: 2,
                    arch: Arch::S1dcnn,
                    frame_hop_ms: 10,
                },
                1 + rng.uniform_usize(1000),
            )
        };
        let mut cfg = cfg;
        cfg.lookahead = rng.uniform_usize(cfg.memory);
        let mut model = build(&cfg, &mut rng.split(1)).unwrap();
        // Nonzero biases and batch-norm state, as a trained model would have.
        for (unit, bn) in &mut model.blocks {
            for v in &mut unit.feature_bias {
                *v = rng.uniform(-0.3, 0.3);
            }
            for v in &mut unit.time_bias {
                *v = rng.uniform(-0.3, 0.3);
            }
            for v in &mut bn.running_mean {
                *v = rng.uniform(-0.2, 0.2);
            }
            for v in &mut bn.running_var {
                *v = rng.uniform(0.5, 1.5);
            }
        }
        let feats = random_feats(5000 + seed, cfg.feature_dim, t);
        let batch = batch_scores(&model, &feats).unwrap();
        let streamed = stream_scores(&model, &feats).unwrap();
        assert_eq!(batch.len(), t, "seed {seed}: score count");
        assert_eq!(streamed.len(), t, "seed {seed}: streaming count");
        for (i, (a, b)) in batch.iter().zip(&streamed).enumerate() {
            let d = (a - b).abs();
            worst = worst.max(d);
            assert!(d < 1e-5, "seed {seed} frame {i}: {a} vs {b}");
        }
        cases += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "PASS criterion 5: streaming parity on {cases} inputs (T up to 1000), max |diff| {worst:.3e} (< 1e-5), {elapsed:?}"
    );
}

/// Criterion 6: analytic gradients of the tiny full stack (D=2, N=3, K=3,
/// L=1, batch norm, head) match 64-bit central differences below 1e-3
/// relative error. Under one minute.
#[test]
fn criterion_6_gradient_correctness() {
    let start = Instant::now();
    let cfg = ModelConfig {
        feature_dim: 3,
        context: 1,
        depth: 2,
        filters: 3,
        memory: 3,
        lookahead: 1,
        classes: 2,
        arch: Arch::S1dcnn,
        frame_hop_ms: 10,
    };
    let model = build(&cfg, &mut Rng::new(600)).unwrap();
    let mut seed = 601;
    let input = loop {
        let feats = random_feats(seed, cfg.input_dim(), 7);
        if relu_margin(&model, &feats).unwrap() > 0.02 {
            break feats;
        }
        seed += 1;
    };
    let worst = grad_check(&model, &input, 1e-4).unwrap();
    let elapsed = start.elapsed();
    assert!(worst < 1e-3, "max relative error {worst}");
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "PASS criterion 6: grad check on D=2/N=3/K=3/L=1 stack, max relative error {worst:.3e} (< 1e-3), {elapsed:?}"
    );
}

/// Criterion 7: the synthetic toy task is learnable. Training on
/// synth_dataset(seed=7, 500 pos, 500 neg) reaches > 90% held-out frame
/// accuracy and < 20% FRR at 1 FA/hour on >= 2 hours of held-out negatives,
/// within 10 minutes; the L=1 run's CV loss is compared against L=0.
#[test]
fn criterion_7_toy_task_learnability() {
    let start = Instant::now();
    let dataset = synth_dataset(7, 500, 500);
    let hyper = TrainHyper {
        seed: 7,
        max_epochs: 8,
        ..TrainHyper::default()
    };

    let cfg_l0 = ModelConfig::reference(Arch::S1dcnn, 0);
    let out_l0 = train(&cfg_l0, &dataset, &hyper).unwrap();
    let acc = frame_accuracy(&out_l0.model, &out_l0.cv_examples).unwrap();
    assert!(acc > 0.90, "held-out frame accuracy {acc}");

    let held_out_pos = synth_dataset(1007, 50, 0);
    let negatives = synth_negative_stream(1007, 2.0 * 3600.0, 60.0);
    let report = evaluate(&out_l0.model, &held_out_pos, &negatives, 1000).unwrap();
    assert!(report.neg_hours >= 2.0, "only {} negative hours", report.neg_hours);
    let frr = frr_at_fa(&report.det, 1.0).unwrap();
    assert!(frr < 0.20, "FRR at 1 FA/hour = {frr}");

    // Two keywords three seconds apart, one second suppression: exactly two
    // trigger events at the 1 FA/hour operating threshold.
    let op_threshold = report
        .det
        .iter()
        .find(|p| p.fa_per_hour <= 1.0)
        .map(|p| p.threshold)
        .unwrap_or(0.5);
    let two = two_keyword_audio();
    let feats = s1dcnn::frontend::extract_features(&two, &Default::default()).unwrap();
    let trace = stream_scores(&out_l0.model, &feats).unwrap();
    let events = events_in_trace(&trace, op_threshold, suppression_frames(10, 1000));
    assert_eq!(events.len(), 2, "two-keyword audio fired {} events", events.len());

    // Directional check against the L=1 run (report, not a hard gate).
    let cfg_l1 = ModelConfig::reference(Arch::S1dcnn, 1);
    let out_l1 = train(&cfg_l1, &dataset, &hyper).unwrap();
    let cv_l0 = out_l0.log.iter().map(|l| l.cv_loss).fold(f32::INFINITY, f32::min);
    let cv_l1 = out_l1.log.iter().map(|l| l.cv_loss).fold(f32::INFINITY, f32::min);
    let direction = if cv_l1 <= cv_l0 {
        "L=1 <= L=0".to_string()
    } else {
        format!("L=1 > L=0 by {}", cv_l1 - cv_l0)
    };

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    println!(
        "PASS criterion 7: toy task CV accuracy {acc:.4} (> 0.90), FRR@1FA/h {frr:.4} (< 0.20) over {:.2} h, two-keyword events = 2, best CV loss L0={cv_l0:.5} L1={cv_l1:.5} ({direction}), {elapsed:?}",
        report.neg_hours
    );
}

fn two_keyword_audio() -> s1dcnn::frontend::AudioBuffer {
    // Quiet noise floor with the three-tone keyword at 1.0 s and 4.0 s.
    let sr = 16_000usize;
    let mut rng = Rng::new(777);
    let mut samples: Vec<f32> = (0..sr * 6).map(|_| 0.01 * rng.gauss()).collect();
    for &start_sec in &[1.0f64, 4.0] {
        let start = (start_sec * sr as f64) as usize;
        for (seg, freq) in [440.0f64, 880.0, 660.0].iter().enumerate() {
            for i in 0..(sr / 5) {
                let t = i as f64 / sr as f64;
                samples[start + seg * sr / 5 + i] +=
                    0.5 * (2.0 * std::f64::consts::PI * freq * t).sin() as f32;
            }
        }
    }
    s1dcnn::frontend::AudioBuffer::new(samples, 16_000)
}

/// Criterion 8: a scripted CV-loss trace drives the schedule through warm-up
/// growth, rollback after 8 flat epochs, main-stage halving after 4 flat
/// epochs, and stop after 8 flat epochs, with the exact action sequence.
#[test]
fn criterion_8_schedule_conformance() {
    let model = build(
        &ModelConfig {
            feature_dim: 2,
            context: 0,
            depth: 1,
            filters: 2,
            memory: 2,
            lookahead: 0,
            classes: 2,
            arch: Arch::S1dcnn,
            frame_hop_ms: 10,
        },
        &mut Rng::new(8),
    )
    .unwrap();

    let mut state = ScheduleState::new(0.001);
    let mut actions = Vec::new();
    let mut lrs = Vec::new();
    // Three improving warm-up epochs, eight flat, four flat in main, then
    // four more flat.
    let script = [
        0.9f32, 0.8, 0.7, // warm-up improvements
        0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, // 8 flat -> rollback
        0.75, 0.75, 0.75, 0.75, // 4 flat in main -> decay
        0.75, 0.75, 0.75, 0.75, // 8 flat in main -> stop
    ];
    for &cv in &script {
        actions.push(schedule_epoch(&mut state, cv, &model));
        lrs.push(state.lr);
    }

    use ScheduleAction::*;
    let expected = [
        Continue, Continue, Continue, // growth x1.4 each
        Continue, Continue, Continue, Continue, Continue, Continue, Continue,
        RollbackToBest, // 8th flat warm-up epoch
        Continue, Continue, Continue, DecayLr, // 4th flat main epoch
        Continue, Continue, Continue, Stop, // 8th flat main epoch
    ];
    assert_eq!(actions.as_slice(), expected.as_slice());

    for (k, &lr) in lrs[..3].iter().enumerate() {
        let want = 0.001 * 1.4f32.powi(k as i32 + 1);
        assert!((lr - want).abs() < 1e-9, "warm-up lr {k}");
    }
    let lr_main = lrs[10];
    assert!((lrs[14] - lr_main * 0.5).abs() < 1e-12, "main decay");
    assert_eq!(state.stage, Stage::Main);
    println!(
        "PASS criterion 8: schedule actions exact (x1.4 growth, rollback after 8, halve after 4, stop after 8)"
    );
}

/// Criterion 9: model serialization round-trips bit-identically and the
/// loaded model's forward pass is bit-identical on random input.
#[test]
fn criterion_9_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("m1.s1dc");
    let p2 = dir.path().join("m2.s1dc");
    let mut model = build(&ModelConfig::reference(Arch::S1dcnn, 1), &mut Rng::new(9)).unwrap();
    // Non-default batch-norm state and biases must survive the round trip.
    let mut rng = Rng::new(90);
    for (unit, bn) in &mut model.blocks {
        for v in &mut unit.feature_bias {
            *v = rng.uniform(-0.5, 0.5);
        }
        for v in &mut bn.running_mean {
            *v = rng.uniform(-0.5, 0.5);
        }
        for v in &mut bn.running_var {
            *v = rng.uniform(0.5, 2.0);
        }
        unit.g1 = Activation::Identity;
    }
    save(&model, &p1).unwrap();
    let loaded = load(&p1).unwrap();
    save(&loaded, &p2).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "save -> load -> save bytes"
    );

    let feats = random_feats(91, 143, 64);
    let a = model.forward(&feats).unwrap();
    let b = loaded.forward(&feats).unwrap();
    assert_eq!(a.data(), b.data(), "loaded forward differs");
    println!("PASS criterion 9: save/load round-trip and loaded forward are bit-identical");
}

/// Criterion 10: `train --seed S` twice produces identical training logs and
/// identical model files, end to end through the CLI binary.
#[test]
fn criterion_10_training_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_s1dcnn");
    let run = |tag: &str| {
        let model = dir.path().join(format!("{tag}.s1dc"));
        let log = dir.path().join(format!("{tag}.log"));
        let output = std::process::Command::new(bin)
            .args([
                "train",
                "--seed",
                "11",
                "--synth-pos",
                "20",
                "--synth-neg",
                "20",
                "--depth",
                "2",
                "--filters",
                "4",
                "--memory",
                "3",
                "--max-epochs",
                "3",
                "--batch-size",
                "8",
                "--cv-fraction",
                "0.25",
                "--out",
                model.to_str().unwrap(),
                "--log",
                log.to_str().unwrap(),
            ])
            .output()
            .expect("spawn train");
        assert!(
            output.status.success(),
            "train failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        (
            std::fs::read(&model).unwrap(),
            std::fs::read_to_string(&log).unwrap(),
        )
    };
    let (model_a, log_a) = run("a");
    let (model_b, log_b) = run("b");
    assert_eq!(log_a, log_b, "training logs differ");
    assert_eq!(model_a, model_b, "model files differ");
    assert!(log_a.lines().any(|l| l.starts_with("epoch=1 stage=warmup ")));
    println!("PASS criterion 10: train --seed 11 twice gave identical logs and model files");
}

/// The streaming-parity claim also holds for a model that actually went
/// through training (trained biases and batch-norm statistics).
#[test]
fn trained_model_streaming_parity() {
    let dataset = synth_dataset(70, 12, 12);
    let cfg = ModelConfig {
        feature_dim: 13,
        context: 2,
        depth: 2,
        filters: 4,
        memory: 3,
        lookahead: 1,
        classes: 2,
        arch: Arch::S1dcnn,
        frame_hop_ms: 10,
    };
    let hyper = TrainHyper {
        seed: 71,
        batch_size: 4,
        max_epochs: 2,
        cv_fraction: 0.25,
        ..TrainHyper::default()
    };
    let out = train(&cfg, &dataset, &hyper).unwrap();
    let model: &Model = &out.model;
    let feats = s1dcnn::frontend::extract_features(&dataset[0].audio, &Default::default()).unwrap();
    let batch = batch_scores(model, &feats).unwrap();
    let streamed = stream_scores(model, &feats).unwrap();
    assert_eq!(batch, streamed, "trained-model parity");
    println!("PASS extra: trained-model streaming parity is bit-exact");
}
