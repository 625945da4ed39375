//! Command-line driver: data synthesis, feature extraction, training,
//! evaluation, streaming detection, model inspection and the verification
//! oracles.
//!
//! Exit codes: 0 success, 1 flag/config validation error, 2 runtime or data
//! error. Results go to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation::{emit_det, evaluate};
use crate::frontend::{
    concat_context, extract_features, read_wav, write_features, write_wav, FrameSpec,
    StreamingFramer,
};
use crate::network::{
    build, count_params, info_json, info_text, load, save, Arch, Model, ModelConfig,
};
use crate::numerics::{Matrix, Rng};
use crate::parallel;
use crate::streaming::StreamState;
use crate::training::{
    grad_check, read_manifest, relu_margin, synth_dataset, synth_negative_stream, train,
    write_manifest, TrainHyper, Utterance,
};

#[derive(Parser)]
#[command(
    name = "s1dcnn",
    version,
    about = "Streaming voice-trigger engine built on stacked 1D CNN units"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Architecture flags shared by commands that build a model. `--config paper`
/// expands to 13 MFCCs, 5+5 context frames, 7 blocks of 32 filters with
/// memory 9 and two classes; individual flags override single fields.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Named base configuration (only "paper").
    #[arg(long, default_value = "paper")]
    config: String,

    /// Future first-stage outputs per block.
    #[arg(long, default_value_t = 0)]
    lookahead: usize,

    /// Layer semantics: svdf (bias-free, zero lookahead) or s1dcnn.
    #[arg(long, default_value = "s1dcnn")]
    arch: Arch,

    #[arg(long)]
    depth: Option<usize>,

    #[arg(long)]
    filters: Option<usize>,

    #[arg(long)]
    memory: Option<usize>,

    #[arg(long)]
    context: Option<usize>,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<ModelConfig> {
        if self.config != "paper" {
            return Err(Error::Config(format!(
                "unknown --config '{}', expected 'paper'",
                self.config
            )));
        }
        let mut cfg = ModelConfig::reference(self.arch, self.lookahead);
        if let Some(d) = self.depth {
            cfg.depth = d;
        }
        if let Some(n) = self.filters {
            cfg.filters = n;
        }
        if let Some(k) = self.memory {
            cfg.memory = k;
        }
        if let Some(c) = self.context {
            cfg.context = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic keyword dataset as WAV files plus a manifest.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        pos: usize,
        #[arg(long, default_value_t = 50)]
        neg: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Extract MFCC features from a WAV file into an FTRS dump.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Context frames to stack on each side (edge replication).
        #[arg(long, default_value_t = 0)]
        context: usize,
    },

    /// Train a detector on synthetic or manifest data.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthesize this many positive utterances (with --synth-neg).
        #[arg(long)]
        synth_pos: Option<usize>,
        #[arg(long)]
        synth_neg: Option<usize>,
        /// Train from a manifest written by synth-data instead.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Where to write the trained model.
        #[arg(long)]
        out: PathBuf,
        /// Also write the training log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 40)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        cv_fraction: f32,
        /// Disable the 50% keyword-drop augmentation.
        #[arg(long)]
        no_keyword_drop: bool,
    },

    /// Evaluate a model: DET curve and FRR at 1 false alarm per hour.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Manifest with positive and negative entries.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Or: synthesize this many positives...
        #[arg(long)]
        synth_pos: Option<usize>,
        /// ...and this many hours of negative audio.
        #[arg(long, default_value_t = 0.5)]
        synth_neg_hours: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the DET curve CSV here.
        #[arg(long)]
        det: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        suppression_ms: u32,
    },

    /// Stream audio through a model and print trigger events.
    Detect {
        #[arg(long)]
        model: PathBuf,
        /// WAV path, or "-" for raw 16-bit little-endian mono 16 kHz on stdin.
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long, default_value_t = 1000)]
        suppression_ms: u32,
    },

    /// Print parameter, MAC, receptive-field and delay accounting.
    Info {
        #[command(flatten)]
        config: ConfigArgs,
        /// Inspect a saved model instead of a fresh configuration.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },

    /// Compare analytic gradients against the 64-bit finite-difference oracle
    /// on a tiny stack.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },

    /// Check the SVDF -> S1DCNN reduction end to end over random models.
    VerifyEquivalence {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Randomize biases to nonzero; the routes must then diverge.
        #[arg(long)]
        negative_control: bool,
    },
}

/// Parse the argument list and run it to completion, returning the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    load(path).map_err(|e| Error::Data(format!("model file {}: {e}", path.display())))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::SynthData {
            seed,
            pos,
            neg,
            out_dir,
        } => cmd_synth_data(seed, pos, neg, &out_dir),
        Command::Features {
            input,
            output,
            context,
        } => {
            let audio = read_wav(&input)?;
            let feats = extract_features(&audio, &FrameSpec::default())?;
            let feats = if context > 0 {
                concat_context(&feats, context)
            } else {
                feats
            };
            write_features(&output, &feats)?;
            println!(
                "wrote {} ({}x{} features)",
                output.display(),
                feats.dim(),
                feats.frames()
            );
            Ok(())
        }
        Command::Train {
            config,
            seed,
            synth_pos,
            synth_neg,
            manifest,
            out,
            log,
            batch_size,
            max_epochs,
            cv_fraction,
            no_keyword_drop,
        } => {
            let cfg = config.to_config()?;
            let dataset = match (manifest, synth_pos, synth_neg) {
                (Some(path), None, None) => read_manifest(&path)?,
                (None, Some(p), Some(n)) => synth_dataset(seed, p, n),
                _ => {
                    return Err(Error::Config(
                        "pass either --manifest or both --synth-pos and --synth-neg".to_string(),
                    ))
                }
            };
            let hyper = TrainHyper {
                seed,
                batch_size,
                max_epochs,
                cv_fraction,
                keyword_drop: !no_keyword_drop,
                ..TrainHyper::default()
            };
            cmd_train(&cfg, &dataset, &hyper, &out, log.as_deref())
        }
        Command::Eval {
            model,
            manifest,
            synth_pos,
            synth_neg_hours,
            seed,
            det,
            suppression_ms,
        } => cmd_eval(
            &model,
            manifest.as_deref(),
            synth_pos,
            synth_neg_hours,
            seed,
            det.as_deref(),
            suppression_ms,
        ),
        Command::Detect {
            model,
            input,
            threshold,
            suppression_ms,
        } => cmd_detect(&model, &input, threshold, suppression_ms),
        Command::Info {
            config,
            model,
            json,
        } => {
            let model = match model {
                Some(path) => load_model(&path)?,
                None => build(&config.to_config()?, &mut Rng::new(0))?,
            };
            if json {
                print!("{}", info_json(&model));
            } else {
                print!("{}", info_text(&model));
            }
            Ok(())
        }
        Command::GradCheck { seed, eps } => cmd_grad_check(seed, eps),
        Command::VerifyEquivalence {
            seeds,
            negative_control,
        } => cmd_verify_equivalence(seeds, negative_control),
    }
}

fn cmd_synth_data(seed: u64, pos: usize, neg: usize, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let dataset = synth_dataset(seed, pos, neg);
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, utt) in dataset.iter().enumerate() {
        let rel = format!("utt_{i:05}.wav");
        write_wav(&out_dir.join(&rel), &utt.audio)?;
        entries.push((rel, utt));
    }
    let refs: Vec<(String, &Utterance)> = entries.iter().map(|(r, u)| (r.clone(), *u)).collect();
    write_manifest(&out_dir.join("manifest.txt"), &refs)?;
    println!(
        "wrote {} utterances ({pos} positive, {neg} negative) to {}",
        dataset.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &ModelConfig,
    dataset: &[Utterance],
    hyper: &TrainHyper,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let header = format!(
        "# desk-scale training: minibatch {} (reference 256), epoch = full dataset of {} utterances (reference 100k/500k per warm-up/main epoch)\n# seed={} arch={} lookahead={} max_epochs={}",
        hyper.batch_size,
        dataset.len(),
        hyper.seed,
        cfg.arch.name(),
        cfg.lookahead,
        hyper.max_epochs
    );
    println!("{header}");
    let outcome = train(cfg, dataset, hyper)?;
    let mut lines = String::new();
    for l in &outcome.log {
        lines.push_str(&l.to_string());
        lines.push('\n');
    }
    print!("{lines}");
    if let Some(path) = log_path {
        std::fs::write(path, format!("{header}\n{lines}"))?;
    }
    save(&outcome.model, out)?;
    println!("model written to {}", out.display());
    Ok(())
}

fn cmd_eval(
    model_path: &Path,
    manifest: Option<&Path>,
    synth_pos: Option<usize>,
    synth_neg_hours: f64,
    seed: u64,
    det_path: Option<&Path>,
    suppression_ms: u32,
) -> Result<()> {
    let model = load_model(model_path)?;
    let (positives, negatives) = match (manifest, synth_pos) {
        (Some(path), None) => {
            let utts = read_manifest(path)?;
            let (pos, neg): (Vec<_>, Vec<_>) = utts.into_iter().partition(|u| u.is_positive());
            (pos, neg.into_iter().map(|u| u.audio).collect())
        }
        (None, Some(p)) => (
            synth_dataset(seed, p, 0),
            synth_negative_stream(seed, synth_neg_hours * 3600.0, 60.0),
        ),
        _ => {
            return Err(Error::Config(
                "pass either --manifest or --synth-pos".to_string(),
            ))
        }
    };
    let report = evaluate(&model, &positives, &negatives, suppression_ms)?;
    if let Some(path) = det_path {
        let mut stdout = std::io::stdout();
        emit_det(&report, path, &mut stdout)?;
    } else {
        println!(
            "frr_at_1fa={} pos={} neg_hours={}",
            report.frr_at_1fa, report.pos_count, report.neg_hours
        );
    }
    Ok(())
}

fn cmd_detect(model_path: &Path, input: &str, threshold: f32, suppression_ms: u32) -> Result<()> {
    let model = load_model(model_path)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut state = StreamState::new(&model);
    let spec = FrameSpec {
        num_coeffs: model.config.feature_dim,
        ..FrameSpec::default()
    };

    if input == "-" {
        let mut framer = StreamingFramer::new(&spec, 16_000);
        let stdin = std::io::stdin();
        let mut reader = stdin.lock();
        let mut buf = [0u8; 8192];
        let mut carry: Option<u8> = None;
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            let mut bytes = Vec::with_capacity(n + 1);
            if let Some(b) = carry.take() {
                bytes.push(b);
            }
            bytes.extend_from_slice(&buf[..n]);
            if bytes.len() % 2 == 1 {
                carry = bytes.pop();
            }
            let samples: Vec<f32> = bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                .collect();
            let windows = framer.push(&samples);
            if windows.is_empty() {
                continue;
            }
            let feats = crate::frontend::mfcc(&windows, &spec, 16_000)?;
            for t in 0..feats.frames() {
                let step = state.detect_push(&model, &feats.frame(t), threshold, suppression_ms)?;
                if let Some(e) = step.event {
                    writeln!(out, "frame={} time_ms={} score={}", e.frame_index, e.time_ms, e.score)?;
                    out.flush()?;
                }
            }
        }
    } else {
        let audio = read_wav(Path::new(input))
            .map_err(|e| Error::Data(format!("audio file {input}: {e}")))?;
        let feats = extract_features(&audio, &spec)?;
        for t in 0..feats.frames() {
            let step = state.detect_push(&model, &feats.frame(t), threshold, suppression_ms)?;
            if let Some(e) = step.event {
                writeln!(out, "frame={} time_ms={} score={}", e.frame_index, e.time_ms, e.score)?;
            }
        }
    }
    for step in state.detect_flush(&model, threshold, suppression_ms)? {
        if let Some(e) = step.event {
            writeln!(out, "frame={} time_ms={} score={}", e.frame_index, e.time_ms, e.score)?;
        }
    }
    Ok(())
}

fn cmd_grad_check(seed: u64, eps: f64) -> Result<()> {
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
    let model = build(&cfg, &mut Rng::new(seed))?;
    // Re-roll the input until every ReLU pre-activation is clear of the kink.
    let mut input_seed = seed.wrapping_add(1);
    let input = loop {
        let mut rng = Rng::new(input_seed);
        let dim = cfg.input_dim();
        let t = 6;
        let feats = crate::frontend::FeatureSequence::new(
            Matrix::from_vec(dim, t, (0..dim * t).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .expect("dims"),
        );
        if relu_margin(&model, &feats)? > 0.02 {
            break feats;
        }
        input_seed = input_seed.wrapping_add(1);
    };
    let worst = grad_check(&model, &input, eps)?;
    println!("max_rel_error={worst} eps={eps} params={}", count_params(&model).total());
    if worst >= 1e-3 {
        return Err(Error::Data(format!(
            "gradient check failed: max relative error {worst} >= 1e-3"
        )));
    }
    Ok(())
}

/// Result of the reduction check over a batch of random models.
pub struct EquivalenceReport {
    pub seeds: u64,
    pub max_deviation: f32,
}

/// For each seed, build a random bias-free model, run the direct SVDF route
/// and the reduced staged route on random input, and track the worst
/// deviation. With `negative_control` the biases are randomized to nonzero
/// values (second activation forced to identity so masking cannot hide them)
/// and the unbiased SVDF route is compared against the biased staged route.
pub fn verify_equivalence(seeds: u64, negative_control: bool) -> Result<EquivalenceReport> {
    let devs: Vec<f32> = parallel::map_range(seeds as usize, |i| {
        let mut rng = Rng::new(0xE901_0000 + i as u64);
        let cfg = ModelConfig {
            feature_dim: 2 + rng.uniform_usize(7),
            context: rng.uniform_usize(3),
            depth: 1 + rng.uniform_usize(3),
            filters: 1 + rng.uniform_usize(6),
            memory: 1 + rng.uniform_usize(6),
            lookahead: 0,
            classes: 2,
            arch: Arch::Svdf,
            frame_hop_ms: 10,
        };
        let mut model = build(&cfg, &mut rng.split(1)).expect("valid config");
        if negative_control {
            for (unit, _) in &mut model.blocks {
                for v in &mut unit.feature_bias {
                    *v = rng.uniform(0.1, 0.5);
                }
                for v in &mut unit.time_bias {
                    *v = rng.uniform(0.1, 0.5);
                }
                unit.g2 = crate::layers::Activation::Identity;
            }
        }
        let t = 10 + rng.uniform_usize(80);
        let dim = cfg.input_dim();
        let feats = crate::frontend::FeatureSequence::new(
            Matrix::from_vec(dim, t, (0..dim * t).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .expect("dims"),
        );
        let svdf_route = model.forward_svdf_semantics(&feats).expect("forward");
        let unit_route = if negative_control {
            model.forward(&feats).expect("forward")
        } else {
            model
                .reduced_clone()
                .expect("svdf arch")
                .forward(&feats)
                .expect("forward")
        };
        let mut worst = 0.0f32;
        for (a, b) in svdf_route.data().iter().zip(unit_route.data()) {
            worst = worst.max((a - b).abs());
        }
        worst
    });
    Ok(EquivalenceReport {
        seeds,
        max_deviation: devs.iter().cloned().fold(0.0, f32::max),
    })
}

fn cmd_verify_equivalence(seeds: u64, negative_control: bool) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".to_string()));
    }
    let report = verify_equivalence(seeds, negative_control)?;
    println!(
        "seeds={} negative_control={} max_deviation={}",
        report.seeds, negative_control, report.max_deviation
    );
    if negative_control {
        if report.max_deviation <= 1e-3 {
            return Err(Error::Data(format!(
                "negative control failed to separate the routes: {}",
                report.max_deviation
            )));
        }
    } else if report.max_deviation >= 1e-5 {
        return Err(Error::Data(format!(
            "equivalence violated: max deviation {}",
            report.max_deviation
        )));
    }
    Ok(())
}
