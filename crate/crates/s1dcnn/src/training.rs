//! Desk-scale end-to-end training: label construction, keyword-drop negatives,
//! a synthetic keyword dataset, cross-entropy loss, Adam, and the two-stage
//! warm-up/main learning-rate schedule with rollback and early stopping.
//!
//! Everything is driven by a single seed and is bit-deterministic on one
//! platform: example order is fixed by the seed, and all parallel reductions
//! fold their partial results in index order.

use std::fmt;

use crate::error::{Error, Result};
use crate::frontend::{
    concat_context, extract_features, AudioBuffer, FeatureSequence, FrameSpec,
};
use crate::layers::{
    batchnorm_backward_batch, batchnorm_forward_batch, linear_backward, linear_forward,
    unit_backward, unit_forward_cached, BnGrads, LinearGrads, UnitCache, UnitGrads,
};
use crate::network::{build, posteriors_from_logits, Arch, Model, ModelConfig};
use crate::numerics::{Matrix, Rng};
use crate::oracle::{network_loss_train_f64, F64Params};
use crate::parallel;

/// Frames labeled as target before the keyword end time.
pub const LABEL_WINDOW: usize = 30;

/// Probability that a positive utterance has its keyword excised.
pub const KEYWORD_DROP_PROB: f32 = 0.5;

/// Keyword location in frame indices (present iff the utterance is positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeywordSpan {
    pub start_frame: usize,
    pub end_frame: usize,
}

/// One training or evaluation utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub audio: AudioBuffer,
    pub keyword: Option<KeywordSpan>,
}

impl Utterance {
    pub fn is_positive(&self) -> bool {
        self.keyword.is_some()
    }

    pub fn keyword_end_frame(&self) -> Option<usize> {
        self.keyword.map(|k| k.end_frame)
    }
}

/// Context-stacked features with a per-frame class label.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub features: FeatureSequence,
    pub labels: Vec<usize>,
}

/// Per-frame labels: a positive utterance marks the half-open window
/// `[end-30, end)` (clipped at zero) as the target class; negatives are all
/// non-target.
pub fn make_labels(utt: &Utterance, t: usize) -> Result<Vec<usize>> {
    make_labels_with_window(utt, t, LABEL_WINDOW)
}

/// [`make_labels`] with a configurable window; the `[end-window, end)`
/// reading of "window frames before the end time" is pinned here.
pub fn make_labels_with_window(utt: &Utterance, t: usize, window: usize) -> Result<Vec<usize>> {
    let mut labels = vec![0usize; t];
    if let Some(span) = utt.keyword {
        if span.end_frame > t {
            return Err(Error::Data(format!(
                "keyword end frame {} exceeds frame count {t}",
                span.end_frame
            )));
        }
        let start = span.end_frame.saturating_sub(window);
        for l in labels.iter_mut().take(span.end_frame).skip(start) {
            *l = 1;
        }
    }
    Ok(labels)
}

/// With probability 1/2, excise the keyword span (samples removed, not
/// silenced) and return the remainder as a negative utterance; otherwise
/// return the utterance unchanged.
pub fn drop_keyword(utt: &Utterance, rng: &mut Rng, spec: &FrameSpec) -> Utterance {
    let Some(span) = utt.keyword else {
        return utt.clone();
    };
    if rng.uniform(0.0, 1.0) >= KEYWORD_DROP_PROB {
        return utt.clone();
    }
    let hop = spec.hop_samples(utt.audio.sample_rate);
    let start = (span.start_frame * hop).min(utt.audio.samples.len());
    let end = (span.end_frame * hop).min(utt.audio.samples.len());
    let mut samples = Vec::with_capacity(utt.audio.samples.len() - (end - start));
    samples.extend_from_slice(&utt.audio.samples[..start]);
    samples.extend_from_slice(&utt.audio.samples[end..]);
    Utterance {
        audio: AudioBuffer::new(samples, utt.audio.sample_rate),
        keyword: None,
    }
}

const SYNTH_SAMPLE_RATE: u32 = 16_000;
const KEYWORD_TONES_HZ: [f64; 3] = [440.0, 880.0, 660.0];
const TONE_SEGMENT_SECS: f64 = 0.2;
const GAIN_CHOICES_DB: [f32; 3] = [-32.0, -20.0, 0.0];

/// Synthetic keyword corpus. A positive utterance embeds the three-tone
/// keyword (440, 880, 660 Hz; 200 ms each) in white noise at a random offset,
/// followed by a 0.5-2 s noise "query"; per-utterance gain is drawn from
/// {-32, -20, 0} dB and the keyword-to-noise ratio from 5-20 dB. Negatives
/// are either plain noise or the tones in a shuffled order. Fully determined
/// by the seed.
pub fn synth_dataset(seed: u64, n_pos: usize, n_neg: usize) -> Vec<Utterance> {
    let base = Rng::new(seed);
    let spec = FrameSpec::default();
    let hop = spec.hop_samples(SYNTH_SAMPLE_RATE);
    parallel::map_range(n_pos + n_neg, |i| {
        let mut rng = base.split(i as u64 + 1);
        let positive = i < n_pos;
        synth_utterance(&mut rng, positive, hop)
    })
}

fn synth_utterance(rng: &mut Rng, positive: bool, hop: usize) -> Utterance {
    let sr = SYNTH_SAMPLE_RATE as f64;
    let seg = (TONE_SEGMENT_SECS * sr) as usize;
    let offset = (rng.uniform(0.1, 0.7) as f64 * sr) as usize;
    let query = (rng.uniform(0.5, 2.0) as f64 * sr) as usize;

    let gain_db = *rng.choose(&GAIN_CHOICES_DB);
    let snr_db = rng.uniform(5.0, 20.0);
    let amp = 0.5f64 * 10f64.powf(gain_db as f64 / 20.0);
    let tone_rms = amp / 2f64.sqrt();
    let sigma = (tone_rms * 10f64.powf(-(snr_db as f64) / 20.0)) as f32;

    // Negatives: half plain noise, half the tones in a wrong order.
    let tones: Option<Vec<f64>> = if positive {
        Some(KEYWORD_TONES_HZ.to_vec())
    } else if rng.uniform(0.0, 1.0) < 0.5 {
        None
    } else {
        let mut order = KEYWORD_TONES_HZ.to_vec();
        while order == KEYWORD_TONES_HZ {
            rng.shuffle(&mut order);
        }
        Some(order)
    };

    let keyword_len = if tones.is_some() { 3 * seg } else { 0 };
    let total = offset + keyword_len.max(3 * seg) + query;
    let mut samples: Vec<f32> = (0..total).map(|_| sigma * rng.gauss()).collect();

    if let Some(order) = &tones {
        for (seg_idx, freq) in order.iter().enumerate() {
            let start = offset + seg_idx * seg;
            for i in 0..seg {
                let t = i as f64 / sr;
                samples[start + i] += (amp * (2.0 * std::f64::consts::PI * freq * t).sin()) as f32;
            }
        }
    }

    let audio = AudioBuffer::new(samples, SYNTH_SAMPLE_RATE);
    let keyword = if positive {
        Some(KeywordSpan {
            start_frame: offset / hop,
            end_frame: (offset + keyword_len) / hop,
        })
    } else {
        None
    };
    Utterance { audio, keyword }
}

/// Keyword-free audio for false-alarm measurement: chunks of roughly
/// `chunk_secs` built by concatenating synthetic negative utterances (noise
/// and shuffled-tone distractors) until `total_secs` is covered.
pub fn synth_negative_stream(seed: u64, total_secs: f64, chunk_secs: f64) -> Vec<AudioBuffer> {
    let base = Rng::new(seed ^ 0x4E45_4741);
    let hop = FrameSpec::default().hop_samples(SYNTH_SAMPLE_RATE);
    let chunk_samples = (chunk_secs * SYNTH_SAMPLE_RATE as f64) as usize;
    let chunks = (total_secs / chunk_secs).ceil() as usize;
    parallel::map_range(chunks, |i| {
        let mut rng = base.split(i as u64 + 1);
        let mut samples = Vec::with_capacity(chunk_samples);
        while samples.len() < chunk_samples {
            let utt = synth_utterance(&mut rng, false, hop);
            samples.extend_from_slice(&utt.audio.samples);
        }
        AudioBuffer::new(samples, SYNTH_SAMPLE_RATE)
    })
}

/// Mean per-frame cross-entropy and its gradient with respect to the logits,
/// `(softmax - one_hot) / T`.
pub fn loss(posteriors: &Matrix, labels: &[usize]) -> Result<(f32, Matrix)> {
    let classes = posteriors.rows();
    let t = posteriors.cols();
    if labels.len() != t {
        return Err(Error::shape(format!(
            "loss: {} labels for {t} frames",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of {classes} classes")));
    }
    let mut total = 0.0f32;
    let mut grad = Matrix::zeros(classes, t);
    for ti in 0..t {
        let y = labels[ti];
        let p = posteriors.at(y, ti).max(1e-12);
        total -= p.ln();
        for c in 0..classes {
            let indicator = if c == y { 1.0 } else { 0.0 };
            *grad.at_mut(c, ti) = (posteriors.at(c, ti) - indicator) / t as f32;
        }
    }
    Ok((total / t as f32, grad))
}

/// Adam optimizer state; moment shapes mirror the model's parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &Model, lr: f32) -> Self {
        let shapes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update over all parameter tensors.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step: tensor list mismatch".to_string()));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        if params[i].len() != grads[i].len() {
            return Err(Error::shape(format!(
                "adam_step: tensor {i} shape mismatch"
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..params[i].len() {
            let g = grads[i][j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            params[i][j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Learning-rate schedule stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Main,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Main => "main",
        }
    }
}

/// What the schedule decided at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    Continue,
    /// Restore the best snapshot and move to the main stage.
    RollbackToBest,
    /// Move to the main stage without a snapshot to restore.
    SwitchToMain,
    DecayLr,
    Stop,
}

impl ScheduleAction {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleAction::Continue => "continue",
            ScheduleAction::RollbackToBest => "rollback_to_best",
            ScheduleAction::SwitchToMain => "switch_to_main",
            ScheduleAction::DecayLr => "decay_lr",
            ScheduleAction::Stop => "stop",
        }
    }
}

pub const WARMUP_GROWTH: f32 = 1.4;
pub const MAIN_DECAY: f32 = 0.5;
pub const WARMUP_PATIENCE: usize = 8;
pub const MAIN_DECAY_PATIENCE: usize = 4;
pub const MAIN_STOP_PATIENCE: usize = 8;

/// Two-stage schedule state.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    pub stage: Stage,
    pub lr: f32,
    pub best_cv_loss: f32,
    pub epochs_since_improve: usize,
    pub best_snapshot: Option<Model>,
}

impl ScheduleState {
    pub fn new(initial_lr: f32) -> Self {
        ScheduleState {
            stage: Stage::Warmup,
            lr: initial_lr,
            best_cv_loss: f32::INFINITY,
            epochs_since_improve: 0,
            best_snapshot: None,
        }
    }
}

/// Apply the end-of-epoch schedule rule.
///
/// Warm-up: an improving cross-validation loss grows the learning rate by
/// 1.4x; eight consecutive non-improving epochs roll back to the best
/// snapshot and switch to the main stage (the learning rate carries over).
/// Main: four consecutive non-improving epochs halve the learning rate, eight
/// stop training. The caller restores the snapshot when the action asks for
/// it.
pub fn schedule_epoch(
    state: &mut ScheduleState,
    cv_loss: f32,
    model: &Model,
) -> ScheduleAction {
    if cv_loss < state.best_cv_loss {
        state.best_cv_loss = cv_loss;
        state.best_snapshot = Some(model.clone());
        state.epochs_since_improve = 0;
        if state.stage == Stage::Warmup {
            state.lr *= WARMUP_GROWTH;
        }
        return ScheduleAction::Continue;
    }
    state.epochs_since_improve += 1;
    match state.stage {
        Stage::Warmup => {
            if state.epochs_since_improve >= WARMUP_PATIENCE {
                state.stage = Stage::Main;
                state.epochs_since_improve = 0;
                if state.best_snapshot.is_some() {
                    ScheduleAction::RollbackToBest
                } else {
                    ScheduleAction::SwitchToMain
                }
            } else {
                ScheduleAction::Continue
            }
        }
        Stage::Main => {
            if state.epochs_since_improve >= MAIN_STOP_PATIENCE {
                ScheduleAction::Stop
            } else if state.epochs_since_improve == MAIN_DECAY_PATIENCE {
                state.lr *= MAIN_DECAY;
                ScheduleAction::DecayLr
            } else {
                ScheduleAction::Continue
            }
        }
    }
}

/// Gradients for every trainable tensor, in model declaration order.
pub struct ModelGrads {
    pub units: Vec<UnitGrads>,
    pub bns: Vec<BnGrads>,
    pub head: LinearGrads,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        ModelGrads {
            units: model.blocks.iter().map(|(u, _)| UnitGrads::zeros(u)).collect(),
            bns: model
                .blocks
                .iter()
                .map(|(_, bn)| BnGrads::zeros(bn.channels()))
                .collect(),
            head: LinearGrads::zeros(&model.head),
        }
    }

    /// Zero the unit bias gradients (the svdf arch has no bias parameters).
    pub fn clear_unit_bias(&mut self) {
        for g in &mut self.units {
            g.d_feature_bias.fill(0.0);
            g.d_time_bias.fill(0.0);
        }
    }

    /// Tensor views in the same order as [`Model::param_tensors`].
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for (u, b) in self.units.iter().zip(&self.bns) {
            out.push(u.d_feature_weights.data());
            out.push(&u.d_feature_bias);
            out.push(u.d_time_weights.data());
            out.push(&u.d_time_bias);
            out.push(&b.d_gamma);
            out.push(&b.d_beta);
        }
        out.push(self.head.d_weights.data());
        out.push(&self.head.d_bias);
        out
    }
}

fn add_unit_grads(into: &mut UnitGrads, from: &UnitGrads) {
    for (a, b) in into
        .d_feature_weights
        .data_mut()
        .iter_mut()
        .zip(from.d_feature_weights.data())
    {
        *a += b;
    }
    for (a, b) in into.d_feature_bias.iter_mut().zip(&from.d_feature_bias) {
        *a += b;
    }
    for (a, b) in into
        .d_time_weights
        .data_mut()
        .iter_mut()
        .zip(from.d_time_weights.data())
    {
        *a += b;
    }
    for (a, b) in into.d_time_bias.iter_mut().zip(&from.d_time_bias) {
        *a += b;
    }
}

/// Forward and backward over one minibatch of whole utterances with
/// training-mode batch norm (statistics pool all frames in the minibatch).
/// Returns the frame-weighted mean loss and the parameter gradients.
pub fn batch_forward_backward(
    model: &mut Model,
    batch: &[&LabeledExample],
) -> Result<(f32, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_forward_backward".to_string()));
    }
    for ex in batch {
        if ex.features.dim() != model.config.input_dim() {
            return Err(Error::shape(format!(
                "batch: example dim {} != model input dim {}",
                ex.features.dim(),
                model.config.input_dim()
            )));
        }
    }
    let depth = model.blocks.len();
    let total_frames: usize = batch.iter().map(|ex| ex.features.frames()).sum();

    // Forward, keeping per-block inputs and caches.
    let mut hs: Vec<Matrix> = batch.iter().map(|ex| ex.features.values().clone()).collect();
    let mut block_inputs: Vec<Vec<Matrix>> = Vec::with_capacity(depth);
    let mut unit_caches: Vec<Vec<UnitCache>> = Vec::with_capacity(depth);
    let mut bn_caches = Vec::with_capacity(depth);
    for d in 0..depth {
        let (unit, bn) = &mut model.blocks[d];
        let inputs = std::mem::take(&mut hs);
        let staged: Vec<(Matrix, UnitCache)> = parallel::map_slice(&inputs, |x| {
            unit_forward_cached(unit, x).expect("dims validated")
        });
        let mut outs = Vec::with_capacity(staged.len());
        let mut caches = Vec::with_capacity(staged.len());
        for (o, c) in staged {
            outs.push(o);
            caches.push(c);
        }
        let bn_cache = batchnorm_forward_batch(bn, &mut outs)?;
        block_inputs.push(inputs);
        unit_caches.push(caches);
        bn_caches.push(bn_cache);
        hs = outs;
    }

    // Head, softmax and loss. Per-utterance gradients are scaled by the
    // total frame count so the batch loss is the mean over all frames.
    let logits: Vec<Matrix> = parallel::map_slice(&hs, |h| {
        linear_forward(&model.head, h).expect("dims validated")
    });
    let mut total_loss = 0.0f32;
    let mut d_logits = Vec::with_capacity(batch.len());
    for (ex, lg) in batch.iter().zip(&logits) {
        let post = posteriors_from_logits(lg)?;
        let (l, mut g) = loss(&post, &ex.labels)?;
        let t = ex.features.frames() as f32;
        total_loss += l * t;
        let rescale = t / total_frames as f32;
        for v in g.data_mut() {
            *v *= rescale;
        }
        d_logits.push(g);
    }
    let mean_loss = total_loss / total_frames as f32;

    // Backward.
    let mut grads = ModelGrads::zeros(model);
    let mut d_hs: Vec<Matrix> = Vec::with_capacity(batch.len());
    for u in 0..batch.len() {
        let d_h = linear_backward(&model.head, &hs[u], &d_logits[u], &mut grads.head)?;
        d_hs.push(d_h);
    }
    for d in (0..depth).rev() {
        let (unit, bn) = &model.blocks[d];
        let d_after_unit = batchnorm_backward_batch(bn, &bn_caches[d], &d_hs, &mut grads.bns[d])?;
        let per_utt: Vec<(Matrix, UnitGrads)> = parallel::map_range(batch.len(), |u| {
            let mut local = UnitGrads::zeros(unit);
            let dx = unit_backward(
                unit,
                &block_inputs[d][u],
                &unit_caches[d][u],
                &d_after_unit[u],
                &mut local,
            )
            .expect("dims validated");
            (dx, local)
        });
        let mut next = Vec::with_capacity(batch.len());
        for (dx, local) in per_utt {
            add_unit_grads(&mut grads.units[d], &local);
            next.push(dx);
        }
        d_hs = next;
    }

    if model.config.arch == Arch::Svdf {
        grads.clear_unit_bias();
    }
    Ok((mean_loss, grads))
}

/// Inference-mode loss over a set of examples (frame-weighted mean).
pub fn evaluate_loss(model: &Model, examples: &[LabeledExample]) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluate_loss".to_string()));
    }
    let per: Vec<(f32, usize)> = parallel::map_slice(examples, |ex| {
        let post = model.forward(&ex.features).expect("dims validated");
        let (l, _) = loss(&post, &ex.labels).expect("labels validated");
        (l, ex.features.frames())
    });
    let total_frames: usize = per.iter().map(|&(_, t)| t).sum();
    let total: f32 = per.iter().map(|&(l, t)| l * t as f32).sum();
    Ok(total / total_frames as f32)
}

/// Fraction of frames whose argmax class matches the label.
pub fn frame_accuracy(model: &Model, examples: &[LabeledExample]) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("frame_accuracy".to_string()));
    }
    let per: Vec<(usize, usize)> = parallel::map_slice(examples, |ex| {
        let post = model.forward(&ex.features).expect("dims validated");
        let mut correct = 0;
        for t in 0..post.cols() {
            let mut best = 0;
            for c in 1..post.rows() {
                if post.at(c, t) > post.at(best, t) {
                    best = c;
                }
            }
            if best == ex.labels[t] {
                correct += 1;
            }
        }
        (correct, post.cols())
    });
    let correct: usize = per.iter().map(|&(c, _)| c).sum();
    let total: usize = per.iter().map(|&(_, t)| t).sum();
    Ok(correct as f32 / total as f32)
}

/// Training hyperparameters (desk scale).
#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub seed: u64,
    pub batch_size: usize,
    /// Hard cap on epochs; the schedule usually stops earlier.
    pub max_epochs: usize,
    pub initial_lr: f32,
    pub cv_fraction: f32,
    /// Apply the 50% keyword-drop augmentation to positive utterances.
    pub keyword_drop: bool,
    /// Frames labeled as target before each keyword end.
    pub label_window: usize,
    pub frame_spec: FrameSpec,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            seed: 0,
            batch_size: 32,
            max_epochs: 40,
            initial_lr: 1e-3,
            cv_fraction: 0.1,
            keyword_drop: true,
            label_window: LABEL_WINDOW,
            frame_spec: FrameSpec::default(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f32,
    pub train_loss: f32,
    pub cv_loss: f32,
    pub action: ScheduleAction,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} stage={} lr={} train_loss={} cv_loss={} action={}",
            self.epoch,
            self.stage.name(),
            self.lr,
            self.train_loss,
            self.cv_loss,
            self.action.name()
        )
    }
}

/// Result of a training run: the best cross-validation model and the log.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub cv_examples: Vec<LabeledExample>,
}

/// Turn utterances into context-stacked labeled examples.
pub fn prepare_examples(
    utterances: &[Utterance],
    spec: &FrameSpec,
    context: usize,
    label_window: usize,
) -> Result<Vec<LabeledExample>> {
    let feats: Vec<Result<LabeledExample>> = parallel::map_slice(utterances, |utt| {
        let mfcc = extract_features(&utt.audio, spec)?;
        let labels = make_labels_with_window(utt, mfcc.frames(), label_window)?;
        Ok(LabeledExample {
            features: concat_context(&mfcc, context),
            labels,
        })
    });
    feats.into_iter().collect()
}

/// Seed-stable split: utterance `i` lands in the cross-validation set when its
/// hash draw falls below `cv_fraction`.
pub fn is_cv_index(seed: u64, index: usize, cv_fraction: f32) -> bool {
    let mut rng = Rng::new(seed ^ 0x5EED_C0DE).split(index as u64 + 1);
    rng.uniform(0.0, 1.0) < cv_fraction
}

/// Train a model on the given utterances.
///
/// The pipeline: optional keyword-drop augmentation, a 10% seed-stable
/// cross-validation split, feature extraction with edge-replicated context
/// stacking, then minibatch Adam over shuffled whole utterances under the
/// two-stage schedule. Returns the best cross-validation model. Deviations
/// from the reference protocol (minibatch 32 instead of 256, epoch = full
/// synthetic set) are recorded in the log header by the CLI.
pub fn train(config: &ModelConfig, dataset: &[Utterance], hyper: &TrainHyper) -> Result<TrainOutcome> {
    config.validate()?;
    if hyper.frame_spec.num_coeffs != config.feature_dim {
        return Err(Error::Config(format!(
            "frame spec yields {} coefficients, model wants {}",
            hyper.frame_spec.num_coeffs, config.feature_dim
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("train: empty dataset".to_string()));
    }

    let base = Rng::new(hyper.seed);
    let mut model = build(config, &mut base.split(1))?;
    let mut drop_rng = base.split(2);
    let mut shuffle_rng = base.split(3);

    let augmented: Vec<Utterance> = if hyper.keyword_drop {
        dataset
            .iter()
            .map(|u| drop_keyword(u, &mut drop_rng, &hyper.frame_spec))
            .collect()
    } else {
        dataset.to_vec()
    };

    let mut train_utts = Vec::new();
    let mut cv_utts = Vec::new();
    for (i, utt) in augmented.iter().enumerate() {
        if is_cv_index(hyper.seed, i, hyper.cv_fraction) {
            cv_utts.push(utt.clone());
        } else {
            train_utts.push(utt.clone());
        }
    }
    if train_utts.is_empty() || cv_utts.is_empty() {
        return Err(Error::Data(format!(
            "split produced {} train / {} cv utterances; both must be non-empty",
            train_utts.len(),
            cv_utts.len()
        )));
    }

    let train_examples =
        prepare_examples(&train_utts, &hyper.frame_spec, config.context, hyper.label_window)?;
    let cv_examples =
        prepare_examples(&cv_utts, &hyper.frame_spec, config.context, hyper.label_window)?;

    let mut schedule = ScheduleState::new(hyper.initial_lr);
    let initial_cv = evaluate_loss(&model, &cv_examples)?;
    schedule.best_cv_loss = initial_cv;
    schedule.best_snapshot = Some(model.clone());

    let mut adam = AdamState::new(&model, schedule.lr);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_examples.len()).collect();

    for epoch in 1..=hyper.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f32;
        let mut epoch_frames = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &train_examples[i]).collect();
            let (l, grads) = batch_forward_backward(&mut model, &batch)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}: non-finite minibatch loss"
                )));
            }
            adam.lr = schedule.lr;
            let grad_tensors = grads.tensors();
            let mut params = model.param_tensors_mut();
            adam_step(&mut params, &grad_tensors, &mut adam)?;
            let frames: usize = batch.iter().map(|ex| ex.features.frames()).sum();
            epoch_loss += l * frames as f32;
            epoch_frames += frames;
        }
        let train_loss = epoch_loss / epoch_frames as f32;
        let cv_loss = evaluate_loss(&model, &cv_examples)?;
        if !cv_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: non-finite cross-validation loss"
            )));
        }

        let stage_before = schedule.stage;
        let action = schedule_epoch(&mut schedule, cv_loss, &model);
        log.push(EpochLog {
            epoch,
            stage: stage_before,
            lr: schedule.lr,
            train_loss,
            cv_loss,
            action,
        });
        match action {
            ScheduleAction::RollbackToBest => {
                model = schedule
                    .best_snapshot
                    .clone()
                    .expect("rollback requires a snapshot");
                // Fresh optimizer for the main stage.
                adam = AdamState::new(&model, schedule.lr);
            }
            ScheduleAction::Stop => break,
            _ => {}
        }
    }

    let best = schedule.best_snapshot.expect("snapshot seeded before epoch 1");
    Ok(TrainOutcome {
        model: best,
        log,
        cv_examples,
    })
}

/// Write a dataset manifest: one `key=value` record per line. Positive
/// entries carry the keyword span in frames; negatives just a path and label.
pub fn write_manifest(path: &std::path::Path, entries: &[(String, &Utterance)]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (rel, utt) in entries {
        match utt.keyword {
            Some(span) => writeln!(
                w,
                "path={rel} label=pos keyword_start_frame={} keyword_end_frame={}",
                span.start_frame, span.end_frame
            )?,
            None => writeln!(w, "path={rel} label=neg")?,
        }
    }
    Ok(())
}

/// Read a manifest written by [`write_manifest`], loading each WAV relative
/// to the manifest's directory.
pub fn read_manifest(path: &std::path::Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut rel = None;
        let mut label = None;
        let mut start = None;
        let mut end = None;
        for token in line.split_whitespace() {
            let (k, v) = token.split_once('=').ok_or_else(|| {
                Error::Data(format!("manifest line {}: bad token '{token}'", lineno + 1))
            })?;
            match k {
                "path" => rel = Some(v.to_string()),
                "label" => label = Some(v.to_string()),
                "keyword_start_frame" => start = Some(parse_frame(v, lineno)?),
                "keyword_end_frame" => end = Some(parse_frame(v, lineno)?),
                other => {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        let rel = rel
            .ok_or_else(|| Error::Data(format!("manifest line {}: missing path", lineno + 1)))?;
        let label = label
            .ok_or_else(|| Error::Data(format!("manifest line {}: missing label", lineno + 1)))?;
        let audio = crate::frontend::read_wav(&dir.join(&rel))?;
        let keyword = match label.as_str() {
            "pos" => {
                let (s, e) = (
                    start.ok_or_else(|| {
                        Error::Data(format!(
                            "manifest line {}: positive entry missing keyword_start_frame",
                            lineno + 1
                        ))
                    })?,
                    end.ok_or_else(|| {
                        Error::Data(format!(
                            "manifest line {}: positive entry missing keyword_end_frame",
                            lineno + 1
                        ))
                    })?,
                );
                Some(KeywordSpan {
                    start_frame: s,
                    end_frame: e,
                })
            }
            "neg" => None,
            other => {
                return Err(Error::Data(format!(
                    "manifest line {}: unknown label '{other}'",
                    lineno + 1
                )))
            }
        };
        out.push(Utterance { audio, keyword });
    }
    Ok(out)
}

fn parse_frame(v: &str, lineno: usize) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Data(format!("manifest line {}: bad frame index '{v}'", lineno + 1)))
}

/// Smallest |pre-activation| feeding a ReLU anywhere in the stack for this
/// input; gradient checks stay away from the kink by re-rolling inputs until
/// the margin is comfortable.
pub fn relu_margin(model: &Model, input: &FeatureSequence) -> Result<f32> {
    let mut m = model.clone();
    let mut hs = vec![input.values().clone()];
    let mut margin = f32::INFINITY;
    for d in 0..m.blocks.len() {
        let (unit, bn) = &mut m.blocks[d];
        let (_, cache) = unit_forward_cached(unit, &hs[0])?;
        if unit.g2 == crate::layers::Activation::Relu {
            for &v in cache.pre2.data() {
                margin = margin.min(v.abs());
            }
        }
        if unit.g1 == crate::layers::Activation::Relu {
            for &v in cache.pre1.data() {
                margin = margin.min(v.abs());
            }
        }
        let mut outs = vec![{
            let mut o = cache.pre2.clone();
            for v in o.data_mut() {
                *v = unit.g2.apply(*v);
            }
            o
        }];
        batchnorm_forward_batch(bn, &mut outs)?;
        hs = outs;
    }
    Ok(margin)
}

/// Compare analytic gradients against 64-bit central finite differences over
/// every parameter (training-mode forward, cross-entropy loss, alternating
/// frame labels). Reports the worst relative error, where each component is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-3)` so near-zero gradients are
/// compared absolutely.
pub fn grad_check(model: &Model, input: &FeatureSequence, eps: f64) -> Result<f64> {
    let labels: Vec<usize> = (0..input.frames()).map(|t| t % 2).collect();

    // Analytic gradients from the production f32 path (on a clone; training
    // mode mutates batch-norm running statistics).
    let mut work = model.clone();
    let example = LabeledExample {
        features: input.clone(),
        labels: labels.clone(),
    };
    let (_, grads) = batch_forward_backward(&mut work, &[&example])?;
    let analytic = grads.tensors();

    let params = F64Params::from_model(model);
    let mut worst = 0.0f64;
    for (ti, tensor) in params.tensors.iter().enumerate() {
        for j in 0..tensor.len() {
            let mut up = params.clone();
            up.tensors[ti][j] += eps;
            let mut dn = params.clone();
            dn.tensors[ti][j] -= eps;
            let fd = (network_loss_train_f64(model, &up, input, &labels)
                - network_loss_train_f64(model, &dn, input, &labels))
                / (2.0 * eps);
            let an = analytic[ti][j] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
