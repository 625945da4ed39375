//! Frame-synchronous stateful inference.
//!
//! Ring buffers hold the context window, each block's last `K` first-stage
//! outputs, and the trailing score-average window, so memory does not grow
//! with stream length. All buffers start zero-filled and end-of-stream
//! flushing pads with zeros at the same places batch inference does, which
//! makes the emitted score sequence bit-identical to the batch path.

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::network::Model;
use crate::numerics::softmax;

/// Posteriors averaged over this many trailing frames to form the score.
pub const SCORE_WINDOW: usize = 30;

/// Class index of the target (trigger) class in the classifier output.
pub const TARGET_CLASS: usize = 1;

/// A threshold crossing emitted by the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerEvent {
    /// Logical (input-aligned) frame index of the smoothed score.
    pub frame_index: usize,
    /// Frame index converted through the hop duration.
    pub time_ms: f64,
    pub score: f32,
}

/// Result of one detector push: the emitted score (if past warm-up) and the
/// trigger event (if the score crossed the threshold outside suppression).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectStep {
    pub score: Option<(usize, f32)>,
    pub event: Option<TriggerEvent>,
}

struct BlockState {
    /// Last `K` first-stage outputs, indexed by absolute step modulo `K`.
    ring: Vec<Vec<f32>>,
    inputs_seen: usize,
}

/// Per-stream inference state for one model. A model may serve many streams
/// concurrently; one stream is driven by a single caller.
pub struct StreamState {
    feature_dim: usize,
    context: usize,
    /// Last `2C+1` raw feature frames, zero-initialized.
    context_ring: Vec<Vec<f32>>,
    frames_seen: usize,
    blocks: Vec<BlockState>,
    score_ring: Vec<f32>,
    scores_held: usize,
    emitted: usize,
    suppression_until: usize,
    flushed: bool,
}

impl StreamState {
    pub fn new(model: &Model) -> Self {
        let cfg = &model.config;
        StreamState {
            feature_dim: cfg.feature_dim,
            context: cfg.context,
            context_ring: vec![vec![0.0; cfg.feature_dim]; 2 * cfg.context + 1],
            frames_seen: 0,
            blocks: (0..cfg.depth)
                .map(|_| BlockState {
                    ring: vec![vec![0.0; cfg.filters]; cfg.memory],
                    inputs_seen: 0,
                })
                .collect(),
            score_ring: vec![0.0; SCORE_WINDOW],
            scores_held: 0,
            emitted: 0,
            suppression_until: 0,
            flushed: false,
        }
    }

    /// Pushes until the first score: `C + L*D` warm-up frames, then one score
    /// per push.
    pub fn warmup_frames(model: &Model) -> usize {
        model.config.context + model.config.lookahead * model.config.depth
    }

    /// Fixed buffer footprint: (context slots, first-stage slots, score slots).
    pub fn buffer_capacities(&self) -> (usize, usize, usize) {
        (
            self.context_ring.len(),
            self.blocks.iter().map(|b| b.ring.len()).sum(),
            self.score_ring.len(),
        )
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Feed one raw feature frame; once warm-up is complete this returns the
    /// logical frame index and its smoothed target-class score.
    pub fn push_frame(&mut self, model: &Model, frame: &[f32]) -> Result<Option<(usize, f32)>> {
        if self.flushed {
            return Err(Error::State(
                "push_frame called after flush".to_string(),
            ));
        }
        if frame.len() != self.feature_dim {
            return Err(Error::shape(format!(
                "push_frame: expected {}-dim frame, got {}",
                self.feature_dim,
                frame.len()
            )));
        }
        Ok(self.push_raw(model, frame))
    }

    fn push_raw(&mut self, model: &Model, frame: &[f32]) -> Option<(usize, f32)> {
        let span = self.context_ring.len();
        let slot = self.frames_seen % span;
        self.context_ring[slot].copy_from_slice(frame);
        self.frames_seen += 1;

        // Context vector for logical frame j = frames_seen-1-C becomes
        // available once j+C frames have arrived; earlier left context reads
        // the ring's zero initialization, matching batch zero padding.
        if self.frames_seen < self.context + 1 {
            return None;
        }
        let newest = self.frames_seen - 1;
        let j = newest - self.context;
        let mut stacked = vec![0.0f32; self.feature_dim * span];
        for (block, idx) in (j as isize - self.context as isize
            ..=j as isize + self.context as isize)
            .enumerate()
        {
            if idx < 0 {
                continue; // zero left pad
            }
            let src = &self.context_ring[idx as usize % span];
            stacked[block * self.feature_dim..(block + 1) * self.feature_dim]
                .copy_from_slice(src);
        }

        let a1 = first_stage(model, 0, &stacked);
        self.run_from(model, 0, a1)
    }

    /// Insert a first-stage vector into block `b`'s ring and, once the block
    /// has `L` of lookahead in hand, return its normalized output frame.
    fn block_insert(&mut self, model: &Model, b: usize, a1: Vec<f32>) -> Option<Vec<f32>> {
        let cfg = &model.config;
        let (unit, bn) = &model.blocks[b];
        let k = cfg.memory;
        let l = cfg.lookahead;
        let state = &mut self.blocks[b];
        let s = state.inputs_seen;
        state.ring[s % k] = a1;
        state.inputs_seen += 1;
        if s < l {
            return None;
        }
        let u = s - l; // output step: taps span [u-(K-1-L), u+L] = [s-K+1, s]
        let shift = k as isize - 1 - l as isize;
        let mut out = vec![0.0f32; cfg.filters];
        for (n, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for ki in 0..k {
                let tap = u as isize - shift + ki as isize;
                if tap >= 0 {
                    acc += unit.time_weights.at(n, ki) * state.ring[tap as usize % k][n];
                }
            }
            *o = bn.apply_infer(n, unit.g2.apply(acc + unit.time_bias[n]));
        }
        Some(out)
    }

    /// Drive a first-stage vector into block `b` and cascade any emission
    /// through the remaining blocks, the head and the score average.
    fn run_from(&mut self, model: &Model, b: usize, a1: Vec<f32>) -> Option<(usize, f32)> {
        let depth = model.blocks.len();
        let mut cur = self.block_insert(model, b, a1)?;
        for nb in b + 1..depth {
            let next_a1 = first_stage(model, nb, &cur);
            cur = self.block_insert(model, nb, next_a1)?;
        }

        let logits = head_logits(model, &cur);
        let probs = softmax(&logits).expect("classes >= 1");
        let p = probs[TARGET_CLASS];

        let slot = self.emitted % SCORE_WINDOW;
        self.score_ring[slot] = p;
        if self.scores_held < SCORE_WINDOW {
            self.scores_held += 1;
        }
        let frame_index = self.emitted;
        self.emitted += 1;

        // Mean over the available window, summed oldest to newest so the
        // result is bit-identical to the batch trailing mean.
        let held = self.scores_held;
        let mut sum = 0.0f32;
        for i in 0..held {
            let logical = frame_index + 1 - held + i;
            sum += self.score_ring[logical % SCORE_WINDOW];
        }
        Some((frame_index, sum / held as f32))
    }

    /// Emit the `C + L*D` scores still owed at end of stream.
    ///
    /// The context stage is padded with zero feature frames; each block's
    /// remaining outputs are then produced by padding its own ring with zero
    /// first-stage entries, exactly where batch inference zero-pads. Feeding
    /// zero feature frames through the full stack instead would inject
    /// `g1(bias)` into the rings and diverge from the batch output for models
    /// with trained biases.
    pub fn flush(&mut self, model: &Model) -> Result<Vec<(usize, f32)>> {
        if self.flushed {
            return Err(Error::State("flush called twice".to_string()));
        }
        let cfg = &model.config;
        let mut scores = Vec::new();
        let zero_frame = vec![0.0f32; self.feature_dim];
        for _ in 0..cfg.context {
            if let Some(s) = self.push_raw(model, &zero_frame) {
                scores.push(s);
            }
        }
        for b in 0..cfg.depth {
            for _ in 0..cfg.lookahead {
                let zero_a1 = vec![0.0f32; cfg.filters];
                if let Some(s) = self.run_from(model, b, zero_a1) {
                    scores.push(s);
                }
            }
        }
        self.flushed = true;
        Ok(scores)
    }

    /// Push a frame and apply the trigger rule: fire when the smoothed score
    /// reaches `threshold` and the frame is outside the suppression window,
    /// then suppress for `suppression_ms`.
    pub fn detect_push(
        &mut self,
        model: &Model,
        frame: &[f32],
        threshold: f32,
        suppression_ms: u32,
    ) -> Result<DetectStep> {
        let score = self.push_frame(model, frame)?;
        Ok(self.apply_trigger(model, score, threshold, suppression_ms))
    }

    /// Flush and apply the trigger rule to the remaining scores.
    pub fn detect_flush(
        &mut self,
        model: &Model,
        threshold: f32,
        suppression_ms: u32,
    ) -> Result<Vec<DetectStep>> {
        let scores = self.flush(model)?;
        Ok(scores
            .into_iter()
            .map(|s| self.apply_trigger(model, Some(s), threshold, suppression_ms))
            .collect())
    }

    fn apply_trigger(
        &mut self,
        model: &Model,
        score: Option<(usize, f32)>,
        threshold: f32,
        suppression_ms: u32,
    ) -> DetectStep {
        let mut event = None;
        if let Some((frame_index, s)) = score {
            if s >= threshold && frame_index >= self.suppression_until {
                self.suppression_until =
                    frame_index + suppression_frames(model.config.frame_hop_ms, suppression_ms);
                event = Some(TriggerEvent {
                    frame_index,
                    time_ms: frame_index as f64 * model.config.frame_hop_ms as f64,
                    score: s,
                });
            }
        }
        DetectStep { score, event }
    }
}

fn first_stage(model: &Model, b: usize, input: &[f32]) -> Vec<f32> {
    let (unit, _) = &model.blocks[b];
    let n = unit.filters();
    let mut out = vec![0.0f32; n];
    for (ni, o) in out.iter_mut().enumerate() {
        let mut acc = unit.feature_bias[ni];
        let row = unit.feature_weights.row(ni);
        for fi in 0..input.len() {
            acc += row[fi] * input[fi];
        }
        *o = unit.g1.apply(acc);
    }
    out
}

fn head_logits(model: &Model, h: &[f32]) -> Vec<f32> {
    let lin = &model.head;
    let mut out = vec![0.0f32; lin.output_dim()];
    for (oi, o) in out.iter_mut().enumerate() {
        let mut acc = lin.bias[oi];
        let row = lin.weights.row(oi);
        for (ii, &v) in h.iter().enumerate() {
            acc += row[ii] * v;
        }
        *o = acc;
    }
    out
}

/// Suppression window in frames (rounded up).
pub fn suppression_frames(hop_ms: u32, suppression_ms: u32) -> usize {
    (suppression_ms as usize).div_ceil(hop_ms as usize)
}

/// Replay the trigger rule over a precomputed smoothed-score trace. Matches
/// [`StreamState::detect_push`] event for event.
pub fn events_in_trace(trace: &[f32], threshold: f32, suppression_frames: usize) -> Vec<usize> {
    let mut events = Vec::new();
    let mut until = 0usize;
    for (i, &s) in trace.iter().enumerate() {
        if s >= threshold && i >= until {
            events.push(i);
            until = i + suppression_frames;
        }
    }
    events
}

/// Batch-convention scores: zero-padded context stacking, full forward, then
/// the trailing mean over up to [`SCORE_WINDOW`] posteriors. The streaming
/// path reproduces this sequence exactly.
pub fn batch_scores(model: &Model, mfcc: &FeatureSequence) -> Result<Vec<f32>> {
    let posteriors = model.batch_posteriors(mfcc)?;
    Ok(smooth_trailing(posteriors.row(TARGET_CLASS)))
}

/// Trailing mean over up to [`SCORE_WINDOW`] values, summed in time order.
pub fn smooth_trailing(p: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(p.len());
    for t in 0..p.len() {
        let start = t + 1 - (t + 1).min(SCORE_WINDOW);
        let mut sum = 0.0f32;
        for &v in &p[start..=t] {
            sum += v;
        }
        out.push(sum / (t - start + 1) as f32);
    }
    out
}

/// Run the full streaming path (push every frame, then flush) and collect the
/// smoothed score sequence.
pub fn stream_scores(model: &Model, mfcc: &FeatureSequence) -> Result<Vec<f32>> {
    let mut state = StreamState::new(model);
    let mut out = Vec::with_capacity(mfcc.frames());
    for t in 0..mfcc.frames() {
        if let Some((_, s)) = state.push_frame(model, &mfcc.frame(t))? {
            out.push(s);
        }
    }
    for (_, s) in state.flush(model)? {
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build, Arch, Model, ModelConfig};
    use crate::numerics::{Matrix, Rng};

    fn tiny_config(lookahead: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            context: 2,
            depth: 2,
            filters: 2,
            memory: 3,
            lookahead,
            classes: 2,
            arch: Arch::S1dcnn,
            frame_hop_ms: 10,
        }
    }

    fn random_feats(rng: &mut Rng, f: usize, t: usize) -> FeatureSequence {
        FeatureSequence::new(
            Matrix::from_vec(f, t, (0..f * t).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap(),
        )
    }

    /// Give a built model the kind of state training would: nonzero biases and
    /// non-trivial batch-norm statistics. Parity must hold for these too.
    fn roughen(model: &mut Model, seed: u64) {
        let mut rng = Rng::new(seed);
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
            for v in &mut bn.gamma {
                *v = rng.uniform(0.8, 1.2);
            }
            for v in &mut bn.beta_shift {
                *v = rng.uniform(-0.2, 0.2);
            }
        }
    }

    #[test]
    fn warmup_emits_nothing() {
        let cfg = tiny_config(1);
        let model = build(&cfg, &mut Rng::new(1)).unwrap();
        let mut state = StreamState::new(&model);
        assert!(StreamState::warmup_frames(&model) > 0);
        let out = state.push_frame(&model, &[0.1, 0.2, 0.3]).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn first_score_arrives_exactly_after_warmup() {
        for l in 0..3 {
            let cfg = tiny_config(l);
            let model = build(&cfg, &mut Rng::new(2)).unwrap();
            let warmup = StreamState::warmup_frames(&model);
            let mut state = StreamState::new(&model);
            let mut rng = Rng::new(3);
            for push in 1..=warmup + 3 {
                let frame: Vec<f32> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let out = state.push_frame(&model, &frame).unwrap();
                if push <= warmup {
                    assert!(out.is_none(), "L={l}: push {push} emitted early");
                } else {
                    let (idx, _) = out.expect("score after warm-up");
                    assert_eq!(idx, push - warmup - 1, "L={l}");
                }
            }
        }
    }

    #[test]
    fn fresh_streams_are_independent() {
        let cfg = tiny_config(1);
        let model = build(&cfg, &mut Rng::new(4)).unwrap();
        let mut a = StreamState::new(&model);
        let mut b = StreamState::new(&model);
        let mut rng = Rng::new(5);
        // Advance `a` well past warm-up before `b` starts.
        let mut frames = Vec::new();
        for _ in 0..20 {
            frames.push((0..3).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f32>>());
        }
        for f in &frames {
            a.push_frame(&model, f).unwrap();
        }
        let from_b: Vec<_> = frames
            .iter()
            .filter_map(|f| b.push_frame(&model, f).unwrap())
            .collect();
        let mut a2 = StreamState::new(&model);
        let from_a2: Vec<_> = frames
            .iter()
            .filter_map(|f| a2.push_frame(&model, f).unwrap())
            .collect();
        assert_eq!(from_b, from_a2);
    }

    #[test]
    fn push_flush_conserves_frame_count() {
        for l in 0..3 {
            let cfg = tiny_config(l);
            let model = build(&cfg, &mut Rng::new(6)).unwrap();
            let mut rng = Rng::new(7);
            for t in [0usize, 1, 3, 7, 40] {
                let feats = random_feats(&mut rng, 3, t.max(1));
                let mut state = StreamState::new(&model);
                let mut count = 0;
                for ti in 0..t {
                    if state.push_frame(&model, &feats.frame(ti)).unwrap().is_some() {
                        count += 1;
                    }
                }
                count += state.flush(&model).unwrap().len();
                assert_eq!(count, t, "L={l} T={t}");
            }
        }
    }

    #[test]
    fn flush_on_fresh_stream_is_empty() {
        let cfg = tiny_config(2);
        let model = build(&cfg, &mut Rng::new(8)).unwrap();
        let mut state = StreamState::new(&model);
        assert!(state.flush(&model).unwrap().is_empty());
    }

    #[test]
    fn push_after_flush_is_state_error() {
        let cfg = tiny_config(0);
        let model = build(&cfg, &mut Rng::new(9)).unwrap();
        let mut state = StreamState::new(&model);
        state.flush(&model).unwrap();
        assert!(matches!(
            state.push_frame(&model, &[0.0, 0.0, 0.0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn constant_posterior_smooths_to_itself() {
        // Zero weights and biases give uniform posteriors, so every smoothed
        // score must be exactly the constant posterior.
        let cfg = tiny_config(0);
        let mut model = build(&cfg, &mut Rng::new(10)).unwrap();
        for (unit, _) in &mut model.blocks {
            unit.feature_weights.data_mut().fill(0.0);
            unit.time_weights.data_mut().fill(0.0);
        }
        model.head.weights.data_mut().fill(0.0);
        let mut state = StreamState::new(&model);
        let mut rng = Rng::new(11);
        for i in 0..50 {
            let frame: Vec<f32> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            if let Some((_, s)) = state.push_frame(&model, &frame).unwrap() {
                assert_eq!(s, 0.5, "push {i}");
            }
        }
    }

    #[test]
    fn streaming_matches_batch_bit_for_bit() {
        let mut worst = 0.0f32;
        for seed in 0..6 {
            let cfg = tiny_config((seed % 3) as usize);
            let mut model = build(&cfg, &mut Rng::new(100 + seed)).unwrap();
            roughen(&mut model, 200 + seed);
            let feats = random_feats(&mut Rng::new(300 + seed), 3, 60);
            let batch = batch_scores(&model, &feats).unwrap();
            let streamed = stream_scores(&model, &feats).unwrap();
            assert_eq!(batch.len(), streamed.len());
            for (a, b) in batch.iter().zip(&streamed) {
                worst = worst.max((a - b).abs());
                assert_eq!(a, b, "seed {seed}");
            }
        }
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn streaming_parity_on_reference_model() {
        let cfg = ModelConfig::reference(Arch::S1dcnn, 1);
        let mut model = build(&cfg, &mut Rng::new(400)).unwrap();
        roughen(&mut model, 401);
        let feats = random_feats(&mut Rng::new(402), 13, 150);
        let batch = batch_scores(&model, &feats).unwrap();
        let streamed = stream_scores(&model, &feats).unwrap();
        assert_eq!(batch.len(), 150);
        assert_eq!(batch, streamed);
    }

    #[test]
    fn buffers_do_not_grow() {
        let cfg = tiny_config(1);
        let model = build(&cfg, &mut Rng::new(12)).unwrap();
        let mut state = StreamState::new(&model);
        let caps = state.buffer_capacities();
        assert_eq!(caps, (5, 6, SCORE_WINDOW));
        let frame = [0.25f32, -0.5, 0.125];
        for _ in 0..1_000_000 {
            state.push_frame(&model, &frame).unwrap();
        }
        assert_eq!(state.buffer_capacities(), caps);
        assert_eq!(state.frames_seen(), 1_000_000);
    }

    #[test]
    fn determinism_across_runs() {
        let cfg = tiny_config(2);
        let model = build(&cfg, &mut Rng::new(13)).unwrap();
        let feats = random_feats(&mut Rng::new(14), 3, 80);
        let a = stream_scores(&model, &feats).unwrap();
        let b = stream_scores(&model, &feats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trigger_threshold_zero_fires_then_suppresses() {
        let cfg = tiny_config(0);
        let model = build(&cfg, &mut Rng::new(15)).unwrap();
        let mut state = StreamState::new(&model);
        let mut rng = Rng::new(16);
        let mut events = Vec::new();
        for _ in 0..250 {
            let frame: Vec<f32> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let step = state.detect_push(&model, &frame, 0.0, 1000).unwrap();
            if let Some(e) = step.event {
                events.push(e.frame_index);
            }
        }
        // Warm-up is C=2 frames, so 248 scores: events at 0, 100, 200.
        assert_eq!(events, vec![0, 100, 200]);
    }

    #[test]
    fn trigger_above_one_never_fires() {
        let cfg = tiny_config(0);
        let model = build(&cfg, &mut Rng::new(17)).unwrap();
        let mut state = StreamState::new(&model);
        let mut rng = Rng::new(18);
        for _ in 0..100 {
            let frame: Vec<f32> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let step = state.detect_push(&model, &frame, 1.0001, 1000).unwrap();
            assert!(step.event.is_none());
        }
    }

    #[test]
    fn trace_replay_matches_live_detector() {
        let cfg = tiny_config(1);
        let model = build(&cfg, &mut Rng::new(19)).unwrap();
        let feats = random_feats(&mut Rng::new(20), 3, 120);
        let trace = stream_scores(&model, &feats).unwrap();
        let threshold = trace[40];
        let supp = suppression_frames(10, 300);

        let mut state = StreamState::new(&model);
        let mut live = Vec::new();
        for t in 0..feats.frames() {
            let step = state.detect_push(&model, &feats.frame(t), threshold, 300).unwrap();
            if let Some(e) = step.event {
                live.push(e.frame_index);
            }
        }
        for step in state.detect_flush(&model, threshold, 300).unwrap() {
            if let Some(e) = step.event {
                live.push(e.frame_index);
            }
        }
        assert_eq!(live, events_in_trace(&trace, threshold, supp));
    }

    #[test]
    fn crafted_trace_two_events_with_suppression() {
        // Crossings three seconds apart with a one second suppression window.
        let mut trace = vec![0.1f32; 600];
        trace[50] = 0.9;
        trace[350] = 0.9;
        let events = events_in_trace(&trace, 0.5, suppression_frames(10, 1000));
        assert_eq!(events, vec![50, 350]);
    }
}
