//! Scoring, threshold sweeps, DET-curve generation and the false-reject ratio
//! at a fixed false-alarms-per-hour operating point.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{extract_features, AudioBuffer, FrameSpec};
use crate::network::Model;
use crate::parallel;
use crate::streaming::{events_in_trace, stream_scores, suppression_frames};
use crate::training::Utterance;

/// One point of a detection-error-tradeoff curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f32,
    /// Fraction of positive utterances with max score below the threshold.
    pub frr: f32,
    pub fa_per_hour: f32,
}

/// Full evaluation result.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub det: Vec<DetPoint>,
    pub frr_at_1fa: f32,
    pub pos_count: usize,
    pub neg_hours: f64,
}

/// Smoothed target-class score trace of an audio buffer via the streaming
/// path (push every frame, then flush).
pub fn smoothed_trace(model: &Model, audio: &AudioBuffer) -> Result<Vec<f32>> {
    let feats = extract_features(audio, &frame_spec_for(model))?;
    stream_scores(model, &feats)
}

fn frame_spec_for(model: &Model) -> FrameSpec {
    FrameSpec {
        num_coeffs: model.config.feature_dim,
        ..FrameSpec::default()
    }
}

/// Utterance score: the maximum smoothed posterior anywhere in the utterance.
/// Short utterances are scored from whatever frames exist (flush semantics).
pub fn score_positive(model: &Model, utt: &Utterance) -> Result<f32> {
    let trace = smoothed_trace(model, &utt.audio)?;
    trace
        .iter()
        .cloned()
        .fold(None::<f32>, |acc, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::EmptyInput("score_positive: no frames".to_string()))
}

/// Number of trigger events over keyword-free audio at a threshold.
pub fn count_false_alarms(
    model: &Model,
    negative_audio: &AudioBuffer,
    threshold: f32,
    suppression_ms: u32,
) -> Result<usize> {
    let trace = smoothed_trace(model, negative_audio)?;
    let supp = suppression_frames(model.config.frame_hop_ms, suppression_ms);
    Ok(events_in_trace(&trace, threshold, supp).len())
}

/// Build the threshold sweep: every distinct positive score plus a uniform
/// 1001-point grid on [0, 1], deduplicated and sorted.
pub fn threshold_sweep(pos_scores: &[f32]) -> Vec<f32> {
    let mut thresholds: Vec<f32> = pos_scores.to_vec();
    thresholds.extend((0..=1000).map(|i| i as f32 / 1000.0));
    thresholds.sort_by(f32::total_cmp);
    thresholds.dedup();
    thresholds
}

/// Sweep thresholds over the positive scores and a negative event counter.
/// `neg_events_by_threshold` returns the number of alarms over all negative
/// audio at a given threshold.
pub fn det_curve<F>(pos_scores: &[f32], neg_events_by_threshold: F, neg_hours: f64) -> Vec<DetPoint>
where
    F: Fn(f32) -> usize + Sync + Send,
{
    let thresholds = threshold_sweep(pos_scores);
    let n_pos = pos_scores.len() as f32;
    parallel::map_slice(&thresholds, |&threshold| {
        let rejected = pos_scores.iter().filter(|&&s| s < threshold).count();
        let alarms = neg_events_by_threshold(threshold);
        DetPoint {
            threshold,
            frr: rejected as f32 / n_pos,
            fa_per_hour: (alarms as f64 / neg_hours) as f32,
        }
    })
}

/// Event counter over precomputed negative score traces.
pub fn trace_event_counter(
    neg_traces: &[Vec<f32>],
    suppression_frames: usize,
) -> impl Fn(f32) -> usize + Sync + Send + '_ {
    move |threshold| {
        neg_traces
            .iter()
            .map(|t| events_in_trace(t, threshold, suppression_frames).len())
            .sum()
    }
}

/// False-reject ratio at a target false-alarm rate, linearly interpolated in
/// the FA dimension between the bracketing curve points. When every point has
/// fewer alarms than the target, the minimum-threshold FRR is returned; when
/// no threshold reaches down to the target, the maximum-threshold FRR is.
pub fn frr_at_fa(det: &[DetPoint], target_fa_per_hour: f32) -> Result<f32> {
    if det.is_empty() {
        return Err(Error::Data("frr_at_fa: empty DET curve".to_string()));
    }
    // Points are sorted by threshold; fa_per_hour is non-increasing.
    let first = &det[0];
    if first.fa_per_hour < target_fa_per_hour {
        return Ok(first.frr);
    }
    for pair in det.windows(2) {
        let (hi, lo) = (&pair[0], &pair[1]);
        if hi.fa_per_hour >= target_fa_per_hour && lo.fa_per_hour <= target_fa_per_hour {
            if hi.fa_per_hour == lo.fa_per_hour {
                return Ok(hi.frr);
            }
            let w = (hi.fa_per_hour - target_fa_per_hour) / (hi.fa_per_hour - lo.fa_per_hour);
            return Ok(hi.frr + w * (lo.frr - hi.frr));
        }
    }
    Ok(det[det.len() - 1].frr)
}

/// Full evaluation: score positives, trace negatives, sweep thresholds.
pub fn evaluate(
    model: &Model,
    positives: &[Utterance],
    negatives: &[AudioBuffer],
    suppression_ms: u32,
) -> Result<EvalReport> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("evaluate: no positive utterances".to_string()));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyInput("evaluate: no negative audio".to_string()));
    }
    let pos_scores: Vec<f32> = parallel::map_slice(positives, |utt| {
        score_positive(model, utt).expect("positive utterance scorable")
    });
    let neg_traces: Vec<Vec<f32>> = parallel::map_slice(negatives, |audio| {
        smoothed_trace(model, audio).expect("negative audio scorable")
    });
    let neg_hours: f64 = negatives.iter().map(|a| a.duration_secs() / 3600.0).sum();
    let supp = suppression_frames(model.config.frame_hop_ms, suppression_ms);
    let det = det_curve(&pos_scores, trace_event_counter(&neg_traces, supp), neg_hours);
    let frr = frr_at_fa(&det, 1.0)?;
    Ok(EvalReport {
        det,
        frr_at_1fa: frr,
        pos_count: positives.len(),
        neg_hours,
    })
}

/// Write the DET curve as CSV (`threshold,frr,fa_per_hour`, one header row)
/// and the one-line summary to `summary_out`.
pub fn emit_det<W: Write>(report: &EvalReport, csv_path: &Path, summary_out: &mut W) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv_path)?);
    writeln!(w, "threshold,frr,fa_per_hour")?;
    for p in &report.det {
        writeln!(w, "{:.8e},{:.8e},{:.8e}", p.threshold, p.frr, p.fa_per_hour)?;
    }
    w.flush()?;
    writeln!(
        summary_out,
        "frr_at_1fa={} pos={} neg_hours={}",
        report.frr_at_1fa, report.pos_count, report.neg_hours
    )?;
    Ok(())
}
