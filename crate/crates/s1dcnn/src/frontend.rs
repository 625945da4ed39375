//! Audio ingestion, framing, MFCC extraction, context-frame concatenation and
//! gain augmentation.
//!
//! The processing chain is: 25 ms Hamming windows with 10 ms hop, power
//! spectrum via a 512-point FFT, 20 triangular mel filters spanning 0-8000 Hz,
//! log with a 1e-10 floor, then an orthonormal DCT-II keeping 13 coefficients.
//! No pre-emphasis, no deltas, no cepstral mean normalization. All internal
//! spectral math runs in f64 and is bit-deterministic for a given input.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::parallel;

/// Normalized mono audio.
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    /// Samples in [-1, 1] (gain augmentation may push values outside).
    pub samples: Vec<f32>,
    /// Sample rate in Hz; the pipeline expects 16000.
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioBuffer {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis frame geometry and coefficient count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    pub window_ms: u32,
    pub hop_ms: u32,
    pub num_coeffs: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            window_ms: 25,
            hop_ms: 10,
            num_coeffs: 13,
        }
    }
}

impl FrameSpec {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms as usize * sample_rate as usize) / 1000
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms as usize * sample_rate as usize) / 1000
    }
}

/// `F x T` matrix of per-frame features; column `t` is the feature vector of
/// frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Matrix,
}

impl FeatureSequence {
    pub fn new(values: Matrix) -> Self {
        FeatureSequence { values }
    }

    /// Feature dimension F.
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    /// Frame count T.
    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Feature vector of frame `t` (copied; columns are strided).
    pub fn frame(&self, t: usize) -> Vec<f32> {
        self.values.col(t)
    }
}

/// Scale every sample by `10^(p_db/20)`. No clipping is applied, so values may
/// leave [-1, 1].
pub fn apply_gain(audio: &AudioBuffer, p_db: f32) -> AudioBuffer {
    let scale = 10f64.powf(p_db as f64 / 20.0) as f32;
    AudioBuffer {
        samples: audio.samples.iter().map(|s| s * scale).collect(),
        sample_rate: audio.sample_rate,
    }
}

/// Split audio into Hamming-windowed frames.
///
/// Produces `floor((len - window)/hop) + 1` frames; errors when the signal is
/// shorter than one window.
pub fn frame_signal(audio: &AudioBuffer, spec: &FrameSpec) -> Result<Vec<Vec<f32>>> {
    let window = spec.window_samples(audio.sample_rate);
    let hop = spec.hop_samples(audio.sample_rate);
    if audio.samples.len() < window {
        return Err(Error::EmptyInput(format!(
            "signal has {} samples, one window needs {}",
            audio.samples.len(),
            window
        )));
    }
    let t = (audio.samples.len() - window) / hop + 1;
    let ham = hamming(window);
    let frames = parallel::map_range(t, |i| {
        let start = i * hop;
        audio.samples[start..start + window]
            .iter()
            .zip(&ham)
            .map(|(&s, &w)| (s as f64 * w) as f32)
            .collect()
    });
    Ok(frames)
}

/// MFCC coefficients for a batch of windowed frames.
pub fn mfcc(windows: &[Vec<f32>], spec: &FrameSpec, sample_rate: u32) -> Result<FeatureSequence> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("mfcc: no windows".to_string()));
    }
    let analyzer = MfccAnalyzer::new(spec, sample_rate);
    let t = windows.len();
    let f = spec.num_coeffs;
    let coeffs = parallel::map_slice(windows, |w| analyzer.analyze(w));
    let mut values = Matrix::zeros(f, t);
    for (ti, c) in coeffs.iter().enumerate() {
        for fi in 0..f {
            *values.at_mut(fi, ti) = c[fi];
        }
    }
    Ok(FeatureSequence::new(values))
}

/// Frame + MFCC in one step.
pub fn extract_features(audio: &AudioBuffer, spec: &FrameSpec) -> Result<FeatureSequence> {
    let windows = frame_signal(audio, spec)?;
    mfcc(&windows, spec, audio.sample_rate)
}

/// Stack `2c+1` neighboring frames into each column; out-of-range frames are
/// replaced by edge replication (first/last frame repeated).
pub fn concat_context(feats: &FeatureSequence, c: usize) -> FeatureSequence {
    stack_context(feats, c, EdgePolicy::Replicate)
}

/// Context stacking with zero padding instead of edge replication.
///
/// This matches what a zero-initialized streaming context buffer sees on the
/// first frames and is the convention used by the streaming parity harness.
pub fn concat_context_zero(feats: &FeatureSequence, c: usize) -> FeatureSequence {
    stack_context(feats, c, EdgePolicy::Zero)
}

enum EdgePolicy {
    Replicate,
    Zero,
}

fn stack_context(feats: &FeatureSequence, c: usize, policy: EdgePolicy) -> FeatureSequence {
    let f = feats.dim();
    let t = feats.frames();
    let span = 2 * c + 1;
    let mut out = Matrix::zeros(f * span, t);
    for ti in 0..t {
        for (block, off) in (-(c as isize)..=c as isize).enumerate() {
            let src = ti as isize + off;
            let src = match policy {
                EdgePolicy::Replicate => Some(src.clamp(0, t as isize - 1) as usize),
                EdgePolicy::Zero => {
                    if src < 0 || src >= t as isize {
                        None
                    } else {
                        Some(src as usize)
                    }
                }
            };
            if let Some(s) = src {
                for fi in 0..f {
                    *out.at_mut(block * f + fi, ti) = feats.values().at(fi, s);
                }
            }
        }
    }
    FeatureSequence::new(out)
}

/// Incremental framer for streaming input: feed raw samples, pull out
/// Hamming-windowed frames as soon as a full window is available.
pub struct StreamingFramer {
    window: usize,
    hop: usize,
    ham: Vec<f64>,
    buf: Vec<f32>,
}

impl StreamingFramer {
    pub fn new(spec: &FrameSpec, sample_rate: u32) -> Self {
        let window = spec.window_samples(sample_rate);
        StreamingFramer {
            window,
            hop: spec.hop_samples(sample_rate),
            ham: hamming(window),
            buf: Vec::new(),
        }
    }

    /// Append samples and return every frame completed by them.
    pub fn push(&mut self, samples: &[f32]) -> Vec<Vec<f32>> {
        self.buf.extend_from_slice(samples);
        let mut frames = Vec::new();
        while self.buf.len() >= self.window {
            frames.push(
                self.buf[..self.window]
                    .iter()
                    .zip(&self.ham)
                    .map(|(&s, &w)| (s as f64 * w) as f32)
                    .collect(),
            );
            self.buf.drain(..self.hop);
        }
        frames
    }
}

fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len as f64 - 1.0)).cos())
        .collect()
}

const NUM_MEL_FILTERS: usize = 20;
const LOG_FLOOR: f64 = 1e-10;

struct MfccAnalyzer {
    window: usize,
    fft_size: usize,
    num_coeffs: usize,
    /// Per-filter (bin, weight) pairs; only nonzero weights stored.
    filterbank: Vec<Vec<(usize, f64)>>,
    /// Orthonormal DCT-II basis, `num_coeffs x NUM_MEL_FILTERS` row-major.
    dct: Vec<f64>,
}

impl MfccAnalyzer {
    fn new(spec: &FrameSpec, sample_rate: u32) -> Self {
        let window = spec.window_samples(sample_rate);
        let fft_size = window.next_power_of_two();
        MfccAnalyzer {
            window,
            fft_size,
            num_coeffs: spec.num_coeffs,
            filterbank: mel_filterbank(NUM_MEL_FILTERS, fft_size, sample_rate as f64),
            dct: dct_basis(spec.num_coeffs, NUM_MEL_FILTERS),
        }
    }

    fn analyze(&self, frame: &[f32]) -> Vec<f32> {
        let n = self.fft_size;
        let mut re = vec![0.0f64; n];
        let mut im = vec![0.0f64; n];
        for i in 0..frame.len().min(self.window) {
            re[i] = frame[i] as f64;
        }
        fft_in_place(&mut re, &mut im);

        // Power spectrum on the non-negative bins.
        let bins = n / 2 + 1;
        let power: Vec<f64> = (0..bins).map(|k| re[k] * re[k] + im[k] * im[k]).collect();

        let log_mel: Vec<f64> = self
            .filterbank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();

        (0..self.num_coeffs)
            .map(|j| {
                let row = &self.dct[j * NUM_MEL_FILTERS..(j + 1) * NUM_MEL_FILTERS];
                row.iter().zip(&log_mel).map(|(&b, &e)| b * e).sum::<f64>() as f32
            })
            .collect()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with mel-spaced edges from 0 Hz to Nyquist; weights are
/// evaluated on the continuous triangle at each bin's center frequency.
fn mel_filterbank(num_filters: usize, fft_size: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let bins = fft_size / 2 + 1;
    let high_hz = sample_rate / 2.0;
    let mel_hi = hz_to_mel(high_hz);
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (num_filters + 1) as f64))
        .collect();

    (0..num_filters)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut filt = Vec::new();
            for k in 0..bins {
                let f = k as f64 * sample_rate / fft_size as f64;
                if f <= lo || f >= hi {
                    continue;
                }
                let w = if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if w > 0.0 {
                    filt.push((k, w));
                }
            }
            filt
        })
        .collect()
}

fn dct_basis(num_coeffs: usize, m: usize) -> Vec<f64> {
    let mut basis = vec![0.0; num_coeffs * m];
    for j in 0..num_coeffs {
        let scale = if j == 0 {
            (1.0 / m as f64).sqrt()
        } else {
            (2.0 / m as f64).sqrt()
        };
        for i in 0..m {
            basis[j * m + i] = scale * (PI * j as f64 * (2 * i + 1) as f64 / (2 * m) as f64).cos();
        }
    }
    basis
}

/// Iterative radix-2 Cooley-Tukey FFT; length must be a power of two.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());

    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let half = len / 2;
        for start in (0..n).step_by(len) {
            let mut cr = 1.0f64;
            let mut ci = 0.0f64;
            for k in 0..half {
                let (er, ei) = (re[start + k], im[start + k]);
                let (or_, oi) = (re[start + k + half], im[start + k + half]);
                let tr = or_ * cr - oi * ci;
                let ti = or_ * ci + oi * cr;
                re[start + k] = er + tr;
                im[start + k] = ei + ti;
                re[start + k + half] = er - tr;
                im[start + k + half] = ei - ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
}

// --- WAV I/O (RIFF, PCM 16-bit little-endian, mono, 16 kHz only) ---

const EXPECTED_SAMPLE_RATE: u32 = 16_000;

/// Read a 16-bit PCM mono 16 kHz WAV file. Other formats are rejected rather
/// than resampled so the frontend stays bit-reproducible.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let file = File::open(path)?;
    let mut reader = ByteReader::new(BufReader::new(file));
    read_wav_stream(&mut reader)
}

/// Read WAV data from any byte stream (used by the stdin detect mode).
pub fn read_wav_stream<R: Read>(reader: &mut ByteReader<R>) -> Result<AudioBuffer> {
    let magic = reader.bytes::<4>("RIFF magic")?;
    if &magic != b"RIFF" {
        return Err(Error::format(reader.offset() - 4, "missing RIFF magic"));
    }
    reader.bytes::<4>("RIFF size")?;
    let wave = reader.bytes::<4>("WAVE id")?;
    if &wave != b"WAVE" {
        return Err(Error::format(reader.offset() - 4, "missing WAVE id"));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None;
    loop {
        let id = reader.bytes::<4>("chunk id")?;
        let size = reader.u32_le("chunk size")?;
        match &id {
            b"fmt " => {
                let start = reader.offset();
                let audio_format = reader.u16_le("audio format")?;
                let channels = reader.u16_le("channels")?;
                let rate = reader.u32_le("sample rate")?;
                reader.u32_le("byte rate")?;
                reader.u16_le("block align")?;
                let bits = reader.u16_le("bits per sample")?;
                let consumed = reader.offset() - start;
                reader.skip(size as u64 - consumed, "fmt chunk tail")?;
                format = Some((audio_format, channels, rate, bits));
            }
            b"data" => {
                let (audio_format, channels, rate, bits) = format.ok_or_else(|| {
                    Error::format(reader.offset(), "data chunk before fmt chunk")
                })?;
                if audio_format != 1 {
                    return Err(Error::format(
                        reader.offset(),
                        format!("unsupported audio format {audio_format}, want PCM (1)"),
                    ));
                }
                if channels != 1 {
                    return Err(Error::format(
                        reader.offset(),
                        format!("unsupported channel count {channels}, want mono"),
                    ));
                }
                if bits != 16 {
                    return Err(Error::format(
                        reader.offset(),
                        format!("unsupported sample width {bits}, want 16-bit"),
                    ));
                }
                if rate != EXPECTED_SAMPLE_RATE {
                    return Err(Error::format(
                        reader.offset(),
                        format!("unsupported sample rate {rate}, want {EXPECTED_SAMPLE_RATE}"),
                    ));
                }
                let n = size as usize / 2;
                let mut samples = Vec::with_capacity(n);
                for _ in 0..n {
                    let v = reader.i16_le("sample")?;
                    samples.push(v as f32 / 32768.0);
                }
                return Ok(AudioBuffer::new(samples, rate));
            }
            _ => {
                // Chunks are word-aligned; odd sizes carry a pad byte.
                reader.skip(size as u64 + (size as u64 & 1), "chunk body")?;
            }
        }
    }
}

/// Write a 16-bit PCM mono WAV file; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (audio.samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&audio.sample_rate.to_le_bytes())?;
    w.write_all(&(audio.sample_rate * 2).to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in &audio.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

// --- Feature dump ("FTRS") ---

const FTRS_MAGIC: &[u8; 4] = b"FTRS";
const FTRS_VERSION: u8 = 1;

/// Write a feature dump: magic "FTRS", version byte, F and T as u32 LE, then
/// `F x T` f32 LE values frame-major (column-major).
pub fn write_features(path: &Path, feats: &FeatureSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FTRS_MAGIC)?;
    w.write_all(&[FTRS_VERSION])?;
    w.write_all(&(feats.dim() as u32).to_le_bytes())?;
    w.write_all(&(feats.frames() as u32).to_le_bytes())?;
    for t in 0..feats.frames() {
        for f in 0..feats.dim() {
            w.write_all(&feats.values().at(f, t).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a feature dump written by [`write_features`].
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let file = File::open(path)?;
    let mut r = ByteReader::new(BufReader::new(file));
    let magic = r.bytes::<4>("FTRS magic")?;
    if &magic != FTRS_MAGIC {
        return Err(Error::format(r.offset() - 4, "missing FTRS magic"));
    }
    let version = r.bytes::<1>("version")?[0];
    if version != FTRS_VERSION {
        return Err(Error::format(
            r.offset() - 1,
            format!("unsupported version {version}"),
        ));
    }
    let f = r.u32_le("feature dim")? as usize;
    let t = r.u32_le("frame count")? as usize;
    let mut values = Matrix::zeros(f, t);
    for ti in 0..t {
        for fi in 0..f {
            *values.at_mut(fi, ti) = r.f32_le("feature value")?;
        }
    }
    Ok(FeatureSequence::new(values))
}

/// Byte-stream reader that tracks its offset so format errors can point at the
/// failing byte.
pub struct ByteReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.offset, format!("truncated while reading {what}")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    pub fn u16_le(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes::<2>(what)?))
    }

    pub fn i16_le(&mut self, what: &str) -> Result<i16> {
        Ok(i16::from_le_bytes(self.bytes::<2>(what)?))
    }

    pub fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    pub fn f32_le(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes::<4>(what)?))
    }

    pub fn skip(&mut self, n: u64, what: &str) -> Result<()> {
        let copied = std::io::copy(&mut self.inner.by_ref().take(n), &mut std::io::sink())?;
        self.offset += copied;
        if copied != n {
            return Err(Error::format(
                self.offset,
                format!("truncated while skipping {what}"),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn tone(freq: f64, secs: f64, amp: f32) -> AudioBuffer {
        let n = (16_000.0 * secs) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin() as f32)
            .collect();
        AudioBuffer::new(samples, 16_000)
    }

    #[test]
    fn gain_zero_db_is_identity() {
        let a = tone(440.0, 0.1, 0.5);
        let b = apply_gain(&a, 0.0);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn gain_minus_twenty_db_is_tenth() {
        let a = tone(440.0, 0.05, 0.5);
        let b = apply_gain(&a, -20.0);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((y - x * 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn gain_minus_thirty_two_db_scale() {
        let a = AudioBuffer::new(vec![1.0], 16_000);
        let b = apply_gain(&a, -32.0);
        assert!((b.samples[0] - 0.025119).abs() < 1e-6);
    }

    #[test]
    fn gain_round_trip() {
        let a = tone(700.0, 0.05, 0.4);
        for &p in &[-32.0f32, -20.0, 7.5] {
            let back = apply_gain(&apply_gain(&a, p), -p);
            for (x, y) in a.samples.iter().zip(&back.samples) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_count_formula() {
        let spec = FrameSpec::default();
        let one = AudioBuffer::new(vec![0.1; 400], 16_000);
        assert_eq!(frame_signal(&one, &spec).unwrap().len(), 1);

        let second = AudioBuffer::new(vec![0.1; 16_000], 16_000);
        assert_eq!(frame_signal(&second, &spec).unwrap().len(), 98);

        let short = AudioBuffer::new(vec![0.1; 399], 16_000);
        assert!(matches!(
            frame_signal(&short, &spec),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn frame_count_boundary_iff() {
        let spec = FrameSpec::default();
        for len in [399usize, 400, 401, 559, 560, 561] {
            let a = AudioBuffer::new(vec![0.2; len], 16_000);
            let res = frame_signal(&a, &spec);
            if len >= 400 {
                assert!(!res.unwrap().is_empty());
            } else {
                assert!(res.is_err());
            }
        }
    }

    #[test]
    fn mfcc_constant_on_silence() {
        let spec = FrameSpec::default();
        let silent = AudioBuffer::new(vec![0.0; 16_000], 16_000);
        let feats = extract_features(&silent, &spec).unwrap();
        assert_eq!(feats.dim(), 13);
        assert_eq!(feats.frames(), 98);
        let first = feats.frame(0);
        for t in 1..feats.frames() {
            assert_eq!(feats.frame(t), first, "frame {t} differs on silence");
        }
        // Floored log energies: c0 = sqrt(1/M) * M * ln(1e-10), others 0.
        let expected_c0 = ((1.0f64 / 20.0).sqrt() * 20.0 * 1e-10f64.ln()) as f32;
        assert!((first[0] - expected_c0).abs() < 1e-3);
        for &c in &first[1..] {
            assert!(c.abs() < 1e-4);
        }
    }

    #[test]
    fn mfcc_separates_tones() {
        let spec = FrameSpec::default();
        let a = extract_features(&tone(1000.0, 0.5, 0.5), &spec).unwrap();
        let b = extract_features(&tone(4000.0, 0.5, 0.5), &spec).unwrap();
        let mut dist = 0.0f32;
        for f in 0..13 {
            let d = a.values().at(f, 10) - b.values().at(f, 10);
            dist += d * d;
        }
        assert!(dist.sqrt() > 1.0, "tones should differ, got {}", dist.sqrt());
    }

    #[test]
    fn mfcc_deterministic() {
        let spec = FrameSpec::default();
        let audio = tone(440.0, 0.3, 0.5);
        let a = extract_features(&audio, &spec).unwrap();
        let b = extract_features(&audio, &spec).unwrap();
        assert_eq!(a.values().data(), b.values().data());
    }

    #[test]
    fn fft_matches_direct_dft() {
        let mut rng = Rng::new(5);
        let n = 512;
        let signal: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0) as f64).collect();
        let mut re = signal.clone();
        let mut im = vec![0.0; n];
        fft_in_place(&mut re, &mut im);
        for k in (0..n).step_by(37) {
            let mut dre = 0.0;
            let mut dim_ = 0.0;
            for (i, &x) in signal.iter().enumerate() {
                let ang = -2.0 * PI * k as f64 * i as f64 / n as f64;
                dre += x * ang.cos();
                dim_ += x * ang.sin();
            }
            assert!((re[k] - dre).abs() < 1e-8, "bin {k} re");
            assert!((im[k] - dim_).abs() < 1e-8, "bin {k} im");
        }
    }

    #[test]
    fn context_zero_is_identity() {
        let feats = extract_features(&tone(500.0, 0.2, 0.3), &FrameSpec::default()).unwrap();
        let out = concat_context(&feats, 0);
        assert_eq!(out.values().data(), feats.values().data());
    }

    #[test]
    fn context_dim_reference_config() {
        let feats = extract_features(&tone(500.0, 0.2, 0.3), &FrameSpec::default()).unwrap();
        let out = concat_context(&feats, 5);
        assert_eq!(out.dim(), 143);
        assert_eq!(out.frames(), feats.frames());
    }

    #[test]
    fn context_middle_block_matches_input() {
        let feats = extract_features(&tone(500.0, 0.2, 0.3), &FrameSpec::default()).unwrap();
        let c = 3;
        let out = concat_context(&feats, c);
        for t in 0..feats.frames() {
            for f in 0..13 {
                assert_eq!(out.values().at(c * 13 + f, t), feats.values().at(f, t));
            }
        }
    }

    #[test]
    fn context_single_frame_replicates() {
        let values = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let feats = FeatureSequence::new(values);
        let out = concat_context(&feats, 2);
        assert_eq!(out.dim(), 10);
        for block in 0..5 {
            assert_eq!(out.values().at(block * 2, 0), 1.0);
            assert_eq!(out.values().at(block * 2 + 1, 0), 2.0);
        }
    }

    #[test]
    fn context_zero_padding_differs_at_edges_only() {
        let feats = extract_features(&tone(500.0, 0.3, 0.3), &FrameSpec::default()).unwrap();
        let c = 2;
        let rep = concat_context(&feats, c);
        let zer = concat_context_zero(&feats, c);
        let t = feats.frames();
        for ti in c..t - c {
            for f in 0..rep.dim() {
                assert_eq!(rep.values().at(f, ti), zer.values().at(f, ti));
            }
        }
        assert_ne!(rep.values().at(0, 0), zer.values().at(0, 0));
        assert_eq!(zer.values().at(0, 0), 0.0);
    }

    #[test]
    fn streaming_framer_matches_batch() {
        let spec = FrameSpec::default();
        let audio = tone(620.0, 0.42, 0.4);
        let batch = frame_signal(&audio, &spec).unwrap();
        let mut framer = StreamingFramer::new(&spec, 16_000);
        let mut streamed = Vec::new();
        for chunk in audio.samples.chunks(123) {
            streamed.extend(framer.push(chunk));
        }
        assert_eq!(streamed.len(), batch.len());
        for (a, b) in streamed.iter().zip(&batch) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let audio = tone(440.0, 0.1, 0.7);
        write_wav(&path, &audio).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.len(), audio.samples.len());
        for (a, b) in audio.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32_768.0 + f32::EPSILON);
        }
    }

    #[test]
    fn wav_rejects_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t8k.wav");
        let audio = AudioBuffer::new(vec![0.0; 100], 8_000);
        write_wav(&path, &audio).unwrap();
        match read_wav(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("sample rate")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wav_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"JUNKJUNKJUNKJUNK").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn feature_dump_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ftrs");
        let feats = extract_features(&tone(910.0, 0.2, 0.4), &FrameSpec::default()).unwrap();
        write_features(&path, &feats).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.dim(), feats.dim());
        assert_eq!(back.frames(), feats.frames());
        assert_eq!(back.values().data(), feats.values().data());
    }

    #[test]
    fn feature_dump_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ftrs");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }
}
