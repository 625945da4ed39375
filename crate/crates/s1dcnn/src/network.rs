//! Model assembly: a stack of unit+batchnorm blocks with a linear classifier
//! head, plus receptive-field and cost accounting, initialization and model
//! file serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{concat_context_zero, ByteReader, FeatureSequence};
use crate::layers::{
    batchnorm_infer, linear_forward, reduce_svdf_to_unit, svdf_forward, unit_forward, Activation,
    BatchNorm, Linear, S1dcnnUnit, SvdfLayer, BN_DEFAULT_EPS, BN_DEFAULT_MOMENTUM,
};
use crate::numerics::{softmax, Matrix, Rng};

/// Which layer semantics the model was built for. The SVDF variant is the
/// bias-free, zero-lookahead special case with an identity first stage; its
/// bias vectors exist in memory but stay zero and are excluded from parameter
/// accounting and training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Svdf,
    S1dcnn,
}

impl Arch {
    pub fn code(&self) -> u8 {
        match self {
            Arch::Svdf => 0,
            Arch::S1dcnn => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Arch> {
        match code {
            0 => Some(Arch::Svdf),
            1 => Some(Arch::S1dcnn),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Svdf => "svdf",
            Arch::S1dcnn => "s1dcnn",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "svdf" => Ok(Arch::Svdf),
            "s1dcnn" => Ok(Arch::S1dcnn),
            other => Err(format!("unknown arch '{other}', expected svdf|s1dcnn")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Per-frame feature dimension before context stacking (13 MFCCs).
    pub feature_dim: usize,
    /// Context frames on each side; the stacked input dim is
    /// `feature_dim * (2*context + 1)`.
    pub context: usize,
    /// Number of stacked unit+batchnorm blocks.
    pub depth: usize,
    /// Filters per block.
    pub filters: usize,
    /// Time-filter length K.
    pub memory: usize,
    /// Future first-stage outputs consumed per block.
    pub lookahead: usize,
    /// Output classes (target / non-target).
    pub classes: usize,
    pub arch: Arch,
    pub frame_hop_ms: u32,
}

impl ModelConfig {
    /// The reference architecture behind the CLI's `--config paper` preset:
    /// 13 MFCCs, 5+5 context frames, 7 blocks of 32 filters with memory 9,
    /// two classes, 10 ms hop.
    pub fn reference(arch: Arch, lookahead: usize) -> Self {
        ModelConfig {
            feature_dim: 13,
            context: 5,
            depth: 7,
            filters: 32,
            memory: 9,
            lookahead,
            classes: 2,
            arch,
            frame_hop_ms: 10,
        }
    }

    /// Stacked input dimension of the first block.
    pub fn input_dim(&self) -> usize {
        self.feature_dim * (2 * self.context + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.depth == 0
            || self.filters == 0
            || self.memory == 0
            || self.classes == 0
            || self.frame_hop_ms == 0
        {
            return Err(Error::Config("all counts must be >= 1".to_string()));
        }
        if self.lookahead > self.memory - 1 {
            return Err(Error::Config(format!(
                "lookahead {} must be <= memory-1 ({})",
                self.lookahead,
                self.memory - 1
            )));
        }
        if self.arch == Arch::Svdf && self.lookahead != 0 {
            return Err(Error::Config(
                "svdf arch requires zero lookahead".to_string(),
            ));
        }
        Ok(())
    }
}

/// An immutable-after-build detector model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<(S1dcnnUnit, BatchNorm)>,
    pub head: Linear,
}

/// Build a model with weights drawn uniform in `±1/sqrt(fan_in)` per tensor
/// and zero biases. The same seed always yields the same model.
pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    config.validate()?;
    let n = config.filters;
    let k = config.memory;
    let (g1, g2) = match config.arch {
        // Identity first stage + ReLU second stage for both variants; this is
        // exactly the reduced SVDF form when biases are zero and L = 0.
        Arch::Svdf | Arch::S1dcnn => (Activation::Identity, Activation::Relu),
    };

    let mut blocks = Vec::with_capacity(config.depth);
    for d in 0..config.depth {
        let in_dim = if d == 0 { config.input_dim() } else { n };
        let wf = init_tensor(rng, n, in_dim, in_dim);
        let wt = init_tensor(rng, n, k, k);
        let unit = S1dcnnUnit {
            feature_weights: wf,
            feature_bias: vec![0.0; n],
            time_weights: wt,
            time_bias: vec![0.0; n],
            lookahead: config.lookahead,
            g1,
            g2,
        };
        unit.validate()?;
        blocks.push((unit, BatchNorm::identity(n)));
    }

    let head = Linear {
        weights: init_tensor(rng, config.classes, n, n),
        bias: vec![0.0; config.classes],
    };

    Ok(Model {
        config: *config,
        blocks,
        head,
    })
}

fn init_tensor(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect(),
    )
    .expect("init dims")
}

impl Model {
    /// Per-frame class posteriors for context-stacked features (inference-mode
    /// batch norm, softmax last).
    pub fn forward(&self, feats: &FeatureSequence) -> Result<Matrix> {
        let logits = self.logits(feats)?;
        posteriors_from_logits(&logits)
    }

    /// Pre-softmax logits for context-stacked features.
    pub fn logits(&self, feats: &FeatureSequence) -> Result<Matrix> {
        if feats.dim() != self.config.input_dim() {
            return Err(Error::shape(format!(
                "forward: expected stacked dim {}, got {}",
                self.config.input_dim(),
                feats.dim()
            )));
        }
        let mut h = feats.values().clone();
        for (unit, bn) in &self.blocks {
            let a = unit_forward(unit, &h)?;
            h = batchnorm_infer(bn, &a)?;
        }
        linear_forward(&self.head, &h)
    }

    /// Posteriors straight from raw (un-stacked) MFCC features, applying the
    /// zero-padded streaming context convention first.
    pub fn batch_posteriors(&self, mfcc: &FeatureSequence) -> Result<Matrix> {
        if mfcc.dim() != self.config.feature_dim {
            return Err(Error::shape(format!(
                "batch_posteriors: expected dim {}, got {}",
                self.config.feature_dim,
                mfcc.dim()
            )));
        }
        let stacked = concat_context_zero(mfcc, self.config.context);
        self.forward(&stacked)
    }

    /// Run the SVDF semantics directly (per-block definition-level evaluation)
    /// instead of the staged unit path. Requires an svdf-arch model.
    pub fn forward_svdf_semantics(&self, feats: &FeatureSequence) -> Result<Matrix> {
        if self.config.arch != Arch::Svdf {
            return Err(Error::Config(
                "forward_svdf_semantics requires an svdf-arch model".to_string(),
            ));
        }
        let mut h = feats.values().clone();
        for (unit, bn) in &self.blocks {
            let layer = SvdfLayer {
                beta: unit.feature_weights.clone(),
                alpha: unit.time_weights.clone(),
                g: unit.g2,
            };
            let a = svdf_forward(&layer, &h)?;
            h = batchnorm_infer(bn, &a)?;
        }
        let logits = linear_forward(&self.head, &h)?;
        posteriors_from_logits(&logits)
    }

    /// Rebuild each block's unit through the SVDF -> unit reduction. Verifies
    /// that the reduction preserves network semantics for svdf-arch models.
    pub fn reduced_clone(&self) -> Result<Model> {
        if self.config.arch != Arch::Svdf {
            return Err(Error::Config(
                "reduced_clone requires an svdf-arch model".to_string(),
            ));
        }
        let mut clone = self.clone();
        for (unit, _) in &mut clone.blocks {
            let layer = SvdfLayer {
                beta: unit.feature_weights.clone(),
                alpha: unit.time_weights.clone(),
                g: unit.g2,
            };
            let mut reduced = reduce_svdf_to_unit(&layer);
            reduced.lookahead = 0;
            *unit = reduced;
        }
        Ok(clone)
    }

    /// Trainable tensors in declaration order (batch-norm running statistics
    /// are state, not parameters).
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for (unit, bn) in &mut self.blocks {
            out.push(unit.feature_weights.data_mut());
            out.push(unit.feature_bias.as_mut_slice());
            out.push(unit.time_weights.data_mut());
            out.push(unit.time_bias.as_mut_slice());
            out.push(bn.gamma.as_mut_slice());
            out.push(bn.beta_shift.as_mut_slice());
        }
        out.push(self.head.weights.data_mut());
        out.push(self.head.bias.as_mut_slice());
        out
    }

    pub fn param_tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for (unit, bn) in &self.blocks {
            out.push(unit.feature_weights.data());
            out.push(unit.feature_bias.as_slice());
            out.push(unit.time_weights.data());
            out.push(unit.time_bias.as_slice());
            out.push(bn.gamma.as_slice());
            out.push(bn.beta_shift.as_slice());
        }
        out.push(self.head.weights.data());
        out.push(self.head.bias.as_slice());
        out
    }
}

pub fn posteriors_from_logits(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for t in 0..logits.cols() {
        let p = softmax(&logits.col(t))?;
        for (c, &v) in p.iter().enumerate() {
            *out.at_mut(c, t) = v;
        }
    }
    Ok(out)
}

/// Receptive field in milliseconds: `((K-1-L)*D + C, L*D + C)` frames times
/// the hop.
pub fn receptive_field(config: &ModelConfig) -> (u32, u32) {
    let hop = config.frame_hop_ms;
    let past = ((config.memory - 1 - config.lookahead) * config.depth + config.context) as u32;
    let future = (config.lookahead * config.depth + config.context) as u32;
    (past * hop, future * hop)
}

/// End-to-end output delay in milliseconds: `(L*D + C) * hop`.
pub fn output_delay(config: &ModelConfig) -> u32 {
    (config.lookahead * config.depth + config.context) as u32 * config.frame_hop_ms
}

/// Parameter counts by layer kind.
///
/// Rule: all conv weights and biases, batch-norm gamma and beta, linear
/// weights and bias. The svdf arch has no bias parameters, so its two length-N
/// bias vectors per block are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub conv_weights: usize,
    pub conv_biases: usize,
    pub batchnorm: usize,
    pub linear: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.conv_weights + self.conv_biases + self.batchnorm + self.linear
    }
}

pub fn count_params(model: &Model) -> ParamCounts {
    let mut conv_weights = 0;
    let mut conv_biases = 0;
    let mut batchnorm = 0;
    for (unit, bn) in &model.blocks {
        conv_weights += unit.feature_weights.rows() * unit.feature_weights.cols()
            + unit.time_weights.rows() * unit.time_weights.cols();
        if model.config.arch == Arch::S1dcnn {
            conv_biases += unit.feature_bias.len() + unit.time_bias.len();
        }
        batchnorm += bn.gamma.len() + bn.beta_shift.len();
    }
    let linear = model.head.weights.rows() * model.head.weights.cols() + model.head.bias.len();
    ParamCounts {
        conv_weights,
        conv_biases,
        batchnorm,
        linear,
    }
}

/// Multiply-accumulates per output frame by layer kind.
///
/// Rule: one MAC per conv/linear weight multiply per frame; batch norm at
/// inference is a fused scale-shift, one MAC per channel; bias adds are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCounts {
    pub feature_conv: usize,
    pub time_conv: usize,
    pub batchnorm: usize,
    pub linear: usize,
}

impl MacCounts {
    pub fn total(&self) -> usize {
        self.feature_conv + self.time_conv + self.batchnorm + self.linear
    }
}

pub fn count_macs(model: &Model) -> MacCounts {
    let mut feature_conv = 0;
    let mut time_conv = 0;
    let mut batchnorm = 0;
    for (unit, bn) in &model.blocks {
        feature_conv += unit.feature_weights.rows() * unit.feature_weights.cols();
        time_conv += unit.time_weights.rows() * unit.time_weights.cols();
        batchnorm += bn.channels();
    }
    let linear = model.head.weights.rows() * model.head.weights.cols();
    MacCounts {
        feature_conv,
        time_conv,
        batchnorm,
        linear,
    }
}

/// Key=value description of a model (params, MACs, receptive field, delay).
pub fn info_text(model: &Model) -> String {
    let c = &model.config;
    let p = count_params(model);
    let m = count_macs(model);
    let (past, future) = receptive_field(c);
    let mut s = String::new();
    s.push_str(&format!("arch={}\n", c.arch.name()));
    s.push_str(&format!("feature_dim={}\n", c.feature_dim));
    s.push_str(&format!("context={}\n", c.context));
    s.push_str(&format!("depth={}\n", c.depth));
    s.push_str(&format!("filters={}\n", c.filters));
    s.push_str(&format!("memory={}\n", c.memory));
    s.push_str(&format!("lookahead={}\n", c.lookahead));
    s.push_str(&format!("classes={}\n", c.classes));
    s.push_str(&format!("input_dim={}\n", c.input_dim()));
    s.push_str(&format!("params_total={}\n", p.total()));
    s.push_str(&format!("params_conv_weights={}\n", p.conv_weights));
    s.push_str(&format!("params_conv_biases={}\n", p.conv_biases));
    s.push_str(&format!("params_batchnorm={}\n", p.batchnorm));
    s.push_str(&format!("params_linear={}\n", p.linear));
    s.push_str(&format!("macs_per_frame={}\n", m.total()));
    s.push_str(&format!("receptive_field_past_ms={past}\n"));
    s.push_str(&format!("receptive_field_future_ms={future}\n"));
    s.push_str(&format!("output_delay_ms={}\n", output_delay(c)));
    s
}

/// Same facts as [`info_text`] as a JSON document.
pub fn info_json(model: &Model) -> String {
    let c = &model.config;
    let p = count_params(model);
    let m = count_macs(model);
    let (past, future) = receptive_field(c);
    format!(
        concat!(
            "{{\n",
            "  \"arch\": \"{}\",\n",
            "  \"feature_dim\": {},\n",
            "  \"context\": {},\n",
            "  \"depth\": {},\n",
            "  \"filters\": {},\n",
            "  \"memory\": {},\n",
            "  \"lookahead\": {},\n",
            "  \"classes\": {},\n",
            "  \"input_dim\": {},\n",
            "  \"params_total\": {},\n",
            "  \"macs_per_frame\": {},\n",
            "  \"receptive_field_past_ms\": {},\n",
            "  \"receptive_field_future_ms\": {},\n",
            "  \"output_delay_ms\": {}\n",
            "}}\n"
        ),
        c.arch.name(),
        c.feature_dim,
        c.context,
        c.depth,
        c.filters,
        c.memory,
        c.lookahead,
        c.classes,
        c.input_dim(),
        p.total(),
        m.total(),
        past,
        future,
        output_delay(c)
    )
}

// --- Model file ("S1DC") ---

const MODEL_MAGIC: &[u8; 4] = b"S1DC";
const MODEL_VERSION: u8 = 1;

/// Write a model file: magic "S1DC", version byte, config as u32 LE fields
/// plus an arch byte, then per block the activation codes and all tensors
/// (including batch-norm running statistics) as f32 LE in declaration order.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let c = &model.config;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION])?;
    for v in [
        c.feature_dim as u32,
        c.context as u32,
        c.depth as u32,
        c.filters as u32,
        c.memory as u32,
        c.lookahead as u32,
        c.classes as u32,
        c.frame_hop_ms,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[c.arch.code()])?;
    for (unit, bn) in &model.blocks {
        w.write_all(&[unit.g1.code(), unit.g2.code()])?;
        write_f32s(&mut w, unit.feature_weights.data())?;
        write_f32s(&mut w, &unit.feature_bias)?;
        write_f32s(&mut w, unit.time_weights.data())?;
        write_f32s(&mut w, &unit.time_bias)?;
        write_f32s(&mut w, &bn.gamma)?;
        write_f32s(&mut w, &bn.beta_shift)?;
        write_f32s(&mut w, &bn.running_mean)?;
        write_f32s(&mut w, &bn.running_var)?;
        write_f32s(&mut w, &[bn.eps, bn.momentum])?;
    }
    write_f32s(&mut w, model.head.weights.data())?;
    write_f32s(&mut w, &model.head.bias)?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Load a model file written by [`save`].
pub fn load(path: &Path) -> Result<Model> {
    let file = File::open(path)?;
    let mut r = ByteReader::new(BufReader::new(file));

    let magic = r.bytes::<4>("model magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(r.offset() - 4, "missing S1DC magic"));
    }
    let version = r.bytes::<1>("model version")?[0];
    if version != MODEL_VERSION {
        return Err(Error::format(
            r.offset() - 1,
            format!("unsupported model version {version}"),
        ));
    }

    let feature_dim = r.u32_le("feature_dim")? as usize;
    let context = r.u32_le("context")? as usize;
    let depth = r.u32_le("depth")? as usize;
    let filters = r.u32_le("filters")? as usize;
    let memory = r.u32_le("memory")? as usize;
    let lookahead = r.u32_le("lookahead")? as usize;
    let classes = r.u32_le("classes")? as usize;
    let frame_hop_ms = r.u32_le("frame_hop_ms")?;
    let arch_code = r.bytes::<1>("arch")?[0];
    let arch = Arch::from_code(arch_code)
        .ok_or_else(|| Error::format(r.offset() - 1, format!("unknown arch code {arch_code}")))?;

    let config = ModelConfig {
        feature_dim,
        context,
        depth,
        filters,
        memory,
        lookahead,
        classes,
        arch,
        frame_hop_ms,
    };
    config
        .validate()
        .map_err(|e| Error::format(r.offset(), format!("invalid stored config: {e}")))?;

    let n = filters;
    let mut blocks = Vec::with_capacity(depth);
    for d in 0..depth {
        let acts = r.bytes::<2>("activation codes")?;
        let g1 = Activation::from_code(acts[0])
            .ok_or_else(|| Error::format(r.offset() - 2, "bad g1 code"))?;
        let g2 = Activation::from_code(acts[1])
            .ok_or_else(|| Error::format(r.offset() - 1, "bad g2 code"))?;
        let in_dim = if d == 0 { config.input_dim() } else { n };
        let unit = S1dcnnUnit {
            feature_weights: read_matrix(&mut r, n, in_dim)?,
            feature_bias: read_f32s(&mut r, n)?,
            time_weights: read_matrix(&mut r, n, memory)?,
            time_bias: read_f32s(&mut r, n)?,
            lookahead,
            g1,
            g2,
        };
        let gamma = read_f32s(&mut r, n)?;
        let beta_shift = read_f32s(&mut r, n)?;
        let running_mean = read_f32s(&mut r, n)?;
        let running_var = read_f32s(&mut r, n)?;
        let misc = read_f32s(&mut r, 2)?;
        blocks.push((
            unit,
            BatchNorm {
                gamma,
                beta_shift,
                running_mean,
                running_var,
                eps: misc[0],
                momentum: misc[1],
            },
        ));
    }
    let head = Linear {
        weights: read_matrix(&mut r, classes, n)?,
        bias: read_f32s(&mut r, classes)?,
    };

    Ok(Model {
        config,
        blocks,
        head,
    })
}

fn read_f32s<R: std::io::Read>(r: &mut ByteReader<R>, n: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.f32_le("tensor value")?);
    }
    Ok(out)
}

fn read_matrix<R: std::io::Read>(r: &mut ByteReader<R>, rows: usize, cols: usize) -> Result<Matrix> {
    Ok(Matrix::from_vec(rows, cols, read_f32s(r, rows * cols)?).expect("read dims"))
}

/// Batch-norm defaults recorded here so they round-trip through model files
/// even if the defaults change later.
pub fn default_bn_settings() -> (f32, f32) {
    (BN_DEFAULT_EPS, BN_DEFAULT_MOMENTUM)
}
