//! Layer primitives: the S1DCNN unit (feature 1D conv + depth-wise time conv),
//! the SVDF layer it generalizes, batch normalization, the linear classifier,
//! and analytic backward passes for all of them.
//!
//! Time-boundary handling is zero padding (`K-1-L` frames on the left, `L` on
//! the right). Zero padding is what a zero-initialized streaming buffer sees,
//! so batch and streaming outputs agree frame for frame.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Elementwise activation applied by a layer stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f32) -> f32 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn grad(&self, pre: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 - s)
            }
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Activation> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// One stacked-1D-CNN unit: `N` feature filters over an `F`-dimensional input
/// followed by per-channel time filters of length `K` with lookahead `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct S1dcnnUnit {
    /// `N x F` first-stage filter weights.
    pub feature_weights: Matrix,
    /// First-stage bias, length `N`.
    pub feature_bias: Vec<f32>,
    /// `N x K` depth-wise time filter weights.
    pub time_weights: Matrix,
    /// Second-stage bias, length `N`.
    pub time_bias: Vec<f32>,
    /// How many future first-stage outputs each time filter consumes.
    pub lookahead: usize,
    pub g1: Activation,
    pub g2: Activation,
}

impl S1dcnnUnit {
    pub fn filters(&self) -> usize {
        self.feature_weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_weights.cols()
    }

    pub fn memory(&self) -> usize {
        self.time_weights.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filters();
        let k = self.memory();
        if n == 0 || self.input_dim() == 0 || k == 0 {
            return Err(Error::Config("unit dimensions must be >= 1".to_string()));
        }
        if self.time_weights.rows() != n
            || self.feature_bias.len() != n
            || self.time_bias.len() != n
        {
            return Err(Error::shape("unit tensors disagree on filter count"));
        }
        if self.lookahead > k - 1 {
            return Err(Error::Config(format!(
                "lookahead {} must be <= memory-1 ({})",
                self.lookahead,
                k - 1
            )));
        }
        Ok(())
    }

    /// Weight+bias count: `N*(F+K+2)`, versus `N*F*K` for the dense 2D filter
    /// this unit factorizes.
    pub fn param_count(&self) -> usize {
        self.feature_weights.rows() * self.feature_weights.cols()
            + self.feature_bias.len()
            + self.time_weights.rows() * self.time_weights.cols()
            + self.time_bias.len()
    }
}

/// Low-rank SVDF layer: per node a feature filter `beta` (length `F`) and a
/// time filter `alpha` (length `K`). No bias terms exist in this layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdfLayer {
    /// `N x F` feature filters.
    pub beta: Matrix,
    /// `N x K` time filters.
    pub alpha: Matrix,
    pub g: Activation,
}

/// Per-channel batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta_shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

pub const BN_DEFAULT_EPS: f32 = 1e-5;
pub const BN_DEFAULT_MOMENTUM: f32 = 0.1;

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta_shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_DEFAULT_EPS,
            momentum: BN_DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference-time normalization of a single value in channel `n`.
    ///
    /// Streaming and batch inference both call this, keeping them bit-equal.
    #[inline]
    pub fn apply_infer(&self, n: usize, x: f32) -> f32 {
        self.gamma[n] * (x - self.running_mean[n]) / (self.running_var[n] + self.eps).sqrt()
            + self.beta_shift[n]
    }
}

/// Affine classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `OUT x IN` weights.
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }
}

// --- Forward passes ---

fn check_input_dim(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::shape(format!(
            "{what}: expected input dim {expected}, got {got}"
        )));
    }
    Ok(())
}

fn feature_conv_pre(unit: &S1dcnnUnit, x: &Matrix) -> Result<Matrix> {
    check_input_dim(unit.input_dim(), x.rows(), "feature_conv")?;
    let n = unit.filters();
    let t = x.cols();
    let mut pre = Matrix::zeros(n, t);
    for ni in 0..n {
        let row = pre.row_mut(ni);
        row.fill(unit.feature_bias[ni]);
    }
    // Accumulate over the feature dimension; rows of x and pre are contiguous.
    for ni in 0..n {
        for fi in 0..unit.input_dim() {
            let w = unit.feature_weights.at(ni, fi);
            let src = x.row(fi);
            let dst = pre.row_mut(ni);
            for ti in 0..t {
                dst[ti] += w * src[ti];
            }
        }
    }
    Ok(pre)
}

/// First stage: per-frame affine map over the feature dimension, then the
/// first activation. Output is an `N x T` map.
pub fn feature_conv(unit: &S1dcnnUnit, x: &Matrix) -> Result<Matrix> {
    let mut pre = feature_conv_pre(unit, x)?;
    for v in pre.data_mut() {
        *v = unit.g1.apply(*v);
    }
    Ok(pre)
}

fn depthwise_pre(unit: &S1dcnnUnit, a: &Matrix) -> Result<Matrix> {
    check_input_dim(unit.filters(), a.rows(), "depthwise_time_conv")?;
    let n = unit.filters();
    let t = a.cols();
    let k = unit.memory();
    let shift = k as isize - 1 - unit.lookahead as isize;
    let mut pre = Matrix::zeros(n, t);
    for ni in 0..n {
        let taps = unit.time_weights.row(ni).to_vec();
        let src = a.row(ni).to_vec();
        let dst = pre.row_mut(ni);
        for ti in 0..t {
            let mut acc = 0.0f32;
            for (ki, &w) in taps.iter().enumerate() {
                let s = ti as isize - shift + ki as isize;
                if s >= 0 && (s as usize) < t {
                    acc += w * src[s as usize];
                }
            }
            dst[ti] = acc + unit.time_bias[ni];
        }
    }
    Ok(pre)
}

/// Second stage: per-channel time convolution with lookahead. Channel `n` of
/// the output reads only channel `n` of the input; out-of-range frames
/// contribute zero.
pub fn depthwise_time_conv(unit: &S1dcnnUnit, a: &Matrix) -> Result<Matrix> {
    let mut pre = depthwise_pre(unit, a)?;
    for v in pre.data_mut() {
        *v = unit.g2.apply(*v);
    }
    Ok(pre)
}

/// Full unit: feature conv then depth-wise time conv.
pub fn unit_forward(unit: &S1dcnnUnit, x: &Matrix) -> Result<Matrix> {
    let a = feature_conv(unit, x)?;
    depthwise_time_conv(unit, &a)
}

/// SVDF forward, evaluated directly from its definition: per node, the time
/// filter mixes `K` feature-filter outputs ending at the current frame.
pub fn svdf_forward(layer: &SvdfLayer, x: &Matrix) -> Result<Matrix> {
    check_input_dim(layer.beta.cols(), x.rows(), "svdf_forward")?;
    if layer.alpha.rows() != layer.beta.rows() {
        return Err(Error::shape("svdf: alpha/beta disagree on node count"));
    }
    let n = layer.beta.rows();
    let t = x.cols();
    let k = layer.alpha.cols();
    let mut out = Matrix::zeros(n, t);
    // Feature-filter outputs once per (node, frame); frames before the start
    // contribute zero to the time mix.
    let mut stage = Matrix::zeros(n, t);
    for ni in 0..n {
        for fi in 0..layer.beta.cols() {
            let w = layer.beta.at(ni, fi);
            let src = x.row(fi);
            let dst = stage.row_mut(ni);
            for ti in 0..t {
                dst[ti] += w * src[ti];
            }
        }
    }
    for ni in 0..n {
        for ti in 0..t {
            let mut acc = 0.0f32;
            for ki in 0..k {
                let s = ti as isize - (k as isize - 1) + ki as isize;
                if s >= 0 {
                    acc += layer.alpha.at(ni, ki) * stage.at(ni, s as usize);
                }
            }
            *out.at_mut(ni, ti) = layer.g.apply(acc);
        }
    }
    Ok(out)
}

/// Express an SVDF layer as the equivalent S1DCNN unit: feature weights from
/// `beta`, time weights from `alpha`, zero biases, zero lookahead, identity
/// first activation, and the SVDF activation as the second stage.
pub fn reduce_svdf_to_unit(layer: &SvdfLayer) -> S1dcnnUnit {
    let n = layer.beta.rows();
    S1dcnnUnit {
        feature_weights: layer.beta.clone(),
        feature_bias: vec![0.0; n],
        time_weights: layer.alpha.clone(),
        time_bias: vec![0.0; n],
        lookahead: 0,
        g1: Activation::Identity,
        g2: layer.g,
    }
}

/// Batch-norm execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Normalize one map. Train mode pools statistics over the map's frames and
/// updates the running statistics; infer mode uses the stored statistics.
pub fn batchnorm_forward(bn: &mut BatchNorm, a: &Matrix, mode: BnMode) -> Result<Matrix> {
    match mode {
        BnMode::Infer => batchnorm_infer(bn, a),
        BnMode::Train => {
            let mut maps = vec![a.clone()];
            batchnorm_forward_batch(bn, &mut maps)?;
            Ok(maps.pop().unwrap())
        }
    }
}

pub fn batchnorm_infer(bn: &BatchNorm, a: &Matrix) -> Result<Matrix> {
    check_input_dim(bn.channels(), a.rows(), "batchnorm")?;
    let mut out = a.clone();
    for ni in 0..bn.channels() {
        for v in out.row_mut(ni) {
            *v = bn.apply_infer(ni, *v);
        }
    }
    Ok(out)
}

/// Cache for the training-mode batch-norm backward pass.
pub struct BnCache {
    /// Normalized values, one map per batch member.
    pub xhat: Vec<Matrix>,
    pub inv_std: Vec<f32>,
    /// Total frame count pooled across the batch.
    pub count: usize,
}

/// Training-mode batch norm over a minibatch: statistics pool every frame of
/// every map, each map is normalized in place, and running statistics are
/// updated with the stored momentum. Uses biased (population) variance.
pub fn batchnorm_forward_batch(bn: &mut BatchNorm, maps: &mut [Matrix]) -> Result<BnCache> {
    let n = bn.channels();
    for m in maps.iter() {
        check_input_dim(n, m.rows(), "batchnorm")?;
    }
    let count: usize = maps.iter().map(|m| m.cols()).sum();
    if count == 0 {
        return Err(Error::EmptyInput("batchnorm: no frames in batch".to_string()));
    }

    let mut mean = vec![0.0f32; n];
    for m in maps.iter() {
        for ni in 0..n {
            let mut acc = 0.0f32;
            for &v in m.row(ni) {
                acc += v;
            }
            mean[ni] += acc;
        }
    }
    for v in &mut mean {
        *v /= count as f32;
    }

    let mut var = vec![0.0f32; n];
    for m in maps.iter() {
        for ni in 0..n {
            let mu = mean[ni];
            let mut acc = 0.0f32;
            for &v in m.row(ni) {
                let d = v - mu;
                acc += d * d;
            }
            var[ni] += acc;
        }
    }
    for v in &mut var {
        *v /= count as f32;
    }

    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(maps.len());
    for m in maps.iter_mut() {
        let mut h = Matrix::zeros(n, m.cols());
        for ni in 0..n {
            let (mu, is) = (mean[ni], inv_std[ni]);
            let (g, b) = (bn.gamma[ni], bn.beta_shift[ni]);
            let hrow = h.row_mut(ni);
            for (ti, v) in m.row_mut(ni).iter_mut().enumerate() {
                let nh = (*v - mu) * is;
                hrow[ti] = nh;
                *v = g * nh + b;
            }
        }
        xhat.push(h);
    }

    for ni in 0..n {
        bn.running_mean[ni] = (1.0 - bn.momentum) * bn.running_mean[ni] + bn.momentum * mean[ni];
        bn.running_var[ni] = (1.0 - bn.momentum) * bn.running_var[ni] + bn.momentum * var[ni];
    }

    Ok(BnCache {
        xhat,
        inv_std,
        count,
    })
}

/// Per-frame affine head.
pub fn linear_forward(lin: &Linear, h: &Matrix) -> Result<Matrix> {
    check_input_dim(lin.input_dim(), h.rows(), "linear")?;
    let out_dim = lin.output_dim();
    let t = h.cols();
    let mut out = Matrix::zeros(out_dim, t);
    for oi in 0..out_dim {
        out.row_mut(oi).fill(lin.bias[oi]);
    }
    for oi in 0..out_dim {
        for ii in 0..lin.input_dim() {
            let w = lin.weights.at(oi, ii);
            let src = h.row(ii);
            let dst = out.row_mut(oi);
            for ti in 0..t {
                dst[ti] += w * src[ti];
            }
        }
    }
    Ok(out)
}

// --- Backward passes ---

/// Forward intermediates needed to backpropagate through a unit.
pub struct UnitCache {
    /// First-stage pre-activations, `N x T`.
    pub pre1: Matrix,
    /// First-stage outputs after `g1`, `N x T`.
    pub a1: Matrix,
    /// Second-stage pre-activations, `N x T`.
    pub pre2: Matrix,
}

/// Parameter gradients of one unit, shapes mirroring the unit's tensors.
#[derive(Debug, Clone)]
pub struct UnitGrads {
    pub d_feature_weights: Matrix,
    pub d_feature_bias: Vec<f32>,
    pub d_time_weights: Matrix,
    pub d_time_bias: Vec<f32>,
}

impl UnitGrads {
    pub fn zeros(unit: &S1dcnnUnit) -> Self {
        UnitGrads {
            d_feature_weights: Matrix::zeros(
                unit.feature_weights.rows(),
                unit.feature_weights.cols(),
            ),
            d_feature_bias: vec![0.0; unit.feature_bias.len()],
            d_time_weights: Matrix::zeros(unit.time_weights.rows(), unit.time_weights.cols()),
            d_time_bias: vec![0.0; unit.time_bias.len()],
        }
    }
}

pub fn unit_forward_cached(unit: &S1dcnnUnit, x: &Matrix) -> Result<(Matrix, UnitCache)> {
    let pre1 = feature_conv_pre(unit, x)?;
    let mut a1 = pre1.clone();
    for v in a1.data_mut() {
        *v = unit.g1.apply(*v);
    }
    let pre2 = depthwise_pre(unit, &a1)?;
    let mut out = pre2.clone();
    for v in out.data_mut() {
        *v = unit.g2.apply(*v);
    }
    Ok((
        out,
        UnitCache { pre1, a1, pre2 },
    ))
}

/// Backward through one unit. `x` is the forward input; gradients are
/// accumulated into `grads` so minibatch members can share one buffer.
pub fn unit_backward(
    unit: &S1dcnnUnit,
    x: &Matrix,
    cache: &UnitCache,
    d_out: &Matrix,
    grads: &mut UnitGrads,
) -> Result<Matrix> {
    let n = unit.filters();
    let t = x.cols();
    let k = unit.memory();
    let shift = k as isize - 1 - unit.lookahead as isize;
    if d_out.rows() != n || d_out.cols() != t {
        return Err(Error::shape("unit_backward: upstream gradient shape"));
    }

    // Through g2.
    let mut d_pre2 = d_out.clone();
    for (v, &p) in d_pre2.data_mut().iter_mut().zip(cache.pre2.data()) {
        *v *= unit.g2.grad(p);
    }

    // Depth-wise stage: channel-diagonal, so each channel is independent.
    let mut d_a1 = Matrix::zeros(n, t);
    for ni in 0..n {
        let dp = d_pre2.row(ni);
        let a1row = cache.a1.row(ni);
        grads.d_time_bias[ni] += dp.iter().sum::<f32>();
        for ki in 0..k {
            let mut wacc = 0.0f32;
            let w = unit.time_weights.at(ni, ki);
            let da1 = d_a1.row_mut(ni);
            for ti in 0..t {
                let s = ti as isize - shift + ki as isize;
                if s >= 0 && (s as usize) < t {
                    wacc += dp[ti] * a1row[s as usize];
                    da1[s as usize] += w * dp[ti];
                }
            }
            *grads.d_time_weights.at_mut(ni, ki) += wacc;
        }
    }

    // Through g1.
    let mut d_pre1 = d_a1;
    for (v, &p) in d_pre1.data_mut().iter_mut().zip(cache.pre1.data()) {
        *v *= unit.g1.grad(p);
    }

    // Feature stage.
    let f = unit.input_dim();
    let mut d_x = Matrix::zeros(f, t);
    for ni in 0..n {
        let dp = d_pre1.row(ni);
        grads.d_feature_bias[ni] += dp.iter().sum::<f32>();
        for fi in 0..f {
            let xrow = x.row(fi);
            let mut wacc = 0.0f32;
            for ti in 0..t {
                wacc += dp[ti] * xrow[ti];
            }
            *grads.d_feature_weights.at_mut(ni, fi) += wacc;
            let w = unit.feature_weights.at(ni, fi);
            let dxrow = d_x.row_mut(fi);
            for ti in 0..t {
                dxrow[ti] += w * dp[ti];
            }
        }
    }
    Ok(d_x)
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub d_gamma: Vec<f32>,
    pub d_beta: Vec<f32>,
}

impl BnGrads {
    pub fn zeros(channels: usize) -> Self {
        BnGrads {
            d_gamma: vec![0.0; channels],
            d_beta: vec![0.0; channels],
        }
    }
}

/// Backward through training-mode batch norm for the whole minibatch at once
/// (the batch statistics couple every frame in the batch).
pub fn batchnorm_backward_batch(
    bn: &BatchNorm,
    cache: &BnCache,
    d_outs: &[Matrix],
    grads: &mut BnGrads,
) -> Result<Vec<Matrix>> {
    let n = bn.channels();
    let m = cache.count as f32;

    let mut sum_dy = vec![0.0f32; n];
    let mut sum_dy_xhat = vec![0.0f32; n];
    for (d, h) in d_outs.iter().zip(&cache.xhat) {
        for ni in 0..n {
            let drow = d.row(ni);
            let hrow = h.row(ni);
            let mut acc_dy = 0.0f32;
            let mut acc_dyh = 0.0f32;
            for ti in 0..drow.len() {
                acc_dy += drow[ti];
                acc_dyh += drow[ti] * hrow[ti];
            }
            sum_dy[ni] += acc_dy;
            sum_dy_xhat[ni] += acc_dyh;
        }
    }
    for ni in 0..n {
        grads.d_beta[ni] += sum_dy[ni];
        grads.d_gamma[ni] += sum_dy_xhat[ni];
    }

    let mut d_ins = Vec::with_capacity(d_outs.len());
    for (d, h) in d_outs.iter().zip(&cache.xhat) {
        let mut dx = Matrix::zeros(n, d.cols());
        for ni in 0..n {
            let scale = bn.gamma[ni] * cache.inv_std[ni];
            let mean_dy = sum_dy[ni] / m;
            let mean_dyh = sum_dy_xhat[ni] / m;
            let drow = d.row(ni);
            let hrow = h.row(ni);
            let dxrow = dx.row_mut(ni);
            for ti in 0..drow.len() {
                dxrow[ti] = scale * (drow[ti] - mean_dy - hrow[ti] * mean_dyh);
            }
        }
        d_ins.push(dx);
    }
    Ok(d_ins)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub d_weights: Matrix,
    pub d_bias: Vec<f32>,
}

impl LinearGrads {
    pub fn zeros(lin: &Linear) -> Self {
        LinearGrads {
            d_weights: Matrix::zeros(lin.weights.rows(), lin.weights.cols()),
            d_bias: vec![0.0; lin.bias.len()],
        }
    }
}

/// Backward through the linear head. `h` is the forward input.
pub fn linear_backward(
    lin: &Linear,
    h: &Matrix,
    d_out: &Matrix,
    grads: &mut LinearGrads,
) -> Result<Matrix> {
    let out_dim = lin.output_dim();
    let in_dim = lin.input_dim();
    let t = h.cols();
    if d_out.rows() != out_dim || d_out.cols() != t {
        return Err(Error::shape("linear_backward: upstream gradient shape"));
    }
    let mut d_h = Matrix::zeros(in_dim, t);
    for oi in 0..out_dim {
        let dp = d_out.row(oi);
        grads.d_bias[oi] += dp.iter().sum::<f32>();
        for ii in 0..in_dim {
            let hrow = h.row(ii);
            let mut wacc = 0.0f32;
            for ti in 0..t {
                wacc += dp[ti] * hrow[ti];
            }
            *grads.d_weights.at_mut(oi, ii) += wacc;
            let w = lin.weights.at(oi, ii);
            let dhrow = d_h.row_mut(ii);
            for ti in 0..t {
                dhrow[ti] += w * dp[ti];
            }
        }
    }
    Ok(d_h)
}
