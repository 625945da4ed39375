//! Independent 64-bit reference implementations.
//!
//! Everything here is written directly from the layer definitions in
//! straightforward loops, deliberately sharing no code with the production
//! path in [`crate::layers`]. The training gradient check differentiates the
//! f64 loss by central finite differences, and the high-precision layer
//! equivalence checks compare both layer semantics at f64 resolution.

use crate::frontend::FeatureSequence;
use crate::layers::{Activation, S1dcnnUnit, SvdfLayer};
use crate::network::Model;
use crate::numerics::Matrix;

fn act_f64(g: Activation, x: f64) -> f64 {
    match g {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

/// Grid of f64 values, rows x cols, used instead of [`Matrix`] so the oracle
/// cannot accidentally lean on production code.
pub type Grid = Vec<Vec<f64>>;

fn grid_from_matrix(m: &Matrix) -> Grid {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Unit forward at f64 precision, straight from the two stage definitions.
pub fn unit_forward_f64(unit: &S1dcnnUnit, x: &Matrix) -> Grid {
    let (n, f, k) = (unit.filters(), unit.input_dim(), unit.memory());
    let t = x.cols();
    let xg = grid_from_matrix(x);
    let mut first = vec![vec![0.0f64; t]; n];
    for ni in 0..n {
        for ti in 0..t {
            let mut acc = unit.feature_bias[ni] as f64;
            for fi in 0..f {
                acc += unit.feature_weights.at(ni, fi) as f64 * xg[fi][ti];
            }
            first[ni][ti] = act_f64(unit.g1, acc);
        }
    }
    let mut out = vec![vec![0.0f64; t]; n];
    for ni in 0..n {
        for ti in 0..t {
            let mut acc = unit.time_bias[ni] as f64;
            for ki in 1..=k {
                let s = ti as isize - k as isize + ki as isize + unit.lookahead as isize;
                if s >= 0 && (s as usize) < t {
                    acc += unit.time_weights.at(ni, ki - 1) as f64 * first[ni][s as usize];
                }
            }
            out[ni][ti] = act_f64(unit.g2, acc);
        }
    }
    out
}

/// SVDF forward at f64 precision, straight from its one-line definition.
pub fn svdf_forward_f64(layer: &SvdfLayer, x: &Matrix) -> Grid {
    let n = layer.beta.rows();
    let f = layer.beta.cols();
    let k = layer.alpha.cols();
    let t = x.cols();
    let xg = grid_from_matrix(x);
    let mut out = vec![vec![0.0f64; t]; n];
    for ni in 0..n {
        for ti in 0..t {
            let mut acc = 0.0f64;
            for ki in 1..=k {
                let s = ti as isize - k as isize + ki as isize;
                if s < 0 || s >= t as isize {
                    continue;
                }
                let mut inner = 0.0f64;
                for fi in 0..f {
                    inner += layer.beta.at(ni, fi) as f64 * xg[fi][s as usize];
                }
                acc += layer.alpha.at(ni, ki - 1) as f64 * inner;
            }
            out[ni][ti] = act_f64(layer.g, acc);
        }
    }
    out
}

/// f64 copies of all trainable tensors, in the same order as
/// [`Model::param_tensors`], so single entries can be perturbed for finite
/// differences.
#[derive(Clone)]
pub struct F64Params {
    pub tensors: Vec<Vec<f64>>,
}

impl F64Params {
    pub fn from_model(model: &Model) -> Self {
        F64Params {
            tensors: model
                .param_tensors()
                .iter()
                .map(|t| t.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

struct BlockParams<'a> {
    wf: &'a [f64],
    bf: &'a [f64],
    wt: &'a [f64],
    bt: &'a [f64],
    gamma: &'a [f64],
    beta: &'a [f64],
}

fn block_params<'a>(params: &'a F64Params, d: usize) -> BlockParams<'a> {
    BlockParams {
        wf: &params.tensors[6 * d],
        bf: &params.tensors[6 * d + 1],
        wt: &params.tensors[6 * d + 2],
        bt: &params.tensors[6 * d + 3],
        gamma: &params.tensors[6 * d + 4],
        beta: &params.tensors[6 * d + 5],
    }
}

/// f64 network forward with training-mode batch norm over the single
/// utterance, returning the pre-softmax logits.
fn network_logits_train_f64(model: &Model, params: &F64Params, input: &FeatureSequence) -> Grid {
    let cfg = &model.config;
    let t = input.frames();
    let mut h = grid_from_matrix(input.values());

    for (d, (unit, bn)) in model.blocks.iter().enumerate() {
        let p = block_params(params, d);
        let n = cfg.filters;
        let f = h.len();
        let k = cfg.memory;
        let l = cfg.lookahead;

        let mut first = vec![vec![0.0f64; t]; n];
        for ni in 0..n {
            for ti in 0..t {
                let mut acc = p.bf[ni];
                for fi in 0..f {
                    acc += p.wf[ni * f + fi] * h[fi][ti];
                }
                first[ni][ti] = act_f64(unit.g1, acc);
            }
        }

        let mut second = vec![vec![0.0f64; t]; n];
        for ni in 0..n {
            for ti in 0..t {
                let mut acc = p.bt[ni];
                for ki in 1..=k {
                    let s = ti as isize - k as isize + ki as isize + l as isize;
                    if s >= 0 && (s as usize) < t {
                        acc += p.wt[ni * k + ki - 1] * first[ni][s as usize];
                    }
                }
                second[ni][ti] = act_f64(unit.g2, acc);
            }
        }

        // Batch statistics over this utterance's frames (population variance).
        let mut normed = vec![vec![0.0f64; t]; n];
        for ni in 0..n {
            let mean: f64 = second[ni].iter().sum::<f64>() / t as f64;
            let var: f64 =
                second[ni].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
            let inv_std = 1.0 / (var + bn.eps as f64).sqrt();
            for ti in 0..t {
                let xhat = (second[ni][ti] - mean) * inv_std;
                normed[ni][ti] = p.gamma[ni] * xhat + p.beta[ni];
            }
        }
        h = normed;
    }

    let wh = &params.tensors[6 * model.blocks.len()];
    let bh = &params.tensors[6 * model.blocks.len() + 1];
    let classes = cfg.classes;
    let n = cfg.filters;
    let mut logits = vec![vec![0.0f64; t]; classes];
    for ci in 0..classes {
        for ti in 0..t {
            let mut acc = bh[ci];
            for ni in 0..n {
                acc += wh[ci * n + ni] * h[ni][ti];
            }
            logits[ci][ti] = acc;
        }
    }
    logits
}

/// Mean per-frame cross-entropy of the f64 training-mode forward.
pub fn network_loss_train_f64(
    model: &Model,
    params: &F64Params,
    input: &FeatureSequence,
    labels: &[usize],
) -> f64 {
    let logits = network_logits_train_f64(model, params, input);
    let t = input.frames();
    debug_assert_eq!(labels.len(), t);
    let classes = logits.len();
    let mut total = 0.0f64;
    for ti in 0..t {
        let max = (0..classes).map(|c| logits[c][ti]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..classes).map(|c| (logits[c][ti] - max).exp()).sum();
        let log_p = logits[labels[ti]][ti] - max - sum.ln();
        total -= log_p;
    }
    total / t as f64
}

/// f64 inference-mode posteriors (running batch-norm statistics, softmax
/// last); the independent check for the production batch forward.
pub fn network_posteriors_infer_f64(model: &Model, input: &FeatureSequence) -> Grid {
    let params = F64Params::from_model(model);
    let cfg = &model.config;
    let t = input.frames();
    let mut h = grid_from_matrix(input.values());

    for (d, (unit, bn)) in model.blocks.iter().enumerate() {
        let p = block_params(&params, d);
        let n = cfg.filters;
        let f = h.len();
        let k = cfg.memory;
        let l = cfg.lookahead;

        let mut first = vec![vec![0.0f64; t]; n];
        for ni in 0..n {
            for ti in 0..t {
                let mut acc = p.bf[ni];
                for fi in 0..f {
                    acc += p.wf[ni * f + fi] * h[fi][ti];
                }
                first[ni][ti] = act_f64(unit.g1, acc);
            }
        }

        let mut second = vec![vec![0.0f64; t]; n];
        for ni in 0..n {
            for ti in 0..t {
                let mut acc = p.bt[ni];
                for ki in 1..=k {
                    let s = ti as isize - k as isize + ki as isize + l as isize;
                    if s >= 0 && (s as usize) < t {
                        acc += p.wt[ni * k + ki - 1] * first[ni][s as usize];
                    }
                }
                second[ni][ti] = act_f64(unit.g2, acc);
            }
        }

        for ni in 0..n {
            let mean = bn.running_mean[ni] as f64;
            let inv_std = 1.0 / (bn.running_var[ni] as f64 + bn.eps as f64).sqrt();
            for ti in 0..t {
                second[ni][ti] = p.gamma[ni] * (second[ni][ti] - mean) * inv_std + p.beta[ni];
            }
        }
        h = second;
    }

    let wh = &params.tensors[6 * model.blocks.len()];
    let bh = &params.tensors[6 * model.blocks.len() + 1];
    let classes = cfg.classes;
    let n = cfg.filters;
    let mut out = vec![vec![0.0f64; t]; classes];
    for ti in 0..t {
        let logits: Vec<f64> = (0..classes)
            .map(|ci| {
                let mut acc = bh[ci];
                for ni in 0..n {
                    acc += wh[ci * n + ni] * h[ni][ti];
                }
                acc
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for ci in 0..classes {
            out[ci][ti] = exps[ci] / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{reduce_svdf_to_unit, unit_forward};
    use crate::network::{build, Arch, ModelConfig};
    use crate::numerics::Rng;

    #[test]
    fn f64_equivalence_is_tight() {
        // At f64 resolution the reduced unit and the SVDF definition agree to
        // 1e-10, well below anything f32 rounding could explain away.
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.uniform_usize(5);
            let f = 1 + rng.uniform_usize(6);
            let k = 1 + rng.uniform_usize(6);
            let t = 1 + rng.uniform_usize(12);
            let layer = SvdfLayer {
                beta: Matrix::from_vec(n, f, (0..n * f).map(|_| rng.uniform(-2.0, 2.0)).collect())
                    .unwrap(),
                alpha: Matrix::from_vec(
                    n,
                    k,
                    (0..n * k).map(|_| rng.uniform(-2.0, 2.0)).collect(),
                )
                .unwrap(),
                g: *rng.choose(&[Activation::Identity, Activation::Relu]),
            };
            let x = Matrix::from_vec(f, t, (0..f * t).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let direct = svdf_forward_f64(&layer, &x);
            let reduced = unit_forward_f64(&reduce_svdf_to_unit(&layer), &x);
            for ni in 0..n {
                for ti in 0..t {
                    worst = worst.max((direct[ni][ti] - reduced[ni][ti]).abs());
                }
            }
        }
        assert!(worst < 1e-10, "max deviation {worst}");
    }

    #[test]
    fn production_unit_matches_oracle() {
        for seed in 200..220 {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.uniform_usize(4);
            let f = 1 + rng.uniform_usize(5);
            let k = 1 + rng.uniform_usize(5);
            let l = rng.uniform_usize(k);
            let t = 1 + rng.uniform_usize(10);
            let unit = S1dcnnUnit {
                feature_weights: Matrix::from_vec(
                    n,
                    f,
                    (0..n * f).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
                .unwrap(),
                feature_bias: (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect(),
                time_weights: Matrix::from_vec(
                    n,
                    k,
                    (0..n * k).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
                .unwrap(),
                time_bias: (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect(),
                lookahead: l,
                g1: *rng.choose(&[Activation::Identity, Activation::Relu]),
                g2: *rng.choose(&[Activation::Identity, Activation::Relu]),
            };
            let x = Matrix::from_vec(f, t, (0..f * t).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
            let fast = unit_forward(&unit, &x).unwrap();
            let slow = unit_forward_f64(&unit, &x);
            for ni in 0..n {
                for ti in 0..t {
                    assert!(
                        (fast.at(ni, ti) as f64 - slow[ni][ti]).abs() < 1e-5,
                        "seed {seed} ({ni},{ti})"
                    );
                }
            }
        }
    }

    #[test]
    fn production_network_matches_oracle() {
        let cfg = ModelConfig {
            feature_dim: 3,
            context: 1,
            depth: 2,
            filters: 2,
            memory: 2,
            lookahead: 1,
            classes: 2,
            arch: Arch::S1dcnn,
            frame_hop_ms: 10,
        };
        let model = build(&cfg, &mut Rng::new(301)).unwrap();
        let mut rng = Rng::new(302);
        let t = 14;
        let dim = cfg.input_dim();
        let feats = FeatureSequence::new(
            Matrix::from_vec(dim, t, (0..dim * t).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap(),
        );
        let fast = model.forward(&feats).unwrap();
        let slow = network_posteriors_infer_f64(&model, &feats);
        for ci in 0..2 {
            for ti in 0..t {
                assert!(
                    (fast.at(ci, ti) as f64 - slow[ci][ti]).abs() < 1e-6,
                    "({ci},{ti}): {} vs {}",
                    fast.at(ci, ti),
                    slow[ci][ti]
                );
            }
        }
    }
}
