//! Finite-difference verification of every differentiable operation and of
//! the composed model.
//!
//! The check compares `backward()` gradients against central differences
//! `(f(x+h) - f(x-h)) / 2h` with `h = 1e-4` in 64-bit arithmetic. Losses
//! are random-weighted sums of the operation output so that every output
//! element influences the scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::fusion::{self, AttentionParams, TokenMap};
use crate::head::{self, DilatedStackParams};
use crate::model::{DgiqaModel, ModelConfig};
use crate::nn::BnSettings;
use crate::tcb::{TcbParams, TcbWidths};
use crate::tensor::{BnMode, ConvSpec, Tensor};
use crate::training::{consistency_loss, mse_loss, total_loss};

/// Central-difference step (64-bit).
pub const FD_STEP: f64 = 1e-4;
/// Maximum allowed relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Guard for near-zero gradients in the relative error.
const REL_GUARD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub reports: Vec<GradCheckReport>,
    pub tolerance: f64,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed())
    }

    pub fn worst(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_GUARD)
}

fn uniform(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked ops like ReLU.
fn uniform_off_zero(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            sign * rng.gen_range(0.1..1.0)
        })
        .collect()
}

/// Compares analytic gradients of `forward(inputs)` against central
/// differences over every element of every input. Returns the max relative
/// error.
fn check_against_fd(
    inputs: &[Tensor<f64>],
    forward: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    let loss = forward(inputs);
    loss.backward().expect("scalar loss");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst = 0.0_f64;
    for (ti, t) in inputs.iter().enumerate() {
        let original = t.to_vec();
        for i in 0..original.len() {
            let mut bumped = original.clone();
            bumped[i] = original[i] + FD_STEP;
            t.set_values(bumped);
            let plus = forward(inputs).item();
            let mut bumped = original.clone();
            bumped[i] = original[i] - FD_STEP;
            t.set_values(bumped);
            let minus = forward(inputs).item();
            t.set_values(original.clone());
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ti][i], fd));
        }
    }
    worst
}

/// Weighted-sum projection to a scalar so every output element matters.
fn project(out: &Tensor<f64>, weights: &Tensor<f64>) -> Tensor<f64> {
    out.mul(weights).expect("projection shape").sum_all()
}

fn param(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, uniform(rng, n, -1.0, 1.0)).unwrap()
}

fn param_off_zero(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, uniform_off_zero(rng, n)).unwrap()
}

fn weights_like(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).unwrap()
}

fn bn64() -> BnSettings<f64> {
    BnSettings {
        eps: 1e-5,
        momentum: 0.1,
    }
}

/// Per-operation finite-difference suite.
pub fn run_op_suite(seed: u64, instances: usize) -> GradCheckSummary {
    let mut reports = Vec::new();
    let mut run = |name: &str, f: &dyn Fn(&mut ChaCha12Rng) -> f64| {
        let mut worst = 0.0_f64;
        for k in 0..instances {
            let mut rng = ChaCha12Rng::seed_from_u64(
                seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
            );
            worst = worst.max(f(&mut rng));
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            instances,
            max_rel_err: worst,
        });
    };

    run("add_sub_mul", &|rng| {
        let a = param(rng, vec![2, 3]);
        let b = param(rng, vec![2, 3]);
        let c = param(rng, vec![2, 3]);
        let w = weights_like(rng, &[2, 3]);
        check_against_fd(&[a, b, c], &move |ins| {
            let y = ins[0]
                .add(&ins[1])
                .unwrap()
                .sub(&ins[2])
                .unwrap()
                .mul(&ins[1])
                .unwrap();
            project(&y, &w)
        })
    });

    run("scalar_ops", &|rng| {
        let a = param(rng, vec![4]);
        let w = weights_like(rng, &[4]);
        check_against_fd(&[a], &move |ins| {
            project(&ins[0].mul_scalar(1.7).add_scalar(-0.3), &w)
        })
    });

    run("bias_broadcasts", &|rng| {
        let x = param(rng, vec![2, 3]);
        let row = param(rng, vec![3]);
        let s = param(rng, vec![1]);
        let w = weights_like(rng, &[2, 3]);
        check_against_fd(&[x, row, s], &move |ins| {
            let y = ins[0]
                .add_row_bias(&ins[1])
                .unwrap()
                .add_scalar_tensor(&ins[2])
                .unwrap();
            project(&y, &w)
        })
    });

    run("relu", &|rng| {
        let x = param_off_zero(rng, vec![3, 4]);
        let w = weights_like(rng, &[3, 4]);
        check_against_fd(&[x], &move |ins| project(&ins[0].relu(), &w))
    });

    run("sigmoid", &|rng| {
        let x = param(rng, vec![3, 4]);
        let w = weights_like(rng, &[3, 4]);
        check_against_fd(&[x], &move |ins| project(&ins[0].sigmoid(), &w))
    });

    run("softmax", &|rng| {
        let x = param(rng, vec![2, 3, 4]);
        let w = weights_like(rng, &[2, 3, 4]);
        check_against_fd(&[x], &move |ins| project(&ins[0].softmax(2).unwrap(), &w))
    });

    run("softmax_middle_axis", &|rng| {
        let x = param(rng, vec![2, 3, 2]);
        let w = weights_like(rng, &[2, 3, 2]);
        check_against_fd(&[x], &move |ins| project(&ins[0].softmax(1).unwrap(), &w))
    });

    run("matmul_2d", &|rng| {
        let a = param(rng, vec![3, 4]);
        let b = param(rng, vec![4, 2]);
        let w = weights_like(rng, &[3, 2]);
        check_against_fd(&[a, b], &move |ins| {
            project(&ins[0].matmul(&ins[1]).unwrap(), &w)
        })
    });

    run("matmul_batched", &|rng| {
        let a = param(rng, vec![2, 3, 4]);
        let b = param(rng, vec![2, 4, 2]);
        let shared = param(rng, vec![2, 5]);
        let w = weights_like(rng, &[2, 3, 5]);
        check_against_fd(&[a, b, shared], &move |ins| {
            let y = ins[0].matmul(&ins[1]).unwrap().matmul(&ins[2]).unwrap();
            project(&y, &w)
        })
    });

    run("transpose_reshape_concat_slice", &|rng| {
        let a = param(rng, vec![2, 3]);
        let b = param(rng, vec![2, 2]);
        let w = weights_like(rng, &[2, 4]);
        check_against_fd(&[a, b], &move |ins| {
            let at = ins[0].transpose_last2().unwrap(); // [3,2]
            let part = at.slice_axis(0, 0, 2).unwrap(); // [2,2]
            let joined = Tensor::concat(&[part, ins[1].clone()], 1).unwrap(); // [2,4]
            let y = joined.reshape(vec![2, 4]).unwrap();
            project(&y, &w)
        })
    });

    run("crop_and_flips", &|rng| {
        let x = param(rng, vec![1, 2, 4, 4]);
        let w = weights_like(rng, &[1, 2, 2, 3]);
        check_against_fd(&[x], &move |ins| {
            let y = ins[0]
                .flip_horizontal()
                .flip_vertical()
                .crop_hw(1, 0, 2, 3)
                .unwrap();
            project(&y, &w)
        })
    });

    run("conv2d_3x3", &|rng| {
        let x = param(rng, vec![1, 2, 5, 5]);
        let wt = param(rng, vec![3, 2, 3, 3]);
        let b = param(rng, vec![3]);
        let spec = ConvSpec::new_square(3, 1, 1, 1, 2, 3);
        let w = weights_like(rng, &[1, 3, 5, 5]);
        check_against_fd(&[x, wt, b], &move |ins| {
            project(&ins[0].conv2d(&ins[1], &ins[2], &spec).unwrap(), &w)
        })
    });

    run("conv2d_dilated", &|rng| {
        let x = param(rng, vec![1, 1, 6, 6]);
        let wt = param(rng, vec![2, 1, 3, 3]);
        let b = param(rng, vec![2]);
        let spec = ConvSpec::new_square(3, 1, 2, 2, 1, 2);
        let w = weights_like(rng, &[1, 2, 6, 6]);
        check_against_fd(&[x, wt, b], &move |ins| {
            project(&ins[0].conv2d(&ins[1], &ins[2], &spec).unwrap(), &w)
        })
    });

    run("conv2d_strided", &|rng| {
        let x = param(rng, vec![2, 1, 6, 6]);
        let wt = param(rng, vec![2, 1, 3, 3]);
        let b = param(rng, vec![2]);
        let spec = ConvSpec::new_square(3, 2, 1, 1, 1, 2);
        let w = weights_like(rng, &[2, 2, 3, 3]);
        check_against_fd(&[x, wt, b], &move |ins| {
            project(&ins[0].conv2d(&ins[1], &ins[2], &spec).unwrap(), &w)
        })
    });

    run("conv2d_patch_embed", &|rng| {
        let x = param(rng, vec![1, 3, 8, 8]);
        let wt = param(rng, vec![2, 3, 4, 4]);
        let b = param(rng, vec![2]);
        let spec = ConvSpec::new_square(4, 4, 0, 1, 3, 2);
        let w = weights_like(rng, &[1, 2, 2, 2]);
        check_against_fd(&[x, wt, b], &move |ins| {
            project(&ins[0].conv2d(&ins[1], &ins[2], &spec).unwrap(), &w)
        })
    });

    run("conv1x1", &|rng| {
        let x = param(rng, vec![1, 3, 3, 3]);
        let wt = param(rng, vec![2, 3, 1, 1]);
        let b = param(rng, vec![2]);
        let w = weights_like(rng, &[1, 2, 3, 3]);
        check_against_fd(&[x, wt, b], &move |ins| {
            project(&ins[0].conv1x1(&ins[1], &ins[2]).unwrap(), &w)
        })
    });

    run("batchnorm_train", &|rng| {
        let x = param(rng, vec![2, 2, 3, 3]);
        let gamma = param_off_zero(rng, vec![2]);
        let beta = param(rng, vec![2]);
        let w = weights_like(rng, &[2, 2, 3, 3]);
        check_against_fd(&[x, gamma, beta], &move |ins| {
            let rm = Tensor::zeros(vec![2]);
            let rv = Tensor::full(vec![2], 1.0);
            let y = ins[0]
                .batchnorm2d(&ins[1], &ins[2], &rm, &rv, 1e-5, 0.1, BnMode::Train)
                .unwrap();
            project(&y, &w)
        })
    });

    run("batchnorm_eval", &|rng| {
        let x = param(rng, vec![2, 2, 3, 3]);
        let gamma = param_off_zero(rng, vec![2]);
        let beta = param(rng, vec![2]);
        let rm_vals = uniform(rng, 2, -0.5, 0.5);
        let rv_vals = uniform(rng, 2, 0.5, 1.5);
        let w = weights_like(rng, &[2, 2, 3, 3]);
        check_against_fd(&[x, gamma, beta], &move |ins| {
            let rm = Tensor::from_vec(vec![2], rm_vals.clone()).unwrap();
            let rv = Tensor::from_vec(vec![2], rv_vals.clone()).unwrap();
            let y = ins[0]
                .batchnorm2d(&ins[1], &ins[2], &rm, &rv, 1e-5, 0.1, BnMode::Eval)
                .unwrap();
            project(&y, &w)
        })
    });

    run("layer_norm", &|rng| {
        let x = param(rng, vec![2, 3, 4]);
        let gamma = param_off_zero(rng, vec![4]);
        let beta = param(rng, vec![4]);
        let w = weights_like(rng, &[2, 3, 4]);
        check_against_fd(&[x, gamma, beta], &move |ins| {
            project(&ins[0].layer_norm(&ins[1], &ins[2], 1e-5).unwrap(), &w)
        })
    });

    run("global_avg_pool", &|rng| {
        let x = param(rng, vec![2, 3, 4, 4]);
        let w = weights_like(rng, &[2, 3]);
        check_against_fd(&[x], &move |ins| {
            project(&ins[0].global_avg_pool().unwrap(), &w)
        })
    });

    run("resize_avg", &|rng| {
        let x = param(rng, vec![1, 2, 6, 6]);
        let w = weights_like(rng, &[1, 2, 3, 3]);
        check_against_fd(&[x], &move |ins| {
            project(&ins[0].resize_avg((3, 3)).unwrap(), &w)
        })
    });

    run("token_layout", &|rng| {
        let x = param(rng, vec![1, 3, 2, 2]);
        let w = weights_like(rng, &[1, 3, 2, 2]);
        check_against_fd(&[x], &move |ins| {
            let tokens = ins[0].nchw_to_tokens().unwrap();
            let back = tokens.tokens_to_nchw((2, 2)).unwrap();
            project(&back, &w)
        })
    });

    run("attention_block", &|rng| {
        let d = 4;
        let q_src = param(rng, vec![1, 3, d]);
        let kv_src = param(rng, vec![1, 3, d]);
        let wq = param(rng, vec![d, d]);
        let wk = param(rng, vec![d, d]);
        let wv = param(rng, vec![d, d]);
        let wo = param(rng, vec![d, d]);
        let w = weights_like(rng, &[1, 3, d]);
        check_against_fd(&[q_src, kv_src, wq, wk, wv, wo], &move |ins| {
            let params = AttentionParams {
                w_q: ins[2].clone(),
                w_k: ins[3].clone(),
                w_v: ins[4].clone(),
                w_o: ins[5].clone(),
                heads: 2,
            };
            let q = TokenMap {
                tokens: ins[0].clone(),
                spatial: (3, 1),
            };
            let kv = TokenMap {
                tokens: ins[1].clone(),
                spatial: (3, 1),
            };
            let out = fusion::cross_attention(&q, &kv, &params, true, None).unwrap();
            project(&out.tokens, &w)
        })
    });

    run("tcb_block", &|rng| {
        let widths = TcbWidths::new(3, 2, 2);
        let mut init_rng = ChaCha12Rng::seed_from_u64(rng.gen());
        let p = TcbParams::<f64>::init(widths, &mut init_rng);
        let x = param(rng, vec![2, 3, 3, 3]);
        let w = weights_like(rng, &[2, 2, 3, 3]);
        let inputs = vec![
            x,
            p.proj.weight.clone(),
            p.proj.bias.clone(),
            p.squeeze.weight.clone(),
            p.squeeze.bias.clone(),
            p.excite.weight.clone(),
            p.excite.bias.clone(),
            p.local.weight.clone(),
            p.local.bias.clone(),
            p.bn.gamma.clone(),
            p.bn.beta.clone(),
        ];
        check_against_fd(&inputs, &move |ins| {
            let y = crate::tcb::tcb_forward(&ins[0], &p, &bn64(), BnMode::Train).unwrap();
            project(&y, &w)
        })
    });

    run("dilated_stack", &|rng| {
        let mut init_rng = ChaCha12Rng::seed_from_u64(rng.gen());
        let p = DilatedStackParams::<f64>::init(2, 2, &mut init_rng);
        let x = param(rng, vec![1, 2, 3, 3]);
        let w = weights_like(rng, &[1, 2, 3, 3]);
        let inputs = vec![
            x,
            p.conv_a.weight.clone(),
            p.conv_a.bias.clone(),
            p.bn_a.gamma.clone(),
            p.bn_a.beta.clone(),
            p.conv_b.weight.clone(),
            p.conv_b.bias.clone(),
            p.bn_b.gamma.clone(),
            p.bn_b.beta.clone(),
        ];
        check_against_fd(&inputs, &move |ins| {
            let y = head::dilated_stack(&ins[0], &p, &bn64(), BnMode::Train).unwrap();
            project(&y, &w)
        })
    });

    GradCheckSummary {
        reports,
        tolerance: TOLERANCE,
    }
}

/// Finite-difference check through the composed model: toy configuration,
/// full training loss (score MSE plus flip consistency), sampled parameter
/// coordinates.
pub fn run_model_check(
    seed: u64,
    instances: usize,
    coords_per_tensor: usize,
) -> Result<GradCheckSummary> {
    let config = ModelConfig::toy();
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let mut rng =
            ChaCha12Rng::seed_from_u64(seed.wrapping_mul(7_919).wrapping_add(k as u64));
        let model = DgiqaModel::<f64>::init(config.clone(), rng.gen())?;
        let side = config.input_size;
        let rgb = Tensor::from_vec(
            vec![1, 3, side, side],
            uniform(&mut rng, 3 * side * side, 0.0, 1.0),
        )?;
        let depth = Tensor::from_vec(
            vec![1, 1, side, side],
            uniform(&mut rng, side * side, 0.0, 1.0),
        )?;
        let target = Tensor::from_vec(vec![1], vec![rng.gen_range(0.1..0.9)])?;

        let loss_of = |m: &DgiqaModel<f64>| -> Result<Tensor<f64>> {
            let trace = m.forward(&rgb, &depth, BnMode::Train)?;
            let mse = mse_loss(&trace.q_hat, &target)?;
            let flip =
                m.forward(&rgb.flip_horizontal(), &depth.flip_horizontal(), BnMode::Train)?;
            let cl = consistency_loss(&trace.q_hat, &flip.q_hat)?;
            Ok(total_loss(&mse, &cl, 0.3)?)
        };

        let learnable = model.learnable();
        for (_, t) in &learnable {
            t.zero_grad();
        }
        let loss = loss_of(&model)?;
        loss.backward()?;
        let analytic: Vec<Vec<f64>> = learnable
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        for (ti, (_, t)) in learnable.iter().enumerate() {
            let original = t.to_vec();
            for _ in 0..coords_per_tensor.min(original.len()) {
                let i = rng.gen_range(0..original.len());
                let mut bumped = original.clone();
                bumped[i] = original[i] + FD_STEP;
                t.set_values(bumped);
                let plus = loss_of(&model)?.item();
                let mut bumped = original.clone();
                bumped[i] = original[i] - FD_STEP;
                t.set_values(bumped);
                let minus = loss_of(&model)?.item();
                t.set_values(original.clone());
                let fd = (plus - minus) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[ti][i], fd));
            }
        }
    }
    Ok(GradCheckSummary {
        reports: vec![GradCheckReport {
            name: "composed_model".to_string(),
            instances,
            max_rel_err: worst,
        }],
        tolerance: TOLERANCE,
    })
}

/// Per-op suite plus the composed-model check.
pub fn run_full_suite(seed: u64, instances: usize) -> Result<GradCheckSummary> {
    let mut summary = run_op_suite(seed, instances);
    let model = run_model_check(seed, instances, 2)?;
    summary.reports.extend(model.reports);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_at_tolerance() {
        let summary = run_op_suite(11, 3);
        for r in &summary.reports {
            assert!(
                r.passed(),
                "{}: max rel err {} exceeds {}",
                r.name,
                r.max_rel_err,
                TOLERANCE
            );
        }
    }

    #[test]
    fn composed_model_passes_at_tolerance() {
        let summary = run_model_check(11, 2, 2).unwrap();
        assert!(summary.passed(), "worst rel err {}", summary.worst());
    }
}
