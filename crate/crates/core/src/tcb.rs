//! Transformer-CNN Bridge: per-stage channel re-calibration plus a 3x3
//! local convolution.
//!
//! The squeeze/excite path runs 1x1 convolutions over the full feature map,
//! so the gate is computed per spatial location rather than from a pooled
//! descriptor. The gated map then passes through conv3x3 -> BN -> ReLU.

use rand_chacha::ChaCha12Rng;

use crate::error::TensorError;
use crate::nn::{BnParams, BnSettings, ConvParams, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, ConvSpec, Tensor};

/// Channel widths of one bridge block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcbWidths {
    pub c_in: usize,
    pub c_proj: usize,
    pub c_squeeze: usize,
}

impl TcbWidths {
    /// Squeeze width is `c_proj / reduction`, clamped to at least one channel
    /// so narrow toy configs stay valid.
    pub fn new(c_in: usize, c_proj: usize, reduction: usize) -> Self {
        TcbWidths {
            c_in,
            c_proj,
            c_squeeze: (c_proj / reduction).max(1),
        }
    }
}

pub struct TcbParams<S: Scalar> {
    pub proj: ConvParams<S>,
    pub squeeze: ConvParams<S>,
    pub excite: ConvParams<S>,
    pub local: ConvParams<S>,
    pub bn: BnParams<S>,
    pub widths: TcbWidths,
}

impl<S: Scalar> TcbParams<S> {
    pub fn init(widths: TcbWidths, rng: &mut ChaCha12Rng) -> Self {
        let TcbWidths {
            c_in,
            c_proj,
            c_squeeze,
        } = widths;
        TcbParams {
            proj: ConvParams::init(ConvSpec::new_square(1, 1, 0, 1, c_in, c_proj), rng),
            squeeze: ConvParams::init(ConvSpec::new_square(1, 1, 0, 1, c_proj, c_squeeze), rng),
            excite: ConvParams::init(ConvSpec::new_square(1, 1, 0, 1, c_squeeze, c_proj), rng),
            local: ConvParams::init(ConvSpec::new_square(3, 1, 1, 1, c_proj, c_proj), rng),
            bn: BnParams::init(c_proj),
            widths,
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
            + self.squeeze.param_count()
            + self.excite.param_count()
            + self.local.param_count()
            + self.bn.param_count()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        self.proj.visit(&format!("{prefix}.proj"), f);
        self.squeeze.visit(&format!("{prefix}.squeeze"), f);
        self.excite.visit(&format!("{prefix}.excite"), f);
        self.local.visit(&format!("{prefix}.local"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

/// Gate map `A = sigmoid(excite(relu(squeeze(x))))` for the projected `x`.
pub fn attention_map<S: Scalar>(
    projected: &Tensor<S>,
    params: &TcbParams<S>,
) -> Result<Tensor<S>, TensorError> {
    let squeezed = params.squeeze.apply(projected)?.relu();
    Ok(params.excite.apply(&squeezed)?.sigmoid())
}

/// Full bridge: project, gate, and locally convolve one pyramid stage.
pub fn tcb_forward<S: Scalar>(
    f_in: &Tensor<S>,
    params: &TcbParams<S>,
    bn: &BnSettings<S>,
    mode: BnMode,
) -> Result<Tensor<S>, TensorError> {
    let projected = params.proj.apply(f_in)?;
    let gate = attention_map(&projected, params)?;
    let gated = projected.mul(&gate)?;
    Ok(params.bn.apply(&params.local.apply(&gated)?, bn, mode)?.relu())
}

/// Closed-form learnable-scalar count of one bridge block.
pub fn tcb_param_count(widths: &TcbWidths) -> usize {
    let TcbWidths {
        c_in,
        c_proj,
        c_squeeze,
    } = *widths;
    let proj = c_in * c_proj + c_proj;
    let squeeze = c_proj * c_squeeze + c_squeeze;
    let excite = c_squeeze * c_proj + c_proj;
    let local = c_proj * c_proj * 9 + c_proj;
    let bn = 2 * c_proj;
    proj + squeeze + excite + local + bn
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use rand::SeedableRng;

    fn bn64() -> BnSettings<f64> {
        BnSettings {
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    #[test]
    fn full_scale_channel_table() {
        // C=(96,192,384,768) -> C'=(64,128,256,512) -> C''=(4,8,16,32)
        for (i, (c, cp)) in [(96, 64), (192, 128), (384, 256), (768, 512)]
            .into_iter()
            .enumerate()
        {
            let w = TcbWidths::new(c, cp, 16);
            assert_eq!(w.c_squeeze, cp / 16, "stage {}", i + 1);
        }
        assert_eq!(TcbWidths::new(96, 64, 16).c_squeeze, 4);
    }

    #[test]
    fn squeeze_width_clamps_to_one() {
        let w = TcbWidths::new(16, 8, 16);
        assert_eq!(w.c_squeeze, 1);
    }

    #[test]
    fn zeroed_gate_branch_gives_half_everywhere() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let widths = TcbWidths::new(4, 4, 2);
        let params = TcbParams::<f64>::init(widths, &mut rng);
        params.squeeze.weight.set_values(vec![0.0; params.squeeze.weight.numel()]);
        params.excite.weight.set_values(vec![0.0; params.excite.weight.numel()]);
        let x = Tensor::from_vec(vec![1, 4, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let projected = params.proj.apply(&x).unwrap();
        let gate = attention_map(&projected, &params).unwrap();
        for &v in gate.values().iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn gate_lies_strictly_inside_unit_interval() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let widths = TcbWidths::new(8, 4, 16);
        let params = TcbParams::<f64>::init(widths, &mut rng);
        use rand::Rng;
        let xv: Vec<f64> = (0..8 * 4 * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = Tensor::from_vec(vec![1, 8, 4, 4], xv).unwrap();
        let projected = params.proj.apply(&x).unwrap();
        let gate = attention_map(&projected, &params).unwrap();
        for &v in gate.values().iter() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn forward_preserves_spatial_dims() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let widths = TcbWidths::new(8, 4, 16);
        let params = TcbParams::<f64>::init(widths, &mut rng);
        let x = Tensor::full(vec![2, 8, 5, 7], 0.3);
        let y = tcb_forward(&x, &params, &bn64(), BnMode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 7]);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let params = TcbParams::<f64>::init(TcbWidths::new(8, 4, 16), &mut rng);
        let x = Tensor::zeros(vec![1, 5, 4, 4]);
        assert!(matches!(
            tcb_forward(&x, &params, &bn64(), BnMode::Eval),
            Err(TensorError::DimensionMismatch { axis: 1, .. })
        ));
    }

    #[test]
    fn tiny_instance_matches_scalar_trace() {
        // 1x1x1x1 maps make every conv a scalar affine; trace the arithmetic
        // by hand. proj: 2 inputs -> 1 channel.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let widths = TcbWidths::new(2, 1, 16); // c_squeeze clamps to 1
        let params = TcbParams::<f64>::init(widths, &mut rng);
        params.proj.weight.set_values(vec![0.5, -1.0]);
        params.proj.bias.set_values(vec![0.1]);
        params.squeeze.weight.set_values(vec![2.0]);
        params.squeeze.bias.set_values(vec![0.0]);
        params.excite.weight.set_values(vec![1.5]);
        params.excite.bias.set_values(vec![-0.2]);
        // local 3x3 on a 1x1 map with padding 1: only the center tap lands
        let mut lw = vec![0.0; 9];
        lw[4] = 2.0;
        params.local.weight.set_values(lw);
        params.local.bias.set_values(vec![0.05]);

        let x = Tensor::from_vec(vec![1, 2, 1, 1], vec![0.8, 0.3]).unwrap();
        let projected = params.proj.apply(&x).unwrap();
        let p = 0.5 * 0.8 - 1.0 * 0.3 + 0.1;
        assert!((projected.item() - p).abs() < 1e-12);

        let gate = attention_map(&projected, &params).unwrap();
        let s = (2.0 * p).max(0.0);
        let a_direct = 1.0 / (1.0 + (-(1.5 * s - 0.2_f64)).exp());
        assert!((gate.item() - a_direct).abs() < 1e-12);

        // eval-mode BN with fresh buffers: (v - 0)/sqrt(1+eps)
        let y = tcb_forward(&x, &params, &bn64(), BnMode::Eval).unwrap();
        let pre_bn = 2.0 * (p * a_direct) + 0.05;
        let want = (pre_bn / (1.0f64 + 1e-5).sqrt()).max(0.0);
        assert!((y.item() - want).abs() < 1e-12);
    }

    #[test]
    fn param_count_closed_form_matches_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for widths in [
            TcbWidths::new(96, 64, 16),
            TcbWidths::new(16, 8, 16),
            TcbWidths::new(8, 4, 16),
        ] {
            let params = TcbParams::<f64>::init(widths, &mut rng);
            let mut enumerated = 0;
            params.visit("tcb", &mut |_, kind, t| {
                if kind == ParamKind::Learnable {
                    enumerated += t.numel();
                }
            });
            assert_eq!(enumerated, tcb_param_count(&widths));
            assert_eq!(enumerated, params.param_count());
        }
        // spot-check the full-scale stage-1 block against the written-out sum
        let w = TcbWidths::new(96, 64, 16);
        let want = (96 * 64 + 64) + (64 * 4 + 4) + (4 * 64 + 64) + (64 * 64 * 9 + 64) + 2 * 64;
        assert_eq!(tcb_param_count(&w), want);
    }

    #[test]
    fn doubling_proj_width_roughly_quadruples_local_term() {
        let a = tcb_param_count(&TcbWidths::new(96, 64, 16));
        let b = tcb_param_count(&TcbWidths::new(96, 128, 16));
        let ratio = b as f64 / a as f64;
        assert!(ratio > 3.0 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn gating_scales_channel_contribution_toward_zero() {
        // shrink the gate on one channel by scaling its pre-sigmoid logit
        // far negative and confirm the gated magnitude collapses
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let widths = TcbWidths::new(4, 2, 2);
        let params = TcbParams::<f64>::init(widths, &mut rng);
        use rand::Rng;
        let xv: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen_range(0.2..1.0)).collect();
        let x = Tensor::from_vec(vec![1, 4, 3, 3], xv).unwrap();
        let projected = params.proj.apply(&x).unwrap();
        let gate = attention_map(&projected, &params).unwrap();

        let norm_of = |t: &Tensor<f64>, ch: usize| -> f64 {
            t.values()[ch * 9..(ch + 1) * 9]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let base = norm_of(&projected.mul(&gate).unwrap(), 0);
        for eps in [0.1, 0.01, 0.001] {
            let mut gv = gate.to_vec();
            for v in gv[0..9].iter_mut() {
                *v *= eps;
            }
            let gate_scaled = Tensor::from_vec(vec![1, 2, 3, 3], gv).unwrap();
            let contribution = norm_of(&projected.mul(&gate_scaled).unwrap(), 0);
            assert!(contribution <= base * eps * 1.0001 + 1e-15);
        }
    }
}
