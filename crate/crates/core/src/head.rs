//! Dilated-convolution scoring head.
//!
//! Two size-preserving 3x3 convolutions with dilation rates 2 and 4 widen
//! the receptive field; global average pooling and a sigmoid-squashed fully
//! connected layer turn the map into a score in (0,1).

use rand_chacha::ChaCha12Rng;

use crate::error::TensorError;
use crate::nn::{xavier_uniform, BnParams, BnSettings, ConvParams, ParamKind, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, ConvSpec, Tensor};

pub struct DilatedStackParams<S: Scalar> {
    pub conv_a: ConvParams<S>,
    pub bn_a: BnParams<S>,
    pub conv_b: ConvParams<S>,
    pub bn_b: BnParams<S>,
}

impl<S: Scalar> DilatedStackParams<S> {
    pub fn init(d_in: usize, d_head: usize, rng: &mut ChaCha12Rng) -> Self {
        DilatedStackParams {
            conv_a: ConvParams::init(ConvSpec::new_square(3, 1, 2, 2, d_in, d_head), rng),
            bn_a: BnParams::init(d_head),
            conv_b: ConvParams::init(ConvSpec::new_square(3, 1, 4, 4, d_head, d_head), rng),
            bn_b: BnParams::init(d_head),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.param_count()
            + self.bn_a.param_count()
            + self.conv_b.param_count()
            + self.bn_b.param_count()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        self.conv_a.visit(&format!("{prefix}.conv_a"), f);
        self.bn_a.visit(&format!("{prefix}.bn_a"), f);
        self.conv_b.visit(&format!("{prefix}.conv_b"), f);
        self.bn_b.visit(&format!("{prefix}.bn_b"), f);
    }
}

/// `ReLU(BN(Conv_d4(ReLU(BN(Conv_d2(x))))))`; spatial dims preserved.
pub fn dilated_stack<S: Scalar>(
    f_fused: &Tensor<S>,
    params: &DilatedStackParams<S>,
    bn: &BnSettings<S>,
    mode: BnMode,
) -> Result<Tensor<S>, TensorError> {
    let a = params
        .bn_a
        .apply(&params.conv_a.apply(f_fused)?, bn, mode)?
        .relu();
    Ok(params.bn_b.apply(&params.conv_b.apply(&a)?, bn, mode)?.relu())
}

/// Final fully connected projection.
pub struct FcParams<S: Scalar> {
    /// `[D, 1]` column of weights.
    pub weight: Tensor<S>,
    /// `[1]` bias.
    pub bias: Tensor<S>,
}

impl<S: Scalar> FcParams<S> {
    pub fn init(d_in: usize, rng: &mut ChaCha12Rng) -> Self {
        FcParams {
            weight: xavier_uniform(rng, vec![d_in, 1], d_in, 1),
            bias: Tensor::param(vec![1], vec![S::zero()]).expect("fc bias"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + 1
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(&format!("{prefix}.weight"), ParamKind::Learnable, &self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Learnable, &self.bias);
    }
}

pub struct HeadParams<S: Scalar> {
    pub dilated: Option<DilatedStackParams<S>>,
    pub fc: FcParams<S>,
}

impl<S: Scalar> HeadParams<S> {
    pub fn param_count(&self) -> usize {
        self.dilated.as_ref().map_or(0, |d| d.param_count()) + self.fc.param_count()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        if let Some(d) = &self.dilated {
            d.visit(&format!("{prefix}.dilated"), f);
        }
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
}

/// `sigmoid(W . GAP(f) + b)` per batch item, strictly inside (0,1).
pub fn predict<S: Scalar>(
    f_dilated: &Tensor<S>,
    fc: &FcParams<S>,
) -> Result<Tensor<S>, TensorError> {
    let n = f_dilated.shape()[0];
    let pooled = f_dilated.global_avg_pool()?;
    let logits = pooled.matmul(&fc.weight)?.reshape(vec![n])?;
    Ok(logits.add_scalar_tensor(&fc.bias)?.sigmoid())
}

/// Full-reference score from the difference of two feature maps produced by
/// shared weights: `sigmoid(W . GAP(f_ref - f_dist) + b)`.
pub fn fr_predict<S: Scalar>(
    f_ref: &Tensor<S>,
    f_dist: &Tensor<S>,
    fc: &FcParams<S>,
) -> Result<Tensor<S>, TensorError> {
    predict(&f_ref.sub(f_dist)?, fc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    type T = Tensor<f64>;

    fn bn64() -> BnSettings<f64> {
        BnSettings {
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    #[test]
    fn dilated_stack_preserves_spatial_dims() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = DilatedStackParams::<f64>::init(4, 6, &mut rng);
        for (h, w) in [(7usize, 7usize), (2, 2), (1, 1), (5, 3)] {
            let x = T::full(vec![1, 4, h, w], 0.4);
            let y = dilated_stack(&x, &params, &bn64(), BnMode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, 6, h, w]);
        }
    }

    #[test]
    fn zero_input_is_fine_unless_group_degenerates() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params = DilatedStackParams::<f64>::init(2, 2, &mut rng);
        params.conv_a.bias.set_values(vec![0.0; 2]);
        params.conv_b.bias.set_values(vec![0.0; 2]);
        // zero-variance channels are fine while the group has >1 element
        let x = T::zeros(vec![1, 2, 2, 2]);
        let y = dilated_stack(&x, &params, &bn64(), BnMode::Train).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
        // a single-element group in train mode is the degenerate case
        let tiny = T::zeros(vec![1, 2, 1, 1]);
        assert!(matches!(
            dilated_stack(&tiny, &params, &bn64(), BnMode::Train),
            Err(TensorError::DegenerateVariance)
        ));
    }

    #[test]
    fn single_channel_scalar_trace() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = DilatedStackParams::<f64>::init(1, 1, &mut rng);
        // center taps only: on a 2x2 map with padding=dilation, off-center
        // taps of a 3x3 kernel fall outside for dilation 2 and 4
        let mut wa = vec![0.0; 9];
        wa[4] = 1.5;
        params.conv_a.weight.set_values(wa);
        params.conv_a.bias.set_values(vec![0.25]);
        let mut wb = vec![0.0; 9];
        wb[4] = -2.0;
        params.conv_b.weight.set_values(wb);
        params.conv_b.bias.set_values(vec![3.0]);

        let x = T::from_vec(vec![1, 1, 2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let y = dilated_stack(&x, &params, &bn64(), BnMode::Eval).unwrap();
        let istd = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (got, &xv) in y.values().iter().zip(&[0.1, 0.2, -0.3, 0.4]) {
            let a = ((1.5 * xv + 0.25) * istd).max(0.0);
            let want = ((-2.0 * a + 3.0) * istd).max(0.0);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dilation_two_reaches_two_pixels_away() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let params = DilatedStackParams::<f64>::init(1, 1, &mut rng);
        // top-left tap of the d=2 kernel looks 2 px up-left
        let mut wa = vec![0.0; 9];
        wa[0] = 1.0;
        params.conv_a.weight.set_values(wa);
        params.conv_a.bias.set_values(vec![0.0]);
        let mut xv = vec![0.0; 25];
        xv[0] = 7.0; // (0,0)
        let x = T::from_vec(vec![1, 1, 5, 5], xv).unwrap();
        let y = params.conv_a.apply(&x).unwrap();
        // output (2,2) sees input (2*1+0*2-2, ...) = (0,0)
        assert_eq!(y.values()[2 * 5 + 2], 7.0);
        assert_eq!(y.values()[0], 0.0);
    }

    #[test]
    fn predict_is_sigmoid_of_bias_when_weights_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let fc = FcParams::<f64>::init(3, &mut rng);
        fc.weight.set_values(vec![0.0; 3]);
        let x = T::full(vec![2, 3, 2, 2], 0.9);
        let q = predict(&x, &fc).unwrap();
        assert_eq!(q.to_vec(), vec![0.5, 0.5]);
        fc.bias.set_values(vec![1.0]);
        let q = predict(&x, &fc).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((q.values()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn predict_constant_map_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let fc = FcParams::<f64>::init(2, &mut rng);
        fc.weight.set_values(vec![0.3, -0.7]);
        fc.bias.set_values(vec![0.1]);
        let v = 0.42;
        let x = T::full(vec![1, 2, 3, 3], v);
        let q = predict(&x, &fc).unwrap();
        let logit = (0.3 - 0.7) * v + 0.1;
        let want = 1.0 / (1.0 + (-logit as f64).exp());
        assert!((q.item() - want).abs() < 1e-12);
    }

    #[test]
    fn predict_matches_scalar_oracle_on_random_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let fc = FcParams::<f64>::init(3, &mut rng);
        let xv: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = T::from_vec(vec![2, 3, 2, 2], xv.clone()).unwrap();
        let q = predict(&x, &fc).unwrap();
        let wv = fc.weight.to_vec();
        let b = fc.bias.item();
        for n in 0..2 {
            let mut logit = b;
            for c in 0..3 {
                let mean: f64 =
                    xv[(n * 3 + c) * 4..(n * 3 + c + 1) * 4].iter().sum::<f64>() / 4.0;
                logit += wv[c] * mean;
            }
            let want = 1.0 / (1.0 + (-logit).exp());
            assert!((q.values()[n] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fr_equal_features_give_bias_score() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let fc = FcParams::<f64>::init(2, &mut rng);
        fc.bias.set_values(vec![-0.4]);
        let f = T::full(vec![1, 2, 2, 2], 1.3);
        let q = fr_predict(&f, &f, &fc).unwrap();
        let want = 1.0 / (1.0 + (0.4f64).exp());
        assert!((q.item() - want).abs() < 1e-12);
    }

    #[test]
    fn fr_swap_negates_logit_minus_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let fc = FcParams::<f64>::init(2, &mut rng);
        let b = 0.15;
        fc.bias.set_values(vec![b]);
        let fa = T::from_vec(vec![1, 2, 1, 2], vec![0.2, 0.4, -0.1, 0.9]).unwrap();
        let fb = T::from_vec(vec![1, 2, 1, 2], vec![0.7, -0.3, 0.2, 0.5]).unwrap();
        let q1 = fr_predict(&fa, &fb, &fc).unwrap().item();
        let q2 = fr_predict(&fb, &fa, &fc).unwrap().item();
        let logit = |q: f64| (q / (1.0 - q)).ln();
        assert!(((logit(q1) - b) + (logit(q2) - b)).abs() < 1e-9);
    }

    #[test]
    fn fr_matches_scalar_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let fc = FcParams::<f64>::init(2, &mut rng);
        let av: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fa = T::from_vec(vec![1, 2, 2, 2], av.clone()).unwrap();
        let fb = T::from_vec(vec![1, 2, 2, 2], bv.clone()).unwrap();
        let q = fr_predict(&fa, &fb, &fc).unwrap().item();
        let wv = fc.weight.to_vec();
        let mut logit = fc.bias.item();
        for c in 0..2 {
            let mean: f64 = (0..4)
                .map(|i| av[c * 4 + i] - bv[c * 4 + i])
                .sum::<f64>()
                / 4.0;
            logit += wv[c] * mean;
        }
        let want = 1.0 / (1.0 + (-logit).exp());
        assert!((q - want).abs() < 1e-12);
    }
}
