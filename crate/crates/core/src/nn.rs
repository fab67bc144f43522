//! Parameter containers shared by the model modules.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, ConvSpec, Tensor};

/// Whether a tensor is updated by the optimizer or only carried as state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

/// Visitor callback over named parameter tensors, in canonical order.
pub type ParamVisitor<'a, S> = dyn FnMut(&str, ParamKind, &Tensor<S>) + 'a;

/// Uniform Xavier/Glorot initialization in `+-sqrt(6/(fan_in+fan_out))`.
pub fn xavier_uniform<S: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let values: Vec<S> = (0..numel)
        .map(|_| S::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, values).expect("shape consistent by construction")
}

/// Bias-carrying convolution weights tied to a fixed [`ConvSpec`].
pub struct ConvParams<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub spec: ConvSpec,
}

impl<S: Scalar> ConvParams<S> {
    pub fn init(spec: ConvSpec, rng: &mut ChaCha12Rng) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        let fan_out = spec.out_channels * kh * kw;
        let weight = xavier_uniform(
            rng,
            vec![spec.out_channels, spec.in_channels, kh, kw],
            fan_in,
            fan_out,
        );
        let bias = Tensor::param(vec![spec.out_channels], vec![S::zero(); spec.out_channels])
            .expect("bias shape");
        ConvParams { weight, bias, spec }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        x.conv2d(&self.weight, &self.bias, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(&format!("{prefix}.weight"), ParamKind::Learnable, &self.weight);
        f(&format!("{prefix}.bias"), ParamKind::Learnable, &self.bias);
    }
}

/// Per-channel batchnorm state: learnable scale/shift plus running moments.
pub struct BnParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> BnParams<S> {
    pub fn init(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::param(vec![channels], vec![S::one(); channels]).expect("gamma"),
            beta: Tensor::param(vec![channels], vec![S::zero(); channels]).expect("beta"),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], S::one()),
        }
    }

    pub fn apply(
        &self,
        x: &Tensor<S>,
        bn: &BnSettings<S>,
        mode: BnMode,
    ) -> Result<Tensor<S>, TensorError> {
        x.batchnorm2d(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            bn.eps,
            bn.momentum,
            mode,
        )
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(&format!("{prefix}.gamma"), ParamKind::Learnable, &self.gamma);
        f(&format!("{prefix}.beta"), ParamKind::Learnable, &self.beta);
        f(
            &format!("{prefix}.running_mean"),
            ParamKind::Buffer,
            &self.running_mean,
        );
        f(
            &format!("{prefix}.running_var"),
            ParamKind::Buffer,
            &self.running_var,
        );
    }
}

/// Numeric batchnorm settings shared across the model.
#[derive(Debug, Clone, Copy)]
pub struct BnSettings<S: Scalar> {
    pub eps: S,
    pub momentum: S,
}

/// Conv -> BN -> ReLU unit.
pub struct ConvBnBlock<S: Scalar> {
    pub conv: ConvParams<S>,
    pub bn: BnParams<S>,
}

impl<S: Scalar> ConvBnBlock<S> {
    pub fn init(spec: ConvSpec, rng: &mut ChaCha12Rng) -> Self {
        let bn = BnParams::init(spec.out_channels);
        ConvBnBlock {
            conv: ConvParams::init(spec, rng),
            bn,
        }
    }

    pub fn apply(
        &self,
        x: &Tensor<S>,
        bn: &BnSettings<S>,
        mode: BnMode,
    ) -> Result<Tensor<S>, TensorError> {
        Ok(self.bn.apply(&self.conv.apply(x)?, bn, mode)?.relu())
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}
