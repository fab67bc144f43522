//! Four-stage hierarchical feature extractor for one input modality.
//!
//! A stride-4 patch-embedding convolution produces stage 1; each later stage
//! halves the spatial dims with a stride-2 conv that doubles the channels,
//! then applies a configurable number of 3x3 conv blocks. Strides relative
//! to the input are 4/8/16/32 with channels `(c, 2c, 4c, 8c)`.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::TensorError;
use crate::nn::{BnSettings, ConvBnBlock, ConvParams, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, ConvSpec, Tensor};

/// Output strides of the four pyramid stages relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub input_size: (usize, usize),
    pub depth_blocks_per_stage: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_size.0 % 32 != 0 || self.input_size.1 % 32 != 0 {
            return Err(TensorError::Invalid {
                op: "backbone",
                msg: format!(
                    "input {}x{} is not divisible by 32; crop or pad the input",
                    self.input_size.0, self.input_size.1
                ),
            });
        }
        if self.base_channels == 0 || self.depth_blocks_per_stage == 0 {
            return Err(TensorError::Invalid {
                op: "backbone",
                msg: "base_channels and depth_blocks_per_stage must be positive".into(),
            });
        }
        Ok(())
    }

    /// Channel width of stage `i` (0-based): `base * 2^i`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

/// The four stage feature maps of one modality, shallowest first.
pub struct FeaturePyramid<S: Scalar> {
    pub stages: [Tensor<S>; 4],
}

impl<S: Scalar> FeaturePyramid<S> {
    /// Checks the stride/doubling contract against an expected base width.
    pub fn check_contract(&self, base_channels: usize) -> Result<(), TensorError> {
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.shape().len() != 4 {
                return Err(TensorError::RankMismatch {
                    op: "feature_pyramid",
                    expected: 4,
                    shape: stage.shape().to_vec(),
                });
            }
            let want_c = base_channels << i;
            if stage.shape()[1] != want_c {
                return Err(TensorError::DimensionMismatch {
                    op: "feature_pyramid",
                    axis: 1,
                    left: stage.shape()[1],
                    right: want_c,
                });
            }
            if i > 0 {
                let prev = self.stages[i - 1].shape();
                if prev[2] != 2 * stage.shape()[2] || prev[3] != 2 * stage.shape()[3] {
                    return Err(TensorError::Invalid {
                        op: "feature_pyramid",
                        msg: format!(
                            "stage {i} spatial {:?} is not half of stage {} {:?}",
                            &stage.shape()[2..],
                            i - 1,
                            &prev[2..]
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

struct StageParams<S: Scalar> {
    down: ConvBnBlock<S>,
    blocks: Vec<ConvBnBlock<S>>,
}

/// All learnable state of one backbone stream.
pub struct BackboneParams<S: Scalar> {
    patch: ConvParams<S>,
    stages: Vec<StageParams<S>>,
    base_channels: usize,
}

impl<S: Scalar> BackboneParams<S> {
    pub fn param_count(&self) -> usize {
        self.patch.param_count()
            + self
                .stages
                .iter()
                .map(|s| {
                    s.down.param_count()
                        + s.blocks.iter().map(|b| b.param_count()).sum::<usize>()
                })
                .sum::<usize>()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        self.patch.visit(&format!("{prefix}.patch"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            let sp = format!("{prefix}.stage{}", i + 2);
            stage.down.visit(&format!("{sp}.down"), f);
            for (b, block) in stage.blocks.iter().enumerate() {
                block.visit(&format!("{sp}.block{b}"), f);
            }
        }
    }
}

/// Deterministic Xavier initialization of one backbone stream.
pub fn init_params<S: Scalar>(
    config: &BackboneConfig,
    seed: u64,
) -> Result<BackboneParams<S>, TensorError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    init_params_with(config, &mut rng)
}

pub(crate) fn init_params_with<S: Scalar>(
    config: &BackboneConfig,
    rng: &mut ChaCha12Rng,
) -> Result<BackboneParams<S>, TensorError> {
    config.validate()?;
    let c = config.base_channels;
    let patch = ConvParams::init(
        ConvSpec::new_square(4, 4, 0, 1, config.in_channels, c),
        rng,
    );
    let mut stages = Vec::with_capacity(3);
    for i in 0..3 {
        let c_in = c << i;
        let c_out = c << (i + 1);
        let down = ConvBnBlock::init(ConvSpec::new_square(3, 2, 1, 1, c_in, c_out), rng);
        let blocks = (0..config.depth_blocks_per_stage)
            .map(|_| ConvBnBlock::init(ConvSpec::new_square(3, 1, 1, 1, c_out, c_out), rng))
            .collect();
        stages.push(StageParams { down, blocks });
    }
    Ok(BackboneParams {
        patch,
        stages,
        base_channels: c,
    })
}

/// Runs one modality through the backbone, producing the 4-stage pyramid.
pub fn extract<S: Scalar>(
    image: &Tensor<S>,
    params: &BackboneParams<S>,
    bn: &BnSettings<S>,
    mode: BnMode,
) -> Result<FeaturePyramid<S>, TensorError> {
    if image.shape().len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "backbone",
            expected: 4,
            shape: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(TensorError::Invalid {
            op: "backbone",
            msg: format!("input {h}x{w} is not divisible by 32; crop or pad the input"),
        });
    }
    let s1 = params.patch.apply(image)?;
    let s2 = apply_stage(&s1, &params.stages[0], bn, mode)?;
    let s3 = apply_stage(&s2, &params.stages[1], bn, mode)?;
    let s4 = apply_stage(&s3, &params.stages[2], bn, mode)?;
    let pyramid = FeaturePyramid {
        stages: [s1, s2, s3, s4],
    };
    pyramid.check_contract(params.base_channels)?;
    Ok(pyramid)
}

fn apply_stage<S: Scalar>(
    x: &Tensor<S>,
    stage: &StageParams<S>,
    bn: &BnSettings<S>,
    mode: BnMode,
) -> Result<Tensor<S>, TensorError> {
    let mut y = stage.down.apply(x, bn, mode)?;
    for block in &stage.blocks {
        y = block.apply(&y, bn, mode)?;
    }
    Ok(y)
}
