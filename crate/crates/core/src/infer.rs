//! Inference protocols: crop scoring and gradient attribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::DgiqaModel;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Tensor};

/// Crops evaluated per forward pass; eval-mode batchnorm makes the chunking
/// invisible in the results.
const EVAL_CHUNK: usize = 8;

fn check_crop_fits<S: Scalar>(
    context: &'static str,
    image: &Tensor<S>,
    crop: (usize, usize),
) -> Result<(usize, usize)> {
    let rank = image.shape().len();
    let (h, w) = (image.shape()[rank - 2], image.shape()[rank - 1]);
    if crop.0 > h || crop.1 > w {
        return Err(Error::CropTooLarge {
            context,
            h,
            w,
            ch: crop.0,
            cw: crop.1,
        });
    }
    Ok((h, w))
}

/// Center crop of a `[C,H,W]` image.
pub fn center_crop<S: Scalar>(image: &Tensor<S>, crop: (usize, usize)) -> Result<Tensor<S>> {
    let (h, w) = check_crop_fits("center_crop", image, crop)?;
    Ok(image.crop_hw((h - crop.0) / 2, (w - crop.1) / 2, crop.0, crop.1)?)
}

/// Scores aligned `[C,H,W]` crop lists in eval mode, in input order.
pub fn score_crops<S: Scalar>(
    model: &DgiqaModel<S>,
    rgb_crops: &[Tensor<S>],
    depth_crops: &[Tensor<S>],
) -> Result<Vec<S>> {
    assert_eq!(rgb_crops.len(), depth_crops.len());
    let mut scores = Vec::with_capacity(rgb_crops.len());
    for (rgb_chunk, depth_chunk) in rgb_crops
        .chunks(EVAL_CHUNK)
        .zip(depth_crops.chunks(EVAL_CHUNK))
    {
        let rgb = Tensor::stack(rgb_chunk)?;
        let depth = Tensor::stack(depth_chunk)?;
        let trace = model.forward(&rgb, &depth, BnMode::Eval)?;
        scores.extend(trace.q_hat.values().iter().copied());
    }
    Ok(scores)
}

/// Mean score over `n_crops` seeded random crops; the same window is cut
/// from the RGB and depth images.
pub fn multi_crop_score<S: Scalar>(
    model: &DgiqaModel<S>,
    rgb: &Tensor<S>,
    depth: &Tensor<S>,
    n_crops: usize,
    crop: (usize, usize),
    seed: u64,
) -> Result<S> {
    let (h, w) = check_crop_fits("multi_crop_score", rgb, crop)?;
    check_crop_fits("multi_crop_score", depth, crop)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rgb_crops = Vec::with_capacity(n_crops);
    let mut depth_crops = Vec::with_capacity(n_crops);
    for _ in 0..n_crops {
        let top = rng.gen_range(0..=h - crop.0);
        let left = rng.gen_range(0..=w - crop.1);
        rgb_crops.push(rgb.crop_hw(top, left, crop.0, crop.1)?);
        depth_crops.push(depth.crop_hw(top, left, crop.0, crop.1)?);
    }
    let scores = score_crops(model, &rgb_crops, &depth_crops)?;
    let total: S = scores.iter().copied().sum();
    Ok(total / S::of_f64(n_crops as f64))
}

/// Deterministic single center-crop score.
pub fn center_crop_score<S: Scalar>(
    model: &DgiqaModel<S>,
    rgb: &Tensor<S>,
    depth: &Tensor<S>,
    crop: (usize, usize),
) -> Result<S> {
    let scores = score_crops(
        model,
        &[center_crop(rgb, crop)?],
        &[center_crop(depth, crop)?],
    )?;
    Ok(scores[0])
}

/// Gradient-weighted activation heatmap over the dilated feature map.
pub struct GradCam<S: Scalar> {
    /// Row-major `[height, width]` values in `[0,1]`.
    pub heatmap: Vec<S>,
    pub height: usize,
    pub width: usize,
    /// Set when the raw map was constant and min-max scaling is undefined;
    /// the heatmap is all zeros in that case.
    pub degenerate: bool,
}

/// Computes the attribution map for the center crop of one RGB-D sample.
pub fn grad_cam<S: Scalar>(
    model: &DgiqaModel<S>,
    rgb: &Tensor<S>,
    depth: &Tensor<S>,
) -> Result<GradCam<S>> {
    let side = model.config.input_size;
    let rgb = center_crop(rgb, (side, side))?.reshape(vec![1, 3, side, side])?;
    let depth = center_crop(depth, (side, side))?.reshape(vec![1, 1, side, side])?;
    let trace = model.forward(&rgb, &depth, BnMode::Eval)?;
    trace.q_hat.backward()?;

    let dilated_shape = trace.dilated.shape().to_vec();
    let (c, h, w) = (dilated_shape[1], dilated_shape[2], dilated_shape[3]);
    let plane = h * w;
    let grad = trace
        .dilated
        .grad()
        .ok_or_else(|| Error::Training("no gradient reached the dilated features".into()))?;

    // channel weight = spatial mean of d q_hat / d feature
    let feature = trace.dilated.to_vec();
    let mut cam = vec![S::zero(); plane];
    let scale = S::one() / S::of_f64(plane as f64);
    for ch in 0..c {
        let mut weight = S::zero();
        for &g in &grad[ch * plane..(ch + 1) * plane] {
            weight += g;
        }
        weight = weight * scale;
        for (acc, &f) in cam.iter_mut().zip(&feature[ch * plane..(ch + 1) * plane]) {
            *acc += weight * f;
        }
    }
    for v in &mut cam {
        if *v < S::zero() {
            *v = S::zero();
        }
    }

    let max = cam.iter().cloned().fold(S::zero(), S::max);
    let min = cam.iter().cloned().fold(max, S::min);
    let degenerate = max <= min;
    if degenerate {
        return Ok(GradCam {
            heatmap: vec![S::zero(); side * side],
            height: side,
            width: side,
            degenerate: true,
        });
    }
    let range = max - min;
    for v in &mut cam {
        *v = (*v - min) / range;
    }

    // nearest-neighbor upsample to the crop size
    let mut heatmap = vec![S::zero(); side * side];
    for y in 0..side {
        let sy = y * h / side;
        for x in 0..side {
            let sx = x * w / side;
            heatmap[y * side + x] = cam[sy * w + sx];
        }
    }
    Ok(GradCam {
        heatmap,
        height: side,
        width: side,
        degenerate: false,
    })
}
