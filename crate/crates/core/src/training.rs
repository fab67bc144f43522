//! Losses, optimizer, schedule, augmentation, splits, and the train loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::infer;
use crate::metrics::{self, ScorePairSet};
use crate::model::DgiqaModel;
use crate::nn::ParamKind;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Tensor};

/// Optimization and data-protocol hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Cosine half-period in epochs; `None` means `epochs/2`.
    pub t_max: Option<usize>,
    pub batch_size: usize,
    pub lambda_cl: f64,
    pub crop: (usize, usize),
    pub flip_prob: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once validation SROCC reaches this value.
    pub early_stop_srocc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_min: 1e-7,
            weight_decay: 1e-2,
            epochs: 200,
            t_max: None,
            batch_size: 16,
            lambda_cl: 0.3,
            crop: (224, 224),
            flip_prob: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            early_stop_srocc: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_t_max(&self) -> usize {
        self.t_max.unwrap_or_else(|| (self.epochs / 2).max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_cl < 0.0 {
            return Err(Error::Config("lambda_cl must be non-negative".into()));
        }
        if self.lr_min >= self.lr0 {
            return Err(Error::Config("lr_min must be below lr0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// `(1/N) * sum (q - q_hat)^2`, differentiable through the predictions.
pub fn mse_loss<S: Scalar>(
    predicted: &Tensor<S>,
    target: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let diff = target.sub(predicted)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// `(1/N) * sum (q_hat - q_hat_flip)^2`.
pub fn consistency_loss<S: Scalar>(
    predicted: &Tensor<S>,
    predicted_flip: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    mse_loss(predicted, predicted_flip)
}

/// `mse + lambda * cl`.
pub fn total_loss<S: Scalar>(
    mse: &Tensor<S>,
    cl: &Tensor<S>,
    lambda: S,
) -> Result<Tensor<S>, TensorError> {
    if lambda == S::zero() {
        return mse.add_scalar(S::zero()).reshape(vec![1]);
    }
    mse.add(&cl.mul_scalar(lambda))
}

/// Cosine annealing: decays from `lr0` at epoch 0 to `lr_min` at `t_max`,
/// then holds the floor.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let t_max = config.effective_t_max();
    if epoch >= t_max {
        return config.lr_min;
    }
    let phase = std::f64::consts::PI * epoch as f64 / t_max as f64;
    config.lr_min + 0.5 * (config.lr0 - config.lr_min) * (1.0 + phase.cos())
}

/// Adam with decoupled weight decay over the model's learnable tensors.
pub struct AdamW<S: Scalar> {
    params: Vec<(String, Tensor<S>)>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
    beta1: S,
    beta2: S,
    eps: S,
    weight_decay: S,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: Vec<(String, Tensor<S>)>, config: &TrainConfig) -> Self {
        let m = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        AdamW {
            params,
            m,
            v,
            step: 0,
            beta1: S::of_f64(config.beta1),
            beta2: S::of_f64(config.beta2),
            eps: S::of_f64(config.eps),
            weight_decay: S::of_f64(config.weight_decay),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p <- p - lr*mhat/(sqrt(vhat)+eps) - lr*wd*p`.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.step += 1;
        let lr = S::of_f64(lr);
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (idx, (name, param)) in self.params.iter().enumerate() {
            let grad = param
                .grad()
                .ok_or_else(|| Error::MissingGradient { name: name.clone() })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut values = param.to_vec();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i]
                    - lr * (m_hat / (v_hat.sqrt() + self.eps))
                    - lr * self.weight_decay * values[i];
            }
            param.set_values(values);
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Moment buffers keyed by parameter name, for checkpointing.
    pub fn state(&self) -> (u64, Vec<(String, Vec<S>, Vec<S>)>) {
        let entries = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), self.m[i].clone(), self.v[i].clone()))
            .collect();
        (self.step, entries)
    }
}

/// One crop/flip draw applied identically to the RGB and depth images.
pub fn augment<S: Scalar>(
    rgb: &Tensor<S>,
    depth: &Tensor<S>,
    crop: (usize, usize),
    flip_prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let rank = rgb.shape().len();
    let (h, w) = (rgb.shape()[rank - 1 - 1], rgb.shape()[rank - 1]);
    if crop.0 > h || crop.1 > w {
        return Err(Error::CropTooLarge {
            context: "augment",
            h,
            w,
            ch: crop.0,
            cw: crop.1,
        });
    }
    let top = rng.gen_range(0..=h - crop.0);
    let left = rng.gen_range(0..=w - crop.1);
    let hflip = rng.gen_range(0.0..1.0) < flip_prob;
    let vflip = rng.gen_range(0.0..1.0) < flip_prob;
    let mut r = rgb.crop_hw(top, left, crop.0, crop.1)?;
    let mut d = depth.crop_hw(top, left, crop.0, crop.1)?;
    if hflip {
        r = r.flip_horizontal();
        d = d.flip_horizontal();
    }
    if vflip {
        r = r.flip_vertical();
        d = d.flip_vertical();
    }
    Ok((r, d))
}

/// Disjoint train/test index partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

/// Seeded `ratio` split. When `groups` is given the partition is
/// group-disjoint: whole groups go to one side, filling the train side to
/// at least `round(ratio*n)`.
pub fn make_split(
    n: usize,
    ratio: f64,
    seed: u64,
    groups: Option<&[String]>,
) -> Result<SplitPlan> {
    if n < 2 {
        return Err(Error::Config("need at least 2 samples to split".into()));
    }
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::Config(format!("split ratio {ratio} out of (0,1)")));
    }
    let target = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (train_indices, test_indices) = match groups {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (a, b) = order.split_at(target);
            (a.to_vec(), b.to_vec())
        }
        Some(groups) => {
            if groups.len() != n {
                return Err(Error::Config("group list length mismatch".into()));
            }
            // distinct groups in first-appearance order, then shuffled
            let mut names: Vec<&String> = Vec::new();
            for g in groups {
                if !names.contains(&g) {
                    names.push(g);
                }
            }
            if names.len() < 2 {
                return Err(Error::Config(
                    "group-disjoint split needs at least 2 groups".into(),
                ));
            }
            names.shuffle(&mut rng);
            let mut train = Vec::new();
            let mut picked = 0usize;
            let mut train_groups: Vec<&String> = Vec::new();
            for g in &names {
                if picked >= target {
                    break;
                }
                train_groups.push(g);
                picked += groups.iter().filter(|x| x == g).count();
            }
            if train_groups.len() == names.len() {
                train_groups.pop();
            }
            let mut test = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                if train_groups.contains(&g) {
                    train.push(i);
                } else {
                    test.push(i);
                }
            }
            (train, test)
        }
    };
    Ok(SplitPlan {
        train_indices,
        test_indices,
        seed,
    })
}

/// One plan per seed.
pub fn make_splits(
    n: usize,
    ratio: f64,
    seeds: &[u64],
    groups: Option<&[String]>,
) -> Result<Vec<SplitPlan>> {
    seeds
        .iter()
        .map(|&s| make_split(n, ratio, s, groups))
        .collect()
}

/// In-memory training sample.
pub struct LoadedSample<S: Scalar> {
    /// `[3,H,W]` in [0,1].
    pub rgb: Tensor<S>,
    /// `[1,H,W]` in [0,1].
    pub depth: Tensor<S>,
    pub score: S,
    pub group: Option<String>,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip)]
    pub mse: f64,
    #[serde(skip)]
    pub consistency: f64,
    pub val_srocc: f64,
    pub val_plcc: f64,
}

pub struct TrainOutput {
    pub log: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_srocc: f64,
    /// Set when training stopped on a non-finite loss; the model holds the
    /// best parameters seen before the abort.
    pub aborted: Option<String>,
}

fn snapshot<S: Scalar>(model: &DgiqaModel<S>) -> Vec<(String, Vec<S>)> {
    let mut out = Vec::new();
    model.visit(&mut |name, _, t| out.push((name.to_string(), t.to_vec())));
    out
}

fn restore<S: Scalar>(model: &DgiqaModel<S>, snap: &[(String, Vec<S>)]) {
    let mut idx = 0;
    model.visit(&mut |name, _, t| {
        debug_assert_eq!(snap[idx].0, name);
        t.set_values(snap[idx].1.clone());
        idx += 1;
    });
}

/// Center-crop validation scores against ground truth.
fn validate_split<S: Scalar>(
    model: &DgiqaModel<S>,
    samples: &[LoadedSample<S>],
    indices: &[usize],
    crop: (usize, usize),
) -> Result<(f64, f64)> {
    let mut rgb = Vec::with_capacity(indices.len());
    let mut depth = Vec::with_capacity(indices.len());
    let mut truth = Vec::with_capacity(indices.len());
    for &i in indices {
        rgb.push(infer::center_crop(&samples[i].rgb, crop)?);
        depth.push(infer::center_crop(&samples[i].depth, crop)?);
        truth.push(samples[i].score);
    }
    let predicted = infer::score_crops(model, &rgb, &depth)?;
    let set = ScorePairSet::new(predicted, truth)?;
    // a constant-output model has undefined correlation; report zero
    let srocc = metrics::srocc(&set).map(|v| v.as_f64()).unwrap_or(0.0);
    let plcc = metrics::plcc(&set).map(|v| v.as_f64()).unwrap_or(0.0);
    Ok((srocc, plcc))
}

/// Full training run over a prepared split. The model is updated in place
/// and ends holding the parameters of the best-SROCC epoch.
pub fn train<S: Scalar>(
    model: &DgiqaModel<S>,
    config: &TrainConfig,
    samples: &[LoadedSample<S>],
    split: &SplitPlan,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutput> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(model.learnable(), config);
    let lambda = S::of_f64(config.lambda_cl);

    let mut log: Vec<EpochStats> = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0usize;
    let mut best_srocc = f64::NEG_INFINITY;
    let mut best_snap = snapshot(model);
    let mut aborted = None;

    'epochs: for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config);
        let mut order = split.train_indices.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        let mut cl_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut rgb_crops = Vec::with_capacity(chunk.len());
            let mut depth_crops = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (r, d) = augment(
                    &samples[i].rgb,
                    &samples[i].depth,
                    config.crop,
                    config.flip_prob,
                    &mut rng,
                )?;
                rgb_crops.push(r);
                depth_crops.push(d);
                targets.push(samples[i].score);
            }
            let rgb = Tensor::stack(&rgb_crops)?;
            let depth = Tensor::stack(&depth_crops)?;
            let target = Tensor::from_vec(vec![chunk.len()], targets)?;

            let trace = model.forward(&rgb, &depth, BnMode::Train)?;
            let mse = mse_loss(&trace.q_hat, &target)?;
            let (loss, cl_value) = if config.lambda_cl > 0.0 {
                let flip_trace =
                    model.forward(&rgb.flip_horizontal(), &depth.flip_horizontal(), BnMode::Train)?;
                let cl = consistency_loss(&trace.q_hat, &flip_trace.q_hat)?;
                let cl_value = cl.item().as_f64();
                (total_loss(&mse, &cl, lambda)?, cl_value)
            } else {
                (mse.clone(), 0.0)
            };

            let loss_value = loss.item().as_f64();
            if !loss_value.is_finite() {
                aborted = Some(format!(
                    "non-finite loss {loss_value} at epoch {epoch}; keeping best checkpoint"
                ));
                break 'epochs;
            }
            loss.backward()?;
            optimizer.step(lr)?;
            optimizer.zero_grads();

            loss_sum += loss_value;
            mse_sum += mse.item().as_f64();
            cl_sum += cl_value;
            batches += 1;
        }

        let (val_srocc, val_plcc) =
            validate_split(model, samples, &split.test_indices, config.crop)?;
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            mse: mse_sum / batches.max(1) as f64,
            consistency: cl_sum / batches.max(1) as f64,
            val_srocc,
            val_plcc,
        };
        on_epoch(&stats);
        log.push(stats);

        if val_srocc > best_srocc {
            best_srocc = val_srocc;
            best_epoch = epoch;
            best_snap = snapshot(model);
        }
        if let Some(target) = config.early_stop_srocc {
            if val_srocc >= target {
                break;
            }
        }
    }

    restore(model, &best_snap);
    Ok(TrainOutput {
        log,
        best_epoch,
        best_srocc,
        aborted,
    })
}

/// Learnable count sanity view used by ablation reports.
pub fn learnable_names<S: Scalar>(model: &DgiqaModel<S>) -> Vec<String> {
    let mut out = Vec::new();
    model.visit(&mut |name, kind, _| {
        if kind == ParamKind::Learnable {
            out.push(name.to_string());
        }
    });
    out
}
