//! Batch and layer normalization with hand-derived backward passes.

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::Tensor;

/// Whether batchnorm uses batch statistics (and updates running stats) or
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

impl<S: Scalar> Tensor<S> {
    /// Per-channel normalization of `[N,C,H,W]` over the `(N,H,W)` group.
    ///
    /// Train mode normalizes by batch statistics and folds them into the
    /// running buffers (`running <- (1-momentum)*running + momentum*batch`,
    /// unbiased variance for the running update). Eval mode normalizes by
    /// the running buffers and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        eps: S,
        momentum: S,
        mode: BnMode,
    ) -> Result<Tensor<S>, TensorError> {
        if self.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "batchnorm2d",
                expected: 4,
                shape: self.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if t.shape() != [c] {
                return Err(TensorError::Invalid {
                    op: "batchnorm2d",
                    msg: format!("{name} has {} elements, expected {c}", t.numel()),
                });
            }
        }
        let group = n * h * w;
        let plane = h * w;

        let (mean, var) = match mode {
            BnMode::Train => {
                if group == 1 {
                    return Err(TensorError::DegenerateVariance);
                }
                let xv = self.values();
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                let gsize = S::of_f64(group as f64);
                for ch in 0..c {
                    let mut acc = S::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for &v in &xv[base..base + plane] {
                            acc += v;
                        }
                    }
                    mean[ch] = acc / gsize;
                    let mut vacc = S::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for &v in &xv[base..base + plane] {
                            let d = v - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc / gsize;
                }
                drop(xv);
                // fold into running stats; unbiased variance for the update
                let one = S::one();
                let unbias = gsize / (gsize - one);
                let rm: Vec<S> = running_mean
                    .values()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &m)| (one - momentum) * r + momentum * m)
                    .collect();
                let rv: Vec<S> = running_var
                    .values()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| (one - momentum) * r + momentum * v * unbias)
                    .collect();
                running_mean.set_values(rm);
                running_var.set_values(rv);
                (mean, var)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let mut values = vec![S::zero(); self.numel()];
        let mut x_hat = vec![S::zero(); self.numel()];
        {
            let xv = self.values();
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        let xh = (xv[base + i] - mean[ch]) * inv_std[ch];
                        x_hat[base + i] = xh;
                        values[base + i] = gv[ch] * xh + bv[ch];
                    }
                }
            }
        }

        let (x, ga, be) = (self.clone(), gamma.clone(), beta.clone());
        let use_batch_stats = mode == BnMode::Train;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    let gsize = S::of_f64((n * plane) as f64);
                    if be.requires_grad() {
                        let mut db = vec![S::zero(); c];
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                for &gv in &g[base..base + plane] {
                                    db[ch] += gv;
                                }
                            }
                        }
                        be.accumulate_grad(&db);
                    }
                    if ga.requires_grad() {
                        let mut dg = vec![S::zero(); c];
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                for i in 0..plane {
                                    dg[ch] += g[base + i] * x_hat[base + i];
                                }
                            }
                        }
                        ga.accumulate_grad(&dg);
                    }
                    if x.requires_grad() {
                        let gamma_vals = ga.to_vec();
                        let mut dx = vec![S::zero(); g.len()];
                        if use_batch_stats {
                            // dx = gamma*inv_std*(g - mean(g) - x_hat*mean(g*x_hat))
                            let mut g_mean = vec![S::zero(); c];
                            let mut gx_mean = vec![S::zero(); c];
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * plane;
                                    for i in 0..plane {
                                        g_mean[ch] += g[base + i];
                                        gx_mean[ch] += g[base + i] * x_hat[base + i];
                                    }
                                }
                            }
                            for ch in 0..c {
                                g_mean[ch] = g_mean[ch] / gsize;
                                gx_mean[ch] = gx_mean[ch] / gsize;
                            }
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * plane;
                                    let scale = gamma_vals[ch] * inv_std[ch];
                                    for i in 0..plane {
                                        dx[base + i] = scale
                                            * (g[base + i]
                                                - g_mean[ch]
                                                - x_hat[base + i] * gx_mean[ch]);
                                    }
                                }
                            }
                        } else {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * plane;
                                    let scale = gamma_vals[ch] * inv_std[ch];
                                    for i in 0..plane {
                                        dx[base + i] = scale * g[base + i];
                                    }
                                }
                            }
                        }
                        x.accumulate_grad(&dx);
                    }
                })
            },
        ))
    }

    /// Normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        eps: S,
    ) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(TensorError::RankMismatch {
                op: "layer_norm",
                expected: 1,
                shape: vec![],
            });
        }
        let d = self.shape()[rank - 1];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                axis: rank - 1,
                left: d,
                right: gamma.numel(),
            });
        }
        let rows = self.numel() / d;
        let dn = S::of_f64(d as f64);
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let mut values = vec![S::zero(); self.numel()];
        let mut x_hat = vec![S::zero(); self.numel()];
        let mut inv_std = vec![S::zero(); rows];
        {
            let xv = self.values();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mut mean = S::zero();
                for &v in row {
                    mean += v;
                }
                mean = mean / dn;
                let mut var = S::zero();
                for &v in row {
                    let dv = v - mean;
                    var += dv * dv;
                }
                var = var / dn;
                let istd = S::one() / (var + eps).sqrt();
                inv_std[r] = istd;
                for i in 0..d {
                    let xh = (row[i] - mean) * istd;
                    x_hat[r * d + i] = xh;
                    values[r * d + i] = gv[i] * xh + bv[i];
                }
            }
        }
        let (x, ga, be) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if be.requires_grad() {
                        let mut db = vec![S::zero(); d];
                        for r in 0..rows {
                            for i in 0..d {
                                db[i] += g[r * d + i];
                            }
                        }
                        be.accumulate_grad(&db);
                    }
                    if ga.requires_grad() {
                        let mut dg = vec![S::zero(); d];
                        for r in 0..rows {
                            for i in 0..d {
                                dg[i] += g[r * d + i] * x_hat[r * d + i];
                            }
                        }
                        ga.accumulate_grad(&dg);
                    }
                    if x.requires_grad() {
                        let gamma_vals = ga.to_vec();
                        let mut dx = vec![S::zero(); g.len()];
                        for r in 0..rows {
                            let mut g_mean = S::zero();
                            let mut gx_mean = S::zero();
                            for i in 0..d {
                                let gg = g[r * d + i] * gamma_vals[i];
                                g_mean += gg;
                                gx_mean += gg * x_hat[r * d + i];
                            }
                            g_mean = g_mean / dn;
                            gx_mean = gx_mean / dn;
                            for i in 0..d {
                                let gg = g[r * d + i] * gamma_vals[i];
                                dx[r * d + i] =
                                    inv_std[r] * (gg - g_mean - x_hat[r * d + i] * gx_mean);
                            }
                        }
                        x.accumulate_grad(&dx);
                    }
                })
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    fn bn_buffers(c: usize) -> (T, T, T, T) {
        (
            T::from_vec(vec![c], vec![1.0; c]).unwrap(),
            T::zeros(vec![c]),
            T::zeros(vec![c]),
            T::from_vec(vec![c], vec![1.0; c]).unwrap(),
        )
    }

    #[test]
    fn train_mode_normalizes_per_channel() {
        let (gamma, beta, rm, rv) = bn_buffers(2);
        let x = T::from_vec(
            vec![2, 2, 1, 2],
            vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0],
        )
        .unwrap();
        let y = x
            .batchnorm2d(&gamma, &beta, &rm, &rv, 1e-5, 0.1, BnMode::Train)
            .unwrap();
        let yv = y.to_vec();
        for ch in 0..2 {
            let mut vals = Vec::new();
            for b in 0..2 {
                for i in 0..2 {
                    vals.push(yv[(b * 2 + ch) * 2 + i]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let gamma = T::param(vec![1], vec![0.0]).unwrap();
        let beta = T::param(vec![1], vec![0.7]).unwrap();
        let rm = T::zeros(vec![1]);
        let rv = T::from_vec(vec![1], vec![1.0]).unwrap();
        let x = T::from_vec(vec![1, 1, 2, 2], vec![5.0, -3.0, 0.1, 9.0]).unwrap();
        let y = x
            .batchnorm2d(&gamma, &beta, &rm, &rv, 1e-5, 0.1, BnMode::Train)
            .unwrap();
        for &v in y.values().iter() {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn fixed_input_matches_hand_computation() {
        // one channel of a 2x2x2x2 batch, scalar arithmetic done longhand
        let (gamma, beta, rm, rv) = bn_buffers(2);
        let xv = vec![
            1.0, 2.0, 3.0, 4.0, // n0 c0
            0.5, 0.5, 0.5, 0.5, // n0 c1
            5.0, 6.0, 7.0, 8.0, // n1 c0
            1.5, 1.5, 1.5, 1.5, // n1 c1
        ];
        let x = T::from_vec(vec![2, 2, 2, 2], xv.clone()).unwrap();
        let y = x
            .batchnorm2d(&gamma, &beta, &rm, &rv, 1e-5, 0.1, BnMode::Train)
            .unwrap();
        // channel 0: values 1..8, mean 4.5, biased var 5.25
        let mean = 4.5f64;
        let var = 5.25f64;
        let want = (1.0 - mean) / (var + 1e-5).sqrt();
        assert!((y.values()[0] - want).abs() < 1e-6);
        // running stats folded with momentum 0.1, unbiased var 5.25*8/7
        assert!((rm.values()[0] - 0.45).abs() < 1e-12);
        assert!((rv.values()[0] - (0.9 + 0.1 * var * 8.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_element_group_errors() {
        let (gamma, beta, rm, rv) = bn_buffers(3);
        let x = T::zeros(vec![1, 3, 1, 1]);
        assert!(matches!(
            x.batchnorm2d(&gamma, &beta, &rm, &rv, 1e-5, 0.1, BnMode::Train),
            Err(TensorError::DegenerateVariance)
        ));
        // fine in eval mode
        assert!(x
            .batchnorm2d(&gamma, &beta, &rm, &rv, 1e-5, 0.1, BnMode::Eval)
            .is_ok());
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let gamma = T::from_vec(vec![1], vec![2.0]).unwrap();
        let beta = T::from_vec(vec![1], vec![1.0]).unwrap();
        let rm = T::from_vec(vec![1], vec![3.0]).unwrap();
        let rv = T::from_vec(vec![1], vec![4.0]).unwrap();
        let x = T::from_vec(vec![1, 1, 1, 2], vec![3.0, 7.0]).unwrap();
        let y = x
            .batchnorm2d(&gamma, &beta, &rm, &rv, 0.0, 0.1, BnMode::Eval)
            .unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-12);
        assert!((y.values()[1] - (2.0 * (7.0 - 3.0) / 2.0 + 1.0)).abs() < 1e-12);
        // buffers untouched
        assert_eq!(rm.values()[0], 3.0);
        assert_eq!(rv.values()[0], 4.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let gamma = T::from_vec(vec![3], vec![1.0; 3]).unwrap();
        let beta = T::zeros(vec![3]);
        let x = T::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-9).unwrap();
        let yv = y.to_vec();
        for r in 0..2 {
            let row = &yv[r * 3..(r + 1) * 3];
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
        }
    }
}
