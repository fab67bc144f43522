//! Batched matrix products, transposes, and softmax.

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::Tensor;

/// `c[m,n] += a[m,k] @ b[k,n]`, row-accumulation order.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `da[m,k] += g[m,n] @ b[k,n]^T`.
fn matmul_acc_bt<S: Scalar>(g: &[S], b: &[S], da: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gj, &bj) in g_row.iter().zip(b_row) {
                acc += gj * bj;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db[k,n] += a[m,k]^T @ g[m,n]`.
fn matmul_acc_at<S: Scalar>(a: &[S], g: &[S], db: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dj, &gj) in db_row.iter_mut().zip(g_row) {
                *dj += aip * gj;
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<MatmulDims, TensorError> {
    let ar = a.shape().len();
    let br = b.shape().len();
    if ar < 2 {
        return Err(TensorError::RankMismatch {
            op: "matmul",
            expected: 2,
            shape: a.shape().to_vec(),
        });
    }
    if br < 2 {
        return Err(TensorError::RankMismatch {
            op: "matmul",
            expected: 2,
            shape: b.shape().to_vec(),
        });
    }
    let (m, ka) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if ka != kb {
        return Err(TensorError::DimensionMismatch {
            op: "matmul",
            axis: ar - 1,
            left: ka,
            right: kb,
        });
    }
    let a_lead: usize = a.shape()[..ar - 2].iter().product();
    let b_lead: usize = b.shape()[..br - 2].iter().product();
    let (batch, a_batched, b_batched, lead_shape): (usize, bool, bool, &[usize]) =
        if ar > 2 && br > 2 {
            if a.shape()[..ar - 2] != b.shape()[..br - 2] {
                return Err(TensorError::Invalid {
                    op: "matmul",
                    msg: format!(
                        "leading dims {:?} vs {:?} are not broadcastable",
                        &a.shape()[..ar - 2],
                        &b.shape()[..br - 2]
                    ),
                });
            }
            (a_lead, true, true, &a.shape()[..ar - 2])
        } else if ar > 2 {
            (a_lead, true, false, &a.shape()[..ar - 2])
        } else if br > 2 {
            (b_lead, false, true, &b.shape()[..br - 2])
        } else {
            (1, false, false, &[])
        };
    let mut out_shape = lead_shape.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch,
        m,
        k: ka,
        n,
        a_batched,
        b_batched,
        out_shape,
    })
}

impl<S: Scalar> Tensor<S> {
    /// Contraction over the last axis of `self` and second-to-last of `rhs`.
    /// Leading axes must match, or either side may omit them entirely.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let d = matmul_dims(self, rhs)?;
        let (m, k, n) = (d.m, d.k, d.n);
        let mut values = vec![S::zero(); d.batch * m * n];
        {
            let av = self.values();
            let bv = rhs.values();
            for t in 0..d.batch {
                let a_off = if d.a_batched { t * m * k } else { 0 };
                let b_off = if d.b_batched { t * k * n } else { 0 };
                matmul_acc(
                    &av[a_off..a_off + m * k],
                    &bv[b_off..b_off + k * n],
                    &mut values[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let (a, b) = (self.clone(), rhs.clone());
        let (batch, a_batched, b_batched) = (d.batch, d.a_batched, d.b_batched);
        Ok(Tensor::from_op(
            d.out_shape,
            values,
            vec![self.clone(), rhs.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if a.requires_grad() {
                        let mut da = vec![S::zero(); a.numel()];
                        let bv = b.values();
                        for t in 0..batch {
                            let a_off = if a_batched { t * m * k } else { 0 };
                            let b_off = if b_batched { t * k * n } else { 0 };
                            matmul_acc_bt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[b_off..b_off + k * n],
                                &mut da[a_off..a_off + m * k],
                                m,
                                k,
                                n,
                            );
                        }
                        drop(bv);
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let mut db = vec![S::zero(); b.numel()];
                        let av = a.values();
                        for t in 0..batch {
                            let a_off = if a_batched { t * m * k } else { 0 };
                            let b_off = if b_batched { t * k * n } else { 0 };
                            matmul_acc_at(
                                &av[a_off..a_off + m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[b_off..b_off + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        drop(av);
                        b.accumulate_grad(&db);
                    }
                })
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose_last2",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (m, n) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        let batch: usize = self.shape()[..rank - 2].iter().product();
        let mut shape = self.shape().to_vec();
        shape[rank - 2] = n;
        shape[rank - 1] = m;
        let mut values = vec![S::zero(); self.numel()];
        {
            let sv = self.values();
            for t in 0..batch {
                let base = t * m * n;
                for i in 0..m {
                    for j in 0..n {
                        values[base + j * m + i] = sv[base + i * n + j];
                    }
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(shape, values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); g.len()];
                for t in 0..batch {
                    let base = t * m * n;
                    for j in 0..n {
                        for i in 0..m {
                            da[base + i * n + j] = g[base + j * m + i];
                        }
                    }
                }
                a.accumulate_grad(&da);
            })
        }))
    }

    /// Numerically stable softmax along `axis`; each slice sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let len = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut values = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = values[idx(0)];
                for a in 1..len {
                    if values[idx(a)] > max {
                        max = values[idx(a)];
                    }
                }
                let mut total = S::zero();
                for a in 0..len {
                    let e = (values[idx(a)] - max).exp();
                    values[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    values[idx(a)] = values[idx(a)] / total;
                }
            }
        }
        let out_vals = values.clone();
        let a_in = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    // ds = s * (g - <g, s>) per slice
                    let mut da = vec![S::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let mut dot = S::zero();
                            for a in 0..len {
                                dot += g[idx(a)] * out_vals[idx(a)];
                            }
                            for a in 0..len {
                                da[idx(a)] = out_vals[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                    a_in.accumulate_grad(&da);
                })
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn identity_matmul_is_identity() {
        let eye = T::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = T::from_vec(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn two_by_two_by_hand() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = T::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn grad_of_sum_ab_wrt_a_is_ones_bt() {
        let a = T::param(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = T::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        // ones[2,2] @ b^T: each row = column sums of b^T rows = [3,7,11]
        assert_eq!(a.grad().unwrap(), vec![3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn batched_against_flat_rhs() {
        let a = T::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_reported() {
        let a = T::zeros(vec![2, 3]);
        let b = T::zeros(vec![4, 2]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::DimensionMismatch { left: 3, right: 4, .. })
        ));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = T::full(vec![5], 3.7);
        let s = x.softmax(0).unwrap();
        for &v in s.values().iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_computation() {
        let x = T::from_vec(vec![3], vec![2.0, 1.0, 0.1]).unwrap();
        let s = x.softmax(0).unwrap();
        let exps: Vec<f64> = [2.0f64, 1.0, 0.1].iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, want) in s.values().iter().zip(exps.iter().map(|e| e / total)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let x = T::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = x.transpose_last2().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(
            t.transpose_last2().unwrap().to_vec(),
            x.to_vec()
        );
    }
}
