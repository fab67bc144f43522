//! Elementwise arithmetic, activations, reductions, and shape plumbing.

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::Tensor;

fn check_same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(), TensorError> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    if a.shape().len() != b.shape().len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: a.shape().len(),
            shape: b.shape().to_vec(),
        });
    }
    let axis = a
        .shape()
        .iter()
        .zip(b.shape())
        .position(|(x, y)| x != y)
        .unwrap_or(0);
    Err(TensorError::DimensionMismatch {
        op,
        axis,
        left: a.shape()[axis],
        right: b.shape()[axis],
    })
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_same_shape("add", self, other)?;
        let values: Vec<S> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(g);
                    }
                })
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_same_shape("sub", self, other)?;
        let values: Vec<S> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                        b.accumulate_grad(&neg);
                    }
                })
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        check_same_shape("mul", self, other)?;
        let values: Vec<S> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if a.requires_grad() {
                        let da: Vec<S> = g
                            .iter()
                            .zip(b.values().iter())
                            .map(|(&gi, &bi)| gi * bi)
                            .collect();
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let db: Vec<S> = g
                            .iter()
                            .zip(a.values().iter())
                            .map(|(&gi, &ai)| gi * ai)
                            .collect();
                        b.accumulate_grad(&db);
                    }
                })
            },
        ))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let values: Vec<S> = self.values().iter().map(|&x| x + c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| a.accumulate_grad(g))
        })
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        let values: Vec<S> = self.values().iter().map(|&x| x * c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let da: Vec<S> = g.iter().map(|&gi| gi * c).collect();
                a.accumulate_grad(&da);
            })
        })
    }

    /// Adds a 1-element tensor to every element (scalar bias).
    pub fn add_scalar_tensor(&self, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if bias.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "add_scalar_tensor",
                msg: format!("bias must have 1 element, got {}", bias.numel()),
            });
        }
        let c = bias.item();
        let values: Vec<S> = self.values().iter().map(|&x| x + c).collect();
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), bias.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        let total: S = g.iter().copied().sum();
                        b.accumulate_grad(&[total]);
                    }
                })
            },
        ))
    }

    /// Broadcasts a length-D vector over the last axis of `self`.
    pub fn add_row_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let d = *self.shape().last().ok_or(TensorError::RankMismatch {
            op: "add_row_bias",
            expected: 1,
            shape: vec![],
        })?;
        if bias.shape() != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "add_row_bias",
                axis: self.shape().len() - 1,
                left: d,
                right: bias.numel(),
            });
        }
        let bv = bias.to_vec();
        let values: Vec<S> = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % d])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), bias.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        let mut db = vec![S::zero(); d];
                        for (i, &gi) in g.iter().enumerate() {
                            db[i % d] += gi;
                        }
                        b.accumulate_grad(&db);
                    }
                })
            },
        ))
    }

    pub fn relu(&self) -> Tensor<S> {
        let values: Vec<S> = self
            .values()
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let av = a.values();
                let da: Vec<S> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect();
                drop(av);
                a.accumulate_grad(&da);
            })
        })
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let values: Vec<S> = self.values().iter().map(|&x| stable_sigmoid(x)).collect();
        let out_vals = values.clone();
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let da: Vec<S> = g
                    .iter()
                    .zip(out_vals.iter())
                    .map(|(&gi, &s)| gi * s * (S::one() - s))
                    .collect();
                a.accumulate_grad(&da);
            })
        })
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let total: S = self.values().iter().copied().sum();
        let n = self.numel();
        let a = self.clone();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                a.accumulate_grad(&vec![g[0]; n]);
            })
        })
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::of_f64(self.numel() as f64);
        self.sum_all().mul_scalar(S::one() / n)
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<S>, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeValueMismatch {
                op: "reshape",
                shape,
                len: self.numel(),
            });
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            move || Box::new(move |g: &[S]| a.accumulate_grad(g)),
        ))
    }

    /// Concatenation along `axis`; inputs agree on every other axis.
    pub fn concat(inputs: &[Tensor<S>], axis: usize) -> Result<Tensor<S>, TensorError> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        let mut axis_total = 0;
        for t in inputs {
            if t.shape().len() != rank {
                return Err(TensorError::RankMismatch {
                    op: "concat",
                    expected: rank,
                    shape: t.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != first.shape()[d] {
                    return Err(TensorError::DimensionMismatch {
                        op: "concat",
                        axis: d,
                        left: first.shape()[d],
                        right: t.shape()[d],
                    });
                }
            }
            axis_total += t.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut values = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for t in inputs {
            let ax = t.shape()[axis];
            let tv = t.values();
            for o in 0..outer {
                let src = o * ax * inner;
                let dst = o * axis_total * inner + offset * inner;
                values[dst..dst + ax * inner].copy_from_slice(&tv[src..src + ax * inner]);
            }
            offset += ax;
        }
        let parents: Vec<Tensor<S>> = inputs.to_vec();
        let owned: Vec<Tensor<S>> = inputs.to_vec();
        Ok(Tensor::from_op(shape, values, parents, move || {
            Box::new(move |g: &[S]| {
                let mut offset = 0;
                for t in &owned {
                    let ax = t.shape()[axis];
                    if t.requires_grad() {
                        let mut dt = vec![S::zero(); t.numel()];
                        for o in 0..outer {
                            let dst = o * ax * inner;
                            let src = o * axis_total * inner + offset * inner;
                            dt[dst..dst + ax * inner].copy_from_slice(&g[src..src + ax * inner]);
                        }
                        t.accumulate_grad(&dt);
                    }
                    offset += ax;
                }
            })
        }))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice_axis(
        &self,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "slice_axis",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let ax = self.shape()[axis];
        if start + len > ax || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_axis",
                msg: format!("range {start}..{} out of bounds for axis size {ax}", start + len),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut values = vec![S::zero(); outer * len * inner];
        {
            let sv = self.values();
            for o in 0..outer {
                let src = (o * ax + start) * inner;
                let dst = o * len * inner;
                values[dst..dst + len * inner].copy_from_slice(&sv[src..src + len * inner]);
            }
        }
        let a = self.clone();
        let total = self.numel();
        Ok(Tensor::from_op(shape, values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut da = vec![S::zero(); total];
                for o in 0..outer {
                    let dst = (o * ax + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                a.accumulate_grad(&da);
            })
        }))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(inputs: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let reshaped: Vec<Tensor<S>> = inputs
            .iter()
            .map(|t| {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.reshape(s)
            })
            .collect::<Result<_, _>>()?;
        Tensor::concat(&reshaped, 0)
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    let s = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    // saturation rounds to exactly 0 or 1; pin inside the open interval
    let two = S::one() + S::one();
    s.max(S::min_positive_value())
        .min(S::one() - S::epsilon() / two)
}
