//! Pooling, resizing, flips, and the map<->token layout changes.

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::Tensor;

fn expect_rank4<S: Scalar>(
    op: &'static str,
    t: &Tensor<S>,
) -> Result<(usize, usize, usize, usize), TensorError> {
    if t.shape().len() != 4 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 4,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]))
}

impl<S: Scalar> Tensor<S> {
    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>, TensorError> {
        let (n, c, h, w) = expect_rank4("global_avg_pool", self)?;
        let plane = h * w;
        let scale = S::one() / S::of_f64(plane as f64);
        let mut values = vec![S::zero(); n * c];
        {
            let xv = self.values();
            for i in 0..n * c {
                let mut acc = S::zero();
                for &v in &xv[i * plane..(i + 1) * plane] {
                    acc += v;
                }
                values[i] = acc * scale;
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(vec![n, c], values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); n * c * plane];
                for i in 0..n * c {
                    let gv = g[i] * scale;
                    for d in &mut dx[i * plane..(i + 1) * plane] {
                        *d = gv;
                    }
                }
                a.accumulate_grad(&dx);
            })
        }))
    }

    /// Non-overlapping average pooling down to `(h, w)`; source dims must be
    /// integer multiples of the target.
    pub fn resize_avg(&self, target: (usize, usize)) -> Result<Tensor<S>, TensorError> {
        let (n, c, h, w) = expect_rank4("resize_avg", self)?;
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(TensorError::Invalid {
                op: "resize_avg",
                msg: "target dims must be positive".into(),
            });
        }
        if h % th != 0 {
            return Err(TensorError::NonIntegerFactor {
                axis: 2,
                from: h,
                to: th,
            });
        }
        if w % tw != 0 {
            return Err(TensorError::NonIntegerFactor {
                axis: 3,
                from: w,
                to: tw,
            });
        }
        let (fh, fw) = (h / th, w / tw);
        let scale = S::one() / S::of_f64((fh * fw) as f64);
        let mut values = vec![S::zero(); n * c * th * tw];
        {
            let xv = self.values();
            for i in 0..n * c {
                let src = &xv[i * h * w..(i + 1) * h * w];
                let dst = &mut values[i * th * tw..(i + 1) * th * tw];
                for oy in 0..th {
                    for ox in 0..tw {
                        let mut acc = S::zero();
                        for dy in 0..fh {
                            let row = (oy * fh + dy) * w + ox * fw;
                            for &v in &src[row..row + fw] {
                                acc += v;
                            }
                        }
                        dst[oy * tw + ox] = acc * scale;
                    }
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, th, tw],
            values,
            vec![self.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    let mut dx = vec![S::zero(); n * c * h * w];
                    for i in 0..n * c {
                        let gsrc = &g[i * th * tw..(i + 1) * th * tw];
                        let dst = &mut dx[i * h * w..(i + 1) * h * w];
                        for oy in 0..th {
                            for ox in 0..tw {
                                let gv = gsrc[oy * tw + ox] * scale;
                                for dy in 0..fh {
                                    let row = (oy * fh + dy) * w + ox * fw;
                                    for d in &mut dst[row..row + fw] {
                                        *d += gv;
                                    }
                                }
                            }
                        }
                    }
                    a.accumulate_grad(&dx);
                })
            },
        ))
    }

    /// Crops the last two axes to `h x w` starting at `(top, left)`.
    pub fn crop_hw(
        &self,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::RankMismatch {
                op: "crop_hw",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (sh, sw) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        if top + h > sh || left + w > sw || h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "crop_hw",
                msg: format!("window {h}x{w}@({top},{left}) outside {sh}x{sw}"),
            });
        }
        let outer: usize = self.shape()[..rank - 2].iter().product();
        let mut shape = self.shape().to_vec();
        shape[rank - 2] = h;
        shape[rank - 1] = w;
        let mut values = vec![S::zero(); outer * h * w];
        {
            let sv = self.values();
            for o in 0..outer {
                for y in 0..h {
                    let src = o * sh * sw + (top + y) * sw + left;
                    let dst = o * h * w + y * w;
                    values[dst..dst + w].copy_from_slice(&sv[src..src + w]);
                }
            }
        }
        let a = self.clone();
        let total = self.numel();
        Ok(Tensor::from_op(shape, values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); total];
                for o in 0..outer {
                    for y in 0..h {
                        let dst = o * sh * sw + (top + y) * sw + left;
                        let src = o * h * w + y * w;
                        dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                a.accumulate_grad(&dx);
            })
        }))
    }

    /// Reverses the last axis (image width).
    pub fn flip_horizontal(&self) -> Tensor<S> {
        self.flip_axis(self.shape().len() - 1)
    }

    /// Reverses the second-to-last axis (image height).
    pub fn flip_vertical(&self) -> Tensor<S> {
        assert!(self.shape().len() >= 2, "flip_vertical needs rank >= 2");
        self.flip_axis(self.shape().len() - 2)
    }

    fn flip_axis(&self, axis: usize) -> Tensor<S> {
        let len = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let flip = move |src: &[S]| {
            let mut out = vec![S::zero(); src.len()];
            for o in 0..outer {
                for a in 0..len {
                    let s = (o * len + a) * inner;
                    let d = (o * len + (len - 1 - a)) * inner;
                    out[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
            out
        };
        let values = flip(&self.values());
        let a = self.clone();
        Tensor::from_op(self.shape().to_vec(), values, vec![self.clone()], move || {
            Box::new(move |g: &[S]| {
                a.accumulate_grad(&flip(g));
            })
        })
    }

    /// `[N,C,H,W] -> [N, H*W, C]` with tokens in row-major spatial order.
    pub fn nchw_to_tokens(&self) -> Result<Tensor<S>, TensorError> {
        let (n, c, h, w) = expect_rank4("nchw_to_tokens", self)?;
        let t = h * w;
        let mut values = vec![S::zero(); n * t * c];
        {
            let xv = self.values();
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..t {
                        values[(b * t + p) * c + ch] = xv[(b * c + ch) * t + p];
                    }
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, t, c],
            values,
            vec![self.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    let mut dx = vec![S::zero(); n * c * t];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..t {
                                dx[(b * c + ch) * t + p] = g[(b * t + p) * c + ch];
                            }
                        }
                    }
                    a.accumulate_grad(&dx);
                })
            },
        ))
    }

    /// `[N, T, C] -> [N, C, h, w]` with `T == h*w`.
    pub fn tokens_to_nchw(&self, spatial: (usize, usize)) -> Result<Tensor<S>, TensorError> {
        if self.shape().len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "tokens_to_nchw",
                expected: 3,
                shape: self.shape().to_vec(),
            });
        }
        let (n, t, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (h, w) = spatial;
        if h * w != t {
            return Err(TensorError::Invalid {
                op: "tokens_to_nchw",
                msg: format!("{t} tokens cannot map onto a {h}x{w} grid"),
            });
        }
        let mut values = vec![S::zero(); n * c * t];
        {
            let xv = self.values();
            for b in 0..n {
                for p in 0..t {
                    for ch in 0..c {
                        values[(b * c + ch) * t + p] = xv[(b * t + p) * c + ch];
                    }
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            values,
            vec![self.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    let mut dx = vec![S::zero(); n * t * c];
                    for b in 0..n {
                        for p in 0..t {
                            for ch in 0..c {
                                dx[(b * t + p) * c + ch] = g[(b * c + ch) * t + p];
                            }
                        }
                    }
                    a.accumulate_grad(&dx);
                })
            },
        ))
    }
}
