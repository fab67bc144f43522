//! 2-D convolution with stride, padding, and dilation.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::Tensor;

/// Geometry of a conv2d application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new_square(
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride,
            padding,
            dilation,
            in_channels,
            out_channels,
        }
    }

    /// `floor((size + 2p - d*(k-1) - 1)/s) + 1` per axis, must be >= 1.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let out = |size: usize, k: usize, axis: usize| -> Result<usize, TensorError> {
            let span = (size + 2 * self.padding) as isize
                - (self.dilation * (k - 1) + 1) as isize;
            if span < 0 {
                return Err(TensorError::EmptyOutput {
                    op: "conv2d",
                    axis,
                    size: span / self.stride as isize + 1,
                });
            }
            Ok(span as usize / self.stride + 1)
        };
        Ok((out(h, self.kernel.0, 2)?, out(w, self.kernel.1, 3)?))
    }
}

/// Valid output index range for one kernel tap: all `o` with
/// `0 <= o*stride + offset < limit`, clipped to `out_len`.
fn tap_range(offset: isize, stride: usize, limit: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let min = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let max_in = (limit as isize - 1 - offset).div_euclid(s);
    let max = max_in.min(out_len as isize - 1);
    if max < min {
        (1, 0) // empty
    } else {
        (min as usize, max as usize)
    }
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn validate<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvDims, TensorError> {
    if x.shape().len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d",
            expected: 4,
            shape: x.shape().to_vec(),
        });
    }
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if c_in != spec.in_channels {
        return Err(TensorError::DimensionMismatch {
            op: "conv2d",
            axis: 1,
            left: c_in,
            right: spec.in_channels,
        });
    }
    let expected_w = [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1];
    if weight.shape() != expected_w {
        let axis = weight
            .shape()
            .iter()
            .zip(&expected_w)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(TensorError::DimensionMismatch {
            op: "conv2d",
            axis,
            left: weight.shape().get(axis).copied().unwrap_or(0),
            right: expected_w[axis],
        });
    }
    if bias.shape() != [spec.out_channels] {
        return Err(TensorError::DimensionMismatch {
            op: "conv2d",
            axis: 0,
            left: bias.numel(),
            right: spec.out_channels,
        });
    }
    let (oh, ow) = spec.output_size(h, w)?;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out: spec.out_channels,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        oh,
        ow,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    x: &[S],
    weight: &[S],
    bias: &[S],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); d.n * d.c_out * d.oh * d.ow];
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for b in 0..d.n {
        for co in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + co) * plane_out..][..plane_out];
            out_plane.fill(bias[co]);
            for ci in 0..d.c_in {
                let x_plane = &x[(b * d.c_in + ci) * plane_in..][..plane_in];
                let w_base = ((co * d.c_in + ci) * d.kh) * d.kw;
                for kh in 0..d.kh {
                    let off_y = (kh * dilation) as isize - padding as isize;
                    let (oy0, oy1) = tap_range(off_y, stride, d.h, d.oh);
                    for kw in 0..d.kw {
                        let wv = weight[w_base + kh * d.kw + kw];
                        if wv == S::zero() {
                            continue;
                        }
                        let off_x = (kw * dilation) as isize - padding as isize;
                        let (ox0, ox1) = tap_range(off_x, stride, d.w, d.ow);
                        if ox1 < ox0 || oy1 < oy0 {
                            continue;
                        }
                        for oy in oy0..=oy1 {
                            let iy = (oy * stride) as isize + off_y;
                            let x_row = &x_plane[iy as usize * d.w..][..d.w];
                            let out_row = &mut out_plane[oy * d.ow..][..d.ow];
                            if stride == 1 {
                                let ix0 = (ox0 as isize + off_x) as usize;
                                let len = ox1 - ox0 + 1;
                                let xs = &x_row[ix0..ix0 + len];
                                let os = &mut out_row[ox0..ox0 + len];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..=ox1 {
                                    let ix = (ox * stride) as isize + off_x;
                                    out_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    /// `x[N,C,H,W] * w[C_out,C,kh,kw] + b[C_out]`, differentiable in all three.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        spec: &ConvSpec,
    ) -> Result<Tensor<S>, TensorError> {
        let d = validate(self, weight, bias, spec)?;
        let values = conv_forward(
            &self.values(),
            &weight.values(),
            &bias.values(),
            &d,
            spec.stride,
            spec.padding,
            spec.dilation,
        );
        let out_shape = vec![d.n, d.c_out, d.oh, d.ow];
        let (x, w, bi) = (self.clone(), weight.clone(), bias.clone());
        let spec = spec.clone();
        Ok(Tensor::from_op(
            out_shape,
            values,
            vec![self.clone(), weight.clone(), bias.clone()],
            move || {
                Box::new(move |g: &[S]| {
                    conv_backward(g, &x, &w, &bi, &spec);
                })
            },
        ))
    }

    /// Pointwise channel mixing; spatial dims unchanged.
    pub fn conv1x1(
        &self,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        if weight.shape().len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv1x1",
                expected: 4,
                shape: weight.shape().to_vec(),
            });
        }
        let spec = ConvSpec::new_square(1, 1, 0, 1, weight.shape()[1], weight.shape()[0]);
        self.conv2d(weight, bias, &spec)
    }
}

fn conv_backward<S: Scalar>(
    g: &[S],
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) {
    let d = validate(x, weight, bias, spec).expect("shapes validated at forward");
    let (stride, padding, dilation) = (spec.stride, spec.padding, spec.dilation);
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;

    if bias.requires_grad() {
        let mut db = vec![S::zero(); d.c_out];
        for b in 0..d.n {
            for co in 0..d.c_out {
                let g_plane = &g[(b * d.c_out + co) * plane_out..][..plane_out];
                let mut acc = S::zero();
                for &gv in g_plane {
                    acc += gv;
                }
                db[co] += acc;
            }
        }
        bias.accumulate_grad(&db);
    }

    if weight.requires_grad() {
        let mut dw = vec![S::zero(); weight.numel()];
        let xv = x.values();
        for b in 0..d.n {
            for co in 0..d.c_out {
                let g_plane = &g[(b * d.c_out + co) * plane_out..][..plane_out];
                for ci in 0..d.c_in {
                    let x_plane = &xv[(b * d.c_in + ci) * plane_in..][..plane_in];
                    let w_base = ((co * d.c_in + ci) * d.kh) * d.kw;
                    for kh in 0..d.kh {
                        let off_y = (kh * dilation) as isize - padding as isize;
                        let (oy0, oy1) = tap_range(off_y, stride, d.h, d.oh);
                        for kw in 0..d.kw {
                            let off_x = (kw * dilation) as isize - padding as isize;
                            let (ox0, ox1) = tap_range(off_x, stride, d.w, d.ow);
                            if ox1 < ox0 || oy1 < oy0 {
                                continue;
                            }
                            let mut acc = S::zero();
                            for oy in oy0..=oy1 {
                                let iy = ((oy * stride) as isize + off_y) as usize;
                                let x_row = &x_plane[iy * d.w..][..d.w];
                                let g_row = &g_plane[oy * d.ow..][..d.ow];
                                if stride == 1 {
                                    let ix0 = (ox0 as isize + off_x) as usize;
                                    let len = ox1 - ox0 + 1;
                                    for (&gv, &xvv) in
                                        g_row[ox0..ox0 + len].iter().zip(&x_row[ix0..ix0 + len])
                                    {
                                        acc += gv * xvv;
                                    }
                                } else {
                                    for ox in ox0..=ox1 {
                                        let ix = ((ox * stride) as isize + off_x) as usize;
                                        acc += g_row[ox] * x_row[ix];
                                    }
                                }
                            }
                            dw[w_base + kh * d.kw + kw] += acc;
                        }
                    }
                }
            }
        }
        drop(xv);
        weight.accumulate_grad(&dw);
    }

    if x.requires_grad() {
        let mut dx = vec![S::zero(); x.numel()];
        let wv = weight.values();
        for b in 0..d.n {
            for co in 0..d.c_out {
                let g_plane = &g[(b * d.c_out + co) * plane_out..][..plane_out];
                for ci in 0..d.c_in {
                    let dx_plane = &mut dx[(b * d.c_in + ci) * plane_in..][..plane_in];
                    let w_base = ((co * d.c_in + ci) * d.kh) * d.kw;
                    for kh in 0..d.kh {
                        let off_y = (kh * dilation) as isize - padding as isize;
                        let (oy0, oy1) = tap_range(off_y, stride, d.h, d.oh);
                        for kw in 0..d.kw {
                            let w_val = wv[w_base + kh * d.kw + kw];
                            if w_val == S::zero() {
                                continue;
                            }
                            let off_x = (kw * dilation) as isize - padding as isize;
                            let (ox0, ox1) = tap_range(off_x, stride, d.w, d.ow);
                            if ox1 < ox0 || oy1 < oy0 {
                                continue;
                            }
                            for oy in oy0..=oy1 {
                                let iy = ((oy * stride) as isize + off_y) as usize;
                                let dx_row = &mut dx_plane[iy * d.w..][..d.w];
                                let g_row = &g_plane[oy * d.ow..][..d.ow];
                                if stride == 1 {
                                    let ix0 = (ox0 as isize + off_x) as usize;
                                    let len = ox1 - ox0 + 1;
                                    for (dxv, &gv) in
                                        dx_row[ix0..ix0 + len].iter_mut().zip(&g_row[ox0..ox0 + len])
                                    {
                                        *dxv += w_val * gv;
                                    }
                                } else {
                                    for ox in ox0..=ox1 {
                                        let ix = ((ox * stride) as isize + off_x) as usize;
                                        dx_row[ix] += w_val * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(wv);
        x.accumulate_grad(&dx);
    }
}
