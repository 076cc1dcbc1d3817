//! Dense row-major `f32` tensors and the forward operators the engine hosts.
//!
//! Convolutions are direct cross-correlations with symmetric zero padding:
//! `out = (in + 2 * padding - kernel) / stride + 1` per spatial axis. Every
//! reduction accumulates in `f32` starting from `0.0`, looping over input
//! channel, then kernel depth, then kernel rows, then kernel columns; the
//! bias is added once after the sum. NaN and Inf flow through untouched,
//! except in [`clamp`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// True when both tensors have the same shape and identical bit patterns.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn out_dim(op: &'static str, input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config(format!("{op}: stride must be positive")));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::Shape {
            op,
            left: vec![input, padding],
            right: vec![kernel],
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn check_bias(op: &'static str, bias: &[f32], out_channels: usize) -> Result<()> {
    if bias.len() != out_channels {
        return Err(Error::Shape {
            op,
            left: vec![out_channels],
            right: vec![bias.len()],
        });
    }
    Ok(())
}

/// Output spatial shape of a 2-d convolution, `[O, H', W']`.
pub fn conv2d_output_shape(
    input: &[usize],
    weights: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>> {
    if input.len() != 3 || weights.len() != 4 || input[0] != weights[1] {
        return Err(Error::Shape {
            op: "conv2d",
            left: input.to_vec(),
            right: weights.to_vec(),
        });
    }
    Ok(vec![
        weights[0],
        out_dim("conv2d", input[1], weights[2], stride, padding)?,
        out_dim("conv2d", input[2], weights[3], stride, padding)?,
    ])
}

/// Output shape of a 3-d convolution, `[O, D', H', W']`.
pub fn conv3d_output_shape(
    input: &[usize],
    weights: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>> {
    if input.len() != 4 || weights.len() != 5 || input[0] != weights[1] {
        return Err(Error::Shape {
            op: "conv3d",
            left: input.to_vec(),
            right: weights.to_vec(),
        });
    }
    Ok(vec![
        weights[0],
        out_dim("conv3d", input[1], weights[2], stride, padding)?,
        out_dim("conv3d", input[2], weights[3], stride, padding)?,
        out_dim("conv3d", input[3], weights[4], stride, padding)?,
    ])
}

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let out_shape = conv2d_output_shape(&input.shape, &weights.shape, stride, padding)?;
    check_bias("conv2d", bias, weights.shape[0])?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw) = (weights.shape[2], weights.shape[3]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let x = &input.data;
    let k = &weights.data;
    let mut out = Vec::with_capacity(c_out * oh * ow);
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for c in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(c * h + iy as usize) * w + ix as usize];
                            let kv = k[((o * c_in + c) * kh + ky) * kw + kx];
                            acc += kv * xv;
                        }
                    }
                }
                out.push(acc + bias[o]);
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

pub fn conv3d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let out_shape = conv3d_output_shape(&input.shape, &weights.shape, stride, padding)?;
    check_bias("conv3d", bias, weights.shape[0])?;
    let (c_in, d, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (kd, kh, kw) = (weights.shape[2], weights.shape[3], weights.shape[4]);
    let (c_out, od, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let x = &input.data;
    let k = &weights.data;
    let pad = padding as isize;
    let mut out = Vec::with_capacity(c_out * od * oh * ow);
    for o in 0..c_out {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for c in 0..c_in {
                        for kz in 0..kd {
                            let iz = (oz * stride + kz) as isize - pad;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((c * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                    let ki = (((o * c_in + c) * kd + kz) * kh + ky) * kw + kx;
                                    acc += k[ki] * x[xi];
                                }
                            }
                        }
                    }
                    out.push(acc + bias[o]);
                }
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Fully connected layer. Any input shape with `I` elements is accepted and
/// read in row-major order; the output has shape `[O]`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    if weights.shape.len() != 2 || weights.shape[1] != input.len() {
        return Err(Error::Shape {
            op: "linear",
            left: input.shape.clone(),
            right: weights.shape.clone(),
        });
    }
    let (o_dim, i_dim) = (weights.shape[0], weights.shape[1]);
    check_bias("linear", bias, o_dim)?;
    let out = (0..o_dim)
        .map(|o| {
            let row = &weights.data[o * i_dim..(o + 1) * i_dim];
            let acc = row
                .iter()
                .zip(&input.data)
                .fold(0.0f32, |acc, (w, x)| acc + w * x);
            acc + bias[o]
        })
        .collect();
    Ok(Tensor {
        shape: vec![o_dim],
        data: out,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    // NaN < 0.0 is false, so NaN passes through.
    x.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// Elementwise clamp into `[lo, hi]`; NaN becomes `lo`. In-range values keep
/// their exact bit pattern (including `-0.0`).
pub fn clamp(x: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::Config(format!("clamp bounds [{lo}, {hi}] are not a finite range")));
    }
    Ok(x.map(|v| clamp_value(v, lo, hi)))
}

pub(crate) fn clamp_value(v: f32, lo: f32, hi: f32) -> f32 {
    if v.is_nan() || v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Window max over the two trailing axes of a `[C, H, W]` tensor, no padding.
pub fn maxpool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::Shape {
            op: "maxpool2d",
            left: x.shape.clone(),
            right: vec![kernel, kernel],
        });
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let oh = out_dim("maxpool2d", h, kernel, stride, 0)?;
    let ow = out_dim("maxpool2d", w, kernel, stride, 0)?;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                let mut saw_nan = false;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = x.data[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                        if v.is_nan() {
                            saw_nan = true;
                        } else if v > m {
                            m = v;
                        }
                    }
                }
                out.push(if saw_nan { f32::NAN } else { m });
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data: out,
    })
}

/// Numerically stable softmax over all elements.
pub fn softmax(x: &Tensor) -> Tensor {
    let max = x.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.data.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Tensor {
        shape: x.shape.clone(),
        data: exps.into_iter().map(|e| e / sum).collect(),
    }
}

pub fn flatten(x: &Tensor) -> Tensor {
    Tensor {
        shape: vec![x.len()],
        data: x.data.clone(),
    }
}
