//! Forward operators for the VGGish-family networks, plus the softmax
//! cross-entropy and dense backward pass used to fine-tune a head.
//!
//! Feature maps are channels-first `[C, H, W]`, row-major. Tensors store
//! `f32`; every reduction accumulates in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm epsilon used when a weight file does not specify one.
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[out_ch, in_ch, k, k]` with `k` either 3 or 1.
    pub kernels: Tensor,
    /// `[out_ch]`.
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        match kernels.shape() {
            &[o, _, k, k2] if k == k2 && (k == 3 || k == 1) => {
                if bias.shape() != [o] {
                    return Err(Error::Shape(format!("conv bias must be [{o}], got {:?}", bias.shape())));
                }
            }
            s => {
                return Err(Error::Shape(format!("conv kernels must be [out, in, 3, 3] or [out, in, 1, 1], got {s:?}")))
            }
        }
        Ok(Self { kernels, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor, epsilon: f64) -> Result<Self> {
        let c = gamma.len();
        for (name, t) in
            [("gamma", &gamma), ("beta", &beta), ("running_mean", &running_mean), ("running_var", &running_var)]
        {
            if t.shape() != [c] {
                return Err(Error::Shape(format!("batch norm {name} must be [{c}], got {:?}", t.shape())));
            }
        }
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::Domain(format!("batch norm epsilon must be >= 0, got {epsilon}")));
        }
        if running_var.data().iter().any(|&v| v.is_nan() || v < 0.0 || v as f64 + epsilon <= 0.0) {
            return Err(Error::Domain("running variance must be >= 0 with var + epsilon > 0".into()));
        }
        Ok(Self { gamma, beta, running_mean, running_var, epsilon })
    }

    /// Identity normalization over `channels`.
    pub fn identity(channels: usize, epsilon: f64) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let g = self.gamma.data()[c] as f64;
                let b = self.beta.data()[c] as f64;
                let m = self.running_mean.data()[c] as f64;
                let v = self.running_var.data()[c] as f64;
                let scale = g / (v + self.epsilon).sqrt();
                (scale, b - m * scale)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out_units, in_units]`.
    pub weights: Tensor,
    /// `[out_units]`.
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        match weights.shape() {
            &[o, _] if bias.shape() == [o] => Ok(Self { weights, bias }),
            s => Err(Error::Shape(format!("dense weights {s:?} and bias {:?} disagree", bias.shape()))),
        }
    }

    pub fn out_units(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_units(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Stride-1 convolution with zero padding that keeps `H` and `W`.
///
/// Lowered to a matrix product: the input is unrolled into a
/// `[C_in·k·k, H·W]` patch matrix and multiplied by the `[C_out, C_in·k·k]`
/// kernel matrix in double precision.
pub fn conv2d_same(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    if c_in != p.in_channels() {
        return Err(Error::Shape(format!("conv expects {} input channels, got {c_in}", p.in_channels())));
    }
    let c_out = p.out_channels();
    let k = p.kernel_size();
    let plane = h * w;
    let depth = c_in * k * k;
    let cols = im2col(input.data(), c_in, h, w, k);
    let kernels: Vec<f64> = p.kernels.data().iter().map(|&v| v as f64).collect();
    let mut acc: Vec<f64> = p.bias.data().iter().flat_map(|&b| std::iter::repeat_n(b as f64, plane)).collect();
    // SAFETY: all three buffers are dense row-major matrices whose sizes
    // match the dimensions and strides passed here.
    unsafe {
        matrixmultiply::dgemm(
            c_out,
            depth,
            plane,
            1.0,
            kernels.as_ptr(),
            depth as isize,
            1,
            cols.as_ptr(),
            plane as isize,
            1,
            1.0,
            acc.as_mut_ptr(),
            plane as isize,
            1,
        );
    }
    Tensor::new(vec![c_out, h, w], acc.into_iter().map(|v| v as f32).collect())
}

/// Row `(c, dy, dx)` holds input channel `c` shifted by `(dy - k/2, dx - k/2)`,
/// zero outside the map.
fn im2col(src: &[f32], c_in: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let plane = h * w;
    let mut cols = vec![0.0f64; c_in * k * k * plane];
    for c in 0..c_in {
        let chan = &src[c * plane..(c + 1) * plane];
        for dy in 0..k {
            let y_lo = pad.saturating_sub(dy);
            let y_hi = (h + pad).saturating_sub(dy).min(h);
            for dx in 0..k {
                let x_lo = pad.saturating_sub(dx);
                let x_hi = (w + pad).saturating_sub(dx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                let row = &mut cols[((c * k + dy) * k + dx) * plane..][..plane];
                for y in y_lo..y_hi {
                    let sy = y + dy - pad;
                    let dst = &mut row[y * w + x_lo..y * w + x_hi];
                    let s = &chan[sy * w + x_lo + dx - pad..sy * w + x_hi + dx - pad];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d = v as f64;
                    }
                }
            }
        }
    }
    cols
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_infer(input: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if c != p.channels() {
        return Err(Error::Shape(format!("batch norm over {} channels, input has {c}", p.channels())));
    }
    let plane = h * w;
    let mut out = input.clone();
    for (ch, (scale, shift)) in p.affine().into_iter().enumerate() {
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = (scale * *v as f64 + shift) as f32;
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// 2×2 max pooling with stride 2; an odd trailing row or column is dropped.
pub fn maxpool_2x2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            let r0 = base + 2 * y * w;
            let r1 = r0 + w;
            for x in 0..ow {
                let m = d[r0 + 2 * x].max(d[r0 + 2 * x + 1]).max(d[r1 + 2 * x]).max(d[r1 + 2 * x + 1]);
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Per-channel spatial mean, `[C, H, W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), c);
    Ok(Tensor::from_vec(out))
}

/// Per-channel spatial maximum, `[C, H, W] -> [C]`.
pub fn global_max_pool(input: &Tensor) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    let out = input.data().chunks_exact(h * w).map(|ch| ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max)).collect();
    Ok(Tensor::from_vec(out))
}

/// `W x + b`.
pub fn dense(input: &Tensor, p: &DenseParams) -> Result<Tensor> {
    if input.shape() != [p.in_units()] {
        return Err(Error::Shape(format!("dense layer expects [{}], got {:?}", p.in_units(), input.shape())));
    }
    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let out = dense_f64(&x, p.weights.data(), p.bias.data()).into_iter().map(|v| v as f32).collect();
    Ok(Tensor::from_vec(out))
}

/// `W x + b` over raw row-major weights, in double precision.
pub fn dense_f64<W: Copy + Into<f64>>(x: &[f64], weights: &[W], bias: &[W]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weights[o * x.len()..(o + 1) * x.len()];
            b.into() + row.iter().zip(x).map(|(&w, v)| w.into() * v).sum::<f64>()
        })
        .collect()
}

/// Gradients of a dense layer given the upstream gradient `dout`.
/// Returns `(d_weights, d_bias, d_input)`.
pub fn dense_backward(x: &[f64], weights: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_in = x.len();
    let mut dw = Vec::with_capacity(dout.len() * n_in);
    let mut dx = vec![0.0; n_in];
    for (o, &g) in dout.iter().enumerate() {
        dw.extend(x.iter().map(|&v| g * v));
        for (d, &w) in dx.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
            *d += g * w;
        }
    }
    (dw, dout.to_vec(), dx)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax cross-entropy loss for `true_class` and its gradient with
/// respect to the logits, `softmax(z) - onehot(true_class)`.
pub fn cross_entropy_grad(logits: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= logits.len() {
        return Err(Error::Index(format!("class {true_class} out of range for {} logits", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[true_class];
    let mut grad = softmax(logits);
    grad[true_class] -= 1.0;
    Ok((loss, grad))
}
