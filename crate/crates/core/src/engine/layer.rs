use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// 2-D convolution (cross-correlation, no kernel flip) with zero padding.
///
/// Weights are laid out `[out_channels][in_channels][kernel_h][kernel_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Fully connected layer; weights are `[out_features][in_features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out_features: usize,
    pub in_features: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool { window: usize, stride: usize },
    Dense(Dense),
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Relu,
    MaxPool,
    Dense,
    Softmax,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv2d => 1,
            LayerKind::Relu => 2,
            LayerKind::MaxPool => 3,
            LayerKind::Dense => 4,
            LayerKind::Softmax => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Conv2d,
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool,
            4 => LayerKind::Dense,
            5 => LayerKind::Softmax,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Dense => "dense",
            LayerKind::Softmax => "softmax",
        }
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weights.len() + c.bias.len(),
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            _ => 0,
        }
    }

    /// Output shape for a given input shape, validating parameter sizes.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                let &[ch, h, w] = input else {
                    return Err(invalid(format!("conv2d expects 3-D input, got {input:?}")));
                };
                if ch != c.in_channels {
                    return Err(invalid(format!(
                        "conv2d expects {} input channels, got {ch}",
                        c.in_channels
                    )));
                }
                if c.stride == 0 || c.kernel_h == 0 || c.kernel_w == 0 || c.out_channels == 0 {
                    return Err(invalid("conv2d stride, kernel and channel counts must be positive"));
                }
                let expected = c.out_channels * c.in_channels * c.kernel_h * c.kernel_w;
                if c.weights.len() != expected || c.bias.len() != c.out_channels {
                    return Err(invalid(format!(
                        "conv2d parameters have {} weights / {} biases, expected {expected} / {}",
                        c.weights.len(),
                        c.bias.len(),
                        c.out_channels
                    )));
                }
                let (ph, pw) = (h + 2 * c.padding, w + 2 * c.padding);
                if ph < c.kernel_h || pw < c.kernel_w {
                    return Err(invalid(format!(
                        "conv2d kernel {}x{} larger than padded input {ph}x{pw}",
                        c.kernel_h, c.kernel_w
                    )));
                }
                Ok(vec![
                    c.out_channels,
                    (ph - c.kernel_h) / c.stride + 1,
                    (pw - c.kernel_w) / c.stride + 1,
                ])
            }
            Layer::MaxPool { window, stride } => {
                let &[ch, h, w] = input else {
                    return Err(invalid(format!("maxpool expects 3-D input, got {input:?}")));
                };
                if *window == 0 || *stride == 0 {
                    return Err(invalid("maxpool window and stride must be positive"));
                }
                if h < *window || w < *window {
                    return Err(invalid(format!("maxpool window {window} larger than {h}x{w}")));
                }
                Ok(vec![ch, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Layer::Dense(d) => {
                let n: usize = input.iter().product();
                if n != d.in_features {
                    return Err(invalid(format!(
                        "dense expects {} inputs, got {n} ({input:?})",
                        d.in_features
                    )));
                }
                if d.out_features == 0 {
                    return Err(invalid("dense output width must be positive"));
                }
                if d.weights.len() != d.out_features * d.in_features || d.bias.len() != d.out_features {
                    return Err(invalid("dense parameter sizes do not match declared shape"));
                }
                Ok(vec![d.out_features])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.len() != 1 {
                    return Err(invalid(format!("softmax expects a vector, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Applies the layer. `out_shape` must come from [`Layer::output_shape`].
    pub(crate) fn apply(&self, input: &Tensor, out_shape: &[usize]) -> Tensor {
        let data = match self {
            Layer::Conv2d(c) => conv2d(c, input, out_shape),
            Layer::Relu => input.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool { window, stride } => max_pool(input, *window, *stride, out_shape),
            Layer::Dense(d) => dense(d, input.data()),
            Layer::Softmax => softmax(input.data()),
        };
        Tensor::new(out_shape.to_vec(), data).expect("layer output matches validated shape")
    }
}

fn conv2d(c: &Conv2d, input: &Tensor, out_shape: &[usize]) -> Vec<f32> {
    let (in_c, h, w) = input.dims_3d().expect("validated");
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let src = input.data();
    let (kh, kw) = (c.kernel_h, c.kernel_w);
    let pad = c.padding as isize;
    let mut out = Vec::with_capacity(c.out_channels * oh * ow);
    for o in 0..c.out_channels {
        let kernel = &c.weights[o * in_c * kh * kw..(o + 1) * in_c * kh * kw];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = c.bias[o] as f64;
                let y0 = (y * c.stride) as isize - pad;
                let x0 = (x * c.stride) as isize - pad;
                for ic in 0..in_c {
                    for ky in 0..kh {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (ic * h + iy as usize) * w;
                        let krow = (ic * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[krow + kx] as f64 * src[row + ix as usize] as f64;
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

fn max_pool(input: &Tensor, window: usize, stride: usize, out_shape: &[usize]) -> Vec<f32> {
    let (ch, h, w) = input.dims_3d().expect("validated");
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let src = input.data();
    let mut out = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..window {
                    let row = (c * h + y * stride + dy) * w;
                    for dx in 0..window {
                        m = m.max(src[row + x * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn dense(d: &Dense, input: &[f32]) -> Vec<f32> {
    d.weights
        .chunks_exact(d.in_features)
        .zip(&d.bias)
        .map(|(row, &b)| {
            let acc: f64 = row.iter().zip(input).map(|(&w, &x)| w as f64 * x as f64).sum();
            (acc + b as f64) as f32
        })
        .collect()
}

/// Numerically stable softmax (max subtraction, `f64` normaliser).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// `-ln softmax(logits)[class]`, evaluated in `f64`.
pub fn cross_entropy(logits: &[f32], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[class] as f64
}
