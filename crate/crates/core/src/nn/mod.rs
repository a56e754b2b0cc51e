//! Miniature encoders, pooling functions and projection heads.
//!
//! All modules take batched inputs with the instance axis first. Weights are
//! drawn uniformly from a seeded generator: linear layers use
//! `±sqrt(1/fan_in)`, convolutions feeding a rectifier use the wider
//! `±sqrt(6/fan_in)` so activations keep their scale through the trunk.
//! Biases start at zero and layer-norm gains at one.

mod encoder;
mod head;
mod pool;
mod transformer;

pub use encoder::{
    AudioEncoder, AudioEncoderConfig, AvgPoolEncoder, Conv2Plus1d, EncoderConfig, StageConfig, VisualEncoder,
};
pub use head::ProjectionHead;
pub use pool::{spatial_max_pool, spatial_pool, temporal_avg_pool, TemporalPool};
pub use transformer::{
    multihead_attention, sinusoidal_encoding, Aggregation, TimeMask, TransformerConfig, TransformerPool,
};

use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError};

/// Anything holding trainable tensors.
pub trait Module {
    /// Calls `f` with a stable dotted name for every parameter.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn uniform_param<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::parameter(data, shape).expect("non-empty parameter shape")
}

pub(crate) fn zero_param(shape: &[usize]) -> Tensor {
    Tensor::parameter(vec![0.0; shape.iter().product()], shape).expect("non-empty parameter shape")
}

/// Fully connected layer on the last axis; weight is `[in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Linear {
            weight: uniform_param(rng, &[input, output], bound),
            bias: Some(zero_param(&[output])),
        }
    }

    /// A layer without bias, for projections where a bias cancels out.
    pub fn without_bias<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Linear {
            weight: uniform_param(rng, &[input, output], bound),
            bias: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let d = *shape.last().expect("rank >= 1");
        if d != self.in_features() {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: self.weight.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let flat = if shape.len() == 2 {
            x.clone()
        } else {
            x.reshape(&[rows, d])?
        };
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add(b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_features();
        y.reshape(&out_shape)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

pub struct LayerNorm {
    pub gain: Tensor,
    /// A constant zero, not a parameter, for [`LayerNorm::without_bias`].
    pub bias: Tensor,
    learned_bias: bool,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::parameter(vec![1.0; dim], &[dim]).expect("dim > 0"),
            bias: zero_param(&[dim]),
            learned_bias: true,
        }
    }

    /// Gain only; for outputs that feed a batch normalization, which would
    /// cancel any shift and leave a bias without gradient.
    pub fn without_bias(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::parameter(vec![1.0; dim], &[dim]).expect("dim > 0"),
            bias: Tensor::zeros(&[dim]),
            learned_bias: false,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, Self::EPS)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        if self.learned_bias {
            f(join(prefix, "bias"), &self.bias);
        }
    }
}

/// Normalizes each feature of `[N, D]` with the statistics of the batch
/// itself, then applies a learned scale and shift. There are no running
/// averages: the layer is only used where whole batches are seen.
pub struct BatchNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gain: Tensor::parameter(vec![1.0; dim], &[dim]).expect("dim > 0"),
            bias: zero_param(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.gain.numel() || s[0] < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: self.gain.shape().to_vec(),
            });
        }
        let centred = x.sub(&x.mean_axis(0, true)?)?;
        let std = centred.pow(2.0).mean_axis(0, true)?.add_scalar(Self::EPS).sqrt();
        centred.div(&std)?.mul(&self.gain)?.add(&self.bias)
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
}
