use rand::Rng;

use super::{join, LayerNorm, Linear, Module};
use crate::tensor::{Result, Tensor, TensorError};

/// Which time positions take part in attention and aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeMask(Vec<bool>);

impl TimeMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::Invalid("time mask must keep at least one position".into()));
        }
        Ok(TimeMask(keep))
    }

    pub fn full(len: usize) -> Self {
        Self::new(vec![true; len]).expect("len > 0")
    }

    /// True on `start..end` only.
    pub fn window(len: usize, start: usize, end: usize) -> Result<Self> {
        Self::new((0..len).map(|i| (start..end).contains(&i)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }

    /// `1/count` at kept positions, exactly `0` elsewhere.
    pub fn mean_weights(&self) -> Vec<f64> {
        let c = self.count() as f64;
        self.0.iter().map(|&k| if k { 1.0 / c } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean of the outputs at unmasked positions.
    Mean,
    /// A learned token prepended to the sequence; its output is the result.
    SummaryToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub aggregation: Aggregation,
}

impl TransformerConfig {
    pub fn new(dim: usize) -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            dim,
            ff_dim: 2 * dim,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(TensorError::Invalid(format!(
                "transformer dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(TensorError::Invalid(
                "transformer feedforward width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed sinusoidal code for absolute position `pos`:
/// `sin(pos/10000^(2i/d))` at even and `cos` at odd entries.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn split_heads(x: &Tensor, n: usize, t: usize, heads: usize, dh: usize) -> Result<Tensor> {
    x.reshape(&[n, t, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * heads, t, dh])
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q`, `k`, `v` are `[T, d]` or `[N, T, d]`; keys with `keep[j] == false`
/// get exactly zero weight. Returns the output (shaped like `q`) and the
/// weights `[N·heads, T, T]`.
pub fn multihead_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    keep: &[bool],
) -> Result<(Tensor, Tensor)> {
    let single = q.rank() == 2;
    let s = q.shape().to_vec();
    if q.shape() != k.shape() || q.shape() != v.shape() || !(2..=3).contains(&q.rank()) {
        return Err(TensorError::ShapeMismatch {
            op: "multihead_attention",
            lhs: s,
            rhs: k.shape().to_vec(),
        });
    }
    let (n, t, d) = if single { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "attention dim {d} not divisible by {heads} heads"
        )));
    }
    if keep.len() != t {
        return Err(TensorError::ShapeMismatch {
            op: "multihead_attention",
            lhs: s,
            rhs: vec![keep.len()],
        });
    }
    let dh = d / heads;
    let qh = split_heads(q, n, t, heads, dh)?;
    let kh = split_heads(k, n, t, heads, dh)?;
    let vh = split_heads(v, n, t, heads, dh)?;
    let scores = qh.matmul(&kh.transpose(1, 2)?)?.scale(1.0 / (dh as f64).sqrt());
    let weights = scores.masked_softmax(keep)?;
    let out = weights
        .matmul(&vh)?
        .reshape(&[n, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&s)?;
    Ok((out, weights))
}

struct EncoderLayer {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderLayer {
    fn new<R: Rng>(rng: &mut R, cfg: &TransformerConfig) -> Self {
        let d = cfg.dim;
        EncoderLayer {
            norm1: LayerNorm::new(d),
            q: Linear::new(rng, d, d),
            // a key bias shifts every score in a row equally and has no effect
            k: Linear::without_bias(rng, d, d),
            v: Linear::new(rng, d, d),
            o: Linear::new(rng, d, d),
            norm2: LayerNorm::new(d),
            ff1: Linear::new(rng, d, cfg.ff_dim),
            ff2: Linear::new(rng, cfg.ff_dim, d),
        }
    }

    fn forward(&self, x: &Tensor, heads: usize, keep: &[bool]) -> Result<Tensor> {
        let y = self.norm1.forward(x)?;
        let (a, _) = multihead_attention(
            &self.q.forward(&y)?,
            &self.k.forward(&y)?,
            &self.v.forward(&y)?,
            heads,
            keep,
        )?;
        let x = x.add(&self.o.forward(&a)?)?;
        let y = self.norm2.forward(&x)?;
        x.add(&self.ff2.forward(&self.ff1.forward(&y)?.relu())?)
    }
}

impl Module for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.q.visit(&join(prefix, "attn.q"), f);
        self.k.visit(&join(prefix, "attn.k"), f);
        self.v.visit(&join(prefix, "attn.v"), f);
        self.o.visit(&join(prefix, "attn.o"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }
}

/// Pre-norm transformer replacing temporal average pooling.
///
/// The input sequence is layer-normalized, offset by sinusoidal codes of its
/// absolute time indices, passed through the encoder layers and a final
/// norm, then reduced to one vector per instance.
pub struct TransformerPool {
    pub cfg: TransformerConfig,
    input_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    token: Option<Tensor>,
}

impl TransformerPool {
    pub fn new<R: Rng>(rng: &mut R, cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers).map(|_| EncoderLayer::new(rng, &cfg)).collect();
        let token = (cfg.aggregation == Aggregation::SummaryToken).then(|| {
            let b = (1.0 / cfg.dim as f64).sqrt();
            super::uniform_param(rng, &[cfg.dim], b)
        });
        Ok(TransformerPool {
            cfg,
            input_norm: LayerNorm::new(cfg.dim),
            layers,
            final_norm: LayerNorm::without_bias(cfg.dim),
            token,
        })
    }

    /// `[N, D, L]` → `[N, D]` (or `[D, L]` → `[D]`). `offsets[i]` is the
    /// absolute time index of instance `i`'s first position.
    pub fn forward(&self, h: &Tensor, offsets: &[usize], mask: Option<&TimeMask>) -> Result<Tensor> {
        let single = h.rank() == 2;
        let h = if single {
            let mut s = vec![1];
            s.extend_from_slice(h.shape());
            h.reshape(&s)?
        } else {
            h.clone()
        };
        let d = self.cfg.dim;
        if h.rank() != 3 || h.shape()[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "transformer_pool",
                lhs: h.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let (n, l) = (h.shape()[0], h.shape()[2]);
        if offsets.len() != n {
            return Err(TensorError::Invalid(format!(
                "transformer_pool: {} offsets for {n} instances",
                offsets.len()
            )));
        }
        let full;
        let mask = match mask {
            Some(m) if m.len() != l => {
                return Err(TensorError::ShapeMismatch {
                    op: "transformer_pool",
                    lhs: h.shape().to_vec(),
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m,
            None => {
                full = TimeMask::full(l);
                &full
            }
        };

        let mut pe = Vec::with_capacity(n * l * d);
        for &off in offsets {
            for p in 0..l {
                pe.extend(sinusoidal_encoding(off + p, d));
            }
        }
        let mut x = self
            .input_norm
            .forward(&h.transpose(1, 2)?)?
            .add(&Tensor::from_vec(pe, &[n, l, d])?)?;
        let mut keep = mask.keep().to_vec();
        if let Some(tok) = &self.token {
            x = Tensor::concat(&[tok.reshape(&[1, 1, d])?.broadcast_to(&[n, 1, d])?, x], 1)?;
            keep.insert(0, true);
        }
        for layer in &self.layers {
            x = layer.forward(&x, self.cfg.heads, &keep)?;
        }
        let x = self.final_norm.forward(&x)?;
        let out = match self.token {
            Some(_) => x.slice(&[0..n, 0..1, 0..d])?.reshape(&[n, d])?,
            None => {
                let w = Tensor::from_vec(mask.mean_weights(), &[1, l, 1])?;
                x.mul(&w)?.sum_axis(1, false)?
            }
        };
        if single {
            out.reshape(&[d])
        } else {
            Ok(out)
        }
    }
}

impl Module for TransformerPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.input_norm.visit(&join(prefix, "input_norm"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        if let Some(t) = &self.token {
            f(join(prefix, "token"), t);
        }
    }
}
