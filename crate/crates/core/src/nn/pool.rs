use super::{Module, TimeMask, TransformerPool};
use crate::tensor::{Result, Tensor, TensorError};

fn split_spatial(feat: &Tensor, op: &'static str) -> Result<(Tensor, Vec<usize>, bool)> {
    let s = feat.shape();
    let (single, n) = match s.len() {
        4 => (true, 1),
        5 => (false, s[0]),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0, 0],
            })
        }
    };
    let [d, t, h, w] = s[s.len() - 4..] else { unreachable!() };
    let flat = feat.reshape(&[n, d, t, h * w])?;
    let out = if single { vec![d, t] } else { vec![n, d, t] };
    Ok((flat, out, single))
}

/// Mean over the spatial cells: `[N, D, T, H, W]` → `[N, D, T]`
/// (or `[D, T, H, W]` → `[D, T]`).
pub fn spatial_pool(feat: &Tensor) -> Result<Tensor> {
    let (flat, out, _) = split_spatial(feat, "spatial_pool")?;
    flat.mean_axis(3, false)?.reshape(&out)
}

/// Maximum over the spatial cells, same shapes as [`spatial_pool`].
pub fn spatial_max_pool(feat: &Tensor) -> Result<Tensor> {
    let (flat, out, _) = split_spatial(feat, "spatial_max_pool")?;
    flat.max_axis(3, false)?.reshape(&out)
}

/// Mean over time: `[N, D, T]` → `[N, D]` (or `[D, T]` → `[D]`).
pub fn temporal_avg_pool(h: &Tensor) -> Result<Tensor> {
    if !(2..=3).contains(&h.rank()) {
        return Err(TensorError::ShapeMismatch {
            op: "temporal_avg_pool",
            lhs: h.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    h.mean_axis(h.rank() - 1, false)
}

/// The temporal pooling function applied after spatial pooling.
pub enum TemporalPool {
    Average,
    Transformer(TransformerPool),
}

impl TemporalPool {
    /// Pools `[N, D, L]` to `[N, D]`. `offsets[i]` is the absolute time
    /// index of position 0 of instance `i` within the uncropped grid; only
    /// the transformer uses it.
    pub fn forward(&self, h: &Tensor, offsets: &[usize], mask: Option<&TimeMask>) -> Result<Tensor> {
        match self {
            TemporalPool::Average => match mask {
                None => temporal_avg_pool(h),
                Some(m) => {
                    let l = *h.shape().last().expect("rank >= 1");
                    if m.len() != l {
                        return Err(TensorError::ShapeMismatch {
                            op: "temporal_avg_pool",
                            lhs: h.shape().to_vec(),
                            rhs: vec![m.len()],
                        });
                    }
                    let w = Tensor::from_vec(m.mean_weights(), &[l])?;
                    h.mul(&w)?.sum_axis(h.rank() - 1, false)
                }
            },
            TemporalPool::Transformer(t) => t.forward(h, offsets, mask),
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self, TemporalPool::Transformer(_))
    }
}

impl Module for TemporalPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let TemporalPool::Transformer(t) = self {
            t.visit(prefix, f);
        }
    }
}
