//! Cosine similarity, the asymmetric NCE loss and the objectives built on it.

use crate::augment::{SizeClass, ViewSet};
use crate::tensor::{Result, Tensor, TensorError};

/// Mixing weights and temperatures of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_vv: f64,
    pub lambda_va: f64,
    /// Weight of an audio-to-video-only variant; unused by the main objective.
    pub lambda_av: f64,
    /// Weight of an audio-audio variant; unused by the main objective.
    pub lambda_aa: f64,
    pub tau_cross: f64,
    pub tau_within: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vv: 1.0,
            lambda_va: 1.0,
            lambda_av: 0.0,
            lambda_aa: 0.0,
            tau_cross: 0.1,
            tau_within: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_vv, self.lambda_va, self.lambda_av, self.lambda_aa];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TensorError::Invalid(format!(
                "loss weights must be non-negative, got {weights:?}"
            )));
        }
        if !(self.tau_cross > 0.0 && self.tau_within > 0.0) {
            return Err(TensorError::Invalid("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine of the angle between two non-zero vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::Domain {
            op: "cosine_sim",
            detail: "zero vector".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales every row of `[N, d]` to unit length.
pub fn normalize_rows(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "normalize_rows",
            lhs: z.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let norms = z.mul(z)?.sum_axis(1, true)?.sqrt();
    if norms.data().contains(&0.0) {
        return Err(TensorError::Domain {
            op: "normalize_rows",
            detail: "zero embedding".into(),
        });
    }
    z.div(&norms)
}

/// `S[i][j] = sim(a_i, b_j)` for `[N, d]` batches.
pub fn similarity_matrix(za: &Tensor, zb: &Tensor) -> Result<Tensor> {
    check_pair(za, zb, "similarity_matrix")?;
    normalize_rows(za)?.matmul(&normalize_rows(zb)?.transpose(0, 1)?)
}

fn check_pair(za: &Tensor, zb: &Tensor, op: &'static str) -> Result<()> {
    if za.rank() != 2 || za.shape() != zb.shape() || za.shape()[0] == 0 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: za.shape().to_vec(),
            rhs: zb.shape().to_vec(),
        });
    }
    Ok(())
}

/// `-(1/N) Σ_i log(exp(s_ii/τ) / Σ_j exp(s_ij/τ))`. Not symmetric in its
/// arguments: row `i` of `za` is contrasted against all rows of `zb`.
pub fn nce_loss(za: &Tensor, zb: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(TensorError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    check_pair(za, zb, "nce_loss")?;
    let n = za.shape()[0];
    let logits = similarity_matrix(za, zb)?.scale(1.0 / tau);
    let shift = logits.max_axis(1, true)?.detach();
    let lse = logits
        .sub(&shift)?
        .exp()
        .sum_axis(1, false)?
        .log()?
        .add(&shift.reshape(&[n])?)?;
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let positive = logits.mul(&Tensor::from_vec(eye, &[n, n])?)?.sum_axis(1, false)?;
    Ok(lse.sub(&positive)?.mean_all())
}

/// One view of one side: `side ∈ {1, 2}`, `index` into that side's
/// `m + n` cropped views (mediums first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewRef {
    pub side: u8,
    pub index: usize,
}

/// Directed loss terms `L(α, β)` between the cropped views of the two large
/// crops: every cross-side pair except small-with-small, in both
/// directions, for `2((m+n)² − n²)` terms.
pub fn enumerate_crop_pairs(m: usize, n: usize) -> Vec<(ViewRef, ViewRef)> {
    let mut out = Vec::with_capacity(2 * ((m + n).pow(2) - n * n));
    for a in 0..m + n {
        for b in 0..m + n {
            if a >= m && b >= m {
                continue;
            }
            let one = ViewRef { side: 1, index: a };
            let two = ViewRef { side: 2, index: b };
            out.push((one, two));
            out.push((two, one));
        }
    }
    out
}

/// Within-modal loss and the number of directed terms it summed.
#[derive(Debug, Clone)]
pub struct WithinModal {
    pub loss: Tensor,
    pub terms: usize,
}

impl WithinModal {
    /// True when no pair was available and the loss is a constant zero.
    pub fn is_empty(&self) -> bool {
        self.terms == 0
    }
}

/// Sum (or, with `average`, mean) of NCE over [`enumerate_crop_pairs`].
pub fn within_modal_loss(v1: &ViewSet, v2: &ViewSet, tau: f64, average: bool) -> Result<WithinModal> {
    let c1: Vec<_> = v1.crops().collect();
    let c2: Vec<_> = v2.crops().collect();
    let m = c1.iter().filter(|v| v.0 == SizeClass::Medium).count();
    let n = c1.len() - m;
    if c2.len() != c1.len() || c2.iter().filter(|v| v.0 == SizeClass::Medium).count() != m {
        return Err(TensorError::Invalid("view sets follow different crop plans".into()));
    }
    let pick = |r: ViewRef| if r.side == 1 { &c1[r.index].1 } else { &c2[r.index].1 };
    let pairs = enumerate_crop_pairs(m, n);
    let mut total: Option<Tensor> = None;
    for &(a, b) in &pairs {
        let term = nce_loss(pick(a), pick(b), tau)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let terms = pairs.len();
    let loss = match total {
        None => Tensor::scalar(0.0),
        Some(t) if average => t.scale(1.0 / terms as f64),
        Some(t) => t,
    };
    Ok(WithinModal { loss, terms })
}

/// `L(v_L1, a) + L(v_L2, a) + L(a, v_L1) + L(a, v_L2)`.
pub fn cross_modal_loss(zl1: &Tensor, zl2: &Tensor, za: &Tensor, tau: f64) -> Result<Tensor> {
    nce_loss(zl1, za, tau)?
        .add(&nce_loss(zl2, za, tau)?)?
        .add(&nce_loss(za, zl1, tau)?)?
        .add(&nce_loss(za, zl2, tau)?)
}

/// `λ_vv · L_vv + λ_va · L_va`.
pub fn total_loss(l_vv: &Tensor, l_va: &Tensor, w: &LossWeights) -> Result<Tensor> {
    l_vv.scale(w.lambda_vv).add(&l_va.scale(w.lambda_va))
}

/// `L(L1, L2) + L(L2, L1) + L(L1, S) + L(L2, S)` where `S` comes from a
/// small crop taken in input space.
pub fn multicrop_baseline_loss(zl1: &Tensor, zl2: &Tensor, zs: &Tensor, tau: f64) -> Result<Tensor> {
    nce_loss(zl1, zl2, tau)?
        .add(&nce_loss(zl2, zl1, tau)?)?
        .add(&nce_loss(zl1, zs, tau)?)?
        .add(&nce_loss(zl2, zs, tau)?)
}
