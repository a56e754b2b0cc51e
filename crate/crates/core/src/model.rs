//! The full two-tower model: visual trunk, temporal pool, audio trunk and
//! one projection head per modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::NamedTensor;
use crate::nn::{
    spatial_max_pool, spatial_pool, AudioEncoder, AudioEncoderConfig, EncoderConfig, Module, ProjectionHead,
    TemporalPool, TimeMask, TransformerConfig, TransformerPool, VisualEncoder,
};
use crate::tensor::{Result as TResult, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Average,
    Transformer(TransformerConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpatialReduce {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub audio: AudioEncoderConfig,
    pub pool: PoolKind,
    /// Hidden width of both projection heads.
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        let encoder = EncoderConfig::desk();
        let d = encoder.dim();
        ModelConfig {
            encoder,
            audio: AudioEncoderConfig::desk(),
            pool: PoolKind::Transformer(TransformerConfig::new(d)),
            head_hidden: d,
            embed_dim: d / 2,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.audio.dim() != d {
            return Err(Error::Config(format!(
                "audio.widths ends at {} but encoder.widths ends at {d}; the heatmap needs equal widths",
                self.audio.dim()
            )));
        }
        self.audio.validate()?;
        if let PoolKind::Transformer(t) = self.pool {
            if t.dim != d {
                return Err(Error::Config(format!(
                    "transformer dim {} differs from encoder dim {d}",
                    t.dim
                )));
            }
            t.validate()?;
        }
        if self.head_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub pool: TemporalPool,
    pub video_head: ProjectionHead,
    pub audio_head: ProjectionHead,
}

impl Model {
    /// Initializes every weight from a generator seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim();
        let visual = VisualEncoder::new(&mut rng, cfg.encoder.clone());
        let audio = AudioEncoder::new(&mut rng, cfg.audio.clone());
        let pool = match cfg.pool {
            PoolKind::Average => TemporalPool::Average,
            PoolKind::Transformer(t) => TemporalPool::Transformer(TransformerPool::new(&mut rng, t)?),
        };
        let video_head = ProjectionHead::new(&mut rng, d, cfg.head_hidden, cfg.embed_dim);
        let audio_head = ProjectionHead::new(&mut rng, d, cfg.head_hidden, cfg.embed_dim);
        Ok(Model {
            cfg,
            visual,
            audio,
            pool,
            video_head,
            audio_head,
        })
    }

    /// `[N, 3, T0, H0, W0]` → `[N, D, T1, H1, W1]`.
    pub fn encode_video(&self, x: &Tensor) -> TResult<Tensor> {
        self.visual.forward(x)
    }

    /// Spatial reduction then the temporal pool: `[N, D, T', H', W']` →
    /// `[N, D]`, the feature used by probes and retrieval.
    pub fn pool_feature(&self, feat: &Tensor, offsets: &[usize], spatial: SpatialReduce) -> TResult<Tensor> {
        let h = match spatial {
            SpatialReduce::Average => spatial_pool(feat)?,
            SpatialReduce::Max => spatial_max_pool(feat)?,
        };
        self.pool.forward(&h, offsets, None)
    }

    /// Like [`Model::pool_feature`] with average spatial pooling, on the
    /// full grid with only the `mask`ed steps taking part.
    pub fn pool_feature_masked(&self, feat: &Tensor, mask: &TimeMask) -> TResult<Tensor> {
        let h = spatial_pool(feat)?;
        let n = h.shape()[0];
        self.pool.forward(&h, &vec![0; n], Some(mask))
    }

    /// Pooled and projected video embedding `[N, embed_dim]`.
    pub fn embed_video(&self, feat: &Tensor, offsets: &[usize]) -> TResult<Tensor> {
        self.video_head
            .forward(&self.pool_feature(feat, offsets, SpatialReduce::Average)?)
    }

    /// `[N, 1, F, T_a]` → pre-projection audio feature `[N, D]`.
    pub fn audio_feature(&self, a: &Tensor) -> TResult<Tensor> {
        self.audio.forward(a)
    }

    pub fn embed_audio(&self, a: &Tensor) -> TResult<Tensor> {
        self.audio_head.forward(&self.audio_feature(a)?)
    }

    /// Parameter tensors as stored in a checkpoint, at 32-bit precision.
    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        self.named_parameters()
            .into_iter()
            .map(|(name, t)| NamedTensor::from_f64(format!("{prefix}{name}"), t.shape(), &t.data()))
            .collect()
    }

    /// Copies `prefix`-named tensors back into the parameters.
    pub fn load_named(&self, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
        for (name, p) in self.named_parameters() {
            let key = format!("{prefix}{name}");
            let t = tensors
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {key}")))?;
            if t.shape != p.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {key} has shape {:?}, model expects {:?}",
                    t.shape,
                    p.shape()
                )));
            }
            let values = t.to_f64();
            p.update_data(|d| d.copy_from_slice(&values));
        }
        Ok(())
    }

    /// Sum of all parameter values; used to detect unintended updates.
    pub fn checksum(&self) -> f64 {
        self.parameters().iter().map(|p| p.data().iter().sum::<f64>()).sum()
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.visual.visit(&p("visual"), f);
        self.pool.visit(&p("pool"), f);
        self.audio.visit(&p("audio"), f);
        self.video_head.visit(&p("video_head"), f);
        self.audio_head.visit(&p("audio_head"), f);
    }
}
