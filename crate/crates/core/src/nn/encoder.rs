use rand::Rng;

use super::{join, uniform_param, zero_param, LayerNorm, Module};
use crate::tensor::{Conv3dGeometry, Result, Tensor, TensorError};

/// One factorized space-then-time convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub spatial_kernel: usize,
    pub spatial_stride: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
}

impl StageConfig {
    /// 3×3 spatial and 3-tap temporal kernels.
    pub fn new(out_channels: usize, spatial_stride: usize, temporal_stride: usize) -> Self {
        Self::with_temporal(out_channels, spatial_stride, 3, temporal_stride)
    }

    pub fn with_temporal(
        out_channels: usize,
        spatial_stride: usize,
        temporal_kernel: usize,
        temporal_stride: usize,
    ) -> Self {
        StageConfig {
            out_channels,
            spatial_kernel: 3,
            spatial_stride,
            temporal_kernel,
            temporal_stride,
        }
    }

    // padding (k-1)/2 keeps odd kernels centred and adds none for even ones
    fn spatial(&self) -> Conv3dGeometry {
        Conv3dGeometry::spatial(self.spatial_kernel, self.spatial_stride, (self.spatial_kernel - 1) / 2)
    }

    fn temporal(&self) -> Conv3dGeometry {
        Conv3dGeometry::temporal(
            self.temporal_kernel,
            self.temporal_stride,
            (self.temporal_kernel - 1) / 2,
        )
    }
}

/// Shape contract of the visual trunk: reference input `T0×H0×W0` maps to
/// the feature grid `T1×H1×W1` with `D` channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub input: [usize; 3],
    pub grid: [usize; 3],
}

impl EncoderConfig {
    /// Validates that the stage arithmetic maps `input` exactly onto `grid`.
    pub fn new(in_channels: usize, stages: Vec<StageConfig>, input: [usize; 3], grid: [usize; 3]) -> Result<Self> {
        let cfg = EncoderConfig {
            in_channels,
            stages,
            input,
            grid,
        };
        let computed = cfg.computed_grid()?;
        if computed != grid {
            return Err(TensorError::Invalid(format!(
                "encoder stages map {input:?} to {computed:?}, not the declared grid {grid:?}"
            )));
        }
        Ok(cfg)
    }

    /// Grid produced by the stages for the reference input.
    pub fn computed_grid(&self) -> Result<[usize; 3]> {
        if self.stages.is_empty() || self.in_channels == 0 {
            return Err(TensorError::Invalid(
                "encoder needs input channels and at least one stage".into(),
            ));
        }
        let mut extent = self.input;
        for s in &self.stages {
            extent = s.spatial().output_extent(extent)?;
            extent = s.temporal().output_extent(extent)?;
        }
        Ok(extent)
    }

    pub fn dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// 3×8×56×56 → 64×4×7×7.
    ///
    /// Time is only mixed by one 2-tap, stride-2 convolution, so every
    /// output step sees its own disjoint pair of frames and the order of the
    /// steps is left for the temporal pooling function to read.
    pub fn desk() -> Self {
        Self::desk_sized(56)
    }

    /// The desk stages on a `side × side` input (`side` divisible by 8).
    pub fn desk_sized(side: usize) -> Self {
        Self::new(
            3,
            vec![
                StageConfig::with_temporal(16, 2, 1, 1),
                StageConfig::with_temporal(32, 2, 2, 2),
                StageConfig::with_temporal(64, 2, 1, 1),
            ],
            [8, side, side],
            [4, side / 8, side / 8],
        )
        .expect("desk encoder arithmetic")
    }

    /// Shape-compatible with an R(2+1)D-18 trunk: 3×frames×112×112 → 512×T×7×7.
    pub fn paper_shape(frames: usize, grid_t: usize) -> Result<Self> {
        let stem = StageConfig {
            out_channels: 64,
            spatial_kernel: 7,
            spatial_stride: 2,
            temporal_kernel: 3,
            temporal_stride: 1,
        };
        Self::new(
            3,
            vec![
                stem,
                StageConfig::new(64, 1, 1),
                StageConfig::new(128, 2, 2),
                StageConfig::new(256, 2, 2),
                StageConfig::new(512, 2, 2),
            ],
            [frames, 112, 112],
            [grid_t, 7, 7],
        )
    }
}

/// Spatial `k×k` convolution, rectifier, then temporal `kt` convolution.
pub struct Conv2Plus1d {
    pub spatial_weight: Tensor,
    pub spatial_bias: Tensor,
    pub temporal_weight: Tensor,
    pub temporal_bias: Tensor,
    pub stage: StageConfig,
}

impl Conv2Plus1d {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, stage: StageConfig) -> Self {
        let co = stage.out_channels;
        let k = stage.spatial_kernel;
        let kt = stage.temporal_kernel;
        let fan_s = in_channels * k * k;
        let fan_t = co * kt;
        Conv2Plus1d {
            spatial_weight: uniform_param(rng, &[co, in_channels, 1, k, k], (6.0 / fan_s as f64).sqrt()),
            spatial_bias: zero_param(&[co]),
            temporal_weight: uniform_param(rng, &[co, co, kt, 1, 1], (6.0 / fan_t as f64).sqrt()),
            temporal_bias: zero_param(&[co]),
            stage,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv3d(&self.spatial_weight, Some(&self.spatial_bias), self.stage.spatial())?
            .relu()
            .conv3d(&self.temporal_weight, Some(&self.temporal_bias), self.stage.temporal())
    }
}

impl Module for Conv2Plus1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "spatial.weight"), &self.spatial_weight);
        f(join(prefix, "spatial.bias"), &self.spatial_bias);
        f(join(prefix, "temporal.weight"), &self.temporal_weight);
        f(join(prefix, "temporal.bias"), &self.temporal_bias);
    }
}

/// The visual trunk: stacked (2+1)D stages, each followed by a rectifier.
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    pub stages: Vec<Conv2Plus1d>,
}

impl VisualEncoder {
    pub fn new<R: Rng>(rng: &mut R, cfg: EncoderConfig) -> Self {
        let mut c = cfg.in_channels;
        let stages = cfg
            .stages
            .iter()
            .map(|s| {
                let stage = Conv2Plus1d::new(rng, c, *s);
                c = s.out_channels;
                stage
            })
            .collect();
        VisualEncoder { cfg, stages }
    }

    /// `[N, 3, T0, H0, W0]` → `[N, D, T1, H1, W1]`; a rank-4 input is treated
    /// as a single instance and returns rank 4.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.rank() == 4;
        let x = if single {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.reshape(&s)?
        } else {
            x.clone()
        };
        let [t, h, w] = self.cfg.input;
        if x.rank() != 5 || x.shape()[1..] != [self.cfg.in_channels, t, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "visual_encoder",
                lhs: x.shape().to_vec(),
                rhs: vec![self.cfg.in_channels, t, h, w],
            });
        }
        self.forward_any(&x, single)
    }

    /// Runs the stages on any input size the arithmetic admits.
    pub fn forward_any(&self, x: &Tensor, squeeze: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for s in &self.stages {
            y = s.forward(&y)?.relu();
        }
        if squeeze {
            y.reshape(&y.shape()[1..])
        } else {
            Ok(y)
        }
    }
}

impl Module for VisualEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioEncoderConfig {
    /// Spectrogram extent `F × T_a`.
    pub input: [usize; 2],
    /// Channel width of each downsampling stage; the last one is `D`.
    pub widths: Vec<usize>,
}

impl AudioEncoderConfig {
    pub fn desk() -> Self {
        AudioEncoderConfig {
            input: [32, 32],
            widths: vec![16, 32, 64],
        }
    }

    pub fn dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(TensorError::Invalid("audio encoder needs non-zero widths".into()));
        }
        let geom = Conv3dGeometry::spatial(3, 2, 1);
        let mut extent = [1, self.input[0], self.input[1]];
        for _ in &self.widths {
            extent = geom.output_extent(extent)?;
        }
        Ok(())
    }
}

struct ResidualBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ResidualBlock {
    fn new<R: Rng>(rng: &mut R, c: usize) -> Self {
        let bound = (6.0 / (c * 9) as f64).sqrt();
        ResidualBlock {
            w1: uniform_param(rng, &[c, c, 1, 3, 3], bound),
            b1: zero_param(&[c]),
            // second conv starts small so the block begins near identity
            w2: uniform_param(rng, &[c, c, 1, 3, 3], bound * 0.1),
            b2: zero_param(&[c]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = Conv3dGeometry::spatial(3, 1, 1);
        let y = x
            .conv3d(&self.w1, Some(&self.b1), g)?
            .relu()
            .conv3d(&self.w2, Some(&self.b2), g)?;
        Ok(x.add(&y)?.relu())
    }
}

/// A small residual 2D network over log-mel-like spectrograms, followed by
/// global average pooling and a gain-only layer norm. The norm mirrors the
/// transformer's final one on the visual side: without it a channel whose
/// last rectifier is active everywhere passes its bias straight into the
/// projection head's batch norm, which cancels it.
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    downs: Vec<(Tensor, Tensor)>,
    blocks: Vec<ResidualBlock>,
    norm: LayerNorm,
}

impl AudioEncoder {
    pub fn new<R: Rng>(rng: &mut R, cfg: AudioEncoderConfig) -> Self {
        let mut c = 1;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        for &w in &cfg.widths {
            let bound = (6.0 / (c * 9) as f64).sqrt();
            downs.push((uniform_param(rng, &[w, c, 1, 3, 3], bound), zero_param(&[w])));
            blocks.push(ResidualBlock::new(rng, w));
            c = w;
        }
        let norm = LayerNorm::without_bias(cfg.dim());
        AudioEncoder {
            cfg,
            downs,
            blocks,
            norm,
        }
    }

    /// `[N, 1, F, T_a]` (or `[1, F, T_a]`) → `[N, D]` (or `[D]`).
    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        let single = a.rank() == 3;
        let [f, ta] = self.cfg.input;
        let n = if single { 1 } else { a.shape()[0] };
        let ok = if single {
            a.shape() == [1, f, ta]
        } else {
            a.rank() == 4 && a.shape()[1..] == [1, f, ta]
        };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "audio_encoder",
                lhs: a.shape().to_vec(),
                rhs: vec![1, f, ta],
            });
        }
        let mut x = a.reshape(&[n, 1, 1, f, ta])?;
        let down = Conv3dGeometry::spatial(3, 2, 1);
        for ((w, b), block) in self.downs.iter().zip(&self.blocks) {
            x = x.conv3d(w, Some(b), down)?.relu();
            x = block.forward(&x)?;
        }
        let d = self.cfg.dim();
        let cells = x.numel() / (n * d);
        let pooled = self.norm.forward(&x.reshape(&[n, d, cells])?.mean_axis(2, false)?)?;
        if single {
            pooled.reshape(&[d])
        } else {
            Ok(pooled)
        }
    }
}

impl Module for AudioEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, ((w, b), block)) in self.downs.iter().zip(&self.blocks).enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            f(join(&p, "down.weight"), w);
            f(join(&p, "down.bias"), b);
            f(join(&p, "res.conv1.weight"), &block.w1);
            f(join(&p, "res.conv1.bias"), &block.b1);
            f(join(&p, "res.conv2.weight"), &block.w2);
            f(join(&p, "res.conv2.bias"), &block.b2);
        }
        self.norm.visit(&join(prefix, "out_norm"), f);
    }
}

/// A parameter-free trunk averaging non-overlapping `s×s` spatial windows
/// (and `st` frames). Cropping its output commutes with cropping its input
/// at `s`-aligned boxes, which makes it the reference trunk for feature
/// crops.
pub struct AvgPoolEncoder {
    pub temporal: usize,
    pub spatial: usize,
}

impl AvgPoolEncoder {
    /// Accepts `[N, C, T, H, W]` or a single `[C, T, H, W]` clip.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = [self.temporal, self.spatial, self.spatial];
        if x.rank() != 4 {
            return x.avg_pool3d(k);
        }
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        let y = x.reshape(&s)?.avg_pool3d(k)?;
        y.reshape(&y.shape()[1..])
    }
}
