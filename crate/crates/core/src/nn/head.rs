use rand::Rng;

use super::{join, BatchNorm, Linear, Module};
use crate::tensor::{Result, Tensor};

/// Linear, batch norm, rectifier, linear: `D → hidden → out`. Heads only
/// feed the training objective, so batch statistics are always available.
pub struct ProjectionHead {
    pub hidden: Linear,
    pub norm: BatchNorm,
    pub output: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        ProjectionHead {
            // the norm's shift makes a hidden bias redundant
            hidden: Linear::without_bias(rng, input, hidden),
            norm: BatchNorm::new(hidden),
            output: Linear::new(rng, hidden, output),
        }
    }

    /// `D → D → D/2`, which is 512 → 512 → 256 at full width.
    pub fn scaled<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self::new(rng, dim, dim, dim / 2)
    }

    pub fn out_features(&self) -> usize {
        self.output.out_features()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output
            .forward(&self.norm.forward(&self.hidden.forward(x)?)?.relu())
    }
}

impl Module for ProjectionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.hidden.visit(&join(prefix, "fc1"), f);
        self.norm.visit(&join(prefix, "bn"), f);
        self.output.visit(&join(prefix, "fc2"), f);
    }
}
