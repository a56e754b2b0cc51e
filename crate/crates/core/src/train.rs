//! SGD with momentum, learning-rate schedules and the pretraining loop.
//!
//! A run is a pure function of its configuration: the model is initialized
//! from `seed`, and every random draw during training (batch order, crops,
//! jitter) comes from one ChaCha8 stream whose position is saved in each
//! checkpoint. Parameters and momentum buffers are rounded to `f32` at each
//! checkpoint boundary, in interrupted and uninterrupted runs alike, so a
//! resumed run continues bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    audio_gain_jitter, input_crop_resize, photometric_augment, sample_crop_tube, sample_view_sets, CropPlan,
    PhotometricParams,
};
use crate::container::{quantize, Container, NamedTensor};
use crate::contrastive::{cross_modal_loss, total_loss, within_modal_loss, LossWeights};
use crate::data::{iterate_batches, AVInstance, SyntheticDatasetSpec};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,epoch,lr,loss_total,loss_vv,loss_va";

#[derive(Debug, Clone, PartialEq)]
pub enum Decay {
    Constant,
    /// Multiply by `factor` at the start of each listed epoch.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// First warm-up rate; `None` ramps from `base_lr / warmup_steps`.
    pub warmup_start: Option<f64>,
    pub steps_per_epoch: usize,
    pub decay: Decay,
}

impl ScheduleSpec {
    pub fn constant(base_lr: f64, warmup_epochs: usize, steps_per_epoch: usize) -> Self {
        ScheduleSpec {
            base_lr,
            warmup_epochs,
            warmup_start: None,
            steps_per_epoch,
            decay: Decay::Constant,
        }
    }

    /// The fine-tuning recipe: 0.0025 warming to 0.02 over two epochs,
    /// scaled by 0.05 at epochs 6 and 10.
    pub fn finetune(steps_per_epoch: usize) -> Self {
        ScheduleSpec {
            base_lr: 0.02,
            warmup_epochs: 2,
            warmup_start: Some(0.0025),
            steps_per_epoch,
            decay: Decay::Step {
                milestones: vec![6, 10],
                factor: 0.05,
            },
        }
    }
}

/// Learning rate for the 0-based global `step`.
pub fn lr_schedule(spec: &ScheduleSpec, step: u64) -> f64 {
    let per = spec.steps_per_epoch.max(1) as u64;
    let warm = spec.warmup_epochs as u64 * per;
    if step < warm {
        if warm == 1 {
            return spec.warmup_start.unwrap_or(spec.base_lr);
        }
        let start = spec.warmup_start.unwrap_or(spec.base_lr / warm as f64);
        return start + (spec.base_lr - start) * step as f64 / (warm - 1) as f64;
    }
    match &spec.decay {
        Decay::Constant => spec.base_lr,
        Decay::Step { milestones, factor } => {
            let epoch = (step / per) as usize;
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            spec.base_lr * factor.powi(passed as i32)
        }
    }
}

/// Momentum buffers aligned with a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// `buf ← μ·buf + g + wd·p`, `p ← p − lr·buf`, then clears the gradients.
/// A non-finite gradient aborts the whole step and leaves every parameter
/// and buffer untouched.
pub fn sgd_step(params: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != state.buffers.len() {
        return Err(Error::Numeric(format!(
            "optimizer holds {} buffers for {} parameters",
            state.buffers.len(),
            params.len()
        )));
    }
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.take_grad()).collect();
    if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite gradient; step skipped".into()));
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, g), buf) in params.iter().zip(grads).zip(&mut state.buffers) {
        p.update_data(|d| {
            for (i, (x, b)) in d.iter_mut().zip(buf.iter_mut()).enumerate() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                *b = mu * *b + gi + wd * *x;
                *x -= lr * *b;
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub data: SyntheticDatasetSpec,
    pub model: ModelConfig,
    pub plan: CropPlan,
    pub weights: LossWeights,
    /// Mean instead of sum over the within-modal pair terms.
    pub average_within: bool,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub crop_area: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub photometric: PhotometricParams,
    pub seed: u64,
    /// Checkpoint every this many epochs; the last epoch always is one.
    pub checkpoint_every: usize,
    pub config_digest: [u8; 32],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            data: SyntheticDatasetSpec::default(),
            model: ModelConfig::desk(),
            plan: CropPlan::desk(),
            weights: LossWeights::default(),
            average_within: true,
            batch: 8,
            epochs: 30,
            lr: 0.05,
            warmup_epochs: 2,
            momentum: 0.9,
            weight_decay: 1e-5,
            crop_area: (0.4, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            photometric: PhotometricParams::default(),
            seed: 0,
            checkpoint_every: 1,
            config_digest: [0; 32],
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        self.weights.validate()?;
        let grid = self.model.encoder.grid;
        if self.plan.grid != grid {
            return Err(Error::Config(format!(
                "crop plan grid {:?} differs from encoder.grid {grid:?}",
                self.plan.grid
            )));
        }
        let [t0, _, _] = self.model.encoder.input;
        if self.data.frames < t0 {
            return Err(Error::Config(format!(
                "data.frames {} is shorter than encoder.input frames {t0}",
                self.data.frames
            )));
        }
        if [self.data.freq, self.data.audio_frames] != self.model.audio.input {
            return Err(Error::Config(format!(
                "audio.input {:?} differs from data spectrogram {}x{}",
                self.model.audio.input, self.data.freq, self.data.audio_frames
            )));
        }
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "train.batch must be at least 2, got {}",
                self.batch
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "train.lr, train.momentum or train.weight_decay out of range".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the metrics log. Loss components are unweighted; a component
/// whose weight is zero is not computed and reads 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_vv: f64,
    pub loss_va: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss_total, self.loss_vv, self.loss_va
        )
    }
}

/// Graph-carrying losses of one batch.
pub struct Losses {
    pub total: Tensor,
    pub vv: Tensor,
    pub va: Tensor,
}

/// The objective on prepared inputs: `x1`, `x2` are the two large crops
/// `[N, 3, T0, H0, W0]` and `audio` is `[N, 1, F, T_a]`. Feature crops are
/// drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<R: rand::Rng>(
    model: &Model,
    x1: &Tensor,
    x2: &Tensor,
    audio: &Tensor,
    plan: &CropPlan,
    weights: &LossWeights,
    average_within: bool,
    rng: &mut R,
) -> Result<Losses> {
    let feat1 = model.encode_video(x1)?;
    let feat2 = model.encode_video(x2)?;
    let plan = if weights.lambda_vv > 0.0 {
        plan.clone()
    } else {
        CropPlan::none(plan.grid)
    };
    let (v1, v2) = sample_view_sets(&feat1, &feat2, &plan, |f, off| model.embed_video(f, off), rng)?;
    let vv = if weights.lambda_vv > 0.0 {
        within_modal_loss(&v1, &v2, weights.tau_within, average_within)?.loss
    } else {
        Tensor::scalar(0.0)
    };
    let va = if weights.lambda_va > 0.0 {
        let za = model.embed_audio(audio)?;
        cross_modal_loss(v1.large(), v2.large(), &za, weights.tau_cross)?
    } else {
        Tensor::scalar(0.0)
    };
    let total = total_loss(&vv, &va, weights)?;
    Ok(Losses { total, vv, va })
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Data(format!(
                "cannot stack {:?} with {:?}",
                t.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(&t.data());
    }
    Ok(Tensor::from_vec(data, &shape)?)
}

/// Two independently cropped and jittered large views per instance, plus
/// the gain-jittered spectrograms.
pub fn augment_batch<R: rand::Rng>(
    cfg: &PretrainConfig,
    batch: &[&AVInstance],
    rng: &mut R,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [t0, h0, w0] = cfg.model.encoder.input;
    let mut views = [Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len())];
    let mut audio = Vec::with_capacity(batch.len());
    for inst in batch {
        let s = inst.video.shape();
        let extents = [s[1], s[2], s[3]];
        for v in &mut views {
            let tube = sample_crop_tube(extents, cfg.crop_area, cfg.crop_aspect, t0, rng)?;
            let crop = input_crop_resize(&inst.video, &tube, [h0, w0])?;
            v.push(photometric_augment(&crop, &cfg.photometric, rng)?);
        }
        audio.push(audio_gain_jitter(&inst.audio, &cfg.photometric, rng));
    }
    Ok((stack(&views[0])?, stack(&views[1])?, stack(&audio)?))
}

pub fn encode_rng_state(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn decode_rng_state(blob: &[u8]) -> Result<ChaCha8Rng> {
    if blob.len() != 56 {
        return Err(Error::Data(format!(
            "generator state has {} bytes, expected 56",
            blob.len()
        )));
    }
    let seed: [u8; 32] = blob[..32].try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().expect("8 bytes")));
    let pos = u128::from_le_bytes(blob[40..].try_into().expect("16 bytes"));
    rng.set_word_pos(pos);
    if rng.get_word_pos() != pos {
        return Err(Error::Data(format!("generator word position {pos} out of range")));
    }
    Ok(rng)
}

pub struct Trainer<'a> {
    pub cfg: PretrainConfig,
    pub model: Model,
    pub opt: OptimizerState,
    pub rng: ChaCha8Rng,
    pub schedule: ScheduleSpec,
    /// Steps taken so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: u64,
    train: &'a [AVInstance],
    non_finite_streak: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: PretrainConfig, train: &'a [AVInstance]) -> Result<Self> {
        cfg.validate()?;
        if train.len() < cfg.batch {
            return Err(Error::Data(format!(
                "{} training instances cannot fill a batch of {}",
                train.len(),
                cfg.batch
            )));
        }
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let opt = OptimizerState::new(&model.parameters(), cfg.momentum, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let schedule = ScheduleSpec::constant(cfg.lr, cfg.warmup_epochs, train.len() / cfg.batch);
        Ok(Trainer {
            cfg,
            model,
            opt,
            rng,
            schedule,
            step: 0,
            epoch: 0,
            train,
            non_finite_streak: 0,
        })
    }

    /// Restores parameters, momentum, counters and the generator.
    pub fn resume(cfg: PretrainConfig, train: &'a [AVInstance], ckpt: &Container) -> Result<Self> {
        let mut t = Trainer::new(cfg, train)?;
        if ckpt.config_digest != t.cfg.config_digest {
            return Err(Error::Config(
                "checkpoint was written under a different configuration (digest mismatch)".into(),
            ));
        }
        t.model.load_named(&ckpt.tensors, "param.")?;
        for ((name, _), buf) in t.model.named_parameters().into_iter().zip(&mut t.opt.buffers) {
            let key = format!("momentum.{name}");
            let m = ckpt
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {key}")))?;
            if m.data.len() != buf.len() {
                return Err(Error::Data(format!("momentum tensor {key} has the wrong size")));
            }
            *buf = m.to_f64();
        }
        t.rng = decode_rng_state(&ckpt.rng_state)?;
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    /// Rounds parameters and momentum to the checkpoint precision.
    fn snap(&mut self) {
        for p in self.model.parameters() {
            p.update_data(|d| d.iter_mut().for_each(|v| *v = quantize(*v)));
        }
        for b in &mut self.opt.buffers {
            b.iter_mut().for_each(|v| *v = quantize(*v));
        }
    }

    pub fn checkpoint(&self) -> Container {
        let mut tensors = self.model.to_named("param.");
        for ((name, p), buf) in self.model.named_parameters().into_iter().zip(&self.opt.buffers) {
            tensors.push(NamedTensor::from_f64(format!("momentum.{name}"), p.shape(), buf));
        }
        Container {
            tensors,
            step: self.step,
            epoch: self.epoch,
            rng_state: encode_rng_state(&self.rng),
            config_digest: self.cfg.config_digest,
        }
    }

    /// One optimizer step on `batch`. Two non-finite steps in a row abort.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepMetrics> {
        let lr = lr_schedule(&self.schedule, self.step);
        let mut row = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss_total: 0.0,
            loss_vv: 0.0,
            loss_va: 0.0,
        };
        self.step += 1;
        let w = self.cfg.weights;
        if w.lambda_vv == 0.0 && w.lambda_va == 0.0 {
            // a constant objective has nothing to descend
            return Ok(row);
        }
        let insts: Vec<&AVInstance> = batch.iter().map(|&i| &self.train[i]).collect();
        let (x1, x2, audio) = augment_batch(&self.cfg, &insts, &mut self.rng)?;
        let losses = compute_losses(
            &self.model,
            &x1,
            &x2,
            &audio,
            &self.cfg.plan,
            &w,
            self.cfg.average_within,
            &mut self.rng,
        )?;
        row.loss_total = losses.total.item();
        row.loss_vv = losses.vv.item();
        row.loss_va = losses.va.item();
        let params = self.model.parameters();
        let outcome = if row.loss_total.is_finite() {
            losses.total.backward()?;
            sgd_step(&params, &mut self.opt, lr)
        } else {
            Err(Error::Numeric(format!(
                "non-finite loss {} at step {}",
                row.loss_total, row.step
            )))
        };
        match outcome {
            Ok(()) => self.non_finite_streak = 0,
            Err(Error::Numeric(msg)) => {
                params.iter().for_each(|p| p.zero_grad());
                self.non_finite_streak += 1;
                if self.non_finite_streak >= 2 {
                    return Err(Error::Numeric(format!(
                        "{msg}; second non-finite step in a row, aborting"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
        Ok(row)
    }

    /// Runs one epoch, passing each row to `sink`. Snaps to checkpoint
    /// precision when the epoch is a checkpoint boundary and returns
    /// whether it was.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&StepMetrics) -> Result<()>) -> Result<bool> {
        for batch in iterate_batches(self.train.len(), self.cfg.batch, &mut self.rng)? {
            let row = self.train_step(&batch)?;
            sink(&row)?;
        }
        self.epoch += 1;
        let every = self.cfg.checkpoint_every.max(1) as u64;
        let boundary = self.epoch.is_multiple_of(every) || self.epoch == self.cfg.epochs as u64;
        if boundary {
            self.snap();
        }
        Ok(boundary)
    }
}

pub struct PretrainOutcome {
    pub model: Model,
    pub history: Vec<StepMetrics>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, epoch: u64) -> PathBuf {
    out.join(format!("checkpoint_epoch{epoch:03}.stca"))
}

/// Keeps the header and the rows of epochs before `epoch`.
fn truncate_metrics(path: &Path, epoch: u64) -> Result<String> {
    let mut kept = String::from(METRICS_HEADER);
    kept.push('\n');
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e = line.split(',').nth(1).and_then(|e| e.parse::<u64>().ok());
            match e {
                Some(e) if e < epoch => {
                    kept.push_str(line);
                    kept.push('\n');
                }
                _ => break,
            }
        }
    }
    Ok(kept)
}

/// Trains from scratch, or from `resume`, up to `cfg.epochs`. With `out`,
/// writes `metrics.csv`, per-boundary checkpoints and `checkpoint.stca`.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    train: &[AVInstance],
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.clone(), train, &Container::read(path)?)?,
        None => Trainer::new(cfg.clone(), train)?,
    };
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let head = if resume.is_some() {
                truncate_metrics(&path, trainer.epoch)?
            } else {
                format!("{METRICS_HEADER}\n")
            };
            let mut f = fs::File::create(&path)?;
            f.write_all(head.as_bytes())?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut final_checkpoint = None;
    while trainer.epoch < cfg.epochs as u64 {
        let boundary = trainer.run_epoch(&mut |row| {
            history.push(*row);
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", row.csv_row())?;
            }
            Ok(())
        })?;
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
        if let (true, Some(dir)) = (boundary, out) {
            let ckpt = trainer.checkpoint();
            ckpt.write(&checkpoint_path(dir, trainer.epoch))?;
            if trainer.epoch == cfg.epochs as u64 {
                let last = dir.join("checkpoint.stca");
                ckpt.write(&last)?;
                final_checkpoint = Some(last);
            }
        }
    }
    Ok(PretrainOutcome {
        model: trainer.model,
        history,
        final_checkpoint,
    })
}

/// Mean total loss per epoch.
pub fn epoch_means(history: &[StepMetrics]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for row in history {
        let e = row.epoch as usize;
        if out.len() <= e {
            out.resize(e + 1, (0.0, 0));
        }
        out[e].0 += row.loss_total;
        out[e].1 += 1;
    }
    out.into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use crate::nn::EncoderConfig;

    #[test]
    fn momentum_two_steps() {
        let p = Tensor::parameter(vec![1.0, -2.0], &[2]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.9, 0.0);
        for _ in 0..2 {
            p.set_grad(vec![0.5, 1.0]).unwrap();
            sgd_step(std::slice::from_ref(&p), &mut st, 0.1).unwrap();
            assert!(p.grad().is_none());
        }
        let expect = [1.0 - 0.1 * 0.5 * 2.9, -2.0 - 0.1 * 1.0 * 2.9];
        for (a, b) in p.to_vec().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_and_missing_grad() {
        let p = Tensor::parameter(vec![2.0], &[1]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.0, 0.5);
        sgd_step(std::slice::from_ref(&p), &mut st, 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![2.0 - 0.1 * 1.0]);
    }

    #[test]
    fn non_finite_grad_leaves_state() {
        let p = Tensor::parameter(vec![1.0, 1.0], &[2]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p), 0.9, 0.0);
        p.set_grad(vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            sgd_step(std::slice::from_ref(&p), &mut st, 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p.to_vec(), vec![1.0, 1.0]);
        assert_eq!(st.buffers[0], vec![0.0, 0.0]);
    }

    #[test]
    fn warmup_then_constant() {
        let s = ScheduleSpec::constant(0.64, 10, 5);
        assert!((lr_schedule(&s, 0) - 0.64 / 50.0).abs() < 1e-15);
        assert!((lr_schedule(&s, 24) - 0.64 * 25.0 / 50.0).abs() < 1e-12);
        assert_eq!(lr_schedule(&s, 49), 0.64);
        assert_eq!(lr_schedule(&s, 50), 0.64);
        assert_eq!(lr_schedule(&s, 5000), 0.64);
        assert_eq!(lr_schedule(&ScheduleSpec::constant(0.1, 0, 5), 0), 0.1);
    }

    #[test]
    fn finetune_schedule() {
        let s = ScheduleSpec::finetune(10);
        assert_eq!(lr_schedule(&s, 0), 0.0025);
        assert!((lr_schedule(&s, 19) - 0.02).abs() < 1e-15);
        assert_eq!(lr_schedule(&s, 59), 0.02);
        assert!((lr_schedule(&s, 60) - 0.02 * 0.05).abs() < 1e-15);
        assert!((lr_schedule(&s, 100) - 0.02 * 0.05 * 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..20).map(|k| lr_schedule(&s, k)).collect();
        assert!(lrs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rng_state_roundtrip() {
        use rand::Rng;
        let mut a = ChaCha8Rng::seed_from_u64(9);
        a.set_stream(4);
        let _: u64 = a.random();
        let mut b = decode_rng_state(&encode_rng_state(&a)).unwrap();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        assert!(decode_rng_state(&[0; 10]).is_err());
    }

    pub(crate) fn tiny_config() -> PretrainConfig {
        let data = SyntheticDatasetSpec {
            per_class: 5,
            height: 16,
            width: 16,
            patch: 6,
            step: 2,
            freq: 16,
            audio_frames: 16,
            ..Default::default()
        };
        let mut model = ModelConfig::desk();
        model.encoder = EncoderConfig::desk_sized(16);
        model.audio.input = [16, 16];
        let mut plan = CropPlan::desk();
        plan.grid = model.encoder.grid;
        plan.medium = 2;
        plan.small = 1;
        PretrainConfig {
            data,
            model,
            plan,
            batch: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_leave_parameters() {
        let cfg = PretrainConfig {
            weights: LossWeights {
                lambda_vv: 0.0,
                lambda_va: 0.0,
                ..Default::default()
            },
            ..tiny_config()
        };
        let ds = build_dataset(&cfg.data).unwrap();
        let mut t = Trainer::new(cfg, &ds.train).unwrap();
        let before = t.model.checksum();
        let row = t.train_step(&[0, 1, 2, 3]).unwrap();
        assert_eq!((row.loss_total, row.loss_vv, row.loss_va), (0.0, 0.0, 0.0));
        assert_eq!(t.model.checksum(), before);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = tiny_config();
        let ds = build_dataset(&cfg.data).unwrap();
        let full = tempfile::tempdir().unwrap();
        run_pretraining(&cfg, &ds.train, Some(full.path()), None).unwrap();
        let part = tempfile::tempdir().unwrap();
        let first = PretrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        run_pretraining(&first, &ds.train, Some(part.path()), None).unwrap();
        run_pretraining(
            &cfg,
            &ds.train,
            Some(part.path()),
            Some(&checkpoint_path(part.path(), 1)),
        )
        .unwrap();
        for f in ["metrics.csv", "checkpoint.stca"] {
            assert_eq!(
                fs::read(full.path().join(f)).unwrap(),
                fs::read(part.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn digest_mismatch_refused() {
        let cfg = tiny_config();
        let ds = build_dataset(&cfg.data).unwrap();
        let t = Trainer::new(cfg.clone(), &ds.train).unwrap();
        let ckpt = t.checkpoint();
        let other = PretrainConfig {
            config_digest: [1; 32],
            ..cfg
        };
        assert!(matches!(
            Trainer::resume(other, &ds.train, &ckpt),
            Err(Error::Config(_))
        ));
    }
}
