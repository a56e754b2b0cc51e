//! Run configuration: line-oriented `key = value` text with dotted keys.
//!
//! Every key has a default, so an empty file is a complete configuration.
//! Unknown keys are rejected, errors carry the line they came from, and
//! [`RunConfig::echo`] writes every resolved key back out in a form that
//! parses to an equal configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::{format_time_spec, parse_time_spec, CropPlan, PhotometricParams};
use crate::contrastive::LossWeights;
use crate::data::SyntheticDatasetSpec;
use crate::eval::{BenchConfig, CropStrategy, ProbeConfig, ProbeMode};
use crate::model::{ModelConfig, PoolKind, SpatialReduce};
use crate::nn::{Aggregation, AudioEncoderConfig, EncoderConfig, StageConfig, TransformerConfig};
use crate::train::PretrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub clips: usize,
    pub spatial: SpatialReduce,
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub mode: ProbeMode,
    pub feature_crops: bool,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub ks: Vec<usize>,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub crop_side: usize,
    pub min_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Data, model, objective and optimizer; `train.seed` is the `seed` key.
    pub train: PretrainConfig,
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub eval: EvalSettings,
    pub probe: ProbeSettings,
    pub bench: BenchSettings,
    /// Test clips rendered by the heatmap command.
    pub heatmap_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            train: PretrainConfig::default(),
            threads: 1,
            out: None,
            checkpoint: None,
            resume: None,
            eval: EvalSettings {
                clips: 10,
                spatial: SpatialReduce::Max,
                ks: vec![1, 5, 20],
            },
            probe: ProbeSettings {
                mode: ProbeMode::Linear,
                feature_crops: false,
                epochs: 12,
                batch: 8,
            },
            bench: BenchSettings {
                ks: vec![2, 4, 8],
                batch: 8,
                repeats: 5,
                warmup: 1,
                crop_side: 4,
                min_step_ms: 1.0,
            },
            heatmap_count: 4,
        };
        cfg.train.config_digest = cfg.digest();
        cfg
    }
}

/// Keys that locate files or size the run rather than define the model
/// and objective; they are left out of the digest.
const UNDIGESTED: [&str; 5] = ["out", "checkpoint", "resume", "threads", "train.epochs"];
const UNDIGESTED_PREFIXES: [&str; 4] = ["eval.", "probe.", "bench.", "heatmap."];

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn shape(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key with its value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let d = &t.data;
        let m = &t.model;
        let e = &m.encoder;
        let stage = |f: fn(&StageConfig) -> usize| list(&e.stages.iter().map(f).collect::<Vec<_>>());
        let tcfg = match m.pool {
            PoolKind::Transformer(c) => c,
            PoolKind::Average => TransformerConfig::new(m.dim()),
        };
        let p = &t.photometric;
        vec![
            ("seed", t.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("out", path(&self.out)),
            ("checkpoint", path(&self.checkpoint)),
            ("resume", path(&self.resume)),
            ("data.classes", d.num_classes.to_string()),
            ("data.per_class", d.per_class.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.freq", d.freq.to_string()),
            ("data.audio_frames", d.audio_frames.to_string()),
            ("data.hold", d.hold.to_string()),
            ("data.patch", d.patch.to_string()),
            ("data.step", d.step.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.seed", d.seed.to_string()),
            ("encoder.input", shape(&e.input)),
            ("encoder.grid", shape(&e.grid)),
            ("encoder.widths", stage(|s| s.out_channels)),
            ("encoder.spatial_kernels", stage(|s| s.spatial_kernel)),
            ("encoder.spatial_strides", stage(|s| s.spatial_stride)),
            ("encoder.temporal_kernels", stage(|s| s.temporal_kernel)),
            ("encoder.temporal_strides", stage(|s| s.temporal_stride)),
            ("audio.widths", list(&m.audio.widths)),
            (
                "pool.kind",
                match m.pool {
                    PoolKind::Average => "average",
                    PoolKind::Transformer(_) => "transformer",
                }
                .into(),
            ),
            ("pool.layers", tcfg.layers.to_string()),
            ("pool.heads", tcfg.heads.to_string()),
            ("pool.ff_dim", tcfg.ff_dim.to_string()),
            (
                "pool.aggregation",
                match tcfg.aggregation {
                    Aggregation::Mean => "mean",
                    Aggregation::SummaryToken => "token",
                }
                .into(),
            ),
            ("head.hidden", m.head_hidden.to_string()),
            ("head.dim", m.embed_dim.to_string()),
            ("crop.m", t.plan.m.to_string()),
            ("crop.n", t.plan.n.to_string()),
            ("crop.medium_size", t.plan.medium.to_string()),
            ("crop.small_size", t.plan.small.to_string()),
            ("crop.time", format_time_spec(&t.plan.time)),
            ("crop.area", list(&[t.crop_area.0, t.crop_area.1])),
            ("crop.aspect", list(&[t.crop_aspect.0, t.crop_aspect.1])),
            ("augment.flip", p.flip_prob.to_string()),
            ("augment.brightness", p.brightness.to_string()),
            ("augment.contrast", p.contrast.to_string()),
            ("augment.blur", p.blur_prob.to_string()),
            ("augment.blur_sigma", list(&[p.blur_sigma.0, p.blur_sigma.1])),
            ("augment.audio_gain", p.audio_gain.to_string()),
            ("loss.lambda_vv", t.weights.lambda_vv.to_string()),
            ("loss.lambda_va", t.weights.lambda_va.to_string()),
            ("loss.tau_cross", t.weights.tau_cross.to_string()),
            ("loss.tau_within", t.weights.tau_within.to_string()),
            ("loss.average_within", t.average_within.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("eval.clips", self.eval.clips.to_string()),
            (
                "eval.spatial",
                match self.eval.spatial {
                    SpatialReduce::Max => "max",
                    SpatialReduce::Average => "average",
                }
                .into(),
            ),
            ("eval.ks", list(&self.eval.ks)),
            (
                "probe.mode",
                match self.probe.mode {
                    ProbeMode::Linear => "linear",
                    ProbeMode::Full => "full",
                }
                .into(),
            ),
            ("probe.feature_crops", self.probe.feature_crops.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.batch", self.probe.batch.to_string()),
            ("bench.ks", list(&self.bench.ks)),
            ("bench.batch", self.bench.batch.to_string()),
            ("bench.repeats", self.bench.repeats.to_string()),
            ("bench.warmup", self.bench.warmup.to_string()),
            ("bench.crop_side", self.bench.crop_side.to_string()),
            ("bench.min_step_ms", self.bench.min_step_ms.to_string()),
            ("heatmap.count", self.heatmap_count.to_string()),
        ]
    }

    /// The resolved configuration as parseable text.
    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 over the keys that define the model and objective.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if UNDIGESTED.contains(&k) || UNDIGESTED_PREFIXES.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        h.finalize().into()
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            mode: self.probe.mode,
            use_feature_crops: self.probe.feature_crops,
            plan: self.train.plan.clone(),
            epochs: self.probe.epochs,
            batch: self.probe.batch,
            photometric: self.train.photometric,
            crop_area: self.train.crop_area,
            seed: self.train.seed,
            ..Default::default()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            model: self.train.model.clone(),
            ks: self.bench.ks.clone(),
            strategies: vec![CropStrategy::InputCrop, CropStrategy::FeatureCrop],
            batch: self.bench.batch,
            repeats: self.bench.repeats,
            warmup: self.bench.warmup,
            crop_side: self.bench.crop_side,
            seed: self.train.seed,
            min_step_ms: self.bench.min_step_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Default,
    Line(usize),
    Override,
}

struct Raw {
    values: BTreeMap<&'static str, (String, Origin)>,
}

impl Raw {
    fn at(&self, key: &str) -> String {
        match self.values[key].1 {
            Origin::Line(n) => format!("line {n}: "),
            Origin::Override => "override: ".into(),
            Origin::Default => String::new(),
        }
    }

    fn text(&self, key: &str) -> &str {
        &self.values[key].0
    }

    fn bad(&self, key: &str, expected: &str) -> Error {
        Error::Config(format!(
            "{}`{key}` = `{}`: expected {expected}",
            self.at(key),
            self.text(key)
        ))
    }

    fn get<T: FromStr>(&self, key: &str, expected: &str) -> Result<T> {
        self.text(key).parse().map_err(|_| self.bad(key, expected))
    }

    fn float(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.bad(key, "a finite number"))
        }
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.text(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| self.bad(key, "comma-separated integers")))
            .collect()
    }

    fn pair(&self, key: &str) -> Result<(f64, f64)> {
        let parts: Vec<&str> = self.text(key).split(',').map(str::trim).collect();
        match parts[..] {
            [a, b] => match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() && a <= b => Ok((a, b)),
                _ => Err(self.bad(key, "two ascending numbers `lo,hi`")),
            },
            _ => Err(self.bad(key, "two ascending numbers `lo,hi`")),
        }
    }

    fn shape3(&self, key: &str) -> Result<[usize; 3]> {
        let parts: Vec<usize> = self
            .text(key)
            .split(['x', '×'])
            .map(|s| s.trim().parse().map_err(|_| self.bad(key, "a shape like 4x7x7")))
            .collect::<Result<_>>()?;
        parts.try_into().map_err(|_| self.bad(key, "three extents like 4x7x7"))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let t = self.text(key);
        (!t.is_empty()).then(|| PathBuf::from(t))
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        options
            .iter()
            .find(|(name, _)| *name == self.text(key))
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                self.bad(key, &format!("one of {}", names.join(", ")))
            })
    }
}

fn conflict(a: &str, b: &str, why: String) -> Error {
    Error::Config(format!("`{a}` conflicts with `{b}`: {why}"))
}

fn build(raw: &Raw) -> Result<RunConfig> {
    let data = SyntheticDatasetSpec {
        num_classes: raw.get("data.classes", "an integer")?,
        per_class: raw.get("data.per_class", "an integer")?,
        frames: raw.get("data.frames", "an integer")?,
        height: raw.get("data.height", "an integer")?,
        width: raw.get("data.width", "an integer")?,
        freq: raw.get("data.freq", "an integer")?,
        audio_frames: raw.get("data.audio_frames", "an integer")?,
        hold: raw.get("data.hold", "an integer")?,
        patch: raw.get("data.patch", "an integer")?,
        step: raw.get("data.step", "an integer")?,
        noise: raw.float("data.noise")?,
        seed: raw.get("data.seed", "an integer")?,
    };
    data.validate()?;

    let widths = raw.list("encoder.widths")?;
    let per_stage = [
        "encoder.spatial_kernels",
        "encoder.spatial_strides",
        "encoder.temporal_kernels",
        "encoder.temporal_strides",
    ];
    let mut lists = Vec::new();
    for key in per_stage {
        let l = raw.list(key)?;
        if l.len() != widths.len() {
            return Err(conflict(
                key,
                "encoder.widths",
                format!("{} entries for {} stages", l.len(), widths.len()),
            ));
        }
        lists.push(l);
    }
    if widths.iter().chain(lists.iter().flatten()).any(|&v| v == 0) {
        return Err(Error::Config(
            "encoder widths, kernels and strides must be positive".into(),
        ));
    }
    let stages: Vec<StageConfig> = (0..widths.len())
        .map(|i| StageConfig {
            out_channels: widths[i],
            spatial_kernel: lists[0][i],
            spatial_stride: lists[1][i],
            temporal_kernel: lists[2][i],
            temporal_stride: lists[3][i],
        })
        .collect();
    let input = raw.shape3("encoder.input")?;
    let grid = raw.shape3("encoder.grid")?;
    let encoder = EncoderConfig::new(3, stages, input, grid).map_err(|e| {
        conflict(
            "encoder.grid",
            "encoder.input",
            format!("{e}; check the per-stage strides"),
        )
    })?;
    let d = encoder.dim();
    if data.frames < input[0] {
        return Err(conflict(
            "data.frames",
            "encoder.input",
            format!("{} frames cannot fill {}-frame clips", data.frames, input[0]),
        ));
    }

    let audio = AudioEncoderConfig {
        input: [data.freq, data.audio_frames],
        widths: raw.list("audio.widths")?,
    };
    if audio.dim() != d {
        return Err(conflict(
            "audio.widths",
            "encoder.widths",
            format!(
                "audio features end at {} channels, video at {d}; they must match",
                audio.dim()
            ),
        ));
    }
    audio
        .validate()
        .map_err(|e| conflict("audio.widths", "data.freq", e.to_string()))?;
    let tcfg = TransformerConfig {
        layers: raw.get("pool.layers", "an integer")?,
        heads: raw.get("pool.heads", "an integer")?,
        dim: d,
        ff_dim: raw.get("pool.ff_dim", "an integer")?,
        aggregation: raw.choice(
            "pool.aggregation",
            &[("mean", Aggregation::Mean), ("token", Aggregation::SummaryToken)],
        )?,
    };
    let pool = raw.choice("pool.kind", &[("transformer", true), ("average", false)])?;
    if pool {
        tcfg.validate()
            .map_err(|e| conflict("pool.heads", "encoder.widths", e.to_string()))?;
    }
    let model = ModelConfig {
        encoder,
        audio,
        pool: if pool {
            PoolKind::Transformer(tcfg)
        } else {
            PoolKind::Average
        },
        head_hidden: raw.get("head.hidden", "an integer")?,
        embed_dim: raw.get("head.dim", "an integer")?,
    };
    model.validate()?;

    let plan = CropPlan {
        m: raw.get("crop.m", "an integer")?,
        n: raw.get("crop.n", "an integer")?,
        medium: raw.get("crop.medium_size", "an integer")?,
        small: raw.get("crop.small_size", "an integer")?,
        time: parse_time_spec(raw.text("crop.time")).map_err(|_| raw.bad("crop.time", "groups like 1x3+1x2"))?,
        grid,
    };
    let side = grid[1].min(grid[2]);
    for key in ["crop.medium_size", "crop.small_size"] {
        let size: usize = raw.get(key, "an integer")?;
        if size == 0 || size > side {
            return Err(conflict(
                key,
                "encoder.grid",
                format!("crop side {size} does not fit the {}x{} feature grid", grid[1], grid[2]),
            ));
        }
    }
    if let Some(&(_, len)) = plan.time.iter().find(|g| g.1 == 0 || g.1 > grid[0]) {
        return Err(conflict(
            "crop.time",
            "encoder.grid",
            format!("temporal length {len} not in 1..={}", grid[0]),
        ));
    }
    let listed: usize = plan.time.iter().map(|g| g.0).sum();
    if listed > plan.m + plan.n {
        return Err(conflict(
            "crop.time",
            "crop.m",
            format!("{listed} timed crops but crop.m + crop.n = {}", plan.m + plan.n),
        ));
    }
    let crop_area = raw.pair("crop.area")?;
    if !(crop_area.0 > 0.0 && crop_area.1 <= 1.0) {
        return Err(raw.bad("crop.area", "fractions in (0, 1]"));
    }
    let crop_aspect = raw.pair("crop.aspect")?;
    if crop_aspect.0 <= 0.0 {
        return Err(raw.bad("crop.aspect", "positive ratios"));
    }

    let photometric = PhotometricParams {
        flip_prob: raw.float("augment.flip")?,
        brightness: raw.float("augment.brightness")?,
        contrast: raw.float("augment.contrast")?,
        blur_prob: raw.float("augment.blur")?,
        blur_sigma: raw.pair("augment.blur_sigma")?,
        audio_gain: raw.float("augment.audio_gain")?,
    };
    for key in ["augment.flip", "augment.blur"] {
        if !(0.0..=1.0).contains(&raw.float(key)?) {
            return Err(raw.bad(key, "a probability in [0, 1]"));
        }
    }
    let weights = LossWeights {
        lambda_vv: raw.float("loss.lambda_vv")?,
        lambda_va: raw.float("loss.lambda_va")?,
        tau_cross: raw.float("loss.tau_cross")?,
        tau_within: raw.float("loss.tau_within")?,
        ..Default::default()
    };
    weights.validate()?;

    let train = PretrainConfig {
        data,
        model,
        plan,
        weights,
        average_within: raw.get("loss.average_within", "true or false")?,
        batch: raw.get("train.batch", "an integer")?,
        epochs: raw.get("train.epochs", "an integer")?,
        lr: raw.float("train.lr")?,
        warmup_epochs: raw.get("train.warmup_epochs", "an integer")?,
        momentum: raw.float("train.momentum")?,
        weight_decay: raw.float("train.weight_decay")?,
        crop_area,
        crop_aspect,
        photometric,
        seed: raw.get("seed", "an integer")?,
        checkpoint_every: raw.get("train.checkpoint_every", "an integer")?,
        config_digest: [0; 32],
    };
    let train_count =
        train.data.per_class * train.data.num_classes - train.data.num_classes * (train.data.per_class / 5);
    if train.batch > train_count {
        return Err(conflict(
            "train.batch",
            "data.per_class",
            format!("batch {} exceeds the {train_count} training clips", train.batch),
        ));
    }
    train.validate()?;

    let eval = EvalSettings {
        clips: raw.get("eval.clips", "an integer")?,
        spatial: raw.choice(
            "eval.spatial",
            &[("max", SpatialReduce::Max), ("average", SpatialReduce::Average)],
        )?,
        ks: raw.list("eval.ks")?,
    };
    if eval.clips == 0 {
        return Err(raw.bad("eval.clips", "a positive integer"));
    }
    if let Some(k) = eval.ks.iter().find(|&&k| k == 0 || k > train_count) {
        return Err(conflict(
            "eval.ks",
            "data.per_class",
            format!("recall@{k} needs a gallery of at least {k}, there are {train_count} training clips"),
        ));
    }
    let probe = ProbeSettings {
        mode: raw.choice(
            "probe.mode",
            &[("linear", ProbeMode::Linear), ("full", ProbeMode::Full)],
        )?,
        feature_crops: raw.get("probe.feature_crops", "true or false")?,
        epochs: raw.get("probe.epochs", "an integer")?,
        batch: raw.get("probe.batch", "an integer")?,
    };
    if probe.batch == 0 || probe.batch > train_count {
        return Err(conflict(
            "probe.batch",
            "data.per_class",
            format!("batch {} not in 1..={train_count}", probe.batch),
        ));
    }
    let bench = BenchSettings {
        ks: raw.list("bench.ks")?,
        batch: raw.get("bench.batch", "an integer")?,
        repeats: raw.get("bench.repeats", "an integer")?,
        warmup: raw.get("bench.warmup", "an integer")?,
        crop_side: raw.get("bench.crop_side", "an integer")?,
        min_step_ms: raw.float("bench.min_step_ms")?,
    };
    if bench.ks.iter().any(|&k| k < 2) {
        return Err(raw.bad("bench.ks", "crop counts of at least 2"));
    }
    if bench.repeats < 5 {
        return Err(raw.bad("bench.repeats", "at least 5"));
    }
    if bench.batch < 2 {
        return Err(raw.bad("bench.batch", "at least 2"));
    }
    if bench.crop_side == 0 || bench.crop_side > side {
        return Err(conflict(
            "bench.crop_side",
            "encoder.grid",
            format!(
                "crop side {} does not fit the {}x{} feature grid",
                bench.crop_side, grid[1], grid[2]
            ),
        ));
    }
    let threads: usize = raw.get("threads", "an integer")?;
    if threads == 0 {
        return Err(raw.bad("threads", "a positive integer"));
    }
    let mut cfg = RunConfig {
        train,
        threads,
        out: raw.path("out"),
        checkpoint: raw.path("checkpoint"),
        resume: raw.path("resume"),
        eval,
        probe,
        bench,
        heatmap_count: raw.get("heatmap.count", "an integer")?,
    };
    cfg.train.config_digest = cfg.digest();
    Ok(cfg)
}

/// Parses configuration text, then applies `overrides` (`key`, `value`)
/// in order.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut values: BTreeMap<&'static str, (String, Origin)> = RunConfig::default()
        .entries()
        .into_iter()
        .map(|(k, v)| (k, (v, Origin::Default)))
        .collect();
    let known = |key: &str| values.keys().copied().find(|k| *k == key);
    let mut assignments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        let k = known(key).ok_or_else(|| Error::Config(format!("line {n}: unknown key `{key}`")))?;
        assignments.push((k, value.trim().to_string(), Origin::Line(n)));
    }
    for (key, value) in overrides {
        let k = known(key).ok_or_else(|| Error::Config(format!("override: unknown key `{key}`")))?;
        assignments.push((k, value.trim().to_string(), Origin::Override));
    }
    for (k, v, origin) in assignments {
        let slot = values.get_mut(k).expect("known key");
        if let (Origin::Line(first), Origin::Line(n)) = (slot.1, origin) {
            return Err(Error::Config(format!(
                "line {n}: `{k}` was already set on line {first}"
            )));
        }
        *slot = (v, origin);
    }
    build(&Raw { values })
}

/// Reads `path` (or starts from defaults when `None`) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
