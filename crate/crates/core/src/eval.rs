//! Retrieval, classification probes, audio-visual heatmaps and the
//! crop-cost benchmark.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    feature_crop_batch, input_crop_resize, photometric_augment, sample_crop_tube, sample_feature_tubes, CropPlan,
    CropTube, Domain, PhotometricParams,
};
use crate::contrastive::nce_loss;
use crate::data::{iterate_batches, AVInstance};
use crate::model::{Model, ModelConfig, SpatialReduce};
use crate::nn::{Linear, Module};
use crate::tensor::{no_grad, peak_bytes, reset_peak_bytes, Tensor};
use crate::train::{lr_schedule, sgd_step, stack, OptimizerState, ScheduleSpec};
use crate::{Error, Result};

pub const EVAL_HEADER: &str = "metric,k_or_mode,value";
pub const BENCH_HEADER: &str = "strategy,k,mean_ms,std_ms,peak_bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    pub num_clips: usize,
    pub spatial: SpatialReduce,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            num_clips: 10,
            spatial: SpatialReduce::Max,
        }
    }
}

/// Start frames of `k` clips of length `len`, uniformly spaced over `t`.
pub fn clip_starts(t: usize, len: usize, k: usize) -> Vec<usize> {
    let span = t - len;
    if k <= 1 {
        return vec![span / 2];
    }
    (0..k).map(|i| (i * span + (k - 1) / 2) / (k - 1)).collect()
}

/// Pooled features of many `[3, T, H, W]` videos: each clip goes through
/// the encoder, the spatial reduction and the temporal pool, then clips
/// are averaged.
pub fn extract_features(model: &Model, videos: &[&Tensor], opts: EmbedOptions) -> Result<Vec<Vec<f64>>> {
    if opts.num_clips == 0 {
        return Err(Error::Config("eval.clips must be positive".into()));
    }
    let [t0, h0, w0] = model.cfg.encoder.input;
    let mut clips = Vec::with_capacity(videos.len() * opts.num_clips);
    for v in videos {
        let s = v.shape();
        if s.len() != 4 || s[0] != 3 || s.contains(&0) {
            return Err(Error::Data(format!(
                "expected a non-empty [3, T, H, W] video, got {s:?}"
            )));
        }
        if s[1] < t0 {
            return Err(Error::Data(format!("video has {} frames, clips need {t0}", s[1])));
        }
        for start in clip_starts(s[1], t0, opts.num_clips) {
            let tube = CropTube::new(
                (start, start + t0),
                (0, s[2]),
                (0, s[3]),
                [s[1], s[2], s[3]],
                Domain::Input,
            )?;
            clips.push(input_crop_resize(v, &tube, [h0, w0])?);
        }
    }
    let d = model.cfg.dim();
    let mut pooled = Vec::with_capacity(clips.len());
    no_grad(|| -> Result<()> {
        for chunk in clips.chunks(16) {
            let x = stack(chunk)?;
            let feat = model.encode_video(&x)?;
            let p = model.pool_feature(&feat, &vec![0; chunk.len()], opts.spatial)?;
            pooled.extend(p.data().chunks(d).map(|r| r.to_vec()));
        }
        Ok(())
    })?;
    Ok(pooled
        .chunks(opts.num_clips)
        .map(|group| {
            let mut mean = vec![0.0; d];
            for row in group {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= group.len() as f64);
            mean
        })
        .collect())
}

pub fn extract_video_embedding(video: &Tensor, model: &Model, opts: EmbedOptions) -> Result<Vec<f64>> {
    Ok(extract_features(model, &[video], opts)?.remove(0))
}

/// A gallery of unit-normalized features with their labels.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    dim: usize,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric("cannot normalize a zero or non-finite feature".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl RetrievalIndex {
    pub fn new(features: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let dim = features
            .first()
            .ok_or_else(|| Error::Data("empty retrieval gallery".into()))?
            .len();
        if features.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} features but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::Data("gallery features differ in dimension".into()));
        }
        Ok(RetrievalIndex {
            rows: features.iter().map(|f| unit(f)).collect::<Result<_>>()?,
            labels: labels.to_vec(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gallery indices by decreasing cosine similarity; ties keep index order.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(Error::Data(format!(
                "query dim {} differs from gallery dim {}",
                query.len(),
                self.dim
            )));
        }
        let q = unit(query)?;
        let sims: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        Ok(order)
    }
}

/// Fraction of queries with a same-class gallery item among the top `k`,
/// for each `k`.
pub fn retrieval_recall(
    queries: &[Vec<f64>],
    labels: &[usize],
    index: &RetrievalIndex,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if index.is_empty() {
        return Err(Error::Data("empty retrieval gallery".into()));
    }
    if queries.is_empty() || queries.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} queries with {} labels",
            queries.len(),
            labels.len()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > index.len()) {
        return Err(Error::Data(format!(
            "recall@{k} needs 1 <= k <= gallery size {}",
            index.len()
        )));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, &label) in queries.iter().zip(labels) {
        let order = index.rank(q)?;
        let first = order.iter().position(|&g| index.labels[g] == label);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / queries.len() as f64))
        .collect())
}

/// Test-set queries against the train-set gallery.
pub fn evaluate_retrieval(
    model: &Model,
    train: &[AVInstance],
    test: &[AVInstance],
    opts: EmbedOptions,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let gallery = extract_features(model, &train.iter().map(|i| &i.video).collect::<Vec<_>>(), opts)?;
    let queries = extract_features(model, &test.iter().map(|i| &i.video).collect::<Vec<_>>(), opts)?;
    let index = RetrievalIndex::new(&gallery, &train.iter().map(|i| i.class_id).collect::<Vec<_>>())?;
    retrieval_recall(
        &queries,
        &test.iter().map(|i| i.class_id).collect::<Vec<_>>(),
        &index,
        ks,
    )
}

/// Mean softmax cross-entropy of `logits [N, C]` against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
        return Err(Error::Data(format!("logits {s:?} do not fit {} labels", labels.len())));
    }
    let (n, c) = (s[0], s[1]);
    let shift = logits.max_axis(1, true)?.detach();
    let lse = logits
        .sub(&shift)?
        .exp()
        .sum_axis(1, false)?
        .log()?
        .add(&shift.reshape(&[n])?)?;
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let picked = logits.mul(&Tensor::from_vec(onehot, &[n, c])?)?.sum_axis(1, false)?;
    Ok(lse.sub(&picked)?.mean_all())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Frozen backbone, classifier on fixed features.
    Linear,
    /// Everything trains.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    /// Each sample also contributes feature-cropped views with its label.
    pub use_feature_crops: bool,
    pub plan: CropPlan,
    pub epochs: usize,
    pub batch: usize,
    /// `None` uses the fine-tuning recipe.
    pub schedule: Option<ScheduleSpec>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub spatial: SpatialReduce,
    pub photometric: PhotometricParams,
    pub crop_area: (f64, f64),
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::Linear,
            use_feature_crops: false,
            plan: CropPlan::desk(),
            epochs: 12,
            batch: 8,
            schedule: None,
            momentum: 0.9,
            weight_decay: 1e-5,
            spatial: SpatialReduce::Average,
            photometric: PhotometricParams::default(),
            crop_area: (0.4, 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn standardizer(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for r in rows {
        sd.iter_mut()
            .zip(r)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    (mean, sd.into_iter().map(|s| s.sqrt().max(1e-6)).collect())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Trains a classifier on the pooled feature and reports accuracies. The
/// label space is `0..classes`.
pub fn finetune_probe(
    model: &Model,
    train: &[AVInstance],
    test: &[AVInstance],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.iter().chain(test).any(|i| i.class_id >= classes) {
        return Err(Error::Data(format!("a label exceeds the {classes}-class label space")));
    }
    if train.len() < cfg.batch || cfg.batch == 0 {
        return Err(Error::Data(format!(
            "{} training instances cannot fill a batch of {}",
            train.len(),
            cfg.batch
        )));
    }
    match cfg.mode {
        ProbeMode::Linear => linear_probe(model, train, test, classes, cfg),
        ProbeMode::Full => full_finetune(model, train, test, classes, cfg),
    }
}

fn linear_probe(
    model: &Model,
    train: &[AVInstance],
    test: &[AVInstance],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = EmbedOptions {
        num_clips: 1,
        spatial: cfg.spatial,
    };
    let mut xs = extract_features(model, &train.iter().map(|i| &i.video).collect::<Vec<_>>(), opts)?;
    let mut ys: Vec<usize> = train.iter().map(|i| i.class_id).collect();
    let base = xs.len();
    if cfg.use_feature_crops {
        // fixed crop views of each training clip, labelled like the clip
        let d = model.cfg.dim();
        let clips: Vec<Tensor> = train.iter().map(|i| i.video.clone()).collect();
        let base_labels = ys.clone();
        for (chunk, labels) in clips.chunks(16).zip(base_labels.chunks(16)) {
            let tubes = sample_feature_tubes(&cfg.plan, chunk.len(), &mut rng)?;
            no_grad(|| -> Result<()> {
                let feat = model.encode_video(&stack(chunk)?)?;
                for (_, t) in &tubes {
                    let crop = feature_crop_batch(&feat, t)?;
                    let off: Vec<usize> = t.iter().map(|t| t.t_min).collect();
                    let p = model.pool_feature(&crop, &off, cfg.spatial)?;
                    xs.extend(p.data().chunks(d).map(|r| r.to_vec()));
                    ys.extend_from_slice(labels);
                }
                Ok(())
            })?;
        }
    }
    let (mean, sd) = standardizer(&xs[..base]);
    let norm = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    };
    let xs = norm(&xs);
    let d = model.cfg.dim();
    let clf = Linear::new(&mut rng, d, classes);
    let params = clf.parameters();
    let mut opt = OptimizerState::new(&params, cfg.momentum, cfg.weight_decay);
    let spe = xs.len() / cfg.batch;
    let schedule = cfg.schedule.clone().unwrap_or_else(|| ScheduleSpec::finetune(spe));
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        for batch in iterate_batches(xs.len(), cfg.batch, &mut rng)? {
            let x = Tensor::from_vec(
                batch.iter().flat_map(|&i| xs[i].iter().copied()).collect(),
                &[batch.len(), d],
            )?;
            let labels: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            cross_entropy(&clf.forward(&x)?, &labels)?.backward()?;
            sgd_step(&params, &mut opt, lr_schedule(&schedule, step))?;
            step += 1;
        }
    }
    let predict = |rows: &[Vec<f64>]| -> Result<Vec<usize>> {
        let x = Tensor::from_vec(rows.iter().flatten().copied().collect(), &[rows.len(), d])?;
        let logits = no_grad(|| clf.forward(&x))?;
        let pred = logits.data().chunks(classes).map(argmax).collect();
        Ok(pred)
    };
    let test_x = norm(&extract_features(
        model,
        &test.iter().map(|i| &i.video).collect::<Vec<_>>(),
        opts,
    )?);
    let test_y: Vec<usize> = test.iter().map(|i| i.class_id).collect();
    Ok(ProbeResult {
        train_accuracy: accuracy(&predict(&xs[..base])?, &ys[..base]),
        test_accuracy: if test.is_empty() {
            f64::NAN
        } else {
            accuracy(&predict(&test_x)?, &test_y)
        },
    })
}

fn full_finetune(
    model: &Model,
    train: &[AVInstance],
    test: &[AVInstance],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.cfg.dim();
    let [t0, h0, w0] = model.cfg.encoder.input;
    let clf = Linear::new(&mut rng, d, classes);
    let mut params = model.visual.parameters();
    params.extend(model.pool.parameters());
    params.extend(clf.parameters());
    let mut opt = OptimizerState::new(&params, cfg.momentum, cfg.weight_decay);
    let spe = train.len() / cfg.batch;
    let schedule = cfg.schedule.clone().unwrap_or_else(|| ScheduleSpec::finetune(spe));
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        for batch in iterate_batches(train.len(), cfg.batch, &mut rng)? {
            let mut clips = Vec::with_capacity(batch.len());
            for &i in &batch {
                let v = &train[i].video;
                let s = v.shape();
                let tube = sample_crop_tube([s[1], s[2], s[3]], cfg.crop_area, (0.75, 4.0 / 3.0), t0, &mut rng)?;
                clips.push(photometric_augment(
                    &input_crop_resize(v, &tube, [h0, w0])?,
                    &cfg.photometric,
                    &mut rng,
                )?);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].class_id).collect();
            let feat = model.encode_video(&stack(&clips)?)?;
            let pooled = model.pool_feature(&feat, &vec![0; batch.len()], SpatialReduce::Average)?;
            let mut loss = cross_entropy(&clf.forward(&pooled)?, &labels)?;
            if cfg.use_feature_crops {
                let views = sample_feature_tubes(&cfg.plan, batch.len(), &mut rng)?;
                let count = views.len() + 1;
                for (_, tubes) in &views {
                    let crop = feature_crop_batch(&feat, tubes)?;
                    let off: Vec<usize> = tubes.iter().map(|t| t.t_min).collect();
                    let p = model.pool_feature(&crop, &off, SpatialReduce::Average)?;
                    loss = loss.add(&cross_entropy(&clf.forward(&p)?, &labels)?)?;
                }
                loss = loss.scale(1.0 / count as f64);
            }
            loss.backward()?;
            sgd_step(&params, &mut opt, lr_schedule(&schedule, step))?;
            step += 1;
        }
    }
    model
        .audio
        .parameters()
        .iter()
        .chain(model.video_head.parameters().iter())
        .for_each(|p| p.zero_grad());
    let predict = |set: &[AVInstance]| -> Result<f64> {
        let opts = EmbedOptions {
            num_clips: 1,
            spatial: SpatialReduce::Average,
        };
        let feats = extract_features(model, &set.iter().map(|i| &i.video).collect::<Vec<_>>(), opts)?;
        let x = Tensor::from_vec(feats.iter().flatten().copied().collect(), &[feats.len(), d])?;
        let logits = no_grad(|| clf.forward(&x))?;
        let pred: Vec<usize> = logits.data().chunks(classes).map(argmax).collect();
        Ok(accuracy(&pred, &set.iter().map(|i| i.class_id).collect::<Vec<_>>()))
    };
    Ok(ProbeResult {
        train_accuracy: predict(train)?,
        test_accuracy: if test.is_empty() { f64::NAN } else { predict(test)? },
    })
}

/// Per-cell dot products between a feature map and an audio vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    /// `[T1, H1, W1]`.
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl HeatMap {
    /// `feat` is `[D, T, H, W]`; `audio` has length `D`.
    pub fn from_features(feat: &Tensor, audio: &[f64]) -> Result<Self> {
        let s = feat.shape();
        if s.len() != 4 || s[0] != audio.len() {
            return Err(Error::Data(format!(
                "feature map {s:?} and audio vector of length {} do not align",
                audio.len()
            )));
        }
        let cells = s[1] * s[2] * s[3];
        let data = feat.data();
        let mut values = vec![0.0; cells];
        for (c, a) in audio.iter().enumerate() {
            for (v, f) in values.iter_mut().zip(&data[c * cells..(c + 1) * cells]) {
                *v += a * f;
            }
        }
        Ok(HeatMap {
            shape: [s[1], s[2], s[3]],
            values,
        })
    }

    pub fn argmax(&self) -> [usize; 3] {
        let i = argmax(&self.values);
        let [_, h, w] = self.shape;
        [i / (h * w), (i / w) % h, i % w]
    }

    /// Binary greyscale image with the time steps side by side, scaled so
    /// the map's minimum is black and its maximum white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let [t, h, w] = self.shape;
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", t * w, h).into_bytes();
        for y in 0..h {
            for ti in 0..t {
                for x in 0..w {
                    let v = self.values[(ti * h + y) * w + x];
                    let g = if range > 0.0 {
                        ((v - lo) / range * 255.0).round()
                    } else {
                        0.0
                    };
                    out.push(g as u8);
                }
            }
        }
        out
    }
}

/// Heatmap of one clip `[3, T0, H0, W0]` against its spectrogram `[1, F, T_a]`,
/// both features taken before the projection heads.
pub fn av_heatmap(video: &Tensor, audio: &Tensor, model: &Model) -> Result<HeatMap> {
    no_grad(|| {
        let feat = model.visual.forward(video)?;
        let a = model.audio_feature(audio)?;
        HeatMap::from_features(&feat, &a.to_vec())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropStrategy {
    /// Every view is cropped from the input and encoded separately.
    InputCrop,
    /// Two encoder passes; the other views are sliced from their maps.
    FeatureCrop,
}

impl CropStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            CropStrategy::InputCrop => "input_crop",
            CropStrategy::FeatureCrop => "feature_crop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub ks: Vec<usize>,
    pub strategies: Vec<CropStrategy>,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Side of the extra views on the feature grid.
    pub crop_side: usize,
    pub seed: u64,
    /// Steps faster than this are refused as below timer resolution.
    pub min_step_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::desk(),
            ks: vec![2, 4, 8],
            strategies: vec![CropStrategy::InputCrop, CropStrategy::FeatureCrop],
            batch: 8,
            repeats: 5,
            warmup: 1,
            crop_side: 4,
            seed: 0,
            min_step_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub strategy: CropStrategy,
    pub k: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub peak_bytes: usize,
    /// NCE terms per step; equal across strategies for equal `k`.
    pub terms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
}

impl BenchReport {
    pub fn get(&self, strategy: CropStrategy, k: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{}\n",
                r.strategy.name(),
                r.k,
                r.mean_ms,
                r.std_ms,
                r.peak_bytes
            ));
        }
        out
    }
}

/// `L(v0, v1) + L(v1, v0) + Σ_{j≥2} [L(v0, vj) + L(v1, vj)]`.
fn bench_loss(views: &[Tensor], tau: f64) -> Result<(Tensor, usize)> {
    let mut loss = nce_loss(&views[0], &views[1], tau)?.add(&nce_loss(&views[1], &views[0], tau)?)?;
    let mut terms = 2;
    for v in &views[2..] {
        loss = loss
            .add(&nce_loss(&views[0], v, tau)?)?
            .add(&nce_loss(&views[1], v, tau)?)?;
        terms += 2;
    }
    Ok((loss, terms))
}

fn bench_step(
    model: &Model,
    x: &[Tensor; 2],
    tubes: &[(usize, Vec<CropTube>)],
    strategy: CropStrategy,
) -> Result<usize> {
    let n = x[0].shape()[0];
    let zeros = vec![0; n];
    let feats = [model.encode_video(&x[0])?, model.encode_video(&x[1])?];
    let mut views = vec![
        model.embed_video(&feats[0], &zeros)?,
        model.embed_video(&feats[1], &zeros)?,
    ];
    let [t0, h0, w0] = model.cfg.encoder.input;
    let [t1, h1, _] = model.cfg.encoder.grid;
    for (src, ts) in tubes {
        match strategy {
            CropStrategy::FeatureCrop => {
                let crop = feature_crop_batch(&feats[*src], ts)?;
                let off: Vec<usize> = ts.iter().map(|t| t.t_min).collect();
                views.push(model.embed_video(&crop, &off)?);
            }
            CropStrategy::InputCrop => {
                let data = x[*src].data();
                let per = 3 * t0 * h0 * w0;
                let clips = ts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let clip = Tensor::from_vec(data[i * per..(i + 1) * per].to_vec(), &[3, t0, h0, w0])?;
                        input_crop_resize(&clip, &t.to_input(t0 / t1, h0 / h1), [h0, w0])
                    })
                    .collect::<crate::tensor::Result<Vec<_>>>()?;
                drop(data);
                let feat = model.encode_video(&stack(&clips)?)?;
                views.push(model.embed_video(&feat, &zeros)?);
            }
        }
    }
    let (loss, terms) = bench_loss(&views, 0.5)?;
    loss.backward()?;
    model.parameters().iter().for_each(|p| p.zero_grad());
    Ok(terms)
}

/// Times forward and backward of the within-modal pipeline for each
/// strategy and crop count `k` (two large views plus `k - 2` crops).
pub fn crop_cost_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats < 5 {
        return Err(Error::Config(format!(
            "bench.repeats must be at least 5, got {}",
            cfg.repeats
        )));
    }
    if let Some(k) = cfg.ks.iter().find(|&&k| k < 2) {
        return Err(Error::Config(format!("bench.ks entries must be at least 2, got {k}")));
    }
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let [t0, h0, w0] = cfg.model.encoder.input;
    let [t1, h1, w1] = cfg.model.encoder.grid;
    if cfg.crop_side == 0 || cfg.crop_side > h1.min(w1) {
        return Err(Error::Config(format!(
            "bench.crop_side {} does not fit the {h1}x{w1} feature grid",
            cfg.crop_side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clip = || -> Result<Tensor> {
        let n = cfg.batch * 3 * t0 * h0 * w0;
        Ok(Tensor::from_vec(
            (0..n).map(|_| rng.random::<f64>()).collect(),
            &[cfg.batch, 3, t0, h0, w0],
        )?)
    };
    let x = [clip()?, clip()?];
    let max_k = cfg.ks.iter().copied().max().unwrap_or(2);
    let side = cfg.crop_side;
    let all_tubes: Vec<(usize, Vec<CropTube>)> = (0..max_k - 2)
        .map(|j| {
            let ts = (0..cfg.batch)
                .map(|_| {
                    let y = rng.random_range(0..=h1 - side);
                    let xx = rng.random_range(0..=w1 - side);
                    Ok(CropTube::new(
                        (0, t1),
                        (y, y + side),
                        (xx, xx + side),
                        [t1, h1, w1],
                        Domain::Feature,
                    )?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((j % 2, ts))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &k in &cfg.ks {
            let tubes = &all_tubes[..k - 2];
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut peak = 0;
            let mut terms = 0;
            for rep in 0..cfg.warmup + cfg.repeats {
                reset_peak_bytes();
                let start = Instant::now();
                terms = bench_step(&model, &x, tubes, strategy)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if rep >= cfg.warmup {
                    times.push(ms);
                    peak = peak.max(peak_bytes());
                }
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            if mean < cfg.min_step_ms {
                return Err(Error::Config(format!(
                    "a {} step took {mean:.3} ms, below the {} ms timer guard; raise bench.batch or the encoder size",
                    strategy.name(),
                    cfg.min_step_ms
                )));
            }
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
            rows.push(BenchRow {
                strategy,
                k,
                mean_ms: mean,
                std_ms: var.sqrt(),
                peak_bytes: peak,
                terms,
            });
        }
    }
    Ok(BenchReport { rows, threads: 1 })
}

/// Appends `metric,k_or_mode,value` rows, writing the header to a new file.
pub fn append_eval_csv(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{EVAL_HEADER}")?;
    }
    for (metric, key, value) in rows {
        writeln!(f, "{metric},{key},{value}")?;
    }
    Ok(())
}
