//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 6 to 8 pretrain real models and take most of the time.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stica_core::augment::{feature_crop, input_crop_resize, sample_feature_tubes, CropPlan, SizeClass, ViewSet};
use stica_core::config::parse_config_str;
use stica_core::contrastive::{enumerate_crop_pairs, nce_loss, within_modal_loss};
use stica_core::data::build_dataset;
use stica_core::eval::{
    crop_cost_benchmark, evaluate_retrieval, finetune_probe, BenchConfig, CropStrategy, EmbedOptions, ProbeConfig,
};
use stica_core::model::{Model, PoolKind, SpatialReduce};
use stica_core::nn::{
    multihead_attention, AvgPoolEncoder, Module, ProjectionHead, TimeMask, TransformerConfig, TransformerPool,
};
use stica_core::tensor::{grad_check, Conv3dGeometry};
use stica_core::train::{augment_batch, compute_losses, epoch_means, run_pretraining, PretrainConfig};
use stica_core::Tensor;

type Outcome = Result<String, String>;
type Criterion = Box<dyn Fn() -> Outcome>;

const SMOKE: &str = include_str!("../../../configs/smoke.conf");

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(lo..hi))
        .collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::parameter(random(rng, shape, lo, hi), shape).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------
// 1. gradient integrity

type OpCase = (
    &'static str,
    Box<dyn Fn(&[Tensor]) -> stica_core::tensor::Result<Tensor>>,
    Vec<Tensor>,
);

/// Weighted sum with fixed weights so every output entry carries a
/// distinct, nonzero upstream gradient.
fn scalarize(y: stica_core::tensor::Result<Tensor>) -> stica_core::tensor::Result<Tensor> {
    let y = y?;
    let w: Vec<f64> = (0..y.numel()).map(|i| 0.3 + ((i * 7) % 11) as f64 / 10.0).collect();
    Ok(y.mul(&Tensor::from_vec(w, y.shape())?)?.sum_all())
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {{
            let f = $f;
            cases.push(($name, Box::new(move |x: &[Tensor]| scalarize(f(x))), $inputs))
        }};
    }
    let s = [3, 4];
    case!(
        "add",
        vec![param(rng, &s, -1.0, 1.0), param(rng, &[4], -1.0, 1.0)],
        |x: &[Tensor]| x[0].add(&x[1])
    );
    case!(
        "sub",
        vec![param(rng, &s, -1.0, 1.0), param(rng, &[3, 1], -1.0, 1.0)],
        |x: &[Tensor]| x[0].sub(&x[1])
    );
    case!(
        "mul",
        vec![param(rng, &s, -1.0, 1.0), param(rng, &s, -1.0, 1.0)],
        |x: &[Tensor]| x[0].mul(&x[1])
    );
    case!(
        "div",
        vec![param(rng, &s, -1.0, 1.0), param(rng, &s, 0.5, 2.0)],
        |x: &[Tensor]| x[0].div(&x[1])
    );
    case!("neg", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(x[0].neg()));
    case!("scale", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(
        x[0].scale(-2.5)
    ));
    case!("add_scalar", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(
        x[0].add_scalar(0.7)
    ));
    case!("exp", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(x[0].exp()));
    case!("log", vec![param(rng, &s, 0.2, 2.0)], |x: &[Tensor]| x[0].log());
    case!("pow", vec![param(rng, &s, 0.2, 2.0)], |x: &[Tensor]| Ok(x[0].pow(2.5)));
    case!("sqrt", vec![param(rng, &s, 0.2, 2.0)], |x: &[Tensor]| Ok(x[0].sqrt()));
    case!("relu", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(x[0].relu()));
    case!("sum_all", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(x[0]
        .exp()
        .sum_all()));
    case!("mean_all", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| Ok(x[0]
        .exp()
        .mean_all()));
    case!("sum_axis", vec![param(rng, &[2, 3, 4], -1.0, 1.0)], |x: &[Tensor]| x[0]
        .sum_axis(1, false));
    case!(
        "mean_axis",
        vec![param(rng, &[2, 3, 4], -1.0, 1.0)],
        |x: &[Tensor]| x[0].mean_axis(2, true)
    );
    case!("max_axis", vec![param(rng, &[2, 3, 4], -1.0, 1.0)], |x: &[Tensor]| x[0]
        .max_axis(1, false));
    case!(
        "broadcast_to",
        vec![param(rng, &[1, 4], -1.0, 1.0)],
        |x: &[Tensor]| x[0].broadcast_to(&[3, 4])
    );
    case!("reshape", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| x[0]
        .reshape(&[2, 6]));
    case!("permute", vec![param(rng, &[2, 3, 4], -1.0, 1.0)], |x: &[Tensor]| x[0]
        .permute(&[2, 0, 1]));
    case!("transpose", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| x[0]
        .transpose(0, 1));
    case!("slice", vec![param(rng, &[3, 5], -1.0, 1.0)], |x: &[Tensor]| x[0]
        .slice(&[1..3, 2..5]));
    case!(
        "concat",
        vec![param(rng, &s, -1.0, 1.0), param(rng, &[3, 2], -1.0, 1.0)],
        |x: &[Tensor]| { Tensor::concat(&[x[0].clone(), x[1].clone()], 1) }
    );
    case!(
        "matmul",
        vec![param(rng, &[3, 4], -1.0, 1.0), param(rng, &[4, 2], -1.0, 1.0)],
        |x: &[Tensor]| { x[0].matmul(&x[1]) }
    );
    case!("softmax", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| x[0]
        .softmax(1));
    case!("masked_softmax", vec![param(rng, &s, -1.0, 1.0)], |x: &[Tensor]| {
        x[0].masked_softmax(&[true, false, true, true])
    });
    case!(
        "layer_norm",
        vec![
            param(rng, &s, -1.0, 1.0),
            param(rng, &[4], 0.5, 1.5),
            param(rng, &[4], -0.5, 0.5)
        ],
        |x: &[Tensor]| x[0].layer_norm(&x[1], &x[2], 1e-5)
    );
    case!(
        "conv3d (spatial)",
        vec![
            param(rng, &[2, 2, 2, 5, 5], -1.0, 1.0),
            param(rng, &[3, 2, 1, 3, 3], -0.5, 0.5),
            param(rng, &[3], -0.5, 0.5)
        ],
        |x: &[Tensor]| x[0].conv3d(&x[1], Some(&x[2]), Conv3dGeometry::spatial(3, 2, 1))
    );
    case!(
        "conv3d (temporal)",
        vec![
            param(rng, &[1, 2, 5, 3, 3], -1.0, 1.0),
            param(rng, &[2, 2, 3, 1, 1], -0.5, 0.5)
        ],
        |x: &[Tensor]| x[0].conv3d(&x[1], None, Conv3dGeometry::temporal(3, 2, 1))
    );
    case!(
        "avg_pool3d",
        vec![param(rng, &[1, 2, 2, 4, 4], -1.0, 1.0)],
        |x: &[Tensor]| x[0].avg_pool3d([2, 2, 2])
    );
    case!(
        "multihead_attention",
        vec![
            param(rng, &[2, 3, 4], -1.0, 1.0),
            param(rng, &[2, 3, 4], -1.0, 1.0),
            param(rng, &[2, 3, 4], -1.0, 1.0)
        ],
        |x: &[Tensor]| multihead_attention(&x[0], &x[1], &x[2], 2, &[true, true, false]).map(|r| r.0)
    );
    case!(
        "nce_loss",
        vec![param(rng, &[3, 4], -1.0, 1.0), param(rng, &[3, 4], -1.0, 1.0)],
        |x: &[Tensor]| nce_loss(&x[0], &x[1], 0.1)
    );

    let pool = TransformerPool::new(rng, TransformerConfig::new(8)).unwrap();
    let mut inputs = vec![param(rng, &[2, 8, 3], -1.0, 1.0)];
    inputs.extend(pool.parameters());
    let mask = TimeMask::new(vec![true, true, false]).unwrap();
    case!("transformer_pool", inputs, move |x: &[Tensor]| pool.forward(
        &x[0],
        &[0, 1],
        Some(&mask)
    ));

    let head = ProjectionHead::new(rng, 6, 5, 4);
    let mut inputs = vec![param(rng, &[3, 6], -1.0, 1.0)];
    inputs.extend(head.parameters());
    case!("projection_head", inputs, move |x: &[Tensor]| head.forward(&x[0]));
    cases
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = ("", 0.0f64);
    let mut failed = Vec::new();
    let cases = op_cases(&mut rng);
    let count = cases.len();
    for (name, f, inputs) in cases {
        let report = grad_check(|x| f(x), &inputs, 1e-6).map_err(|e| format!("{name}: {e}"))?;
        if !report.passed(1e-4) {
            failed.push(format!("{name} ({:.2e})", report.max_relative_error));
        }
        if report.max_relative_error > worst.1 {
            worst = (name, report.max_relative_error);
        }
    }

    // end-to-end total loss on a two-instance micro configuration
    let micro: Vec<(String, String)> = [
        ("train.batch", "2"),
        ("encoder.widths", "4,8,8"),
        ("audio.widths", "4,8,8"),
        ("pool.heads", "2"),
        ("pool.ff_dim", "16"),
        ("head.hidden", "8"),
        ("head.dim", "4"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let mut cfg = parse_config_str(SMOKE, &micro).map_err(|e| e.to_string())?.train;
    cfg.photometric.blur_prob = 0.0;
    let ds = build_dataset(&cfg.data).map_err(|e| e.to_string())?;
    let model = Model::new(cfg.model.clone(), 3).map_err(|e| e.to_string())?;
    // Biases start at exactly zero, so with four channels some windows of
    // rectified zeros put a unit right on the ReLU kink, where a bias has no
    // derivative. Check at a generic point instead.
    let mut jitter = ChaCha8Rng::seed_from_u64(11);
    for (name, p) in model.named_parameters() {
        if name.ends_with("bias") {
            p.update_data(|d| d.iter_mut().for_each(|v| *v += jitter.random_range(-0.05..0.05)));
        }
    }
    let batch = [&ds.train[0], &ds.train[5]];
    let (x1, x2, audio) = augment_batch(&cfg, &batch, &mut ChaCha8Rng::seed_from_u64(4)).map_err(|e| e.to_string())?;
    // every parameter of the model, plus the audio input
    let mut inputs = vec![Tensor::parameter(audio.to_vec(), audio.shape()).unwrap()];
    let mut names = Vec::new();
    for (name, p) in model.named_parameters() {
        names.push(name);
        inputs.push(p);
    }
    let e2e = grad_check(
        |x| {
            let l = compute_losses(
                &model,
                &x1,
                &x2,
                &x[0],
                &cfg.plan,
                &cfg.weights,
                cfg.average_within,
                &mut ChaCha8Rng::seed_from_u64(9),
            )
            .map_err(|e| stica_core::tensor::TensorError::Invalid(e.to_string()))?;
            Ok(l.total)
        },
        &inputs,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    if !e2e.passed(1e-4) {
        let (i, _) = e2e.worst;
        let at = if i == 0 {
            "audio input".to_string()
        } else {
            names[i - 1].clone()
        };
        let (a, n) = e2e.worst_values;
        failed.push(format!(
            "total loss ({:.2e} at {at}[{}], analytic {a:.3e} numeric {n:.3e}; max |a-n| {:.1e})",
            e2e.max_relative_error, e2e.worst.1, e2e.max_abs_error
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "{count} ops worst {} {:.2e}; total loss {:.2e} over {} entries; {secs:.1}s",
        worst.0, worst.1, e2e.max_relative_error, e2e.entries_checked
    );
    if !failed.is_empty() {
        return Err(format!("{summary}; failing: {}", failed.join(", ")));
    }
    if secs >= 120.0 {
        return Err(format!("{summary}; over the 2 minute budget"));
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 2. NCE closed forms

/// Scalar transcription of the loss, independent of the tensor engine.
fn nce_oracle(sims: &[Vec<f64>], tau: f64) -> f64 {
    let n = sims.len();
    let mut total = 0.0;
    for (i, row) in sims.iter().enumerate() {
        let denom: f64 = row.iter().map(|s| (s / tau).exp()).sum();
        total -= ((row[i] / tau).exp() / denom).ln();
    }
    total / n as f64
}

fn criterion_nce() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = nce_loss(
        &param(&mut rng, &[1, 5], -1.0, 1.0),
        &param(&mut rng, &[1, 5], -1.0, 1.0),
        0.1,
    )
    .map_err(|e| e.to_string())?
    .item();
    if one != 0.0 {
        return Err(format!("N=1 gives {one}, not 0"));
    }
    let mut worst: f64 = 0.0;
    for n in [2usize, 4, 8, 64] {
        let row = random(&mut rng, &[6], -1.0, 1.0);
        let za = Tensor::from_vec(row.repeat(n), &[n, 6]).unwrap();
        let other = random(&mut rng, &[6], -1.0, 1.0);
        let zb = Tensor::from_vec(other.repeat(n), &[n, 6]).unwrap();
        let l = nce_loss(&za, &zb, 0.5).map_err(|e| e.to_string())?.item();
        worst = worst.max((l - (n as f64).ln()).abs());
    }
    if worst >= 1e-9 {
        return Err(format!("uniform similarities miss ln N by {worst:.2e}"));
    }
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let got = nce_loss(&eye, &eye, 0.5).map_err(|e| e.to_string())?.item();
    let oracle = nce_oracle(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.5);
    if (got - 0.126928).abs() > 1e-6 || (got - oracle).abs() > 1e-12 {
        return Err(format!("worked example {got:.9}, oracle {oracle:.9}"));
    }
    Ok(format!("N=1 exact 0; ln N within {worst:.1e}; worked example {got:.6}"))
}

// ---------------------------------------------------------------------------
// 3. pair-count law

fn criterion_pairs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in 0..=4usize {
        for n in 0..=4usize {
            let expected = 2 * ((m + n).pow(2) - n * n);
            // brute force: every ordered (side-1 view, side-2 view) pair in
            // both directions, minus the small-with-small ones
            let mut brute = BTreeSet::new();
            for a in 0..m + n {
                for b in 0..m + n {
                    if a < m || b < m {
                        brute.insert(((1u8, a), (2u8, b)));
                        brute.insert(((2u8, b), (1u8, a)));
                    }
                }
            }
            let listed: BTreeSet<_> = enumerate_crop_pairs(m, n)
                .into_iter()
                .map(|(x, y)| ((x.side, x.index), (y.side, y.index)))
                .collect();
            if brute.len() != expected || listed != brute {
                return Err(format!(
                    "m={m} n={n}: law {expected}, brute {}, listed {}",
                    brute.len(),
                    listed.len()
                ));
            }
            let view_set = |rng: &mut ChaCha8Rng, source| {
                let mut views = vec![(SizeClass::Large, param(rng, &[3, 4], -1.0, 1.0))];
                views.extend((0..m).map(|_| (SizeClass::Medium, param(rng, &[3, 4], -1.0, 1.0))));
                views.extend((0..n).map(|_| (SizeClass::Small, param(rng, &[3, 4], -1.0, 1.0))));
                ViewSet { source, views }
            };
            let (v1, v2) = (view_set(&mut rng, 1), view_set(&mut rng, 2));
            let w = within_modal_loss(&v1, &v2, 0.5, false).map_err(|e| e.to_string())?;
            let crop = |side: u8, i: usize| {
                let v = if side == 1 { &v1 } else { &v2 };
                v.crops().nth(i).unwrap().1.clone()
            };
            let sum: f64 = brute
                .iter()
                .map(|&((s1, a), (s2, b))| nce_loss(&crop(s1, a), &crop(s2, b), 0.5).unwrap().item())
                .sum();
            if w.terms != expected || (w.loss.item() - sum).abs() > 1e-9 * sum.abs().max(1.0) {
                return Err(format!(
                    "m={m} n={n}: loss has {} terms, value {} vs {sum}",
                    w.terms,
                    w.loss.item()
                ));
            }
        }
    }
    Ok("25 (m, n) settings match 2((m+n)^2 - n^2) and the brute-force loss sum".into())
}

// ---------------------------------------------------------------------------
// 4. feature-crop equivalence

fn criterion_crop_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = AvgPoolEncoder {
        temporal: 2,
        spatial: 8,
    };
    let v = Tensor::from_vec(random(&mut rng, &[3, 8, 56, 56], 0.0, 1.0), &[3, 8, 56, 56]).unwrap();
    let feat = enc.forward(&v).map_err(|e| e.to_string())?;
    let plan = CropPlan::desk();
    let mut checked = 0;
    while checked < 100 {
        for (_, tubes) in sample_feature_tubes(&plan, 1, &mut rng).map_err(|e| e.to_string())? {
            let tube = tubes[0];
            let input = tube.to_input(2, 8);
            let [_, h, w] = input.extents();
            let crop = input_crop_resize(&v, &input, [h, w]).map_err(|e| e.to_string())?;
            let a = feature_crop(&feat, &tube).map_err(|e| e.to_string())?.to_vec();
            let b = enc.forward(&crop).map_err(|e| e.to_string())?.to_vec();
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) || a.len() != b.len() {
                return Err(format!("tube {tube:?} differs"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} tubes bit-identical"))
}

// ---------------------------------------------------------------------------
// 5. mask discipline

fn criterion_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let keep = [true, false, true, false, true];
    let q = param(&mut rng, &[2, 5, 8], -2.0, 2.0);
    let (_, weights) = multihead_attention(&q, &q, &q, 4, &keep).map_err(|e| e.to_string())?;
    let w = weights.to_vec();
    let leaked = w
        .chunks(5)
        .flat_map(|row| row.iter().zip(keep).filter(|(_, k)| !k))
        .filter(|(x, _)| **x != 0.0)
        .count();
    if leaked > 0 {
        return Err(format!("{leaked} masked attention weights are nonzero"));
    }
    let mask = TimeMask::new(keep.to_vec()).unwrap();
    let mut trials = 0;
    for agg in [
        stica_core::nn::Aggregation::Mean,
        stica_core::nn::Aggregation::SummaryToken,
    ] {
        let pool = TransformerPool::new(
            &mut rng,
            TransformerConfig {
                aggregation: agg,
                ..TransformerConfig::new(8)
            },
        )
        .map_err(|e| e.to_string())?;
        let base = random(&mut rng, &[2, 8, 5], -1.0, 1.0);
        let out = pool
            .forward(
                &Tensor::from_vec(base.clone(), &[2, 8, 5]).unwrap(),
                &[0, 3],
                Some(&mask),
            )
            .unwrap();
        for scale in [1e-3, 1.0, 1e6] {
            let mut h = base.clone();
            for (i, v) in h.iter_mut().enumerate() {
                if !keep[i % 5] {
                    *v = rng.random_range(-1.0..1.0) * scale;
                }
            }
            let again = pool
                .forward(&Tensor::from_vec(h, &[2, 8, 5]).unwrap(), &[0, 3], Some(&mask))
                .unwrap();
            if out.to_vec() != again.to_vec() {
                return Err(format!(
                    "{agg:?} pool output moved when masked steps were perturbed at scale {scale}"
                ));
            }
            trials += 1;
        }
    }
    Ok(format!(
        "{} masked weights exactly 0; {trials} perturbations leave the pool output unchanged",
        w.len() * 2 / 5
    ))
}

// ---------------------------------------------------------------------------
// 6 to 8: pretraining runs

struct Trained {
    model: Model,
    data: stica_core::data::Dataset,
    means: Vec<f64>,
    secs: f64,
}

fn pretrain(cfg: PretrainConfig) -> Result<Trained, String> {
    let data = build_dataset(&cfg.data).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = run_pretraining(&cfg, &data.train, None, None).map_err(|e| e.to_string())?;
    Ok(Trained {
        means: epoch_means(&out.history),
        model: out.model,
        data,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn recall_at_1(t: &Trained) -> Result<f64, String> {
    let opts = EmbedOptions {
        num_clips: 10,
        spatial: SpatialReduce::Max,
    };
    let r = evaluate_retrieval(&t.model, &t.data.train, &t.data.test, opts, &[1]).map_err(|e| e.to_string())?;
    Ok(r[0].1)
}

fn probe_accuracy(t: &Trained) -> Result<f64, String> {
    let r = finetune_probe(
        &t.model,
        &t.data.train,
        &t.data.test,
        t.data.spec.num_classes,
        &ProbeConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok(r.test_accuracy)
}

fn criterion_learning() -> Outcome {
    let t = pretrain(PretrainConfig::default())?;
    let first = t.means[0];
    let last = *t.means.last().unwrap();
    let r1 = recall_at_1(&t)?;
    let summary = format!(
        "loss {first:.3} -> {last:.3} (ratio {:.3}); recall@1 {r1:.3}; {} train clips; {:.0}s",
        last / first,
        t.data.train.len(),
        t.secs
    );
    if last < 0.5 * first && r1 >= 0.60 && t.secs < 600.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Eight classes (four time-reversed pairs), 25 clips each.
fn ablation_config(seed: u64) -> PretrainConfig {
    let mut cfg = PretrainConfig {
        seed,
        ..Default::default()
    };
    cfg.data.num_classes = 8;
    cfg.data.per_class = 25;
    cfg
}

fn criteria_ablations() -> (Outcome, Outcome) {
    let mut crops = Vec::new();
    let mut cross_only = Vec::new();
    let mut gap = Vec::new();
    for seed in 0..3 {
        let full = pretrain(ablation_config(seed));
        let mut c = ablation_config(seed);
        c.weights.lambda_vv = 0.0;
        let no_crops = pretrain(c);
        let mut g = ablation_config(seed);
        g.model.pool = PoolKind::Average;
        let averaged = pretrain(g);
        match (full, no_crops, averaged) {
            (Ok(f), Ok(n), Ok(a)) => {
                crops.push((recall_at_1(&f), probe_accuracy(&f)));
                cross_only.push(recall_at_1(&n));
                gap.push(probe_accuracy(&a));
            }
            (f, n, a) => {
                let e = [f.err(), n.err(), a.err()]
                    .into_iter()
                    .flatten()
                    .collect::<Vec<_>>()
                    .join("; ");
                return (Err(e.clone()), Err(e));
            }
        }
    }
    let unwrap = |v: Vec<Result<f64, String>>| v.into_iter().collect::<Result<Vec<f64>, String>>();

    let seven = (|| {
        let transformer = unwrap(crops.iter().map(|c| c.1.clone()).collect())?;
        let averaged = unwrap(gap)?;
        let (mt, ma) = (median(transformer.clone()), median(averaged.clone()));
        let summary = format!(
            "probe accuracy transformer {transformer:?} (median {mt:.3}) vs average {averaged:?} (median {ma:.3}); margin {:.1} points",
            100.0 * (mt - ma)
        );
        if mt - ma >= 0.10 {
            Ok(summary)
        } else {
            Err(summary)
        }
    })();

    let eight = (|| {
        let with = unwrap(crops.iter().map(|c| c.0.clone()).collect())?;
        let without = unwrap(cross_only)?;
        let margins: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
        let m = median(margins.clone());
        let summary = format!(
            "recall@1 with crops {with:?} vs cross-modal only {without:?}; per-seed margins [{}], median {m:+.3}; difference of medians {:+.3}",
            margins.iter().map(|d| format!("{d:+.3}")).collect::<Vec<_>>().join(", "),
            median(with.clone()) - median(without.clone())
        );
        if m > 0.0 {
            Ok(summary)
        } else {
            Err(summary)
        }
    })();
    (seven, eight)
}

// ---------------------------------------------------------------------------
// 9. crop cost

fn criterion_bench() -> Outcome {
    // Means over five steps swing by 20% on a shared core; ten steps settle them.
    let cfg = BenchConfig {
        repeats: 10,
        warmup: 2,
        ..Default::default()
    };
    let report = crop_cost_benchmark(&cfg).map_err(|e| e.to_string())?;
    let ms = |s, k| {
        report
            .get(s, k)
            .map(|r| r.mean_ms)
            .ok_or_else(|| format!("missing row {k}"))
    };
    let f2 = ms(CropStrategy::FeatureCrop, 2)?;
    let f8 = ms(CropStrategy::FeatureCrop, 8)?;
    let i2 = ms(CropStrategy::InputCrop, 2)?;
    let i8 = ms(CropStrategy::InputCrop, 8)?;
    let summary = format!(
        "feature crop {f2:.1} -> {f8:.1} ms (x{:.2}); input crop {i2:.1} -> {i8:.1} ms (x{:.2})",
        f8 / f2,
        i8 / i2
    );
    if f8 / f2 <= 1.25 && i8 / i2 >= 2.5 && f2.min(i2) >= 50.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------------------
// 10. determinism and resume

fn criterion_determinism() -> Outcome {
    let cfg = parse_config_str(SMOKE, &[("train.epochs".into(), "3".into())])
        .map_err(|e| e.to_string())?
        .train;
    let data = build_dataset(&cfg.data).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, epochs: usize, resume: Option<&std::path::Path>| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let c = PretrainConfig { epochs, ..cfg.clone() };
        run_pretraining(&c, &data.train, Some(&out), resume).map_err(|e| e.to_string())?;
        std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())
    };
    let a = run("a", 3, None)?;
    let b = run("b", 3, None)?;
    if a != b {
        return Err("two identical runs wrote different metrics".into());
    }
    // stop after one epoch, then resume in the same directory
    run("c", 1, None)?;
    let ckpt = dir.path().join("c/checkpoint_epoch001.stca");
    let c = run("c", 3, Some(&ckpt))?;
    if c != a {
        return Err("resumed run diverged from the uninterrupted one".into());
    }
    let rows = String::from_utf8_lossy(&a).lines().count() - 1;
    Ok(format!(
        "{rows} metric rows identical across runs and across a resume at epoch 1"
    ))
}

/// `STICA_CRITERIA=1,2,9` runs a subset; by default every criterion runs.
fn selected(id: u8) -> bool {
    match std::env::var("STICA_CRITERIA") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn main() {
    let criteria: Vec<(u8, &str, Criterion)> = vec![
        // Timed first, before the other checks leave the heap fragmented.
        (9, "crop cost", Box::new(criterion_bench)),
        (1, "gradient integrity", Box::new(criterion_gradients)),
        (2, "NCE closed forms", Box::new(criterion_nce)),
        (3, "pair-count law", Box::new(criterion_pairs)),
        (4, "feature-crop equivalence", Box::new(criterion_crop_equivalence)),
        (5, "mask discipline", Box::new(criterion_masks)),
        (10, "determinism and resume", Box::new(criterion_determinism)),
        (6, "learning signal", Box::new(criterion_learning)),
    ];
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let guard = |f: &dyn Fn() -> Outcome| {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        })
    };
    for (id, name, f) in criteria.iter().filter(|c| selected(c.0)) {
        let r = guard(f.as_ref());
        report(*id, name, &r);
        results.push((*id, name, r));
    }
    if selected(7) || selected(8) {
        let (seven, eight) = catch_unwind(criteria_ablations).unwrap_or_else(|_| {
            let e = Err("panicked".to_string());
            (e.clone(), e)
        });
        report(7, "pooling direction of effect", &seven);
        report(8, "feature-crop direction of effect", &eight);
        results.push((7, "pooling direction of effect", seven));
        results.push((8, "feature-crop direction of effect", eight));
    }

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (id, name, r) in &results {
        println!(
            "criterion {id:>2} {:<34} {}",
            name,
            if r.is_ok() { "PASS" } else { "FAIL" }
        );
    }
    if results.iter().any(|r| r.2.is_err()) {
        std::process::exit(1);
    }
}

fn report(id: u8, name: &str, r: &Outcome) {
    match r {
        Ok(m) => println!("criterion {id} {name}: PASS: {m}"),
        Err(m) => println!("criterion {id} {name}: FAIL: {m}"),
    }
}
