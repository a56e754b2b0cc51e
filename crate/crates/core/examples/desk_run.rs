//! Pretrains on the default synthetic task and reports loss, retrieval and
//! a linear probe.
//!
//! `cargo run --release -p stica-core --example desk_run -- [epochs] [seed] [gap]`

use std::time::Instant;

use stica_core::data::build_dataset;
use stica_core::eval::{evaluate_retrieval, finetune_probe, EmbedOptions, ProbeConfig};
use stica_core::model::{PoolKind, SpatialReduce};
use stica_core::train::{epoch_means, run_pretraining, PretrainConfig};

fn main() -> stica_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = PretrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    if args.get(3).map(String::as_str) == Some("gap") {
        cfg.model.pool = PoolKind::Average;
    }
    let ds = build_dataset(&cfg.data)?;
    let start = Instant::now();
    let out = run_pretraining(&cfg, &ds.train, None, None)?;
    println!("trained {epochs} epochs in {:.1}s", start.elapsed().as_secs_f64());
    let means: Vec<f64> = epoch_means(&out.history)
        .iter()
        .map(|m| (m * 1000.0).round() / 1000.0)
        .collect();
    println!("epoch means: {means:?}");
    for spatial in [SpatialReduce::Max, SpatialReduce::Average] {
        let opts = EmbedOptions { num_clips: 10, spatial };
        let r = evaluate_retrieval(&out.model, &ds.train, &ds.test, opts, &[1, 5])?;
        println!("retrieval {spatial:?}: {r:?}");
    }
    let p = finetune_probe(
        &out.model,
        &ds.train,
        &ds.test,
        cfg.data.num_classes,
        &ProbeConfig::default(),
    )?;
    println!(
        "linear probe: train {:.3} test {:.3}",
        p.train_accuracy, p.test_accuracy
    );
    Ok(())
}
