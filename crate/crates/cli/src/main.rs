//! `stica`: pretraining, evaluation and benchmarking from a config file.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stica_core::config::{parse_config, RunConfig};
use stica_core::container::Container;
use stica_core::data::{build_dataset, Dataset};
use stica_core::eval::{
    append_eval_csv, av_heatmap, crop_cost_benchmark, evaluate_retrieval, finetune_probe, EmbedOptions, ProbeMode,
};
use stica_core::model::Model;
use stica_core::train::{epoch_means, run_pretraining};
use stica_core::{Error, Result};

#[derive(Parser)]
#[command(name = "stica", about = "Audio-visual contrastive learning with feature crops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; defaults to `$STICA_OUT/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Trained model for probe, retrieve and heatmap.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Checkpoint to continue pretraining from.
    #[arg(long, global = true, value_name = "PATH")]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train the model and write metrics and checkpoints.
    Pretrain,
    /// Fit a classifier on top of a checkpoint.
    Probe,
    /// Nearest-neighbour recall of test clips against the training set.
    Retrieve,
    /// Time input-space against feature-space crops.
    Bench,
    /// Render audio-visual correspondence maps as PGM images.
    Heatmap,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Probe => "probe",
            Command::Retrieve => "retrieve",
            Command::Bench => "bench",
            Command::Heatmap => "heatmap",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Tensor(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) => 5,
    }
}

type Overrides = Vec<(String, String)>;

/// Splits `args` into what clap sees and the generic `--key value`
/// overrides, which are any long flags containing a dot.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut known = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.contains('.')) else {
            known.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((known, overrides))
}

fn resolve(cli: &Cli, mut overrides: Overrides) -> Result<RunConfig> {
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = cli.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    for (key, path) in [
        ("out", &cli.out),
        ("checkpoint", &cli.checkpoint),
        ("resume", &cli.resume),
    ] {
        if let Some(p) = path {
            overrides.push((key.into(), p.display().to_string()));
        }
    }
    let mut cfg = parse_config(cli.config.as_deref(), &overrides)?;
    if cfg.out.is_none() {
        let root = std::env::var_os("STICA_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("stica_out"));
        cfg.out = Some(root.join(cli.command.name()));
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, command: &str) -> Result<Model> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "`{command}` needs a trained model: the `checkpoint` key is not set"
        ))
    })?;
    let ckpt = Container::read(path)?;
    if ckpt.config_digest != cfg.train.config_digest {
        return Err(Error::Config(format!(
            "{} was written under a different model or training configuration",
            path.display()
        )));
    }
    let model = Model::new(cfg.train.model.clone(), cfg.train.seed)?;
    model.load_named(&ckpt.tensors, "param.")?;
    Ok(model)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    build_dataset(&cfg.train.data)
}

fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.out.clone().expect("resolved output directory");
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.echo())?;
    let name = command.name();
    match command {
        Command::Pretrain => {
            let data = dataset(cfg)?;
            let outcome = run_pretraining(&cfg.train, &data.train, Some(&out), cfg.resume.as_deref())?;
            if let Some(last) = epoch_means(&outcome.history).last() {
                println!("final epoch mean loss {last:.4}");
            }
            if let Some(p) = outcome.final_checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Retrieve => {
            let model = load_model(cfg, name)?;
            let data = dataset(cfg)?;
            let opts = EmbedOptions {
                num_clips: cfg.eval.clips,
                spatial: cfg.eval.spatial,
            };
            let recall = evaluate_retrieval(&model, &data.train, &data.test, opts, &cfg.eval.ks)?;
            let rows: Vec<_> = recall
                .iter()
                .map(|&(k, r)| ("recall".to_string(), k.to_string(), r))
                .collect();
            for (_, k, r) in &rows {
                println!("recall@{k} {r:.4}");
            }
            append_eval_csv(&out.join("eval.csv"), &rows)?;
        }
        Command::Probe => {
            let model = load_model(cfg, name)?;
            let data = dataset(cfg)?;
            let result = finetune_probe(
                &model,
                &data.train,
                &data.test,
                data.spec.num_classes,
                &cfg.probe_config(),
            )?;
            let mode = match cfg.probe.mode {
                ProbeMode::Linear => "linear",
                ProbeMode::Full => "full",
            };
            println!(
                "{mode} probe: train {:.4} test {:.4}",
                result.train_accuracy, result.test_accuracy
            );
            append_eval_csv(
                &out.join("eval.csv"),
                &[
                    ("probe_train_accuracy".into(), mode.into(), result.train_accuracy),
                    ("probe_test_accuracy".into(), mode.into(), result.test_accuracy),
                ],
            )?;
        }
        Command::Bench => {
            let report = crop_cost_benchmark(&cfg.bench_config())?;
            fs::write(out.join("bench.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Heatmap => {
            let model = load_model(cfg, name)?;
            let data = dataset(cfg)?;
            for inst in data.test.iter().take(cfg.heatmap_count) {
                let map = av_heatmap(&inst.video, &inst.audio, &model)?;
                let file = out.join(format!("heatmap_{:04}.pgm", inst.instance_id));
                fs::write(&file, map.to_pgm())?;
                println!("{} peak at {:?}", file.display(), map.argmax());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (known, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(known) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli, overrides).and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
