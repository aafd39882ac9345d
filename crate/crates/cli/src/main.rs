use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dmf::checkpoint::{assign_state, Checkpoint};
use dmf::flops::count_flops;
use dmf::model::ModelConfig;
use dmf::train::gradcheck::{run_gradcheck, Scope, DEFAULT_TOLERANCE};
use dmf::train::{evaluate, run_ablation, train, AblationSpec, SynthDataset, TrainConfig};
use dmf::Element;

#[derive(Parser)]
#[command(name = "dmf", version, about = "Dynamic Mobile-Former: train, evaluate and analyse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file (a training config, or a model config / preset name for `flops`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Run in 64-bit precision.
    #[arg(long = "f64")]
    f64: bool,
}

#[derive(Args)]
struct TrainFlags {
    /// Model preset or model config path.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ema_momentum: Option<f64>,
    #[arg(long)]
    drop_path: Option<f64>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    anneal_steps: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    prefetch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset; writes metrics.csv, summary.json and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on the synthetic train and validation splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the EMA weights stored in the checkpoint.
        #[arg(long)]
        ema: bool,
    },
    /// Per-module MAC and parameter counts.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Model preset (micro, tiny, dmf-xxs, dmf-xs, dmf-s); `--config` takes a file instead.
        #[arg(long, default_value = "dmf-s")]
        model: String,
        /// Input height and width.
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Print per-layer records.
        #[arg(long)]
        layers: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// primitive, block, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
    },
    /// Train every cell of an ablation matrix and print the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic dataset to disk.
    DatasetGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        /// Also write the validation split.
        #[arg(long)]
        with_val: bool,
    },
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut TrainConfig, f: &TrainFlags) {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = f.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(model, batch_size, lr, min_lr, warmup_steps, weight_decay, ema_momentum, tau_start, label_smoothing);
    set!(val_samples, checkpoint_every, prefetch);
    if f.drop_path.is_some() {
        cfg.drop_path = f.drop_path;
    }
    if f.anneal_steps.is_some() {
        cfg.anneal_steps = f.anneal_steps;
    }
}

fn run_train<T: Element>(cfg: &TrainConfig) -> Result<()> {
    let run = train::<T>(cfg)?;
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(())
}

fn run_eval<T: Element>(cfg: &TrainConfig, checkpoint: &Path, use_ema: bool) -> Result<()> {
    let ck = Checkpoint::<T>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ema = ck.ema.clone();
    let (mut model, step, _) = ck.into_model()?;
    if use_ema {
        if ema.is_empty() {
            bail!("{} holds no EMA weights", checkpoint.display());
        }
        assign_state(&mut model, &ema)?;
    }
    let train_acc = evaluate(&model, &SynthDataset::new(cfg.dataset)?, cfg.batch_size)?;
    let val_acc = evaluate(&model, &SynthDataset::new(cfg.val_spec())?, cfg.batch_size)?;
    let report = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "step": step,
        "weights": if use_ema { "ema" } else { "raw" },
        "model": model.config.name,
        "train_acc": train_acc,
        "val_acc": val_acc,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn write_out(dir: &Option<PathBuf>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, flags } => {
            let mut cfg = train_config(&common)?;
            apply_flags(&mut cfg, &flags);
            if common.f64 {
                run_train::<f64>(&cfg)?;
            } else {
                run_train::<f32>(&cfg)?;
            }
        }
        Command::Eval {
            common,
            checkpoint,
            ema,
        } => {
            let cfg = train_config(&common)?;
            if common.f64 {
                run_eval::<f64>(&cfg, &checkpoint, ema)?;
            } else {
                run_eval::<f32>(&cfg, &checkpoint, ema)?;
            }
        }
        Command::Flops {
            common,
            model,
            size,
            layers,
        } => {
            let cfg = match &common.config {
                Some(p) => ModelConfig::load(&p.to_string_lossy())?,
                None => ModelConfig::load(&model)?,
            };
            let report = count_flops(&cfg, [cfg.in_channels, size, size])?;
            if layers {
                for r in &report.records {
                    println!("{:<48} {:>12} {:>10} {}", r.name, r.macs, r.params, r.kind.name());
                }
                println!();
            }
            print!("{}", report.table());
            write_out(&common.out, "flops.json", &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Gradcheck { common, scope, tol } => {
            let scopes = match scope.as_str() {
                "all" => vec![Scope::Primitive, Scope::Block, Scope::Model],
                s => vec![s.parse::<Scope>()?],
            };
            if !common.f64 {
                eprintln!("note: gradient checks always run in f64");
            }
            let mut ok = true;
            let mut reports = Vec::new();
            for s in scopes {
                let r = run_gradcheck(s, tol, common.seed.unwrap_or(0))?;
                print!("{}", r.table());
                ok &= r.passed();
                reports.push(r);
            }
            write_out(&common.out, "gradcheck.json", &serde_json::to_string_pretty(&reports)?)?;
            return Ok(ok);
        }
        Command::Ablate { common } => {
            let mut spec = match &common.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    AblationSpec::from_toml(&text)?
                }
                None => AblationSpec::default_matrix(TrainConfig {
                    steps: 300,
                    warmup_steps: 30,
                    ..Default::default()
                }),
            };
            if let Some(s) = common.seed {
                spec.train.seed = s;
            }
            if let Some(s) = common.steps {
                spec.train.steps = s;
                spec.train.warmup_steps = spec.train.warmup_steps.min(s);
            }
            if let Some(o) = common.out {
                spec.train.out_dir = Some(o);
            }
            let report = run_ablation(&spec)?;
            print!("{}", report.table());
            return Ok(report.cells.iter().all(|c| c.error.is_none()));
        }
        Command::DatasetGen {
            common,
            samples,
            with_val,
        } => {
            let cfg = train_config(&common)?;
            let out = common.out.context("dataset-gen needs --out <dir>")?;
            let mut spec = cfg.dataset;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            if let Some(n) = samples {
                spec.samples = n;
            }
            let meta = SynthDataset::new(spec)?.write(out.join("train"))?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
            if with_val {
                let val = TrainConfig {
                    dataset: spec,
                    ..cfg.clone()
                }
                .val_spec();
                let meta = SynthDataset::new(val)?.write(out.join("val"))?;
                println!("{}", serde_json::to_string_pretty(&meta)?);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
