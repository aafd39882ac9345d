use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, NamedTensors};
use crate::dyconv::TemperatureSchedule;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Ctx;
use crate::tensor::ops;
use crate::tensor::{no_grad, Element, Tensor};

use super::data::{hex, BatchStream, DatasetSpec, SynthDataset};
use super::ema::Ema;
use super::optim::{AdamW, AdamWConfig};
use super::schedule::LrSchedule;

fn default_model() -> String {
    "micro".into()
}

/// Desk-scale training recipe. Every field can be set from a TOML file;
/// omitted fields keep the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Path of a model config file, or a bundled preset name.
    #[serde(default = "default_model")]
    pub model: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub ema_momentum: f64,
    /// Overrides the model's drop-path rate when set.
    pub drop_path: Option<f64>,
    pub tau_start: f64,
    /// Steps over which τ decays to 1; defaults to `steps`.
    pub anneal_steps: Option<usize>,
    pub label_smoothing: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    /// Size of the held-out split (rendered from a different seed).
    pub val_samples: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Batches rendered ahead on a worker thread (0 = synchronous).
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: default_model(),
            steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            ema_momentum: 0.999,
            drop_path: None,
            tau_start: 30.0,
            anneal_steps: None,
            label_smoothing: 0.0,
            seed: 0,
            out_dir: None,
            dataset: DatasetSpec::default(),
            val_samples: 500,
            checkpoint_every: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("{field}: {why}")));
        if self.steps == 0 {
            return bad("steps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps", "must not exceed steps");
        }
        // lr = 0 is allowed: it turns a run into a no-op on the parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a finite non-negative number");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr.max(self.min_lr) && self.min_lr.is_finite()) {
            return bad("min_lr", "must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "AdamW betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", "must lie in [0, 1)");
        }
        if let Some(p) = self.drop_path {
            if !(0.0..1.0).contains(&p) {
                return bad("drop_path", "must lie in [0, 1)");
            }
        }
        TemperatureSchedule::new(self.tau_start, self.anneal_steps())?;
        SynthDataset::new(self.dataset)?;
        Ok(())
    }

    pub fn anneal_steps(&self) -> usize {
        self.anneal_steps.unwrap_or(self.steps)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            floor: self.min_lr.min(self.lr),
            warmup: self.warmup_steps,
            total: self.steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// The model config this run trains, with run-level overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::load(&self.model)?;
        self.apply_overrides(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&self, cfg: &mut ModelConfig) {
        if let Some(p) = self.drop_path {
            cfg.drop_path = p;
        }
        cfg.num_classes = self.dataset.classes;
    }

    pub fn val_spec(&self) -> DatasetSpec {
        DatasetSpec {
            samples: self.val_samples.max(self.dataset.classes),
            seed: self.dataset.seed.wrapping_add(0x5eed),
            ..self.dataset
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub train_acc: f64,
    pub ema_gap: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,loss,lr,tau,train_acc,ema_gap,wall_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{:e},{}",
            self.step, self.loss, self.lr, self.tau, self.train_acc, self.ema_gap, self.wall_ms
        )
    }

    /// Equality ignoring the wall clock.
    pub fn same_run(&self, other: &MetricsRow) -> bool {
        let bits = |r: &MetricsRow| {
            [r.loss, r.lr, r.tau, r.train_acc, r.ema_gap].map(f64::to_bits)
        };
        self.step == other.step && bits(self) == bits(other)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub last: MetricsRow,
    pub config_hash: String,
    pub model_config_hash: String,
    /// Accuracy of the final raw weights over the whole training split.
    pub final_train_acc: f64,
    pub final_ema_train_acc: f64,
    pub val_acc: f64,
    pub ema_val_acc: f64,
}

pub struct TrainOutcome<T: Element> {
    pub model: Model<T>,
    pub ema: Ema<T>,
    pub rows: Vec<MetricsRow>,
    pub summary: TrainSummary,
}

/// Hex SHA-256 of a run's full configuration (train + resolved model).
pub fn config_hash(cfg: &TrainConfig, model: &ModelConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml());
    h.update(model.to_toml());
    hex(&h.finalize())
}

/// Fraction of rows of `logits` whose arg-max equals the label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.dim(1);
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Eval-mode accuracy of `model` over every sample of `data`.
pub fn evaluate<T: Element>(model: &Model<T>, data: &SynthDataset, batch: usize) -> Result<f64> {
    no_grad(|| {
        let mut hits = 0.0;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (x, y) = data.batch::<T>(chunk);
            let logits = model.forward(&x, &mut Ctx::eval())?;
            hits += accuracy(&logits, &y) * y.len() as f64;
        }
        Ok(hits / data.len() as f64)
    })
}

/// Trains a fresh model built from `cfg.model`.
pub fn train<T: Element>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let model_cfg = cfg.model_config()?;
    train_model(cfg, Model::new(model_cfg)?)
}

/// Trains `model` in place according to `cfg`.
pub fn train_model<T: Element>(cfg: &TrainConfig, mut model: Model<T>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = config_hash(cfg, &model.config);
    let data = SynthDataset::new(cfg.dataset)?;
    let tau = TemperatureSchedule::new(cfg.tau_start, cfg.anneal_steps())?;
    let lr = cfg.schedule();
    let mut opt = AdamW::new(cfg.adamw());
    let mut ema = Ema::new(&model, cfg.ema_momentum);
    let mut stream = BatchStream::new(data.clone(), cfg.batch_size, cfg.seed, cfg.steps, cfg.prefetch);
    model.enable_grad();

    let mut log = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", MetricsRow::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tau_now = tau.at(step);
        let lr_now = lr.lr_at(step + 1);
        let (x, y) = stream.next_batch::<T>();
        let mut ctx = Ctx::train(tau_now, cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let logits = model.forward(&x, &mut ctx).map_err(|e| diverged(e, step))?;
        let loss = ops::cross_entropy(&logits, &y, cfg.label_smoothing).map_err(|e| diverged(e, step))?;
        let loss_value = loss.item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        loss.backward()?;
        drop(loss);
        opt.step(&mut model, lr_now)?;
        ema.update(&model);
        let row = MetricsRow {
            step: step + 1,
            loss: loss_value,
            lr: lr_now,
            tau: tau_now,
            train_acc: accuracy(&logits, &y),
            ema_gap: ema.gap(&model),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
        }
        rows.push(row);
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let shadow = ema.shadow.clone();
                write_checkpoint(&model, step as u64 + 1, &shadow, &dir.join(format!("step-{:06}.ckpt", step + 1)))?;
            }
        }
    }

    let eval_batch = cfg.batch_size.max(64);
    let val = SynthDataset::new(cfg.val_spec())?;
    let ema_model = ema.materialize(&model)?;
    let summary = TrainSummary {
        last: rows.last().cloned().expect("steps > 0"),
        config_hash: hash,
        model_config_hash: model.config.hash(),
        final_train_acc: evaluate(&model, &data, eval_batch)?,
        final_ema_train_acc: evaluate(&ema_model, &data, eval_batch)?,
        val_acc: evaluate(&model, &val, eval_batch)?,
        ema_val_acc: evaluate(&ema_model, &val, eval_batch)?,
    };
    if let Some(dir) = &cfg.out_dir {
        write_checkpoint(&model, cfg.steps as u64, &ema.shadow, &dir.join("final.ckpt"))?;
        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        ema,
        rows,
        summary,
    })
}

fn write_checkpoint<T: Element>(model: &Model<T>, step: u64, ema: &NamedTensors<T>, path: &Path) -> Result<()> {
    Checkpoint::capture(model, step, Some(ema)).save(path)
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}
