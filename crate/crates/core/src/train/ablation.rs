//! Ablation matrix over the dynamic-convolution switches.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dyconv::{DyConvOptions, ScoreMode, StaticInit};
use crate::error::{Error, Result};
use crate::flops::count_flops;
use crate::model::{Model, ModelConfig};
use crate::train::data::CHANNELS;
use crate::train::trainer::{train_model, TrainConfig};

pub const BANNER: &str = "NOTE: accuracies below come from a small synthetic task. They are not \
comparable to ImageNet results and do not reproduce published ablation deltas.";

/// Changes applied to the base model's dynamic-convolution options.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub kernels: Option<usize>,
    pub score_mode: Option<ScoreMode>,
    pub token_input: Option<bool>,
    pub residual: Option<bool>,
    pub static_init: Option<StaticInit>,
}

impl CellSpec {
    pub fn apply(&self, opts: &mut DyConvOptions) {
        if let Some(k) = self.kernels {
            opts.kernels = k;
        }
        if let Some(m) = self.score_mode {
            opts.score_mode = m;
        }
        if let Some(t) = self.token_input {
            opts.token_input = t;
        }
        if let Some(r) = self.residual {
            opts.residual = r;
        }
        if let Some(i) = self.static_init {
            opts.static_init = i;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub train: TrainConfig,
    /// The first cell is the reference for FLOPs deltas.
    pub cells: Vec<CellSpec>,
}

impl AblationSpec {
    /// One-factor-at-a-time matrix around the full method over the residual,
    /// token-input, score-mode and kernel-count axes, the combined "plain
    /// dynamic conv" corner, and the static-kernel initialization.
    pub fn default_matrix(train: TrainConfig) -> Self {
        let cell = |name: &str| CellSpec {
            name: name.into(),
            ..Default::default()
        };
        let mut cells = vec![
            cell("full"),
            CellSpec {
                residual: Some(false),
                static_init: Some(StaticInit::Random),
                ..cell("no-residual")
            },
            CellSpec {
                token_input: Some(false),
                ..cell("no-token-input")
            },
            CellSpec {
                residual: Some(false),
                token_input: Some(false),
                static_init: Some(StaticInit::Random),
                ..cell("plain-dynamic")
            },
            CellSpec {
                score_mode: Some(ScoreMode::Softmax),
                ..cell("softmax")
            },
            CellSpec {
                static_init: Some(StaticInit::Random),
                ..cell("random-init")
            },
        ];
        for k in [1, 2, 4, 8] {
            cells.push(CellSpec {
                kernels: Some(k),
                ..cell(&format!("K={k}"))
            });
        }
        AblationSpec { train, cells }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: AblationSpec = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        if spec.cells.is_empty() {
            return Err(Error::config("cells: the matrix needs at least one cell"));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub options: Option<DyConvOptions>,
    pub macs: Option<u64>,
    /// MACs relative to the reference cell.
    pub macs_delta: Option<i64>,
    pub params: Option<u64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_ms: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub banner: String,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!("{}\n\n", self.banner);
        out += &format!(
            "{:<16} {:>3} {:>8} {:>6} {:>6} {:>12} {:>10} {:>10} {:>8} {:>9}\n",
            "cell", "K", "score", "token", "resid", "MACs", "dMACs", "train_acc", "val_acc", "wall_s"
        );
        let opt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        for c in &self.cells {
            let o = c.options;
            out += &format!(
                "{:<16} {:>3} {:>8} {:>6} {:>6} {:>12} {:>10} {:>10} {:>8} {:>9.1}",
                c.name,
                o.map_or("-".into(), |o| o.kernels.to_string()),
                o.map_or("-".into(), |o| o.score_mode.to_string()),
                o.map_or("-".into(), |o| o.token_input.to_string()),
                o.map_or("-".into(), |o| o.residual.to_string()),
                c.macs.map_or("-".into(), |m| m.to_string()),
                c.macs_delta.map_or("-".into(), |d| format!("{d:+}")),
                opt(c.train_acc),
                opt(c.val_acc),
                c.wall_ms as f64 / 1000.0,
            );
            if let Some(e) = &c.error {
                out += &format!("  FAILED: {e}");
            }
            out += "\n";
        }
        out
    }
}

/// Model config of one cell.
pub fn cell_model_config(base: &ModelConfig, cell: &CellSpec) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cell.apply(&mut cfg.dyconv);
    cfg.dynamic = true;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every cell with the same seed and data. A failing cell is
/// reported and the rest of the matrix still runs.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    let base = spec.train.model_config()?;
    let s = spec.train.dataset.image_size;
    let mut cells = Vec::with_capacity(spec.cells.len());
    let mut reference: Option<u64> = None;
    for (i, cell) in spec.cells.iter().enumerate() {
        let started = Instant::now();
        let mut result = CellResult {
            name: cell.name.clone(),
            options: None,
            macs: None,
            macs_delta: None,
            params: None,
            train_acc: None,
            val_acc: None,
            final_loss: None,
            wall_ms: 0,
            error: None,
        };
        let outcome = (|| -> Result<()> {
            let cfg = cell_model_config(&base, cell)?;
            result.options = Some(cfg.dyconv);
            let flops = count_flops(&cfg, [CHANNELS, s, s])?;
            result.macs = Some(flops.total_macs());
            result.params = Some(flops.total_params());
            if i == 0 {
                reference = Some(flops.total_macs());
            }
            result.macs_delta = reference.map(|r| flops.total_macs() as i64 - r as i64);
            let mut train_cfg = spec.train.clone();
            train_cfg.out_dir = spec.train.out_dir.as_ref().map(|d| d.join(sanitize(&cell.name)));
            let run = train_model::<f32>(&train_cfg, Model::new(cfg)?)?;
            result.train_acc = Some(run.summary.final_train_acc);
            result.val_acc = Some(run.summary.val_acc);
            result.final_loss = Some(run.summary.last.loss);
            Ok(())
        })();
        if let Err(e) = outcome {
            result.error = Some(e.to_string());
        }
        result.wall_ms = started.elapsed().as_millis() as u64;
        cells.push(result);
    }
    let report = AblationReport {
        banner: BANNER.into(),
        cells,
    };
    if let Some(dir) = &spec.train.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.txt");
        std::fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("ablation.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}
