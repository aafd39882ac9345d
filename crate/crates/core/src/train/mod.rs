//! Desk-scale training harness: synthetic data, AdamW with warmup + cosine
//! schedule, EMA, the ablation runner and the finite-difference checker.

pub mod ablation;
pub mod data;
pub mod ema;
pub mod gradcheck;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use data::{batch_indices, BatchStream, DatasetMeta, DatasetSpec, SynthDataset};
pub use ema::{ema_update, Ema};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use schedule::{lr_at, LrSchedule};
pub use trainer::{accuracy, config_hash, evaluate, train, train_model, MetricsRow, TrainConfig, TrainOutcome, TrainSummary};
pub use ablation::{run_ablation, AblationReport, AblationSpec, CellSpec};
pub use gradcheck::{run_gradcheck, GradcheckReport, Scope};
