//! Training and evaluation: per-frame forward pass, the two-stage warm-up,
//! the joint optimization loop, metrics and checkpoints.

mod checkpoint;
mod config;
mod data;
mod eval;
mod model;
mod pseudo;
mod train;
mod warmup;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Section, CKPT_MAGIC, CKPT_VERSION};
pub use config::{Ablation, HierarchyConfig, LearningRates, TrainConfig};
pub use data::{template_hash, Dataset, Frame};
pub use eval::{evaluate, mean_loss, render_frame, EvalReport, FrameRender};
pub use model::{hex, FrameInput, FrameOutput, Model, ModelMeta, BACKGROUND, GROUPS};
pub use pseudo::{canonicalize_quaternions, fit_pseudo_gaussians, PseudoFit};
pub use train::{frame_loss, loss_csv, train, warm_start, write_loss_csv, LossRow, Trainer, TrainReport, WarmStart, DEAD_CHECK_ITERS, LOSS_CSV_HEADER};
pub use warmup::{anchor_center_error, warm_up, WarmupReport};
