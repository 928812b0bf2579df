//! The coupled training loop and checkpoint files.

mod checkpoint;
mod fit;
mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fit::{fit, history_csv, write_history_csv, EpochRecord, FitOutcome};
pub use step::{
    condition, draw_target, head_loss, instance_loss, patch_targets, train_step, HeadTarget, StepStats, TrainConfig,
};
