//! Incremental domain adaptation: optimizer, EWC, checkpoints, parameter
//! parity and the schedule driver.

mod adam;
mod checkpoint;
mod ewc;
mod parity;
mod schedule;
mod train;

pub use adam::{AdamConfig, AdamState, ElementMask, FreezeMask};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC, VERSION,
};
pub use ewc::{compute_fisher, EwcState, Fisher};
pub use parity::{param_parity, Parity};
pub use schedule::{
    run_schedule, stream, DomainSchedule, IdaMethod, IdaRun, MethodKind, RunRecord, ScheduleEntry,
    ScheduleRun,
};
pub use train::{accuracy, predictions, train_domain, EpochStats, TrainConfig, TrainOutcome};
