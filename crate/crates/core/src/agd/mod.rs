//! Alternating-gradient-descent training: task sampling, plan caching,
//! optimization and checkpointing.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod plan;
pub mod task;
pub mod trainer;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest};
pub use metrics::{read_metrics, MetricsWriter, PlanUse, RoutingRecord, StepMetrics};
pub use optim::{adam_update, AdamConfig, LrSchedule, Moments};
pub use plan::{InputShape, PlanCache, PlanCacheSnapshot, TaskSignature};
pub use task::{make_variants, InputVariant, Resolution, TaskGroup, TaskRegistry, TaskSpec};
pub use trainer::{LossOutput, RngStreams, TrainMode, TrainState, Trainer, Workload};
