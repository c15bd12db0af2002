//! Desk-scale training support: toy shape datasets, augmentation, the
//! smoothed loss, optimizers and schedules, metrics, and a training loop.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use data::{augment, generate_synthetic, AugmentConfig, Dataset, PointLabels, Shape, SyntheticSpec};
pub use loss::{argmax_rows, smoothed_cross_entropy};
pub use metrics::{instance_miou, keypoint_ap, keypoint_iou, mean_class_accuracy, overall_accuracy, KEYPOINT_THRESHOLD};
pub use optim::{cosine_lr, optimizer_registry, schedule_registry, Optimizer, OptimizerState, Schedule};
pub use trainer::{evaluate, EpochRecord, EvalReport, Flow, Task, TrainConfig, Trainer};
