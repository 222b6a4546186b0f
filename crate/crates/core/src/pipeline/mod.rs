//! End-to-end training: configuration, datasets, student training and
//! the ablation study.

pub mod ablation;
pub mod config;
pub mod data;
pub mod features;
pub mod train;

pub use ablation::{run_ablation, AblationReport, AblationRow};
pub use config::{RunConfig, Supervision, Toggles};
pub use data::{generate_dataset, read_dataset, write_dataset, Dataset};
pub use features::{point_features, POINT_FEATURES};
pub use train::{continue_training, evaluate, train_student, Checkpoint, EvalSet};
