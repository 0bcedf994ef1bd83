//! Toy multi-site model with low-rank adapters, trained end to end on data
//! carrying a planted spurious output direction.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, Stage, CHECKPOINT_KIND};
pub use data::{make_dataset, DataConfig, SpuriousDataset};
pub use model::{Activation, Adapter, AdapterMode, ModelConfig, ToyModel};
pub use optim::{adamw_step, sgd_step, OptimConfig, OptimizerKind, OptimizerState};
pub use train::{train_naive, train_projected, ConstraintTrace, EvalPoint, Lab, TrainConfig, TrainRun};
