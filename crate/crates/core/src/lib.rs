//! Incremental bag-level classification with a queryable prototype pool.
//!
//! Instances are aggregated into bag features under the guidance of
//! (key, prompt) prototype pairs selected from a shared pool, then scored
//! against text-derived class features plus per-class tunable vectors. Training
//! proceeds dataset by dataset; a frequency penalty steers later datasets toward
//! prototype keys earlier datasets did not use.

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pool;
pub mod scalar;
pub mod seeds;
pub mod store;
pub mod synth;
pub mod trainer;

pub use data::{ClassRegistry, DatasetOrder, DatasetSplit, IncrementalSequence, InstanceBag};
pub use error::{Error, Result};
pub use eval::{CrossValReport, ExperimentSpec, Method, PerformanceMatrix, RunMetrics};
pub use linalg::Matrix;
pub use model::{AblationFlags, ModelConfig, QpmilModel};
pub use pool::{MatchStats, PenaltyRule, PoolConfig, PrototypePool, QueryMode};
pub use scalar::Scalar;
pub use synth::{generate_sequence, GeneratorConfig};
pub use trainer::{train_finetune_baseline, train_incremental, train_joint, TrainConfig};

/// Double-precision model, the default for training and evaluation.
pub type Model = QpmilModel<f64>;
/// Single-precision model.
pub type ModelF32 = QpmilModel<f32>;
pub type Pool = PrototypePool<f64>;
pub type Bag = InstanceBag<f64>;
pub type Sequence = IncrementalSequence<f64>;
