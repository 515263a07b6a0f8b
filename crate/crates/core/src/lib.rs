//! Text-conditioned hypernetwork policies: a description is embedded,
//! projected and mapped by a hypernetwork to the weights of a small
//! controller, trained offline from expert demonstrations.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod experts;
pub mod latency;
pub mod model;
pub mod ndiff;
pub mod seed;
pub mod text;
pub mod train;

pub use baselines::{expert_prompts, BaselineModel, PromptSet};
pub use checkpoint::{Checkpoint, ModelKind};
pub use config::RunConfig;
pub use controller::{Controller, ControllerFile, Precision};
pub use dataset::{generate_dataset, split_tasks, OfflineDataset};
pub use envs::{Family, Level, RegistryKind, TaskSpec, Trajectory, Transition};
pub use error::{Error, Result};
pub use eval::{evaluate, instantiate, EvalReport, EvalSplit, PolicyFactory};
pub use latency::{bench_controller, BenchReport};
pub use model::{ModelConfig, TenetModel, Variant};
pub use ndiff::{Manifest, ParamVec};
pub use text::{HashEmbedder, ProviderSpec, TextEncoder};
pub use train::{train, Learner, LossRecord, RunMeta, TrainConfig};
