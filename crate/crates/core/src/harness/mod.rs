//! Synthetic data, the training loop, evaluation, configuration and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod io;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use corpus::{generate_corpus, SyntheticCorpus};
pub use model::{forward, Model, StepPlan};
pub use train::{pretrain, MetricsLog, Trainer};
