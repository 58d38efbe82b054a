//! Retrieval-augmented vision-language pretraining at desk scale: a tape
//! autograd over f64 matrices, a knowledge graph store, an entity retriever,
//! vision/text/entity encoders, a relational graph attention encoder, a
//! fusion transformer, the four pretraining objectives and the training
//! harness.

pub mod autograd;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod gradcheck;
pub mod harness;
pub mod kg;
pub mod objectives;
pub mod params;
pub mod retriever;
pub mod rng;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use kg::{Direction, EntityId, KnowledgeGraph, Record, RelationId, Subgraph, Triplet};
pub use params::{BoundParams, ParamId, ParamStore};
pub use retriever::{EntityMemory, RetrievedEntity, RetrievedEntitySet};
pub use tensor::Tensor;
