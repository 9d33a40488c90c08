//! Differentiation engine: tape graph, parameter store, optimizers and
//! checkpoint I/O.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{GradMap, Graph, TensorId};
pub use optim::{sgd_step, Adam, AdamConfig, Lion, LionConfig};
pub use params::{Param, ParamStore, Partition, PartitionSet};
