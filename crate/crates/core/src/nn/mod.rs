//! Network specifications, instances, checkpoints and the builtin roster.

pub mod builtin;
pub mod checkpoint;
mod network;
pub mod spec;

pub use checkpoint::Container;
pub use network::{BoundParams, Code, NetworkInstance, TrainingMeta};
pub use spec::{Activation, LayerKind, LayerSpec, NetworkSpec};
