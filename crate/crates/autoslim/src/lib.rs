//! Channel-number architecture search with a weight-shared slimmable network.
//!
//! The toolkit has two phases. First a single slimmable network is trained so
//! that any channel configuration inside the width bounds can run with the
//! shared weights (`slimtrain`). Then the trained network is used as a cheap
//! accuracy estimator and channel groups are removed greedily, one per step,
//! producing optimized channel configurations for every resource budget in a
//! single pass (`slimsearch`). Found configurations are retrained from
//! scratch. `resource` prices any configuration (Multiply-Adds, parameters,
//! memory, model size, latency proxy); `engine` is the minimal deterministic
//! compute backend; `data` and `pipeline` provide dataset ingestion and the
//! end-to-end command flow behind the `autoslim` binary.

pub mod data;
pub mod engine;
pub mod netspec;
pub mod pipeline;
pub mod resource;
pub mod slimsearch;
pub mod slimtrain;

pub use netspec::{ChannelConfig, LayerKind, LayerSpec, NetworkSpec, WidthBounds};
pub use resource::{Budget, Metric, ResourceReport};
