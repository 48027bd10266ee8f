//! Toy-scale Pre-LN transformer training and depth-utilization diagnostics.
//!
//! The crate splits into a numeric kernel (`tensor`, `graph`, `rng`), a
//! configurable decoder-only model with full per-layer tracing (`model`),
//! a deterministic training loop (`train`), instantaneous diagnostics
//! (`probes`), layer-effectiveness scores (`effectiveness`), a Monte-Carlo
//! engine for variance-propagation bounds (`theory`), and the experiment
//! runner (`expconfig`, `artifact`).

pub mod artifact;
pub mod effectiveness;
pub mod expconfig;
pub mod graph;
pub mod model;
pub mod probes;
pub mod theory;
pub mod train;
pub mod rng;
pub mod tensor;

pub use graph::{finite_diff_check, Graph, Grads, NodeId};
pub use rng::Rng;
pub use tensor::{softmax_rows, KernelError, Tensor};
