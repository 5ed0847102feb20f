//! Early-exit CNN inference for sensor streams.
//!
//! The crate provides a small tensor engine with exact multiply-accumulate
//! accounting, an early-exit graph that can run partially and resume, the
//! temporal termination policies (Difference Detection and Temporal Patience)
//! alongside confidence and single-exit baselines, a synthetic scene-structured
//! stream generator, and the benchmark protocol that compares them.

pub mod bench;
pub mod config;
pub mod error;
pub mod graph;
pub mod ops;
pub mod par;
pub mod policy;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ExitGraph, Frame, PartialRun};
pub use policy::{PolicyConfig, PolicyKind, StepResult};
pub use stream::{StreamConfig, StreamSample};
pub use tensor::{MacCount, Tensor};
