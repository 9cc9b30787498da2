//! Minimal dense-tensor engine with a reverse-mode tape.
//!
//! Everything trained in this workspace runs on top of this crate: a
//! row-major [`Tensor`], a [`Graph`] that records primitive applications and
//! replays them backwards, named parameter collections, an AdamW optimizer,
//! a finite-difference gradient checker and a binary checkpoint format.
//!
//! The engine is generic over [`Real`] so that training runs in `f32` while
//! gradient checks run the identical code path in `f64`.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, RoleTag, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};
pub use params::{Bound, ParamBuilder, ParamId, ParameterSet};
pub use real::{Precision, Real};
pub use tensor::Tensor;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
