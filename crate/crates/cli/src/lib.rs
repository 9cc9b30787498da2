//! Command implementations behind the `gf` binary.
//!
//! Every command writes its artifacts plus a JSON manifest into one run
//! directory; [`rerun`] replays a manifest into a fresh directory.

pub mod ablate;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod plot;

pub use commands::{execute, rerun, RunContext};
pub use error::{CliError, Result};
pub use manifest::{Artifacts, FileRef, Invocation, RunManifest};
