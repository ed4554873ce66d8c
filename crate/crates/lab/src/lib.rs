//! Files, checkpoints, experiment runners and the `decode-lab` command line
//! around [`decode_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod files;
pub mod gradcheck;
pub mod manifest;
pub mod parallel;

pub use error::{LabError, Result};
