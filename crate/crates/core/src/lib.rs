//! Issue-sensitive pragmatic captioning.
//!
//! Wraps any base caption speaker in incremental Rational Speech Acts
//! reasoning so that, given a target image and a partition of images into
//! cells, the caption singles out the target's cell.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod issue;
pub mod oracle;
pub mod prob;
pub mod rsa;
pub mod speaker;
pub mod synth;
pub mod world;

pub use error::{Error, Result};
