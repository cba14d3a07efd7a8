//! Feature attention (FA) and selective feature attention (SFA) blocks for
//! Siamese text matching, a reference matcher that hosts them, numerical
//! checks of their gradient paths, and a small experiment harness.

pub mod blocks;
pub mod error;
pub mod gradflow;
pub mod harness;
pub mod matcher;
pub mod params;

pub use error::{Error, Result};
pub use params::Params;
