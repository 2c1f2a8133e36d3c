//! Singing synthesis from word-level music scores.

pub mod align;
pub mod encoders;
pub mod error;
pub mod melstack;
pub mod numerics;
pub mod pddpm;
pub mod pipeline;
pub mod score;
pub mod wordattn;

pub use error::{Error, Result};
