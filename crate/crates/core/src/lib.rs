//! Perception, control and simulation for multi-task UNet lane keeping.

mod error;
pub mod control;
pub mod data;
pub mod model;
pub mod perception;
pub mod sim;
pub mod track;

pub use error::{Error, Result};
