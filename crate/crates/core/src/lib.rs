//! Desk-scale laboratory for comparing DETR pre-training schemes on synthetic
//! detection data.

pub mod autodiff;
pub mod boxops;
pub mod evaluator;
pub mod losses;
pub mod matching;
pub mod model;
pub mod proposals;
pub mod scenes;
pub mod experiments;
mod error;

pub use error::{Error, Result};
