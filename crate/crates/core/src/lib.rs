//! Set-prediction label assignment laboratory.
//!
//! Compares One-to-One, One-to-Many and Group-wise One-to-Many assignment
//! for a small detection-transformer decoder trained on synthetic scenes.

pub mod assign;
pub mod boxes;
pub mod diffcore;
pub mod evalkit;
pub mod groupdecoder;
pub mod matchcost;
pub mod querystats;
pub mod scenes;

mod error;
pub use error::{Error, Result};
