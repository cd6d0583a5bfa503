//! Boosted historical function-on-function regression.

pub mod baselearners;
pub mod boostcore;
pub mod cli;
pub mod error;
pub mod fdgrid;
pub mod linalg;
pub mod simgen;
pub mod splines;
pub mod uncertainty;

pub use error::{Error, Result};
