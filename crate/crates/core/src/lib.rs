pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numcore;
pub mod replay;
pub mod strategies;

pub use error::{Error, Result};
