pub mod autodiff;
pub mod cli;
pub mod envs;
mod error;
pub mod losses;
pub mod policy;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
