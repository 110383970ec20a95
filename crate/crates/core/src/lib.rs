pub mod cli;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nncore;
pub mod trainer;

pub use error::{Error, Result};
