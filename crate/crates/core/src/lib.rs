pub mod cli;
pub mod codec;
pub mod distortions;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod lowdim;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
