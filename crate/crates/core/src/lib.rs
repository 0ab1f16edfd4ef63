pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod blocks;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
