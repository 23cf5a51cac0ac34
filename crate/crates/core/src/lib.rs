mod error;

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod masks;
pub mod nnprim;
pub mod objective;
pub mod patchify;
pub mod probe;
pub mod trainer;

pub use error::{Error, Result};
