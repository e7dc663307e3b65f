pub mod cli;
pub mod conflict;
pub mod error;
pub(crate) mod select;
pub mod sweep;
pub mod synth;
pub mod taskvec;
pub mod tensorio;
pub mod tiescore;

pub use error::{Error, FormatError, Result};
