pub mod chartkernel;
pub mod checks;
pub mod compound;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod mmtransformer;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
