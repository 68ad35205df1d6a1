pub mod autodiff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod optim;
pub mod quant;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
