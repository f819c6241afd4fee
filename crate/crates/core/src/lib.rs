#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod nonclassicality;
pub mod pdt;
pub mod pipeline;
#[allow(clippy::excessive_precision)]
pub mod quadrature;
pub mod source;

pub use error::{Error, Result};
pub use exec::Execution;
