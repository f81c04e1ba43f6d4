pub mod design;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod regress;
pub mod simlab;

pub use error::{RdaError, Result};
