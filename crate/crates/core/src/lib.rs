pub mod error;
pub mod attention;
pub mod backbone;
pub mod tasks;
pub mod trainer;
pub mod numerics;
pub mod diagnostics;

pub use error::{Error, Result};
