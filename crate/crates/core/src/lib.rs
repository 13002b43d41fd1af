pub mod analysis;
pub mod attention;
mod binio;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use binio::hex;
pub use error::{Error, Result};
