pub mod backbone;
pub mod checkpoint;
pub mod comparison;
pub mod data;
pub mod diagnosis;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod param;
pub mod predictor;
pub mod tensor;
pub mod training;
pub mod vse;

pub use error::{Error, Result};
