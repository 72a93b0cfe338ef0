//! Auto-regressive sequence generation with interchangeable attention cache
//! layouts, n-gram blocking kernels and batch pipelines.

pub mod accounting;
pub mod attention;
pub mod decode;
pub mod error;
pub mod model;
pub mod ngram;
pub mod pipeline;
pub mod registry;
pub mod tensor;

pub use error::{Error, Result};
