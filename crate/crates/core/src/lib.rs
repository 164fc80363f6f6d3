//! Input gradient distillation for adversarial training, Gini inequality of
//! attribution maps, and noise/occlusion robustness evaluation.

pub mod attacks;
pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod inequality;
pub mod models;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
