//! Multimodal learning with element-wise Laplacian dropout.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the command-line tool uses.

pub mod audit;
pub mod autodiff;
pub mod data;
pub mod gumbel;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod random;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Budget64 = privacy::PrivacyBudget<f64>;
pub type Rates64 = privacy::DropoutRates<f64>;
pub type Features64 = privacy::FeatureVector<f64>;
