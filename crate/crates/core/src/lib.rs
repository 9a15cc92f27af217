//! Discriminative region suppression (DRS) for weakly-supervised
//! localization, on top of a small reverse-mode autodiff engine.

pub mod data;
pub mod drs;
pub mod error;
pub mod kv;
pub mod labeling;
pub mod networks;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, NodeId, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

/// Every engine operation plus the composed suppression blocks, for
/// gradient checking.
pub fn gradcheck_suite() -> Vec<tensor::gradcheck::GradCase> {
    let mut cases = tensor::gradcheck::engine_cases();
    cases.extend(drs::gradcheck_cases());
    cases
}
