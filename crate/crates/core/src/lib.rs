//! Structure-aligned model watermarking: embed watermark bits as
//! structure-aligned color patterns into image-processing-model outputs,
//! extract and decode them for forensics, and stress the scheme against
//! surrogate-model attacks trained with data augmentation.

pub mod attack;
pub mod augment;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod forensics;
pub mod image_core;
pub mod loss;
pub mod metrics;
pub mod networks;
pub mod pipeline;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod structure;
pub mod training;
pub mod watermark;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training scalar type. All desk-scale training and inference runs in f32;
/// oracles in tests use f64 through the same generic code.
pub type Real = f32;
pub type Img = image_core::Image<Real>;
pub type Tensor = ndarray::Array4<Real>;
