//! Few-shot semantic segmentation with semantic-preserving feature learning
//! and a self-refined online foreground-background classifier.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod ftns;
pub mod gemm;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod pnm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
pub mod kmeans;
pub mod model;
pub mod prototypes;
pub mod pseudo_label;
pub mod region;
pub mod seeds;
pub mod spfl;
pub mod srofb;
