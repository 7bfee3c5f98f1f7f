//! Locality-sensitive hashing with learned hash functions.
//!
//! The crate contains a classical p-stable E2LSH index, a small dense
//! network substrate, the learned pipeline that replaces the E2LSH hash
//! families with `L` parallel two-layer networks, exact kNN baselines and
//! the metrics used to compare all of them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Datasets on
//! disk are always `f32`; network training runs in `f64`.

pub mod baselines;
pub mod e2lsh;
pub mod error;
pub mod eval;
pub mod knn;
pub mod llsh;
pub mod neural;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod serial;
pub mod vecdata;

pub use error::{Error, Result};
pub use knn::Neighbor;
pub use scalar::Scalar;

/// Raw dataset as stored on disk.
pub type Dataset = vecdata::Dataset<f32>;
/// Encoded (autoencoder output) dataset.
pub type Dataset64 = vecdata::Dataset<f64>;
/// Network used for training and inference.
pub type Mlp64 = neural::Mlp<f64>;
/// Network at export precision.
pub type Mlp32 = neural::Mlp<f32>;
pub type KdTree32 = baselines::KdTree<f32>;
pub type BallTree32 = baselines::BallTree<f32>;
pub type BruteIndex32 = baselines::BruteIndex<f32>;
