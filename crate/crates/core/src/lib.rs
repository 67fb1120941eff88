//! Cached object-embedding retrieval and evaluation.
//!
//! Recognition is treated as retrieval: regions and text concepts live in one
//! embedding space and meet only at a dot product. That makes it possible to
//! cache per-image proposal embeddings once and answer any later concept
//! query, objectness probe or referring expression with inner products.
//!
//! The geometry and loss kernels are generic over [`Scalar`] (`f32`/`f64`);
//! the aliases below fix the precision used by the rest of the crate.

pub mod bench;
pub mod embedstore;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod probe;
pub mod recret;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod synthworld;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;

/// Scene-space box in double precision.
pub type BBox = geometry::Rect<f64>;
/// Single-precision box, the storage form inside the embedding cache.
pub type BBox32 = geometry::Rect<f32>;
pub type ScoredBox = geometry::Scored<f64>;
pub type Grid = geometry::FeatureGrid<f64>;
