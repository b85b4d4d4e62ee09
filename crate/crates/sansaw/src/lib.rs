//! Semantic-aware feature alignment for domain-generalized segmentation.
//!
//! This crate implements instance normalization and whitening baselines (IN,
//! IW, GIW) together with their semantic-aware extensions: SAN, a multi-branch
//! masked + refined + regionally normalized transform with per-category affine
//! parameters, and SAW, a training-only whitening loss over groups of
//! category-related channels selected by classifier weights. Everything is
//! written against a small dense tensor type with hand-derived gradients, so
//! the whole pipeline can be verified against central finite differences.
//!
//! The crate also ships a procedural multi-domain synthetic benchmark
//! ([`domains`]), a minimal segmentation network with SGD training
//! ([`net`]), segmentation metrics and alignment diagnostics ([`eval`]),
//! and an experiment runner ([`runner`]) behind the `sansaw` binary.
//!
//! See the `examples/` directory for one runnable walkthrough per capability.

pub mod config;
pub mod domains;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod kmeans;
pub mod labels;
pub mod net;
pub mod nn;
pub mod norm;
pub mod rng;
pub mod runner;
pub mod san;
pub mod saw;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::LabelMap;
pub use rng::SeededRng;
pub use tensor::{Scalar, Tensor};
