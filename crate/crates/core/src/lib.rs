//! Tree tensor network coarse-graining of tensor-product feature maps.
//!
//! The crate is `no_std` with `alloc`. File formats, parallel drivers and the
//! command-line tool live in the `arbor` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;

pub mod feature_map;
pub mod linalg;
pub mod models;
pub mod mps;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
pub use feature_map::{map_input, LocalMap, ProductFeature, ScaleMode};
pub use mps::Mps;
pub use tensor::{contract, matricize, DenseTensor};
pub use tree::{build_tree, BuildConfig, Isometry, LayerCount, TreeLayer, TreeNetwork};
