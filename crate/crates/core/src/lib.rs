//! Strictly orthogonal neural-network weights of arbitrary rectangular
//! shape, built from Lie-algebra parameters: construction, Toeplitz-form
//! convolution, reverse-mode training, norm-stability experiments, and
//! bit-exact model storage.

pub mod autograd;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod lab;
pub mod lie;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod store;
pub mod weight;

pub use error::{Error, Result};
pub use lie::{expm, lie_to_skew, unpack, ExpmConfig, LieParams, SkewSymmetric};
pub use matrix::{l2_norm, random_gaussian, Matrix, Tensor4};
pub use rng::Rng;
pub use weight::{
    apply_weight, build_weight, flatten_filters, reshape_to_filters, FilterSpec, UnitaryWeight,
};
