//! Dense vector/matrix primitives, seeded RNG, and randomized/exact SVD.
//!
//! Everything here is pure given (inputs, [`Rng`]): two calls with the same
//! arguments and RNG state produce bit-identical results on any platform.

mod error;
mod mat;
mod rng;
mod svd;

pub use error::NumKitError;
pub use mat::Mat;
pub use rng::{hash_str, mix64, Rng};
pub use svd::{
    exact_svd_small, orthonormal_columns, randomized_svd, subspace_energy, sym_eigen,
};
