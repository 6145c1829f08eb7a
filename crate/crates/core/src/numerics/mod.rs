//! Dense linear algebra, sampling, dense layers with exact gradients, and Adam.

pub mod adam;
pub mod layer;
pub mod linalg;
pub mod matrix;
pub mod sampling;

pub use adam::{AdamConfig, AdamState};
pub use layer::{Activation, DenseLayer, LayerCache, LayerGradients};
pub use linalg::{cholesky, cholesky_solve, general_inverse, spd_inverse};
pub use matrix::{axpy, dot, Matrix};
pub use sampling::{derive_seed, sample_mvn, sample_mvn_precision, sample_wishart, seeded_rng, SeededRng};
