//! Dense linear algebra, a general real eigensolver, and seeded randomness.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{eigenvalues, sort_spectrum, spectral_radius, MAX_DIM};
pub use matrix::DenseMatrix;
pub use num_complex::Complex64 as ComplexScalar;
pub use rng::SeededRng;
