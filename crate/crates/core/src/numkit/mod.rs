//! Numeric substrate: dense matrices, Cholesky-based determinants, symmetric eigenvalues,
//! seeded Gaussian sampling and the CSV matrix interchange format.

mod csv_io;
mod linalg;
mod matrix;
mod random;

pub use csv_io::{load_matrix, read_matrix_csv, save_matrix, write_matrix_csv};
pub use linalg::{
    center_columns, eig_extremes, inverse_general, log_det_spd, sample_covariance, solve_general,
    symmetric_eigenvalues, Cholesky, SpdMatrix,
};
pub use matrix::DenseMatrix;
pub(crate) use matrix::dot;
pub use random::{mvn_sample, mvn_sample_checked, RngSeed};
