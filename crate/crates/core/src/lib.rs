//! Penalized maximum likelihood estimation of multi-layered Gaussian graphical models.
//!
//! Nodes are split into ordered layers. Directed edges run from earlier layers to later ones
//! (regression matrices `B^{st}`), undirected edges live inside a layer (precision matrices
//! `Θ^m` of the layer errors). Estimation of an `M`-layer model splits into `M − 1`
//! two-layer problems plus a graphical Lasso on the bottom layer; each two-layer problem is
//! solved by screening, alternating block coordinate descent, refitting and stability selection.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases below fix `f64`.

pub mod error;
pub mod evalkit;
pub mod multilayer;
pub mod numkit;
pub mod scalar;
pub mod screening;
pub mod simgen;
pub mod solvers;
pub mod tuning;
pub mod twolayer;

pub use error::{GgmError, Result};
pub use scalar::Real;

pub type Matrix = numkit::DenseMatrix<f64>;
pub type Spd = numkit::SpdMatrix<f64>;
