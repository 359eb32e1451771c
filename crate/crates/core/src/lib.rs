//! Learned structure discovery for sparse Gaussian graphical models.
//!
//! A dilated convolutional edge estimator is trained on synthetic
//! `(empirical covariance, graph)` pairs and compared against classical
//! penalized-likelihood and shrinkage estimators.

pub mod archive;
pub mod baselines;
pub mod dnet;
pub mod eval;
pub mod graph_sim;
pub mod infer;
pub mod linalg;
pub mod seed;
pub mod train;

pub use graph_sim::{GeneratorConfig, GraphFamily, PrecisionSample, TrainingExample};
pub use linalg::{Matrix, SpdMatrix, SymmetricMatrix};
