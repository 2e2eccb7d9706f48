//! Hypergraph learning on functional-connectivity matrices.
//!
//! The pipeline: estimate an N x N FC matrix per subject (Pearson or
//! Ledoit-Wolf shrinkage), build a k-NN hypergraph over the ROIs (one
//! hyperedge per ROI containing its k-1 strongest correlates), propagate
//! features through row-normalized hypergraph convolutions with learnable
//! positive hyperedge weights, pool nodes with gated attention, and classify
//! with a sigmoid head. Training runs on a small reverse-mode autodiff tape
//! ([`autodiff::Graph`]) whose gradients are verified against central finite
//! differences.
//!
//! Modules:
//! - [`matrix`]: dense row-major f64 matrices.
//! - [`autodiff`]: define-by-run tape, backward sweep, gradient checker.
//! - [`hypergraph`]: FC validation, k-NN hyperedges, propagation operator.
//! - [`model`]: layers, parameters, forward graph, HGAL checkpoints.
//! - [`data`]: FC estimators, synthetic data, FCM1/manifest formats, splits.
//! - [`train`]: BCE + Adam training loop, metrics, cross-validation, ablations.
//! - [`interpret`]: ROI attention rankings and hyperedge pattern exports.

pub mod autodiff;
mod binio;
pub mod data;
pub mod error;
pub mod hypergraph;
pub mod interpret;
pub mod matrix;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use hypergraph::{build_knn_hyperedges, FCMatrix, Hypergraph};
pub use matrix::DenseMatrix;
pub use model::{HyperParams, ModelParams, ReadoutKind};
pub use train::{MetricsReport, TrainConfig};
