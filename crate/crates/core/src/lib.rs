//! Concept-based explanations for text classifiers.
//!
//! The pipeline splits a classifier into a non-negative feature extractor
//! `h` and a head `c`, factorizes the activations of class excerpts into
//! concepts with NMF, ranks the concepts by total Sobol indices of the
//! class logit under concept masking, and attributes concepts back to words
//! or clauses through occlusion. Fidelity curves and annotation alignment
//! evaluate the resulting explanations.

pub mod alignment;
pub mod corpus;
pub mod error;
pub mod excerpts;
pub mod fidelity;
pub mod matrixio;
pub mod nmf;
pub mod occlusion;
pub mod provider;
pub mod report;
pub mod sobol;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrixio::DenseMatrix;
