//! Exact input-space classification margins for single-hidden-layer ReLU
//! classifiers, together with the data, training, geometry and reporting
//! machinery needed to study how label and input corruption change them.

pub mod classifier;
pub mod data;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod geometry;
pub mod report;
pub mod solver;

pub use classifier::{argmax, Classifier, LinearClassifier, PairQuery};
pub use error::{Error, Result};
