//! Class-aware teacher mechanics for class-imbalanced domain-adaptive detection.
//!
//! - [`relation`]: streaming, EMA-smoothed class-confusion estimate.
//! - [`bank`]: per-class FIFO crop banks, one per domain.
//! - [`augment`]: relation-weighted instance MixUp.
//! - [`loss`]: inter-class loss weights and weighted cross-entropy.
//! - [`teacher`]: mean-teacher EMA, schedule and pseudo-label thresholding.
//! - [`sim`]: oracle detector, matching, metrics and a training stand-in.

pub mod augment;
pub mod bank;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod loss;
pub mod relation;
pub mod sim;
pub mod teacher;
pub mod types;

pub use error::{Error, Result};
pub use relation::{ClassRelationMatrix, MatchedPair, Predicted};
pub use types::{AnnotatedInstance, BBox, Domain, LabeledImage};
