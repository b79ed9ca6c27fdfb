//! crlab-core: a desk-scale semi-supervised-learning laboratory.
//!
//! Trains small MLPs on synthetic labeled/unlabeled mixtures with
//! consistency regularization and pseudo-label contrastive regularization,
//! with every loss gradient verified against a finite-difference oracle.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};
