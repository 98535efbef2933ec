//! Desk-scale DETR-style detection laboratory built around ranking-based
//! adaptive query generation.
//!
//! The detector predicts, per image, how many decoder queries it needs: a
//! ranking head regresses the rank of the lowest-scoring positive encoder
//! proposal, the query supplementer scales it, and the soft-gradient L1 loss
//! trains the head. Everything runs on a small reverse-mode autodiff engine
//! over synthetic crowded scenes.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod matching;
pub mod model;
pub mod raqg;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
