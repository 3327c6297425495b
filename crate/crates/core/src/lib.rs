//! Learned word affinities for document images.
//!
//! Words are grouped into contextual lines, described by style, content and
//! geometry features, and embedded by a Siamese network trained on
//! automatically generated must-link / cannot-link constraints. Lines whose
//! words have high mutual affinity are merged into clusters that edits can be
//! propagated across.

pub mod clustering;
pub mod config;
pub mod constraints;
pub mod document;
pub mod edits;
pub mod error;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod synth;
pub mod union_find;
pub mod util;

pub use error::{Error, Result};
