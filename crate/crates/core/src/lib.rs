//! Semantic-affine transformation for point cloud segmentation.
//!
//! Mid-level decoder features are normalized per point and re-scaled with
//! class-specific affine parameters, blended by the point's predicted class
//! confidences. The class parameters and the class masks that produce those
//! confidences come from a Transformer decoder whose queries are learnable
//! per-class embeddings.
//!
//! Everything here runs on a small from-scratch reverse-mode tape
//! ([`tensor`]) so that every gradient can be checked against central
//! differences.

pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod model;
pub mod scene;
pub mod nn;
pub mod semaffine;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
