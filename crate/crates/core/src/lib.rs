//! Propagating a single edited slice through a volumetric segmentation.
//!
//! A frozen 3D encoder-decoder produces a baseline prediction and caches an
//! intermediate decoder activation. A user edit on one axial slice is pushed
//! back into that activation by gradient descent on the activation itself;
//! a learned fusion of the original and updated activations then repairs the
//! slices the direct update cannot reach.

pub mod backbone;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod update;
pub mod volume;

pub use error::{Error, Result};
