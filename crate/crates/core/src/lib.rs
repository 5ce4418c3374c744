//! Left-prompt-guided generation with a small rectified-flow transformer.
//!
//! A reference canvas sits on the left, the target on the right; the model
//! sees the stitched canvas together with a masked copy and the mask itself,
//! and learns the rectified-flow velocity for the whole canvas. The right
//! half of the sampled canvas is the result.

pub mod error;
pub mod eval;
pub mod flow;
pub mod image_io;
pub mod lpg;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod taskdata;

pub use error::{Error, Result};
