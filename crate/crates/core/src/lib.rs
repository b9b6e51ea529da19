//! Instruction-guided editing of dynamic scenes treated as pseudo-3D scenes:
//! every fixed camera's video is one pseudo-view. Key pseudo-views are edited
//! with an anchor-aware frame editor through a flow-guided sliding window,
//! spread to the remaining views by depth-based warping, and a 4D appearance
//! field is fit to the regenerated dataset over several iterations.

// `!(x > 0.0)` checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod editor;
pub mod error;
pub mod field;
pub mod flow;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod propagate;
pub mod raster;
pub mod rawio;
pub mod scene;
pub mod window;

pub use error::{Error, Result};
