//! Intention-aware interactive segmentation at desk scale.
//!
//! A coarse network re-estimates the target from the whole frame after every
//! click, an adaptive zoom-in crops around that estimate, and a fine network
//! segments the crop before the result is pasted back. Both networks carry a
//! feature propagation module that passes messages from the M click locations
//! to all N feature locations in O(MN).

pub mod cascade;
pub mod clicks;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evalbench;
pub mod gradcheck;
pub mod graph_prop;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
