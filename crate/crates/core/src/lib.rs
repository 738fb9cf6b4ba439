//! Spatial von Mises–Fisher regression for directional data along streamlines.

pub mod ar;
pub mod diagnostics;
pub mod geometry;
pub mod inference;
pub mod link;
pub mod mcmc;
pub mod model;
pub mod rng;
mod serde_rows;
#[cfg(test)]
mod testutil;
pub mod vmf;

pub use geometry::{CayleyParams, Rotation3, UnitVector3};
pub use link::LinkedCoords;
pub use vmf::VmfParams;
