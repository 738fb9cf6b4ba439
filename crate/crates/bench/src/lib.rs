//! Synthetic data, baseline regressions and the prediction benchmark.

pub mod benchmark;
pub mod evaluate;
pub mod gaussian;
pub mod nonspatial;
pub mod simulate;

pub use simulate::{simulate, PlantedEffect, SyntheticConfig, SyntheticData, Truth};
