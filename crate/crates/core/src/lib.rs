//! Physics-guided emulation of prescribed-fire spread.
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff and Adam.
//! - [`sim`]: seeded cellular-automata fire simulator producing fuel-density sequences.
//! - [`emulator`]: stacked ConvLSTM with point, mixture-density and Poisson heads.
//! - [`losses`]: physics-guided loss terms and their weighted combination.
//! - [`metrics`]: MSE family, DMSE, physical-consistency percentages, timing.
//! - [`baselines`]: nearest-run retrieval by ignition pattern or wind.

pub mod baselines;
pub mod emulator;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod sim;
pub mod tensor;
