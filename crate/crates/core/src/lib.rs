//! Global aggregation (GA) and local distribution (LD) context modules for
//! dense prediction, with brute-force oracles, finite-difference gradient
//! checks, segmentation metrics, a synthetic training task and complexity
//! benchmarks.
//!
//! All values are rank-4 `f64` tensors in NCHW layout ([`Tensor`]). Every
//! differentiable operation returns its output together with a
//! [`BackwardFn`] mapping an upstream gradient to gradients for each input
//! and parameter.

pub mod autograd;
pub mod bench;
pub mod error;
pub mod ga;
pub mod ld;
pub mod metrics;
pub mod ops;
pub mod oracles;
pub mod parallel;
pub mod params;
pub mod registry;
pub mod tensor;
pub mod toy;
pub mod verify;

pub use error::{GaldError, Result};
pub use ops::{BackwardFn, MacCounter};
pub use tensor::{approx_eq, concat_channels, FillSpec, Shape4, Tensor};
