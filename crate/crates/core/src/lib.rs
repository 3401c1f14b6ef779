//! Convolution-based spatio-temporal degradation model.
//!
//! The crate covers kernel discretization, forward simulation, the implied
//! space-time covariance, parameter estimation, model validation and
//! first-passage lifetime analysis, plus a spectral reference solver for the
//! advection-diffusion limit.

pub mod bessel;
pub mod error;
mod fft;
pub mod fit;
pub mod forward;
pub mod grid;
pub mod kernel;
pub mod lifetime;
pub mod pde_oracle;
mod quad;
pub mod rng;
pub mod spatial_cov;
pub mod st_cov;
pub mod study;
pub mod validate;

pub use error::{Error, Result};
pub use forward::{CovariateSeries, DesignMatrix, ForwardOptions, ModelParams};
pub use grid::{Field2, FieldSeries, SpatialGrid, TimeAxis};
pub use kernel::{BoundaryMode, DiscreteKernel, KernelSpec, PropagationParams};
pub use spatial_cov::{CovFamily, CovMatrix, NoiseSampler, SpatialCovModel};
