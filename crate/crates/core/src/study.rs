//! Reference simulation-study setup: parameter values and a synthetic
//! covariate with three localized high-generation regions.

use rand::Rng;

use crate::error::Result;
use crate::forward::{simulate, CovariateSeries, ForwardOptions, ModelParams};
use crate::grid::{Field2, FieldSeries, SpatialGrid, TimeAxis};
use crate::kernel::PropagationParams;
use crate::spatial_cov::{CovFamily, SpatialCovModel};

/// Centres of the generation regions as fractions of the grid extent.
pub const REGION_CENTRES: [(f64, f64); 3] = [(0.25, 0.3), (0.7, 0.25), (0.5, 0.75)];
/// Standard deviation of each region, in cells.
pub const REGION_WIDTH: f64 = 2.0;

/// `lambda = 0.1`, `v = (0, 0.5)`, `rho = (1, 0.25)`, covariance of the
/// given family with sill 0.01 and range 5 (smoothness 1.5 for Matern),
/// `beta = 1`.
pub fn study_params(family: CovFamily) -> ModelParams {
    let prop = PropagationParams::new(0.1, (0.0, 0.5), 1.0, 0.25).expect("valid constants");
    let spat = match family {
        CovFamily::Gaussian => SpatialCovModel::gaussian(0.01, 5.0),
        CovFamily::Exponential => SpatialCovModel::exponential(0.01, 5.0),
        CovFamily::Matern => SpatialCovModel::matern(0.01, 5.0, 1.5),
    }
    .expect("valid constants");
    ModelParams::new(prop, spat, vec![1.0]).expect("valid constants")
}

/// Relative growth of the generation rate per unit time.
pub const GROWTH: f64 = 0.05;

/// One covariate: three Gaussian bumps whose amplitudes oscillate in time
/// with different phases around a slow linear growth.
pub fn study_covariates(grid: SpatialGrid, times: TimeAxis) -> Result<CovariateSeries> {
    let (nx, ny) = (grid.nx() as f64, grid.ny() as f64);
    let centres: Vec<(f64, f64)> = REGION_CENTRES.iter().map(|(fx, fy)| (fx * (nx - 1.0), fy * (ny - 1.0))).collect();
    CovariateSeries::from_fn(grid, times, 1, |t, _, row, col| {
        centres
            .iter()
            .enumerate()
            .map(|(k, (cx, cy))| {
                let d2 = (col as f64 - cx).powi(2) + (row as f64 - cy).powi(2);
                let t = times.time(t);
                let amp = (1.0 + GROWTH * t) * (1.0 + 0.5 * (0.7 * t + 2.1 * k as f64).sin());
                amp * (-0.5 * d2 / (REGION_WIDTH * REGION_WIDTH)).exp()
            })
            .sum()
    })
}

/// Simulates one data set on an `n x n` grid with `n_times` unit steps,
/// starting from a zero field.
pub fn simulate_study<R: Rng + ?Sized>(
    params: &ModelParams,
    n: usize,
    n_times: usize,
    rng: &mut R,
) -> Result<(FieldSeries, CovariateSeries)> {
    let grid = SpatialGrid::new(n, n)?;
    let times = TimeAxis::new(n_times, 1.0, 0.0)?;
    let cov = study_covariates(grid, times)?;
    let y = simulate(params, &cov, &Field2::zeros(n, n), rng, &ForwardOptions::default())?;
    Ok((y, cov))
}
