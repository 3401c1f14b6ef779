//! Iteratively re-weighted generalized least squares with the covariance
//! shape chosen by leave-one-out simple kriging.

use nalgebra::{DMatrix, DVector};

use super::nelder_mead::{minimize, NmOptions};
use super::{param_names, pack_params, FitOptions, FitResult};
use crate::error::{arg, Error, Result};
use crate::forward::{build_design_matrix, default_series_depth, CovariateSeries, ModelParams};
use crate::grid::{FieldSeries, SpatialGrid};
use crate::kernel::PropagationParams;
use crate::spatial_cov::{CovFamily, SpatialCovModel};
use crate::st_cov::st_covariance_many;

/// Leave-one-out simple kriging predictions `r^_i = gamma_i^T
/// Sigma_(-i)^{-1} r_(-i)` for every entry of `r`, via the identity `r_i -
/// r^_i = (Sigma^{-1} r)_i / (Sigma^{-1})_ii`.
pub fn simple_kriging_loo(sigma: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    if sigma.nrows() != r.len() || sigma.ncols() != r.len() {
        return arg("covariance and residual sizes differ");
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("kriging covariance is not positive definite".into()))?;
    let alpha = chol.solve(r);
    let inv = chol.inverse();
    Ok(DVector::from_fn(r.len(), |i, _| r[i] - alpha[i] / inv[(i, i)]))
}

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        return Err(Error::Size { size: n, cap });
    }
    Ok(())
}

/// Joint covariance of the stacked field (time-major, site-minor) under
/// `params`, from the space-time covariance at every grid offset and lag.
fn joint_covariance(params: &ModelParams, grid: &SpatialGrid, n_times: usize, delta: f64) -> Result<DMatrix<f64>> {
    let (nx, ny) = (grid.nx() as i64, grid.ny() as i64);
    let h = grid.spacing();
    let (wx, wy) = (2 * nx - 1, 2 * ny - 1);
    let mut queries = Vec::with_capacity((wx * wy) as usize * n_times);
    for lag in 0..n_times {
        for dy in -(ny - 1)..ny {
            for dx in -(nx - 1)..nx {
                queries.push(((dx as f64 * h, dy as f64 * h), lag));
            }
        }
    }
    let table = st_covariance_many(params, delta, &queries)?;
    let ns = grid.n_sites();
    let n = ns * n_times;
    let at = |dx: i64, dy: i64, lag: usize| table[lag * (wx * wy) as usize + ((dy + ny - 1) * wx + dx + nx - 1) as usize];
    Ok(DMatrix::from_fn(n, n, |a, b| {
        let (ta, sa) = (a / ns, a % ns);
        let (tb, sb) = (b / ns, b % ns);
        let (ra, ca) = ((sa / nx as usize) as i64, (sa % nx as usize) as i64);
        let (rb, cb) = ((sb / nx as usize) as i64, (sb % nx as usize) as i64);
        // displacement from the earlier to the later observation
        if tb >= ta {
            at(cb - ca, rb - ra, tb - ta)
        } else {
            at(ca - cb, ra - rb, ta - tb)
        }
    }))
}

fn unit_sill_model(family: CovFamily, shape: &[f64]) -> Result<SpatialCovModel> {
    let mut theta = vec![1.0];
    theta.extend_from_slice(shape);
    SpatialCovModel::new(family, &theta)
}

/// Sum of squared leave-one-out kriging errors of the residuals under the
/// model's joint covariance. Independent of the sill.
pub fn kriging_cv_objective(residuals: &FieldSeries, params: &ModelParams, opts: &FitOptions) -> Result<f64> {
    let n = residuals.values().len();
    check_cap(n, opts.irwgls_cap)?;
    let sigma = joint_covariance(params, residuals.grid(), residuals.n_times(), residuals.times().delta())?;
    let r = DVector::from_column_slice(residuals.values());
    let pred = simple_kriging_loo(&sigma, &r)?;
    Ok((r - pred).norm_squared())
}

fn default_shape(family: CovFamily, grid: &SpatialGrid) -> Vec<f64> {
    let h = grid.spacing();
    match family {
        CovFamily::Exponential => vec![2.0 * h],
        CovFamily::Gaussian => vec![4.0 * h * h],
        CovFamily::Matern => vec![2.0 * h, 1.0],
    }
}

/// Shape parameters minimizing [`kriging_cv_objective`], with the sill set
/// to the maximum likelihood scale `r^T R^{-1} r / n` of the unit-sill joint
/// correlation `R`.
pub fn kriging_cv_theta(
    residuals: &FieldSeries,
    family: CovFamily,
    prop: &PropagationParams,
    init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<SpatialCovModel> {
    let n = residuals.values().len();
    check_cap(n, opts.irwgls_cap)?;
    let start = match init {
        Some(s) if s.len() == family.n_params() - 1 => s.to_vec(),
        Some(_) => return arg("initial shape has the wrong length"),
        None => default_shape(family, residuals.grid()),
    };
    let model_at = |z: &[f64]| -> Result<ModelParams> {
        let shape: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        ModelParams::new(*prop, unit_sill_model(family, &shape)?, Vec::new())
    };
    let objective = |z: &[f64]| -> f64 {
        if z.iter().any(|v| v.abs() > 30.0) {
            return f64::INFINITY;
        }
        model_at(z).and_then(|m| kriging_cv_objective(residuals, &m, opts)).unwrap_or(f64::INFINITY)
    };
    let z0: Vec<f64> = start.iter().map(|v| v.ln()).collect();
    let step = vec![0.5; z0.len()];
    let nm = NmOptions { max_evals: 400, xtol: 0.1 * opts.irwgls_tol, ftol: 0.0 };
    let best = minimize(objective, &z0, &step, &nm);
    if !best.f.is_finite() {
        return Err(Error::Numerical("kriging objective is not finite".into()));
    }
    let unit = model_at(&best.x)?;
    let sigma = joint_covariance(&unit, residuals.grid(), residuals.n_times(), residuals.times().delta())?;
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("joint correlation is not positive definite".into()))?;
    let r = DVector::from_column_slice(residuals.values());
    let scale = r.dot(&chol.solve(&r)) / n as f64;
    unit.spat.with_sill(scale)
}

/// `(X^T W X)^{-1} X^T W y` given `W X` and `W y`, with the inverse normal
/// matrix.
fn gls(x: &DMatrix<f64>, sigma_inv_x: &DMatrix<f64>, sigma_inv_y: &DVector<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let xtx = x.transpose() * sigma_inv_x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Rank("design matrix is rank deficient under the current weights".into()))?;
    let beta = chol.solve(&(x.transpose() * sigma_inv_y));
    Ok((beta.iter().copied().collect(), chol.inverse()))
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    new.iter()
        .zip(old)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// Alternates generalized least squares for `beta` with kriging
/// cross-validation for the covariance parameters, the propagation
/// parameters being known. The first pass uses the identity weight, so it
/// starts from ordinary least squares.
pub fn irwgls_fit(
    y: &FieldSeries,
    cov: &CovariateSeries,
    family: CovFamily,
    prop_known: &PropagationParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    if y.grid() != cov.grid() || y.times() != cov.times() {
        return arg("field and covariates do not share a grid and time axis");
    }
    if cov.k() == 0 {
        return arg("at least one covariate is required");
    }
    let n = y.values().len();
    check_cap(n, opts.irwgls_cap)?;
    let grid = *y.grid();
    let (nt, delta) = (y.n_times(), y.times().delta());
    let depth = default_series_depth(prop_known.lambda, delta, nt);
    let x = build_design_matrix(prop_known, cov, depth, &opts.forward)?.matrix().clone();
    let yv = DVector::from_column_slice(y.values());

    let (mut beta, _) = gls(&x, &x, &yv)?;
    let mut shape = default_shape(family, &grid);
    let mut theta: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last = None;
    for _ in 0..opts.irwgls_max_iter {
        iterations += 1;
        let resid = &yv - &x * DVector::from_column_slice(&beta);
        let rs = FieldSeries::new(grid, *y.times(), resid.iter().copied().collect())?;
        let spat = kriging_cv_theta(&rs, family, prop_known, Some(&shape), opts)?;
        let params = ModelParams::new(*prop_known, spat.clone(), beta.clone())?;
        let sigma = joint_covariance(&params, &grid, nt, delta)?;
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::Numerical("joint covariance is not positive definite".into()))?;
        let (new_beta, beta_cov) = gls(&x, &chol.solve(&x), &chol.solve(&yv))?;
        let new_theta = spat.theta().to_vec();
        let done = !theta.is_empty()
            && rel_change(&new_beta, &beta) < opts.irwgls_tol
            && rel_change(&new_theta, &theta) < opts.irwgls_tol;
        beta = new_beta;
        theta = new_theta;
        shape = theta[1..].to_vec();
        last = Some((chol, beta_cov));
        if done {
            converged = true;
            break;
        }
    }
    let (chol, beta_cov) = last.expect("at least one iteration");
    let params = ModelParams::new(*prop_known, SpatialCovModel::new(family, &theta)?, beta.clone())?;
    let resid = &yv - &x * DVector::from_column_slice(&beta);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let loglik = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + resid.dot(&chol.solve(&resid)));

    let names = param_names(family, cov.k());
    let estimates = pack_params(&params);
    let m = estimates.len();
    let k = cov.k();
    let mut cov_estimates = DMatrix::from_element(m, m, f64::NAN);
    let mut std_errors = vec![f64::NAN; m];
    for i in 0..k {
        for j in 0..k {
            cov_estimates[(m - k + i, m - k + j)] = beta_cov[(i, j)];
        }
        std_errors[m - k + i] = beta_cov[(i, i)].max(0.0).sqrt();
    }
    let mut diagnostics = Vec::new();
    if !converged {
        diagnostics.push(format!("no convergence within {} iterations", opts.irwgls_max_iter));
    }
    Ok(FitResult {
        family,
        params,
        loglik,
        names,
        estimates,
        std_errors,
        cov_estimates,
        iterations,
        evaluations: iterations,
        converged,
        pseudo_inverse: false,
        diagnostics,
    })
}
