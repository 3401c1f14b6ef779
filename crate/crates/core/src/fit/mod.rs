//! Parameter estimation: whitening of the recursion, the likelihood of the
//! whitened process, maximum likelihood by multi-start simplex search, and
//! iteratively re-weighted generalized least squares with kriging
//! cross-validation.

mod irwgls;
mod nelder_mead;
mod report;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::forward::{CovariateSeries, ForwardOptions, ModelParams, Propagator};
use crate::grid::{FieldSeries, SpatialGrid, TimeAxis};
use crate::kernel::PropagationParams;
use crate::spatial_cov::{build_cov_matrix, CovFamily, CovMatrix, KronCorrelation, SpatialCovModel};

pub use irwgls::{irwgls_fit, kriging_cv_objective, kriging_cv_theta, simple_kriging_loo};
pub use nelder_mead::{minimize, NmOptions, NmResult};
pub use report::{read_fit_csv, write_fit_csv, write_fit_report};

/// Half-width multiplier of the two-sided 90% normal interval.
pub const Z90: f64 = 1.645;

/// Estimation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub forward: ForwardOptions,
    /// Number of dispersed starting points when no initial value is given.
    pub starts: usize,
    /// Simplex evaluations spent on each start before the best is refined.
    pub screen_evals: usize,
    pub max_evals: usize,
    pub xtol: f64,
    pub ftol: f64,
    /// Upper bound on the Matern smoothness.
    pub matern_nu_max: f64,
    /// Largest `N_s * N_t` for which the joint covariance is assembled.
    pub irwgls_cap: usize,
    pub irwgls_max_iter: usize,
    pub irwgls_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            forward: ForwardOptions::default(),
            starts: 5,
            screen_evals: 200,
            max_evals: 4000,
            xtol: 1e-6,
            ftol: 1e-8,
            matern_nu_max: 5.0,
            irwgls_cap: 5000,
            irwgls_max_iter: 50,
            irwgls_tol: 1e-4,
        }
    }
}

/// Outcome of an estimation run. `estimates`, `std_errors` and the rows of
/// `cov_estimates` follow `names`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: CovFamily,
    pub params: ModelParams,
    pub loglik: f64,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    /// `NaN` where undefined.
    pub std_errors: Vec<f64>,
    /// Inverse observed information on the natural scale.
    pub cov_estimates: DMatrix<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// The observed information was singular and pseudo-inverted.
    pub pseudo_inverse: bool,
    pub diagnostics: Vec<String>,
}

impl FitResult {
    /// Normal-approximation 90% interval for parameter `i`.
    pub fn confidence_interval(&self, i: usize) -> (f64, f64) {
        let (e, s) = (self.estimates[i], self.std_errors[i]);
        (e - Z90 * s, e + Z90 * s)
    }
}

/// Parameter names in natural order: `lambda, v1, v2, rho1, rho2, theta1,
/// theta2[, theta3], beta...`.
pub fn param_names(family: CovFamily, k: usize) -> Vec<String> {
    let mut names: Vec<String> = ["lambda", "v1", "v2", "rho1", "rho2"].iter().map(|s| s.to_string()).collect();
    names.extend((1..=family.n_params()).map(|i| format!("theta{i}")));
    if k == 1 {
        names.push("beta".into());
    } else {
        names.extend((1..=k).map(|i| format!("beta{i}")));
    }
    names
}

/// Natural-scale parameter vector in [`param_names`] order.
pub fn pack_params(p: &ModelParams) -> Vec<f64> {
    let mut x = vec![p.prop.lambda, p.prop.v.0, p.prop.v.1, p.prop.rho1, p.prop.rho2];
    x.extend_from_slice(p.spat.theta());
    x.extend_from_slice(&p.beta);
    x
}

/// Inverse of [`pack_params`].
pub fn unpack_params(family: CovFamily, x: &[f64]) -> Result<ModelParams> {
    let nt = family.n_params();
    if x.len() < 5 + nt {
        return arg("parameter vector too short for the family");
    }
    let prop = PropagationParams::new(x[0], (x[1], x[2]), x[3], x[4])?;
    let spat = SpatialCovModel::new(family, &x[5..5 + nt])?;
    ModelParams::new(prop, spat, x[5 + nt..].to_vec())
}

/// Whitened residuals `y~(s, t) - x0(s, t) beta` for the second slice on.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    series: FieldSeries,
}

impl ResidualSeries {
    pub fn new(series: FieldSeries) -> Result<Self> {
        if series.values().iter().any(|v| !v.is_finite()) {
            return arg("residuals must be finite");
        }
        Ok(Self { series })
    }

    pub fn series(&self) -> &FieldSeries {
        &self.series
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.series.grid()
    }

    pub fn n_times(&self) -> usize {
        self.series.n_times()
    }

    pub fn slice_values(&self, t: usize) -> &[f64] {
        self.series.slice_values(t)
    }
}

fn check_data(y: &FieldSeries, cov: &CovariateSeries) -> Result<()> {
    if y.grid() != cov.grid() {
        return arg("field and covariates are on different grids");
    }
    if y.times() != cov.times() {
        return arg("field and covariates have different time axes");
    }
    if y.values().iter().any(|v| !v.is_finite()) {
        return arg("field values must be finite");
    }
    Ok(())
}

fn innovations(y: &FieldSeries, prop: &PropagationParams, opts: &ForwardOptions) -> Result<Vec<Vec<f64>>> {
    let nt = y.n_times();
    if nt < 2 {
        return arg("whitening needs at least two time slices");
    }
    let step = Propagator::new(prop, y.grid(), y.times().delta(), opts)?;
    Ok((1..nt)
        .into_par_iter()
        .map(|t| {
            let prev = step.step(&y.slice(t - 1));
            y.slice_values(t).iter().zip(prev.as_slice()).map(|(a, b)| a - b).collect()
        })
        .collect())
}

/// `Y~(., t) = Y(., t) - zeta (omega * Y(., t - delta))` for every slice
/// after the first.
pub fn whiten(y: &FieldSeries, prop: &PropagationParams, opts: &ForwardOptions) -> Result<FieldSeries> {
    let rows = innovations(y, prop, opts)?;
    let t = y.times();
    let times = TimeAxis::new(y.n_times() - 1, t.delta(), t.t0() + t.delta())?;
    FieldSeries::new(*y.grid(), times, rows.concat())
}

/// Whitened series minus the covariate mean `x0 beta`.
pub fn whitened_residuals(
    params: &ModelParams,
    y: &FieldSeries,
    cov: &CovariateSeries,
    opts: &ForwardOptions,
) -> Result<ResidualSeries> {
    check_data(y, cov)?;
    cov.check_against(&params.beta)?;
    let w = whiten(y, &params.prop, opts)?;
    let ns = y.grid().n_sites();
    let mut values = w.values().to_vec();
    for t in 1..y.n_times() {
        let g = cov.generation(t, &params.beta);
        for (v, m) in values[(t - 1) * ns..t * ns].iter_mut().zip(g.as_slice()) {
            *v -= m;
        }
    }
    ResidualSeries::new(FieldSeries::new(*y.grid(), *w.times(), values)?)
}

/// Whitened residuals premultiplied by `L^{-1}`, where `L L^T = delta c`,
/// so that under the model the values are i.i.d. standard normal.
pub fn standardized_residuals(
    params: &ModelParams,
    y: &FieldSeries,
    cov: &CovariateSeries,
    opts: &ForwardOptions,
) -> Result<ResidualSeries> {
    let r = whitened_residuals(params, y, cov, opts)?;
    let sigma = build_cov_matrix(&params.spat, y.grid(), y.times().delta())?;
    let ns = y.grid().n_sites();
    let nt = r.n_times();
    let mut m = DMatrix::from_fn(ns, nt, |i, t| r.slice_values(t)[i]);
    sigma.whiten_columns(&mut m);
    let values = (0..nt).flat_map(|t| m.column(t).iter().copied().collect::<Vec<_>>()).collect();
    ResidualSeries::new(FieldSeries::new(*y.grid(), *r.series().times(), values)?)
}

/// Sum over slices `t >= 2` of the Gaussian log-density of the whitened
/// slice with mean `x0(., t) beta` and covariance `delta * c`.
pub fn log_likelihood(params: &ModelParams, y: &FieldSeries, cov: &CovariateSeries, opts: &ForwardOptions) -> Result<f64> {
    let r = whitened_residuals(params, y, cov, opts)?;
    let sigma = build_cov_matrix(&params.spat, y.grid(), y.times().delta())?;
    Ok(slice_log_density_sum(&r, &sigma))
}

fn slice_log_density_sum(r: &ResidualSeries, sigma: &CovMatrix) -> f64 {
    let ns = sigma.dim() as f64;
    let const_term = -0.5 * ns * (2.0 * std::f64::consts::PI).ln() - 0.5 * sigma.log_det();
    (0..r.n_times())
        .into_par_iter()
        .map(|t| const_term - 0.5 * sigma.mahalanobis(r.slice_values(t)))
        .sum()
}

/// Correlation structure `A` of the noise covariance `delta * theta1 * A`,
/// with the Gaussian family handled through its Kronecker factorization.
enum ShapeFactor {
    Dense(CovMatrix),
    Kron(KronCorrelation),
}

impl ShapeFactor {
    fn new(family: CovFamily, shape: &[f64], grid: &SpatialGrid) -> Result<Self> {
        if family == CovFamily::Gaussian {
            return Ok(ShapeFactor::Kron(KronCorrelation::new(shape[0], grid)?));
        }
        let mut theta = vec![1.0];
        theta.extend_from_slice(shape);
        let m = SpatialCovModel::new(family, &theta)?;
        Ok(ShapeFactor::Dense(build_cov_matrix(&m, grid, 1.0)?))
    }

    fn log_det(&self) -> f64 {
        match self {
            ShapeFactor::Dense(c) => c.log_det(),
            ShapeFactor::Kron(k) => k.log_det(),
        }
    }

    /// Whitens each vector so squared norms are quadratic forms in `A^{-1}`.
    fn whiten(&self, vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match self {
            ShapeFactor::Kron(k) => vs.par_iter().map(|v| k.whiten(v)).collect(),
            ShapeFactor::Dense(c) => {
                if vs.is_empty() {
                    return Vec::new();
                }
                let n = vs[0].len();
                let mut m = DMatrix::from_fn(n, vs.len(), |i, j| vs[j][i]);
                c.whiten_columns(&mut m);
                (0..vs.len()).map(|j| m.column(j).iter().copied().collect()).collect()
            }
        }
    }
}

/// Maximized-over-`(theta1, beta)` likelihood at fixed propagation and shape.
#[derive(Debug, Clone)]
struct Profile {
    loglik: f64,
    theta1: f64,
    beta: Vec<f64>,
}

/// Data and settings shared by all likelihood evaluations of one fit.
struct Problem<'a> {
    y: &'a FieldSeries,
    cov: &'a CovariateSeries,
    family: CovFamily,
    opts: FitOptions,
    /// Mean square of the data, used to detect a vanishing noise variance.
    scale2: f64,
}

/// Whitened innovations and covariates at one parameter point.
struct Whitened {
    w: Vec<Vec<f64>>,
    /// `xw[t][p]`: covariate `p` at slice `t + 1`, whitened.
    xw: Vec<Vec<Vec<f64>>>,
    log_det: f64,
}

impl<'a> Problem<'a> {
    fn new(y: &'a FieldSeries, cov: &'a CovariateSeries, family: CovFamily, opts: &FitOptions) -> Result<Self> {
        check_data(y, cov)?;
        if y.n_times() < 2 {
            return arg("estimation needs at least two time slices");
        }
        let n = y.values().len() as f64;
        let scale2 = y.values().iter().map(|v| v * v).sum::<f64>() / n;
        Ok(Self { y, cov, family, opts: *opts, scale2 })
    }

    fn delta(&self) -> f64 {
        self.y.times().delta()
    }

    fn n_obs(&self) -> f64 {
        ((self.y.n_times() - 1) * self.y.grid().n_sites()) as f64
    }

    fn whitened(&self, prop: &PropagationParams, shape: &[f64]) -> Result<Whitened> {
        let inn = innovations(self.y, prop, &self.opts.forward)?;
        let factor = ShapeFactor::new(self.family, shape, self.y.grid())?;
        let w = factor.whiten(&inn);
        let k = self.cov.k();
        let nt = self.y.n_times();
        let xw = if k == 0 {
            vec![Vec::new(); nt - 1]
        } else {
            let raw: Vec<Vec<f64>> =
                (1..nt).flat_map(|t| (0..k).map(move |p| self.cov.slice(t, p).to_vec())).collect();
            factor.whiten(&raw).chunks(k).map(|c| c.to_vec()).collect()
        };
        Ok(Whitened { w, xw, log_det: factor.log_det() })
    }

    fn gls_beta(&self, wd: &Whitened) -> Result<Vec<f64>> {
        let k = self.cov.k();
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut g = DMatrix::<f64>::zeros(k, k);
        let mut b = nalgebra::DVector::<f64>::zeros(k);
        for (w, xs) in wd.w.iter().zip(&wd.xw) {
            for p in 0..k {
                b[p] += dot(&xs[p], w);
                for q in 0..=p {
                    g[(p, q)] += dot(&xs[p], &xs[q]);
                }
            }
        }
        for p in 0..k {
            for q in 0..p {
                g[(q, p)] = g[(p, q)];
            }
        }
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::Rank("whitened covariates are linearly dependent".into()))?;
        Ok(chol.solve(&b).iter().copied().collect())
    }

    fn rss(&self, wd: &Whitened, beta: &[f64]) -> f64 {
        wd.w
            .iter()
            .zip(&wd.xw)
            .map(|(w, xs)| {
                w.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let fit: f64 = xs.iter().zip(beta).map(|(x, b)| x[i] * b).sum();
                        (v - fit).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    fn profile(&self, prop: &PropagationParams, shape: &[f64]) -> Result<Profile> {
        let wd = self.whitened(prop, shape)?;
        let beta = self.gls_beta(&wd)?;
        let rss = self.rss(&wd, &beta);
        let n = self.n_obs();
        let theta1 = rss / (n * self.delta());
        if !(self.delta() * theta1 > 1e-20 * self.scale2.max(f64::MIN_POSITIVE)) {
            return Err(Error::Numerical("noise variance collapsed to zero".into()));
        }
        let t = (self.y.n_times() - 1) as f64;
        let loglik =
            -0.5 * n * ((2.0 * std::f64::consts::PI * self.delta() * theta1).ln() + 1.0) - 0.5 * t * wd.log_det;
        Ok(Profile { loglik, theta1, beta })
    }

    /// Full log-likelihood at arbitrary parameters, through the same
    /// factorizations as [`Problem::profile`].
    fn loglik(&self, p: &ModelParams) -> Result<f64> {
        let theta = p.spat.theta();
        let wd = self.whitened(&p.prop, &theta[1..])?;
        let s2 = self.delta() * theta[0];
        let n = self.n_obs();
        let t = (self.y.n_times() - 1) as f64;
        let ns = self.y.grid().n_sites() as f64;
        let rss = self.rss(&wd, &p.beta);
        Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * t * (ns * s2.ln() + wd.log_det) - 0.5 * rss / s2)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Optimization coordinates `(ln lambda, v1, v2, ln rho1, ln rho2, ln
/// theta2[, ln theta3])` with box bounds.
struct Coords {
    family: CovFamily,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Coords {
    fn new(family: CovFamily, grid: &SpatialGrid, delta: f64, nu_max: f64) -> Self {
        let h = grid.spacing();
        let extent = h * grid.nx().min(grid.ny()) as f64;
        let vmax = extent / (4.0 * delta);
        let mut lo = vec![(1e-6 / delta).ln(), -vmax, -vmax, (1e-4 * h * h / delta).ln(), (1e-4 * h * h / delta).ln()];
        let rho_hi = ((extent / 8.0).powi(2) / delta).ln();
        let mut hi = vec![(50.0 / delta).ln(), vmax, vmax, rho_hi, rho_hi];
        match family {
            CovFamily::Gaussian => {
                lo.push((1e-3 * h * h).ln());
                hi.push((1e3 * extent * extent).ln());
            }
            CovFamily::Exponential => {
                lo.push((1e-3 * h).ln());
                hi.push((1e3 * extent).ln());
            }
            CovFamily::Matern => {
                lo.extend([(1e-3 * h).ln(), 0.05f64.ln()]);
                hi.extend([(1e3 * extent).ln(), nu_max.ln()]);
            }
        }
        Self { family, lo, hi }
    }

    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn inside(&self, z: &[f64]) -> bool {
        z.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *v >= *l && *v <= *h)
    }

    fn clamp(&self, z: &mut [f64]) {
        for ((v, l), h) in z.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    fn near_bound(&self, z: &[f64], i: usize) -> Option<f64> {
        let width = (self.hi[i] - self.lo[i]).max(1.0);
        if z[i] - self.lo[i] < 1e-3 * width {
            Some(self.lo[i])
        } else if self.hi[i] - z[i] < 1e-3 * width {
            Some(self.hi[i])
        } else {
            None
        }
    }

    /// Moves coordinates lying within `1e-3` of the box width from a bound
    /// onto it and marks them pinned. Returns whether any were newly pinned.
    fn pin_bounds(&self, z: &mut [f64], pinned: &mut [bool]) -> bool {
        let mut any = false;
        for i in 0..self.dim() {
            if pinned[i] {
                continue;
            }
            if let Some(b) = self.near_bound(z, i) {
                z[i] = b;
                pinned[i] = true;
                any = true;
            }
        }
        any
    }

    fn decode(&self, z: &[f64]) -> Result<(PropagationParams, Vec<f64>)> {
        let prop = PropagationParams::new(z[0].exp(), (z[1], z[2]), z[3].exp(), z[4].exp())?;
        Ok((prop, z[5..].iter().map(|v| v.exp()).collect()))
    }

    fn encode(&self, p: &ModelParams) -> Vec<f64> {
        let mut z = vec![p.prop.lambda.ln(), p.prop.v.0, p.prop.v.1, p.prop.rho1.ln(), p.prop.rho2.ln()];
        z.extend(p.spat.theta()[1..].iter().map(|v| v.ln()));
        z
    }

    fn names(&self) -> Vec<&'static str> {
        let mut n = vec!["lambda", "v1", "v2", "rho1", "rho2", "theta2"];
        if self.family == CovFamily::Matern {
            n.push("theta3");
        }
        n
    }
}

/// Dispersed starting points, as natural-scale propagation and shape values
/// relative to the grid spacing and step length.
fn default_starts(family: CovFamily, grid: &SpatialGrid, delta: f64, count: usize) -> Vec<Vec<f64>> {
    let h = grid.spacing();
    const LAMBDA: [f64; 5] = [0.3, 0.05, 0.8, 0.15, 0.02];
    const V: [(f64, f64); 5] = [(0.0, 0.0), (0.4, 0.4), (-0.4, 0.4), (0.4, -0.4), (-0.4, -0.4)];
    const RHO: [(f64, f64); 5] = [(1.0, 1.0), (0.5, 2.0), (2.0, 0.5), (0.7, 0.7), (1.5, 1.5)];
    const RANGE: [f64; 5] = [2.0, 1.0, 4.0, 0.7, 6.0];
    const SQ_RANGE: [f64; 5] = [4.0, 2.0, 10.0, 1.0, 20.0];
    const NU: [f64; 5] = [1.0, 0.5, 2.0, 1.5, 3.0];
    (0..count)
        .map(|s| {
            let i = s % 5;
            // later rounds are scaled copies of the base pattern
            let spread = 1.5f64.powi((s / 5) as i32);
            let mut z = vec![
                (LAMBDA[i] * spread / delta).ln(),
                V[i].0 * h / delta,
                V[i].1 * h / delta,
                (RHO[i].0 * spread * h * h / delta).ln(),
                (RHO[i].1 * h * h / delta).ln(),
            ];
            match family {
                CovFamily::Gaussian => z.push((SQ_RANGE[i] * spread * h * h).ln()),
                CovFamily::Exponential => z.push((RANGE[i] * spread * h).ln()),
                CovFamily::Matern => z.extend([(RANGE[i] * spread * h).ln(), NU[i].ln()]),
            }
            z
        })
        .collect()
}

/// Maximum likelihood estimate of all parameters. `theta1` and `beta` are
/// profiled out in closed form; the remaining coordinates are searched by
/// Nelder-Mead from `init` or from dispersed starts, and standard errors
/// come from the numerically differenced observed information.
pub fn mle_fit(
    y: &FieldSeries,
    cov: &CovariateSeries,
    family: CovFamily,
    init: Option<&ModelParams>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let problem = Problem::new(y, cov, family, opts)?;
    let delta = problem.delta();
    let coords = Coords::new(family, y.grid(), delta, opts.matern_nu_max);

    let mut starts = match init {
        Some(p) => {
            if p.spat.family() != family {
                return arg("initial values belong to a different covariance family");
            }
            cov.check_against(&p.beta)?;
            vec![coords.encode(p)]
        }
        None => default_starts(family, y.grid(), delta, opts.starts.max(1)),
    };
    for z in &mut starts {
        coords.clamp(z);
    }

    // outside the box: value at the nearest box point plus a penalty that
    // grows with the excursion, so the simplex can settle on a bound
    let penalty_weight = problem.n_obs();
    let objective = |z: &[f64]| -> f64 {
        let mut zc = z.to_vec();
        coords.clamp(&mut zc);
        let excess: f64 = z.iter().zip(&zc).map(|(a, b)| (a - b).abs()).sum();
        match coords.decode(&zc).and_then(|(prop, shape)| problem.profile(&prop, &shape)) {
            Ok(p) => -p.loglik + penalty_weight * (excess + 100.0 * excess * excess),
            Err(_) => f64::INFINITY,
        }
    };

    let h = y.grid().spacing();
    let mut step = vec![0.7, 0.3 * h / delta, 0.3 * h / delta, 0.5, 0.5, 0.7];
    if family == CovFamily::Matern {
        step.push(0.5);
    }
    let initial_values: Vec<f64> = starts.par_iter().map(|z| objective(z)).collect();
    if initial_values.iter().all(|v| !v.is_finite()) {
        return Err(Error::Config("the likelihood is not finite at any starting point".into()));
    }

    let mut evaluations = initial_values.len();
    let mut iterations = 0;
    let screen = NmOptions { max_evals: opts.screen_evals.max(coords.dim() + 2), xtol: opts.xtol, ftol: opts.ftol };
    let mut best = if starts.len() == 1 {
        NmResult { x: starts[0].clone(), f: initial_values[0], evals: 0, iterations: 0, converged: false }
    } else {
        let screened: Vec<NmResult> = starts
            .par_iter()
            .zip(&initial_values)
            .filter(|(_, v)| v.is_finite())
            .map(|(z, _)| minimize(objective, z, &step, &screen))
            .collect();
        evaluations += screened.iter().map(|r| r.evals).sum::<usize>();
        iterations += screened.iter().map(|r| r.iterations).sum::<usize>();
        screened.into_iter().min_by(|a, b| a.f.total_cmp(&b.f)).expect("at least one finite start")
    };

    // refine, then restart from the optimum until the value stops improving;
    // coordinates that reach a bound are held there in later rounds
    let mut pinned = vec![false; coords.dim()];
    let mut scale = 0.5;
    let mut converged = false;
    for round in 0..5 {
        let newly_pinned = coords.pin_bounds(&mut best.x, &mut pinned);
        let free: Vec<usize> = (0..coords.dim()).filter(|&i| !pinned[i]).collect();
        let base = best.x.clone();
        let embed = |u: &[f64]| -> Vec<f64> {
            let mut z = base.clone();
            for (&i, &v) in free.iter().zip(u) {
                z[i] = v;
            }
            z
        };
        let budget = if round == 0 { opts.max_evals / 4 } else { opts.max_evals };
        let full = NmOptions { max_evals: budget.max(coords.dim() + 2), xtol: opts.xtol, ftol: opts.ftol };
        let u0: Vec<f64> = free.iter().map(|&i| best.x[i]).collect();
        let s: Vec<f64> = free.iter().map(|&i| step[i] * scale).collect();
        let r = minimize(|u| objective(&embed(u)), &u0, &s, &full);
        evaluations += r.evals;
        iterations += r.iterations;
        let improved = best.f - r.f;
        converged = r.converged;
        if r.f <= best.f {
            best = NmResult { x: embed(&r.x), ..r };
        }
        if converged && !newly_pinned && improved.abs() <= 10.0 * opts.ftol * (1.0 + best.f.abs()) {
            break;
        }
        scale *= 0.3;
    }

    coords.clamp(&mut best.x);
    best.f = objective(&best.x);
    evaluations += 1;
    if best.f.is_finite() {
        let (z, f, evals) = newton_polish(&problem, &coords, &best.x, best.f);
        evaluations += evals;
        best.x = z;
        best.f = f;
    }

    let mut diagnostics = Vec::new();
    if !converged {
        diagnostics.push(format!("simplex search did not converge within {} evaluations", opts.max_evals));
    }
    if !best.f.is_finite() {
        return Err(Error::Fit("no finite likelihood value was reached".into()));
    }
    let names = coords.names();
    for (i, name) in names.iter().enumerate() {
        if coords.near_bound(&best.x, i).is_some() {
            diagnostics.push(format!("{name} is at the boundary of the search region"));
        }
    }
    let (prop, shape) = coords.decode(&best.x)?;
    let profile = problem.profile(&prop, &shape)?;
    if profile.theta1 * delta < 1e-10 * problem.scale2 {
        diagnostics.push("estimated noise variance is negligible relative to the data".into());
    }
    let mut theta = vec![profile.theta1];
    theta.extend_from_slice(&shape);
    let params = ModelParams::new(prop, SpatialCovModel::new(family, &theta)?, profile.beta.clone())?;

    let info = observed_information(&problem, &params);
    let (cov_estimates, std_errors, pseudo_inverse) = match info {
        Ok(res) => res,
        Err(e) => {
            diagnostics.push(format!("observed information unavailable: {e}"));
            let n = pack_params(&params).len();
            (DMatrix::from_element(n, n, f64::NAN), vec![f64::NAN; n], false)
        }
    };
    if pseudo_inverse {
        diagnostics.push("observed information is singular; a pseudo-inverse was used".into());
    }

    let ok = diagnostics.is_empty() || (diagnostics.len() == 1 && pseudo_inverse);
    Ok(FitResult {
        family,
        names: param_names(family, cov.k()),
        estimates: pack_params(&params),
        params,
        loglik: profile.loglik,
        std_errors,
        cov_estimates,
        iterations,
        evaluations,
        converged: ok && profile.loglik.is_finite(),
        pseudo_inverse,
        diagnostics,
    })
}

/// Full-parameter coordinates for the observed information: positive
/// parameters in log space, `v` and `beta` as is.
fn is_log_coord(family: CovFamily, i: usize) -> bool {
    let nt = family.n_params();
    matches!(i, 0 | 3 | 4) || (5..5 + nt).contains(&i)
}

fn to_full_coords(family: CovFamily, x: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, v)| if is_log_coord(family, i) { v.ln() } else { *v }).collect()
}

fn from_full_coords(family: CovFamily, z: &[f64]) -> Vec<f64> {
    z.iter().enumerate().map(|(i, v)| if is_log_coord(family, i) { v.exp() } else { *v }).collect()
}

/// Central-difference step for full coordinate value `z`.
fn fd_step(z: f64) -> f64 {
    1e-4f64.max(1e-4 * z.abs())
}

/// Gradient of the log-likelihood in the full reparameterized coordinates
/// (log scale for positive parameters), by central differences with steps
/// `max(1e-4, 1e-4 |z|) * factor`.
pub fn loglik_gradient(
    params: &ModelParams,
    y: &FieldSeries,
    cov: &CovariateSeries,
    opts: &FitOptions,
    factor: f64,
) -> Result<Vec<f64>> {
    let family = params.spat.family();
    let problem = Problem::new(y, cov, family, opts)?;
    let z0 = to_full_coords(family, &pack_params(params));
    let f = |z: &[f64]| -> Result<f64> { problem.loglik(&unpack_params(family, &from_full_coords(family, z))?) };
    (0..z0.len())
        .map(|i| {
            let h = fd_step(z0[i]) * factor;
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += h;
            zm[i] -= h;
            Ok((f(&zp)? - f(&zm)?) / (2.0 * h))
        })
        .collect()
}

/// As [`loglik_gradient`] with the step-halving extrapolation that cancels
/// the leading truncation error.
pub fn loglik_gradient_extrapolated(
    params: &ModelParams,
    y: &FieldSeries,
    cov: &CovariateSeries,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let family = params.spat.family();
    let problem = Problem::new(y, cov, family, opts)?;
    let z0 = to_full_coords(family, &pack_params(params));
    let hs: Vec<f64> = z0.iter().map(|v| fd_step(*v)).collect();
    let f = |z: &[f64]| -> Result<f64> { problem.loglik(&unpack_params(family, &from_full_coords(family, z))?) };
    richardson_gradient(f, &z0, &hs)
}

/// Value, gradient and Hessian of `f` at `z0` by central differences with
/// per-coordinate steps `hs`.
fn fd_derivatives<F>(f: F, z0: &[f64], hs: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = z0.len();
    let mut points: Vec<(usize, usize, f64, f64)> = Vec::new();
    for i in 0..n {
        for j in 0..=i {
            if i == j {
                points.extend([(i, i, 1.0, 0.0), (i, i, -1.0, 0.0)]);
            } else {
                points.extend([(i, j, 1.0, 1.0), (i, j, 1.0, -1.0), (i, j, -1.0, 1.0), (i, j, -1.0, -1.0)]);
            }
        }
    }
    let finite = |v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical("non-finite likelihood near the optimum".into()))
        }
    };
    let f0 = finite(f(z0)?)?;
    let values: Vec<f64> = points
        .par_iter()
        .map(|&(i, j, si, sj)| {
            let mut z = z0.to_vec();
            z[i] += si * hs[i];
            if i != j {
                z[j] += sj * hs[j];
            }
            finite(f(&z)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut grad = vec![0.0; n];
    let mut hess = DMatrix::<f64>::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            if i == j {
                grad[i] = (values[k] - values[k + 1]) / (2.0 * hs[i]);
                hess[(i, i)] = (values[k] - 2.0 * f0 + values[k + 1]) / (hs[i] * hs[i]);
                k += 2;
            } else {
                let v = (values[k] - values[k + 1] - values[k + 2] + values[k + 3]) / (4.0 * hs[i] * hs[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
                k += 4;
            }
        }
    }
    Ok((f0, grad, hess))
}

/// Central-difference gradient at steps `hs` and `hs / 2`, combined to
/// cancel the leading truncation error.
fn richardson_gradient<F>(f: F, z0: &[f64], hs: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    (0..z0.len())
        .into_par_iter()
        .map(|i| {
            let d = |h: f64| -> Result<f64> {
                let mut zp = z0.to_vec();
                let mut zm = z0.to_vec();
                zp[i] += h;
                zm[i] -= h;
                Ok((f(&zp)? - f(&zm)?) / (2.0 * h))
            };
            Ok((4.0 * d(0.5 * hs[i])? - d(hs[i])?) / 3.0)
        })
        .collect()
}

/// Newton iterations on the profile log-likelihood from the simplex optimum,
/// restricted to directions of positive curvature and accepted only when the
/// likelihood does not decrease beyond rounding. Returns the improved point and its value.
fn newton_polish(problem: &Problem, coords: &Coords, z: &[f64], f: f64) -> (Vec<f64>, f64, usize) {
    let profile = |z: &[f64]| -> Result<f64> {
        if !coords.inside(z) {
            return Err(Error::Numerical("outside the search region".into()));
        }
        let (prop, shape) = coords.decode(z)?;
        Ok(problem.profile(&prop, &shape)?.loglik)
    };
    let (mut z, mut ll) = (z.to_vec(), -f);
    let mut evals = 0;
    for _ in 0..6 {
        let hs: Vec<f64> = z.iter().map(|v| fd_step(*v)).collect();
        let Ok((_, _, hess)) = fd_derivatives(profile, &z, &hs) else { break };
        let Ok(grad) = richardson_gradient(profile, &z, &hs) else { break };
        evals += 2 * z.len() * z.len() + 4 * z.len() + 1;
        if grad.iter().all(|g| g.abs() < 1e-6) {
            break;
        }
        let eig = SymmetricEigen::new(-hess);
        let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let g = nalgebra::DVector::from_column_slice(&grad);
        let proj = eig.eigenvectors.transpose() * &g;
        let scaled = nalgebra::DVector::from_fn(z.len(), |i, _| {
            let e = eig.eigenvalues[i];
            if e > 1e-8 * top { proj[i] / e } else { 0.0 }
        });
        let dir = &eig.eigenvectors * scaled;
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..8 {
            let cand: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            evals += 1;
            if let Ok(v) = profile(&cand) {
                // near the optimum the gain falls below the evaluation noise
                if v > ll - 1e-12 * ll.abs() {
                    z = cand;
                    ll = v;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (z, -ll, evals)
}

/// Inverse observed information mapped to the natural scale, the standard
/// errors and whether a pseudo-inverse was needed.
fn observed_information(problem: &Problem, params: &ModelParams) -> Result<(DMatrix<f64>, Vec<f64>, bool)> {
    let family = params.spat.family();
    let z0 = to_full_coords(family, &pack_params(params));
    let n = z0.len();
    let hs: Vec<f64> = z0.iter().map(|v| fd_step(*v)).collect();
    let f = |z: &[f64]| -> Result<f64> { problem.loglik(&unpack_params(family, &from_full_coords(family, z))?) };
    let (_, _, hess) = fd_derivatives(f, &z0, &hs)?;
    let info = -hess;
    let eig = SymmetricEigen::new(info);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(top > 0.0) {
        return Err(Error::Numerical("observed information has no positive curvature".into()));
    }
    let tol = 1e-10 * top;
    let pseudo = eig.eigenvalues.iter().any(|e| *e <= tol);
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| if e > tol { 1.0 / e } else { 0.0 }));
    let cov_z = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    let x0 = pack_params(params);
    let jac: Vec<f64> = (0..n).map(|i| if is_log_coord(family, i) { x0[i] } else { 1.0 }).collect();
    let cov_x = DMatrix::from_fn(n, n, |i, j| jac[i] * cov_z[(i, j)] * jac[j]);
    let se = (0..n).map(|i| cov_x[(i, i)].max(0.0).sqrt()).collect();
    Ok((cov_x, se, pseudo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate;
    use crate::grid::Field2;
    use crate::rng::seeded;

    fn grid_times(n: usize, nt: usize) -> (SpatialGrid, TimeAxis) {
        (SpatialGrid::new(n, n).unwrap(), TimeAxis::new(nt, 1.0, 0.0).unwrap())
    }

    fn bump_covariate(grid: SpatialGrid, times: TimeAxis) -> CovariateSeries {
        let c = (grid.nx() as f64 - 1.0) / 2.0;
        CovariateSeries::from_fn(grid, times, 1, |t, _, r, col| {
            let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
            (-d2 / 8.0).exp() * (1.0 + 0.5 * (0.7 * t as f64).sin())
        })
        .unwrap()
    }

    fn study_params(beta: Vec<f64>) -> ModelParams {
        ModelParams::new(
            PropagationParams::new(0.1, (0.0, 0.5), 1.0, 0.25).unwrap(),
            SpatialCovModel::gaussian(0.01, 5.0).unwrap(),
            beta,
        )
        .unwrap()
    }

    #[test]
    fn whiten_requires_two_slices() {
        let (g, t) = grid_times(3, 1);
        let y = FieldSeries::new(g, t, vec![0.0; 9]).unwrap();
        let p = PropagationParams::new(0.1, (0.0, 0.0), 1.0, 1.0).unwrap();
        assert!(matches!(whiten(&y, &p, &ForwardOptions::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn whiten_fast_decay_is_identity() {
        let (g, t) = grid_times(5, 3);
        let vals: Vec<f64> = (0..75).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = FieldSeries::new(g, t, vals.clone()).unwrap();
        let p = PropagationParams::new(800.0, (0.0, 0.0), 1.0, 1.0).unwrap();
        let w = whiten(&y, &p, &ForwardOptions::default()).unwrap();
        assert_eq!(w.n_times(), 2);
        for (a, b) in w.values().iter().zip(&vals[25..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn whiten_constant_field_renorm_no_decay() {
        let (g, t) = grid_times(6, 4);
        let y = FieldSeries::new(g, t, vec![2.5; 144]).unwrap();
        let p = PropagationParams::new(0.0, (0.3, -0.2), 1.0, 0.5).unwrap();
        let opts = ForwardOptions { boundary: crate::kernel::BoundaryMode::Renorm, ..Default::default() };
        let w = whiten(&y, &p, &opts).unwrap();
        assert!(w.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn one_site_two_slices_is_univariate_normal() {
        let g = SpatialGrid::new(1, 1).unwrap();
        let t = TimeAxis::new(2, 1.0, 0.0).unwrap();
        let y = FieldSeries::new(g, t, vec![0.7, 1.9]).unwrap();
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let p = ModelParams::new(
            PropagationParams::new(0.4, (0.0, 0.0), 0.01, 0.01).unwrap(),
            SpatialCovModel::exponential(0.3, 1.0).unwrap(),
            vec![0.5],
        )
        .unwrap();
        let ll = log_likelihood(&p, &y, &cov, &ForwardOptions::default()).unwrap();
        let k = Propagator::new(&p.prop, &g, 1.0, &ForwardOptions::default()).unwrap();
        let yt = 1.9 - k.step(&Field2::filled(1, 1, 0.7)).get(0, 0);
        let var = 0.3 * (1.0 + 1e-8);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (yt - 0.5).powi(2) / var;
        assert!((ll - expected).abs() < 1e-12, "{ll} vs {expected}");
    }

    #[test]
    fn fast_path_matches_dense_likelihood() {
        let (g, t) = grid_times(7, 5);
        let cov = bump_covariate(g, t);
        for spat in [SpatialCovModel::gaussian(0.02, 3.0).unwrap(), SpatialCovModel::matern(0.02, 2.0, 1.3).unwrap()] {
            let p = ModelParams::new(PropagationParams::new(0.2, (0.1, 0.4), 0.8, 0.3).unwrap(), spat, vec![0.9]).unwrap();
            let y = simulate(&p, &cov, &Field2::zeros(7, 7), &mut seeded(5), &ForwardOptions::default()).unwrap();
            let dense = log_likelihood(&p, &y, &cov, &ForwardOptions::default()).unwrap();
            let problem = Problem::new(&y, &cov, p.spat.family(), &FitOptions::default()).unwrap();
            let fast = problem.loglik(&p).unwrap();
            assert!((dense - fast).abs() < 1e-7 * dense.abs(), "{dense} vs {fast}");
        }
    }

    #[test]
    fn profile_is_the_maximum_over_scale_and_beta() {
        let (g, t) = grid_times(7, 6);
        let cov = bump_covariate(g, t);
        let p = ModelParams::new(
            PropagationParams::new(0.2, (0.0, 0.4), 0.8, 0.3).unwrap(),
            SpatialCovModel::gaussian(0.02, 3.0).unwrap(),
            vec![0.9],
        )
        .unwrap();
        let y = simulate(&p, &cov, &Field2::zeros(7, 7), &mut seeded(9), &ForwardOptions::default()).unwrap();
        let problem = Problem::new(&y, &cov, CovFamily::Gaussian, &FitOptions::default()).unwrap();
        let prof = problem.profile(&p.prop, &[3.0]).unwrap();
        let at = |theta1: f64, beta: f64| {
            let q = ModelParams::new(p.prop, SpatialCovModel::gaussian(theta1, 3.0).unwrap(), vec![beta]).unwrap();
            problem.loglik(&q).unwrap()
        };
        let best = at(prof.theta1, prof.beta[0]);
        assert!((best - prof.loglik).abs() < 1e-8 * best.abs());
        for (a, b) in [(1.05, 1.0), (0.95, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            assert!(at(prof.theta1 * a, prof.beta[0] * b) < best);
        }
    }

    #[test]
    fn likelihood_favours_generating_decay() {
        let (g, t) = grid_times(9, 8);
        let cov = bump_covariate(g, t);
        let p = study_params(vec![1.0]);
        let mut wins = 0;
        for rep in 0..20 {
            let y = simulate(&p, &cov, &Field2::zeros(9, 9), &mut seeded(100 + rep), &ForwardOptions::default()).unwrap();
            let mut q = p.clone();
            q.prop.lambda *= 1.5;
            let a = log_likelihood(&p, &y, &cov, &ForwardOptions::default()).unwrap();
            let b = log_likelihood(&q, &y, &cov, &ForwardOptions::default()).unwrap();
            wins += (a > b) as usize;
        }
        assert!(wins >= 15, "{wins} of 20");
    }

    #[test]
    fn names_and_packing_round_trip() {
        let p = study_params(vec![1.0, -2.0]);
        let x = pack_params(&p);
        assert_eq!(param_names(CovFamily::Gaussian, 2).len(), x.len());
        assert_eq!(unpack_params(CovFamily::Gaussian, &x).unwrap(), p);
        assert_eq!(param_names(CovFamily::Matern, 1).last().unwrap(), "beta");
    }

    #[test]
    fn single_replicate_recovers_decay() {
        let (g, t) = grid_times(21, 20);
        let cov = bump_covariate(g, t);
        let p = study_params(vec![1.0]);
        let y = simulate(&p, &cov, &Field2::zeros(21, 21), &mut seeded(2024), &ForwardOptions::default()).unwrap();
        let fit = mle_fit(&y, &cov, CovFamily::Gaussian, None, &FitOptions::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.diagnostics);
        let lambda = fit.params.prop.lambda;
        assert!(lambda > 0.02 && lambda < 0.25, "lambda = {lambda}");
        assert!(fit.std_errors.iter().all(|s| *s >= 0.0));
        let grad = loglik_gradient_extrapolated(&fit.params, &y, &cov, &FitOptions::default()).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-3), "{grad:?}");
    }

    #[test]
    fn constant_field_is_flagged() {
        let (g, t) = grid_times(6, 5);
        let y = FieldSeries::new(g, t, vec![1.0; 180]).unwrap();
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let opts = FitOptions { forward: ForwardOptions { boundary: crate::kernel::BoundaryMode::Renorm, ..Default::default() }, ..Default::default() };
        match mle_fit(&y, &cov, CovFamily::Exponential, None, &opts) {
            Ok(fit) => assert!(!fit.converged && !fit.diagnostics.is_empty()),
            Err(e) => assert!(matches!(e, Error::Config(_) | Error::Fit(_)), "{e}"),
        }
    }
}
