//! Forward simulation of the degradation field and the convolved design
//! matrix of its linear representation.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rustfft::num_complex::Complex64;

use crate::error::{arg, Error, Result};
use crate::fft::fft2;
use crate::grid::{cell, fmt_f64, layout_from_rows, parse_err, read_rows, Field2, FieldSeries, SpatialGrid, TimeAxis, TimeIndexer};
use crate::kernel::{convolve, discretize, kernel_spec, BoundaryMode, DiscreteKernel, PropagationParams, DEFAULT_TRUNCATION_SIGMAS};
use crate::spatial_cov::{NoiseSampler, SpatialCovModel};

/// Full parameter set: propagation, generation-noise covariance and
/// covariate coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub prop: PropagationParams,
    pub spat: SpatialCovModel,
    pub beta: Vec<f64>,
}

impl ModelParams {
    pub fn new(prop: PropagationParams, spat: SpatialCovModel, beta: Vec<f64>) -> Result<Self> {
        prop.validate()?;
        if beta.iter().any(|b| !b.is_finite()) {
            return arg("covariate coefficients must be finite");
        }
        Ok(Self { prop, spat, beta })
    }
}

/// Covariates `x0(s, t)` for every site and time, `k` per site-time.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSeries {
    grid: SpatialGrid,
    times: TimeAxis,
    k: usize,
    values: Vec<f64>,
}

impl CovariateSeries {
    /// `values` is ordered time, covariate, row, column (row-major sites).
    pub fn new(grid: SpatialGrid, times: TimeAxis, k: usize, values: Vec<f64>) -> Result<Self> {
        let expected = times.n_times() * k * grid.n_sites();
        if values.len() != expected {
            return arg(format!("covariates have {} values, expected {expected}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return arg("covariate values must be finite");
        }
        Ok(Self { grid, times, k, values })
    }

    /// No covariates; carries the grid and time axis only.
    pub fn empty(grid: SpatialGrid, times: TimeAxis) -> Self {
        Self { grid, times, k: 0, values: Vec::new() }
    }

    /// A single covariate equal to `value` everywhere.
    pub fn constant(grid: SpatialGrid, times: TimeAxis, value: f64) -> Result<Self> {
        let n = grid.n_sites() * times.n_times();
        Self::new(grid, times, 1, vec![value; n])
    }

    /// Builds covariates from `f(t, p, row, col)`.
    pub fn from_fn(
        grid: SpatialGrid,
        times: TimeAxis,
        k: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(times.n_times() * k * grid.n_sites());
        for t in 0..times.n_times() {
            for p in 0..k {
                for row in 0..grid.ny() {
                    for col in 0..grid.nx() {
                        values.push(f(t, p, row, col));
                    }
                }
            }
        }
        Self::new(grid, times, k, values)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn times(&self) -> &TimeAxis {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Covariate `p` at time index `t`, row-major over sites.
    pub fn slice(&self, t: usize, p: usize) -> &[f64] {
        let n = self.grid.n_sites();
        let start = (t * self.k + p) * n;
        &self.values[start..start + n]
    }

    /// The generation term `x0(., t) beta^T`.
    pub fn generation(&self, t: usize, beta: &[f64]) -> Field2 {
        let mut g = vec![0.0; self.grid.n_sites()];
        for (p, b) in beta.iter().enumerate() {
            for (gi, x) in g.iter_mut().zip(self.slice(t, p)) {
                *gi += b * x;
            }
        }
        Field2::from_vec(self.grid.nx(), self.grid.ny(), g).expect("grid-sized")
    }

    /// All covariates multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.grid, self.times, self.k, self.values.iter().map(|v| v * c).collect())
    }

    /// Keeps time indices `[start, end)`.
    pub fn time_window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.times.n_times() {
            return arg("invalid time window");
        }
        let times = TimeAxis::new(end - start, self.times.delta(), self.times.time(start))?;
        let per = self.k * self.grid.n_sites();
        Self::new(self.grid, times, self.k, self.values[start * per..end * per].to_vec())
    }

    pub(crate) fn check_against(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.k {
            return arg(format!("{} coefficients for {} covariates", beta.len(), self.k));
        }
        Ok(())
    }

    /// Writes the `t,p,x,y,value` CSV layout.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,p,x,y,value")?;
        for t in 0..self.times.n_times() {
            let time = fmt_f64(self.times.time(t));
            for p in 0..self.k {
                let s = self.slice(t, p);
                for row in 0..self.grid.ny() {
                    for col in 0..self.grid.nx() {
                        writeln!(out, "{time},{p},{col},{row},{}", fmt_f64(s[row * self.grid.nx() + col]))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads the layout produced by [`CovariateSeries::write_csv`].
    pub fn read_csv<R: BufRead>(input: R, spacing: f64) -> Result<Self> {
        let rows = read_rows(input, &["t", "p", "x", "y", "value"])?;
        let (grid, times, k) = layout_from_rows(&rows, spacing, Some(1))?;
        let n = grid.n_sites();
        let mut values = vec![f64::NAN; times.n_times() * k * n];
        let index = TimeIndexer::new(&times);
        for (line, r) in &rows {
            let t = index.index(r[0]).ok_or_else(|| parse_err(*line, "irregular time"))?;
            let p = cell(r[1], *line)?;
            let (col, row) = (cell(r[2], *line)?, cell(r[3], *line)?);
            values[(t * k + p) * n + row * grid.nx() + col] = r[4];
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse { line: 0, message: "missing covariate rows".into() });
        }
        Self::new(grid, times, k, values)
    }
}

/// Numerical options shared by the forward operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub boundary: BoundaryMode,
    pub truncation_sigmas: f64,
    /// Noise-only steps run from the initial slice before the first
    /// recorded slice; covariates before the first time are zero.
    pub burn_in: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { boundary: BoundaryMode::ZeroPad, truncation_sigmas: DEFAULT_TRUNCATION_SIGMAS, burn_in: 0 }
    }
}

/// One decayed propagation step `zeta * (omega * Y)` on a fixed grid.
#[derive(Debug, Clone)]
pub struct Propagator {
    kernel: DiscreteKernel,
    boundary: BoundaryMode,
}

impl Propagator {
    pub fn new(prop: &PropagationParams, grid: &SpatialGrid, delta: f64, opts: &ForwardOptions) -> Result<Self> {
        let kernel = discretize(&kernel_spec(prop, delta)?, grid.spacing(), opts.truncation_sigmas)?;
        kernel.ensure_fits(grid)?;
        Ok(Self { kernel, boundary: opts.boundary })
    }

    pub fn kernel(&self) -> &DiscreteKernel {
        &self.kernel
    }

    pub fn step(&self, y: &Field2) -> Field2 {
        convolve(y, &self.kernel, self.boundary)
    }
}

/// Runs the additive recursion `Y(t) = g(t) + zeta (omega * Y(t - 1)) +
/// eps(t)` from `initial`. The returned series holds one slice per time of
/// `cov`, the first being the (burned-in) initial state.
pub fn simulate<R: Rng + ?Sized>(
    params: &ModelParams,
    cov: &CovariateSeries,
    initial: &Field2,
    rng: &mut R,
    opts: &ForwardOptions,
) -> Result<FieldSeries> {
    let grid = *cov.grid();
    let times = *cov.times();
    cov.check_against(&params.beta)?;
    if initial.nx() != grid.nx() || initial.ny() != grid.ny() {
        return arg("initial slice does not match the grid");
    }
    if !initial.is_finite() {
        return arg("initial slice must be finite");
    }
    let delta = times.delta();
    let prop = Propagator::new(&params.prop, &grid, delta, opts)?;
    let noise = NoiseSampler::new(&params.spat, &grid, delta)?;

    let mut y = initial.clone();
    for _ in 0..opts.burn_in {
        y = prop.step(&y);
        y.axpy(1.0, &noise.sample(rng));
    }
    let mut slices = Vec::with_capacity(times.n_times());
    slices.push(y.clone());
    for t in 1..times.n_times() {
        let mut next = cov.generation(t, &params.beta);
        next.axpy(1.0, &prop.step(&y));
        next.axpy(1.0, &noise.sample(rng));
        slices.push(next.clone());
        y = next;
    }
    FieldSeries::from_slices(grid, times, &slices)
}

/// Smallest `n` with `exp(-n lambda delta) < 1e-6`, capped at `10 * n_times`.
pub fn default_series_depth(lambda: f64, delta: f64, n_times: usize) -> usize {
    let cap = 10 * n_times.max(1);
    let rate = lambda * delta;
    if !(rate > 0.0) {
        return cap;
    }
    let n = ((1e6f64).ln() / rate).floor() as usize + 1;
    n.min(cap)
}

/// Smallest length `>= n` whose prime factors are 2, 3 and 5.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Applies the kernel powers `Psi_i` through the Fourier domain on a canvas
/// wide enough that `depth` compositions never wrap around, so every term is
/// the exact discrete `i`-fold composition restricted to the grid.
struct SeriesOperator {
    nx: usize,
    ny: usize,
    lx: usize,
    ly: usize,
    /// Transform of the decayed one-step kernel `zeta * omega`.
    step_hat: Vec<Complex64>,
    boundary: BoundaryMode,
}

impl SeriesOperator {
    fn new(kernel: &DiscreteKernel, nx: usize, ny: usize, depth: usize, boundary: BoundaryMode) -> Self {
        let (w, h) = (kernel.width(), kernel.height());
        let lx = fast_len(nx + depth * (w - 1));
        let ly = fast_len(ny + depth * (h - 1));
        let mut step_hat = vec![Complex64::new(0.0, 0.0); lx * ly];
        let (rx, ry) = kernel.radius();
        let (cx, cy) = kernel.center();
        for b in 0..h {
            let dy = (cy + b as i64 - ry as i64).rem_euclid(ly as i64) as usize;
            for a in 0..w {
                let dx = (cx + a as i64 - rx as i64).rem_euclid(lx as i64) as usize;
                step_hat[dy * lx + dx].re += kernel.weight() * kernel.taps()[b * w + a];
            }
        }
        fft2(&mut step_hat, ly, lx, false);
        Self { nx, ny, lx, ly, step_hat, boundary }
    }

    fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.lx * self.ly];
        for row in 0..self.ny {
            for col in 0..self.nx {
                buf[row * self.lx + col].re = values[row * self.nx + col];
            }
        }
        fft2(&mut buf, self.ly, self.lx, false);
        buf
    }

    fn inverse(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        fft2(&mut buf, self.ly, self.lx, true);
        let norm = (self.lx * self.ly) as f64;
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for row in 0..self.ny {
            for col in 0..self.nx {
                out.push(buf[row * self.lx + col].re / norm);
            }
        }
        out
    }

    /// `out[t] = sum_{i=0}^{min(n, t)} Psi_i * inputs[t - i]`.
    fn apply(&self, inputs: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
        let hats: Vec<Vec<Complex64>> = inputs.iter().map(|x| self.forward(x)).collect();
        match self.boundary {
            BoundaryMode::ZeroPad => self.apply_linear(inputs, &hats, n),
            BoundaryMode::Renorm => self.apply_renorm(inputs, &hats, n),
        }
    }

    fn apply_linear(&self, inputs: &[Vec<f64>], hats: &[Vec<Complex64>], n: usize) -> Vec<Vec<f64>> {
        // S_t = X_t + K S_{t-1} - K^{n+1} X_{t-n-1}
        let mut tail = vec![Complex64::new(1.0, 0.0); self.lx * self.ly];
        for _ in 0..=n.min(inputs.len()) {
            for (t, k) in tail.iter_mut().zip(&self.step_hat) {
                *t *= k;
            }
        }
        let mut acc = vec![Complex64::new(0.0, 0.0); self.lx * self.ly];
        let mut out = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            for ((a, k), x) in acc.iter_mut().zip(&self.step_hat).zip(&hats[t]) {
                *a = *a * k + x;
            }
            if t > n {
                for ((a, p), x) in acc.iter_mut().zip(&tail).zip(&hats[t - n - 1]) {
                    *a -= p * x;
                }
            }
            let mut values = self.inverse(acc.clone());
            // the i = 0 term is exact; only the propagated part carries FFT rounding
            if n == 0 {
                values.copy_from_slice(&inputs[t]);
            }
            out.push(values);
        }
        out
    }

    fn apply_renorm(&self, inputs: &[Vec<f64>], hats: &[Vec<Complex64>], n: usize) -> Vec<Vec<f64>> {
        let depth = n.min(inputs.len().saturating_sub(1));
        let ones = self.forward(&vec![1.0; self.nx * self.ny]);
        let mut power = vec![Complex64::new(1.0, 0.0); self.lx * self.ly];
        let mut powers = vec![power.clone()];
        let mut masses = vec![vec![1.0; self.nx * self.ny]];
        for _ in 1..=depth {
            for (p, k) in power.iter_mut().zip(&self.step_hat) {
                *p *= k;
            }
            powers.push(power.clone());
            masses.push(self.inverse(power.iter().zip(&ones).map(|(p, o)| p * o).collect()));
        }
        let mut out: Vec<Vec<f64>> = inputs.to_vec();
        for (i, (pw, mass)) in powers.iter().zip(&masses).enumerate().skip(1) {
            let full_mass = pw[0].re;
            for t in i..inputs.len() {
                let term = self.inverse(pw.iter().zip(&hats[t - i]).map(|(p, x)| p * x).collect());
                for ((o, v), m) in out[t].iter_mut().zip(term).zip(mass) {
                    // mass carries the decay weight; renormalize the taps only
                    let rel = m / full_mass;
                    if rel > 1e-12 {
                        *o += v / rel;
                    }
                }
            }
        }
        out
    }
}

fn series_operator(
    prop: &PropagationParams,
    cov: &CovariateSeries,
    depth: usize,
    opts: &ForwardOptions,
) -> Result<SeriesOperator> {
    let grid = cov.grid();
    let kernel = discretize(&kernel_spec(prop, cov.times().delta())?, grid.spacing(), opts.truncation_sigmas)?;
    kernel.ensure_fits(grid)?;
    Ok(SeriesOperator::new(&kernel, grid.nx(), grid.ny(), depth, opts.boundary))
}

/// Mean of the field at time index `t` from the first `n + 1` series terms,
/// `sum_i Psi_i * (x0(., t - i) beta^T)`, with covariates before the first
/// time taken as zero.
pub fn truncated_series_mean(
    params: &ModelParams,
    cov: &CovariateSeries,
    n: usize,
    t: usize,
    opts: &ForwardOptions,
) -> Result<Field2> {
    cov.check_against(&params.beta)?;
    if t >= cov.times().n_times() {
        return arg(format!("time index {t} out of range"));
    }
    let grid = cov.grid();
    let depth = n.min(t);
    let start = t - depth;
    let inputs: Vec<Vec<f64>> = (start..=t).map(|s| cov.generation(s, &params.beta).into_vec()).collect();
    let op = series_operator(&params.prop, cov, depth, opts)?;
    let out = op.apply(&inputs, depth).pop().expect("non-empty");
    Field2::from_vec(grid.nx(), grid.ny(), out)
}

/// Convolved covariates, one column per covariate, rows stacked time-major
/// and site-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    n_sites: usize,
    n_times: usize,
}

impl DesignMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    /// `X beta`.
    pub fn apply(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.cols() {
            return arg("coefficient count does not match the design matrix");
        }
        Ok((0..self.rows()).map(|r| (0..self.cols()).map(|c| self.x[(r, c)] * beta[c]).sum()).collect())
    }
}

/// Column `p` holds `sum_{i=0}^{n} Psi_i * x^{(p)}(., t - i)` for every time.
pub fn build_design_matrix(
    prop: &PropagationParams,
    cov: &CovariateSeries,
    n: usize,
    opts: &ForwardOptions,
) -> Result<DesignMatrix> {
    let (ns, nt) = (cov.grid().n_sites(), cov.times().n_times());
    let depth = n.min(nt - 1);
    let op = series_operator(prop, cov, depth, opts)?;
    let mut x = DMatrix::zeros(ns * nt, cov.k());
    for p in 0..cov.k() {
        let inputs: Vec<Vec<f64>> = (0..nt).map(|t| cov.slice(t, p).to_vec()).collect();
        for (t, col) in op.apply(&inputs, depth).iter().enumerate() {
            for (s, v) in col.iter().enumerate() {
                x[(t * ns + s, p)] = *v;
            }
        }
    }
    Ok(DesignMatrix { x, n_sites: ns, n_times: nt })
}

/// Sup-norm distance between the series mean at the last time truncated at
/// each `n` and the mean truncated at `reference` (default: the standard
/// series depth).
pub fn truncation_error_curve(
    params: &ModelParams,
    cov: &CovariateSeries,
    n_values: &[usize],
    reference: Option<usize>,
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    if !(params.prop.lambda > 0.0) {
        return Err(Error::Domain("the series converges geometrically only for a positive decay rate".into()));
    }
    cov.check_against(&params.beta)?;
    let nt = cov.times().n_times();
    let t = nt - 1;
    let n_ref = reference.unwrap_or_else(|| default_series_depth(params.prop.lambda, cov.times().delta(), nt));
    let depth = n_ref.min(t);
    let inputs: Vec<Vec<f64>> = (t - depth..=t).map(|s| cov.generation(s, &params.beta).into_vec()).collect();
    let op = series_operator(&params.prop, cov, depth, opts)?;

    // partial sums at the last time for every truncation depth up to the reference
    let hats: Vec<Vec<Complex64>> = inputs.iter().map(|x| op.forward(x)).collect();
    let partial = |m: usize| -> Vec<f64> {
        let m = m.min(depth);
        let slice: Vec<Vec<f64>> = inputs[depth - m..].to_vec();
        match op.boundary {
            BoundaryMode::ZeroPad => {
                op.apply_linear(&slice, &hats[depth - m..], m).pop().expect("non-empty")
            }
            BoundaryMode::Renorm => op.apply_renorm(&slice, &hats[depth - m..], m).pop().expect("non-empty"),
        }
    };
    let full = partial(depth);
    Ok(n_values
        .iter()
        .map(|&n| {
            if n >= n_ref {
                return 0.0;
            }
            partial(n).iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::spatial_cov::SpatialCovModel;

    fn params(lambda: f64, v: (f64, f64), rho: (f64, f64), sill: f64, beta: Vec<f64>) -> ModelParams {
        ModelParams::new(
            PropagationParams::new(lambda, v, rho.0, rho.1).unwrap(),
            SpatialCovModel::gaussian(sill, 5.0).unwrap(),
            beta,
        )
        .unwrap()
    }

    fn setup(nx: usize, ny: usize, nt: usize) -> (SpatialGrid, TimeAxis) {
        (SpatialGrid::new(nx, ny).unwrap(), TimeAxis::new(nt, 1.0, 0.0).unwrap())
    }

    fn wavy(grid: SpatialGrid, times: TimeAxis) -> CovariateSeries {
        CovariateSeries::from_fn(grid, times, 2, |t, p, r, c| {
            if p == 0 {
                1.0 + 0.3 * ((r as f64) * 0.4 + t as f64 * 0.7).sin() * ((c as f64) * 0.3).cos()
            } else {
                0.5 * ((r + 2 * c) as f64 * 0.2 - t as f64 * 0.1).cos()
            }
        })
        .unwrap()
    }

    #[test]
    fn decayed_noise_free_field_vanishes() {
        let (g, t) = setup(9, 9, 6);
        let p = params(1e3, (0.0, 0.0), (1.0, 1.0), 1e-24, vec![0.0]);
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let y = simulate(&p, &cov, &Field2::zeros(9, 9), &mut seeded(1), &ForwardOptions::default()).unwrap();
        assert!(y.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn unit_generation_raises_mean_by_one() {
        let (g, t) = setup(11, 11, 6);
        let p = params(0.0, (0.0, 0.0), (1.0, 1.0), 1e-24, vec![1.0]);
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let opts = ForwardOptions { boundary: BoundaryMode::Renorm, ..Default::default() };
        let y = simulate(&p, &cov, &Field2::zeros(11, 11), &mut seeded(2), &opts).unwrap();
        for k in 1..6 {
            let step = y.slice(k).mean() - y.slice(k - 1).mean();
            assert!((step - 1.0).abs() < 1e-9, "step {k}: {step}");
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (g, t) = setup(5, 5, 3);
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let p = params(0.1, (0.0, 0.0), (1.0, 1.0), 0.01, vec![1.0, 2.0]);
        assert!(simulate(&p, &cov, &Field2::zeros(5, 5), &mut seeded(0), &ForwardOptions::default()).is_err());
        let p = params(0.1, (0.0, 0.0), (1.0, 1.0), 0.01, vec![1.0]);
        assert!(simulate(&p, &cov, &Field2::zeros(4, 5), &mut seeded(0), &ForwardOptions::default()).is_err());
    }

    #[test]
    fn simulation_is_seed_deterministic_and_linear_in_beta() {
        let (g, t) = setup(10, 8, 5);
        let cov = wavy(g, t);
        let opts = ForwardOptions::default();
        let p1 = params(0.2, (0.3, 0.5), (0.8, 0.4), 0.01, vec![1.0, -0.5]);
        let mut p2 = p1.clone();
        p2.beta = vec![2.0, -1.0];
        let zero = Field2::zeros(10, 8);
        let a = simulate(&p1, &cov, &zero, &mut seeded(9), &opts).unwrap();
        let a2 = simulate(&p1, &cov, &zero, &mut seeded(9), &opts).unwrap();
        assert_eq!(a, a2);
        let b = simulate(&p2, &cov, &zero, &mut seeded(9), &opts).unwrap();

        // deterministic component by hand: D(t) = g(t) + step(D(t-1))
        let prop = Propagator::new(&p1.prop, &g, 1.0, &opts).unwrap();
        let mut d = zero.clone();
        for k in 1..5 {
            let mut next = cov.generation(k, &p1.beta);
            next.axpy(1.0, &prop.step(&d));
            d = next;
            for (i, v) in d.as_slice().iter().enumerate() {
                let diff = b.slice_values(k)[i] - a.slice_values(k)[i];
                assert!((diff - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn series_depth_zero_is_raw_generation() {
        let (g, t) = setup(7, 6, 4);
        let cov = wavy(g, t);
        let p = params(0.1, (0.0, 0.5), (1.0, 0.25), 0.01, vec![1.5, 2.0]);
        let m = truncated_series_mean(&p, &cov, 0, 3, &ForwardOptions::default()).unwrap();
        assert_eq!(m, cov.generation(3, &p.beta));
    }

    #[test]
    fn constant_covariate_gives_geometric_sum() {
        let (g, t) = setup(9, 9, 12);
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let p = params(0.3, (0.0, 0.5), (1.0, 0.25), 0.01, vec![2.0]);
        let opts = ForwardOptions { boundary: BoundaryMode::Renorm, ..Default::default() };
        let q = (-0.3f64).exp();
        for n in [0usize, 1, 4, 11] {
            let m = truncated_series_mean(&p, &cov, n, 11, &opts).unwrap();
            let expected = 2.0 * (1.0 - q.powi(n as i32 + 1)) / (1.0 - q);
            for v in m.as_slice() {
                assert!((v - expected).abs() < 1e-10, "n = {n}: {v} vs {expected}");
            }
        }
    }

    #[test]
    fn recursion_matches_series_on_interior() {
        let (g, t) = setup(41, 41, 5);
        let cov = wavy(g, t);
        let p = params(0.15, (0.3, 0.2), (0.5, 0.3), 1e-24, vec![1.0, 0.7]);
        let opts = ForwardOptions::default();
        // slice 0 is the initial state; seeding it with g(t0) makes the recursion
        // carry the same i = 4 term as the series
        let y = simulate(&p, &cov, &cov.generation(0, &p.beta), &mut seeded(4), &opts).unwrap();
        let m = truncated_series_mean(&p, &cov, 4, 4, &opts).unwrap();
        for row in 17..24 {
            for col in 17..24 {
                assert!((y.get(4, row, col) - m.get(row, col)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn design_matrix_consistency() {
        let (g, t) = setup(8, 7, 6);
        let cov = wavy(g, t);
        let p = params(0.1, (0.4, -0.3), (0.9, 0.3), 0.01, vec![1.2, -0.4]);
        let opts = ForwardOptions::default();
        let x = build_design_matrix(&p.prop, &cov, 200, &opts).unwrap();
        assert_eq!((x.rows(), x.cols()), (56 * 6, 2));
        let xb = x.apply(&p.beta).unwrap();
        for k in 0..6 {
            let m = truncated_series_mean(&p, &cov, 200, k, &opts).unwrap();
            for (s, v) in m.as_slice().iter().enumerate() {
                assert!((xb[k * 56 + s] - v).abs() < 1e-10);
            }
        }

        let x0 = build_design_matrix(&p.prop, &cov, 0, &opts).unwrap();
        for k in 0..6 {
            for s in 0..56 {
                assert_eq!(x0.matrix()[(k * 56 + s, 1)], cov.slice(k, 1)[s]);
            }
        }

        let fast = PropagationParams::new(60.0, (0.0, 0.0), 1.0, 1.0).unwrap();
        let xf = build_design_matrix(&fast, &cov, 50, &opts).unwrap();
        for k in 0..6 {
            for s in 0..56 {
                assert!((xf.matrix()[(k * 56 + s, 0)] - cov.slice(k, 0)[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_design_matrix_matches_direct_sum() {
        let (g, t) = setup(6, 6, 9);
        let cov = wavy(g, t);
        let p = params(0.2, (0.5, 0.0), (0.6, 0.6), 0.01, vec![1.0, 1.0]);
        for boundary in [BoundaryMode::ZeroPad, BoundaryMode::Renorm] {
            let opts = ForwardOptions { boundary, ..Default::default() };
            let x = build_design_matrix(&p.prop, &cov, 3, &opts).unwrap();
            let xb = x.apply(&p.beta).unwrap();
            for k in 0..9 {
                let m = truncated_series_mean(&p, &cov, 3, k, &opts).unwrap();
                for (s, v) in m.as_slice().iter().enumerate() {
                    assert!((xb[k * 36 + s] - v).abs() < 1e-10, "{boundary:?} t={k}");
                }
            }
        }
    }

    #[test]
    fn truncation_curve_is_geometric() {
        let (g, t) = setup(7, 7, 40);
        let cov = CovariateSeries::constant(g, t, 1.0).unwrap();
        let opts = ForwardOptions { boundary: BoundaryMode::Renorm, ..Default::default() };
        let p = params(0.1, (0.0, 0.0), (0.5, 0.5), 0.01, vec![1.0]);
        let ns: Vec<usize> = (1..10).collect();
        let err = truncation_error_curve(&p, &cov, &ns, Some(39), &opts).unwrap();
        for w in err.windows(2) {
            assert!(w[1] <= w[0]);
            assert!((w[1] / w[0] / (-0.1f64).exp() - 1.0).abs() < 0.05);
        }
        assert_eq!(truncation_error_curve(&p, &cov, &[39], Some(39), &opts).unwrap(), vec![0.0]);

        let p = params(0.5, (0.0, 0.0), (0.5, 0.5), 0.01, vec![1.0]);
        let err = truncation_error_curve(&p, &cov, &[5, 10], Some(39), &opts).unwrap();
        assert!((err[1] / err[0] / (-2.5f64).exp() - 1.0).abs() < 0.05);

        let p = params(0.0, (0.0, 0.0), (0.5, 0.5), 0.01, vec![1.0]);
        assert!(matches!(truncation_error_curve(&p, &cov, &[1], None, &opts), Err(Error::Domain(_))));
    }

    #[test]
    fn default_depth() {
        assert_eq!(default_series_depth(0.1, 1.0, 20), 139);
        assert_eq!(default_series_depth(0.0, 1.0, 20), 200);
        assert_eq!(default_series_depth(0.25, 1.0, 100), 56);
    }

    #[test]
    fn covariate_csv_round_trip() {
        let (g, t) = setup(3, 2, 2);
        let cov = wavy(g, t);
        let mut buf = Vec::new();
        cov.write_csv(&mut buf).unwrap();
        assert!(std::str::from_utf8(&buf).unwrap().starts_with("t,p,x,y,value\n"));
        assert_eq!(CovariateSeries::read_csv(&buf[..], 1.0).unwrap(), cov);
    }
}
