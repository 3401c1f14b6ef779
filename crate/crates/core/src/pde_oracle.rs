//! Spectral reference solver for constant-coefficient convection, diffusion
//! and decay on a periodic square domain, with checks that one propagation
//! step of the convolution model reproduces it.

use std::f64::consts::PI;
use std::io::Write;

use rustfft::num_complex::Complex64;

use crate::error::{arg, Error, Result};
use crate::fft::{fft2, signed_freq};
use crate::grid::{fmt_f64, Field2};
use crate::kernel::{convolve, discretize, kernel_spec, BoundaryMode, PropagationParams};

/// Transport coefficients: velocity, diffusivities along and across the
/// velocity, and the decay timescale (`f64::INFINITY` for no decay).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportParams {
    pub v: (f64, f64),
    pub k_par: f64,
    pub k_perp: f64,
    pub tau: f64,
}

impl TransportParams {
    pub fn new(v: (f64, f64), k_par: f64, k_perp: f64, tau: f64) -> Result<Self> {
        if !v.0.is_finite() || !v.1.is_finite() {
            return arg("velocity must be finite");
        }
        if !(k_par >= 0.0 && k_par.is_finite()) || !(k_perp >= 0.0 && k_perp.is_finite()) {
            return arg(format!("diffusivities must be non-negative, got ({k_par}, {k_perp})"));
        }
        if !(tau > 0.0) {
            return arg(format!("decay timescale must be positive, got {tau}"));
        }
        Ok(Self { v, k_par, k_perp, tau })
    }

    pub fn isotropic(v: (f64, f64), k: f64, tau: f64) -> Result<Self> {
        Self::new(v, k, k, tau)
    }

    /// Decay rate `1 / tau`.
    pub fn lambda(&self) -> f64 {
        1.0 / self.tau
    }

    /// Matching propagation parameters: `lambda = 1 / tau`, `rho = 2 K`.
    pub fn propagation(&self) -> Result<PropagationParams> {
        PropagationParams::new(self.lambda(), self.v, 2.0 * self.k_par, 2.0 * self.k_perp)
    }

    /// Unit vector along the velocity (the x axis when the velocity is zero).
    fn along(&self) -> (f64, f64) {
        let n = self.v.0.hypot(self.v.1);
        if n == 0.0 {
            (1.0, 0.0)
        } else {
            (self.v.0 / n, self.v.1 / n)
        }
    }
}

fn check_square(field: &Field2) -> Result<usize> {
    if field.nx() != field.ny() {
        return arg(format!("periodic domain must be square, got {}x{}", field.nx(), field.ny()));
    }
    Ok(field.nx())
}

fn to_spectrum(field: &Field2) -> Vec<Complex64> {
    let n = field.nx();
    let mut buf: Vec<Complex64> = field.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, n, n, false);
    buf
}

fn from_spectrum(mut buf: Vec<Complex64>, n: usize) -> Field2 {
    fft2(&mut buf, n, n, true);
    let scale = 1.0 / (n * n) as f64;
    Field2::from_vec(n, n, buf.iter().map(|c| c.re * scale).collect()).expect("square buffer")
}

/// Angular wavenumbers `(eta_x, eta_y)` of bin `(row, col)`.
fn wavenumber(row: usize, col: usize, n: usize, spacing: f64) -> (f64, f64) {
    let unit = 2.0 * PI / (n as f64 * spacing);
    (unit * signed_freq(col, n), unit * signed_freq(row, n))
}

/// Advances `field` (periodic, square, cells of side `spacing`) by `delta`:
/// each Fourier coefficient is multiplied by `exp(-delta / tau - (i eta.v +
/// K(eta)) delta)` with `K(eta) = K_par (eta.u)^2 + K_perp (eta.u_perp)^2`
/// and `u` the velocity direction.
pub fn spectral_step(field: &Field2, p: &TransportParams, delta: f64, spacing: f64) -> Result<Field2> {
    let n = check_square(field)?;
    if !(delta >= 0.0) || !(spacing > 0.0) {
        return arg("step length must be non-negative and spacing positive");
    }
    let mut spec = to_spectrum(field);
    let u = p.along();
    let decay = if p.tau.is_infinite() { 0.0 } else { delta / p.tau };
    for row in 0..n {
        for col in 0..n {
            let (ex, ey) = wavenumber(row, col, n, spacing);
            let par = ex * u.0 + ey * u.1;
            let perp = -ex * u.1 + ey * u.0;
            let diffusion = p.k_par * par * par + p.k_perp * perp * perp;
            let advect = ex * p.v.0 + ey * p.v.1;
            let m = Complex64::new(-decay - diffusion * delta, -advect * delta).exp();
            spec[row * n + col] *= m;
        }
    }
    Ok(from_spectrum(spec, n))
}

fn mass(f: &Field2, spacing: f64) -> f64 {
    f.sum() * spacing * spacing
}

/// Intensity-weighted centre `(x, y)` in physical units.
fn centroid(f: &Field2, spacing: f64) -> (f64, f64) {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for row in 0..f.ny() {
        for col in 0..f.nx() {
            let w = f.get(row, col);
            sx += w * col as f64 * spacing;
            sy += w * row as f64 * spacing;
            s += w;
        }
    }
    (sx / s, sy / s)
}

/// Outcome of [`verify_kernel_equivalence`].
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub params: TransportParams,
    pub delta: f64,
    pub domain_size: usize,
    pub spacing: f64,
    pub truncation_sigmas: f64,
    pub tolerance: f64,
    /// `max |spectral - kernel| / max |spectral|`.
    pub max_rel_error: f64,
    pub mass_initial: f64,
    pub mass_spectral: f64,
    pub mass_kernel: f64,
    pub centroid_initial: (f64, f64),
    pub centroid_spectral: (f64, f64),
    pub centroid_kernel: (f64, f64),
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let p = &self.params;
        writeln!(out, "kernel equivalence check")?;
        writeln!(out, "v = ({}, {})", fmt_f64(p.v.0), fmt_f64(p.v.1))?;
        writeln!(out, "k_par = {}", fmt_f64(p.k_par))?;
        writeln!(out, "k_perp = {}", fmt_f64(p.k_perp))?;
        writeln!(out, "tau = {}", fmt_f64(p.tau))?;
        writeln!(out, "delta = {}", fmt_f64(self.delta))?;
        writeln!(out, "domain = {0}x{0} cells of side {1}", self.domain_size, fmt_f64(self.spacing))?;
        writeln!(out, "kernel truncation = {} standard deviations", fmt_f64(self.truncation_sigmas))?;
        writeln!(out, "max_rel_error = {}", fmt_f64(self.max_rel_error))?;
        writeln!(out, "tolerance = {}", fmt_f64(self.tolerance))?;
        writeln!(out, "mass ratio spectral = {}", fmt_f64(self.mass_spectral / self.mass_initial))?;
        writeln!(out, "mass ratio kernel = {}", fmt_f64(self.mass_kernel / self.mass_initial))?;
        let shift = |c: (f64, f64)| (c.0 - self.centroid_initial.0, c.1 - self.centroid_initial.1);
        let (sx, sy) = shift(self.centroid_spectral);
        let (kx, ky) = shift(self.centroid_kernel);
        writeln!(out, "centroid shift spectral = ({}, {})", fmt_f64(sx), fmt_f64(sy))?;
        writeln!(out, "centroid shift kernel = ({}, {})", fmt_f64(kx), fmt_f64(ky))?;
        writeln!(out, "result = {}", if self.passed { "PASS" } else { "FAIL" })?;
        Ok(())
    }
}

/// Compares one spectral step of a smooth compact bump with one step of
/// the convolution model using `lambda = 1 / tau`, mean `v delta` and
/// variances `2 K delta`, discretized with the given truncation in standard
/// deviations. The kernel footprint `sqrt(2 K delta)` must span at least
/// two cells and at most an eighth of the domain.
pub fn verify_kernel_equivalence(
    p: &TransportParams,
    delta: f64,
    domain_size: usize,
    spacing: f64,
    truncation_sigmas: f64,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    if !(delta > 0.0) || !(spacing > 0.0) || domain_size < 16 {
        return arg("need a positive step, a positive spacing and at least 16 cells per side");
    }
    let limit = domain_size as f64 / 8.0;
    for k in [p.k_par, p.k_perp] {
        let cells = (2.0 * k * delta).sqrt() / spacing;
        if !(2.0..=limit).contains(&cells) {
            return Err(Error::Config(format!(
                "kernel footprint of {cells:.3} cells is outside [2, {limit}] for a {domain_size}-cell domain"
            )));
        }
    }
    let shift = (p.v.0 * delta, p.v.1 * delta);
    if shift.0.abs().max(shift.1.abs()) / spacing > limit {
        return Err(Error::Config("the step moves the field by more than an eighth of the domain".into()));
    }

    // Gaussian bump centred so the shifted result is central, narrow enough
    // that the periodic images do not overlap
    let footprint = (2.0 * p.k_par.max(p.k_perp) * delta).sqrt();
    let extent = domain_size as f64 * spacing;
    let width = (3.0 * footprint).min(extent / 20.0);
    let half = 0.5 * extent;
    let (cx, cy) = (half - 0.5 * shift.0, half - 0.5 * shift.1);
    let initial = Field2::from_fn(domain_size, domain_size, |row, col| {
        let (x, y) = (col as f64 * spacing, row as f64 * spacing);
        (-0.5 * ((x - cx).powi(2) + (y - cy).powi(2)) / (width * width)).exp()
    });

    let spectral = spectral_step(&initial, p, delta, spacing)?;
    let kernel = discretize(&kernel_spec(&p.propagation()?, delta)?, spacing, truncation_sigmas)?;
    let conv = convolve(&initial, &kernel, BoundaryMode::ZeroPad);

    let peak = spectral.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = spectral.as_slice().iter().zip(conv.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let max_rel_error = diff / peak;
    Ok(EquivalenceReport {
        params: *p,
        delta,
        domain_size,
        spacing,
        truncation_sigmas,
        tolerance,
        max_rel_error,
        mass_initial: mass(&initial, spacing),
        mass_spectral: mass(&spectral, spacing),
        mass_kernel: mass(&conv, spacing),
        centroid_initial: centroid(&initial, spacing),
        centroid_spectral: centroid(&spectral, spacing),
        centroid_kernel: centroid(&conv, spacing),
        passed: max_rel_error < tolerance,
    })
}

/// Outcome of [`first_order_generation_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCheck {
    pub deltas: Vec<f64>,
    /// `max |approx - exact| / max |exact|` per step length.
    pub errors: Vec<f64>,
    /// `|mean(approx) - mean(exact)|` per step length.
    pub mean_gaps: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln delta`; `None` when
    /// some error is zero.
    pub order: Option<f64>,
}

impl GenerationCheck {
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "generation convergence check")?;
        writeln!(out, "{:>14} {:>14} {:>14}", "delta", "rel_error", "mean_gap")?;
        for ((d, e), g) in self.deltas.iter().zip(&self.errors).zip(&self.mean_gaps) {
            writeln!(out, "{d:>14.6e} {e:>14.6e} {g:>14.6e}")?;
        }
        match self.order {
            Some(o) => writeln!(out, "order = {}", fmt_f64(o))?,
            None => writeln!(out, "order = undefined (zero error)")?,
        }
        Ok(())
    }
}

/// `(1 - exp(-z)) / z`, equal to 1 at `z = 0`.
fn phi1(z: Complex64) -> Complex64 {
    if z.norm() < 1e-8 {
        Complex64::new(1.0, 0.0) - z * 0.5
    } else {
        (Complex64::new(1.0, 0.0) - (-z).exp()) / z
    }
}

/// Pure convection with a source, `dY/dt + v.grad Y = Q`, from a zero field
/// over `[0, horizon]`. The exact spectral solution is compared with the
/// shift-plus-source recursion `Y <- Y(s - v delta) + Q delta` for each
/// step length (each must divide the horizon).
pub fn first_order_generation_check(
    q: &Field2,
    v: (f64, f64),
    spacing: f64,
    horizon: f64,
    delta_values: &[f64],
) -> Result<GenerationCheck> {
    let n = check_square(q)?;
    if delta_values.is_empty() || !(horizon > 0.0) {
        return arg("need a positive horizon and at least one step length");
    }
    let transport = TransportParams::new(v, 0.0, 0.0, f64::INFINITY)?;

    let mut spec = to_spectrum(q);
    for row in 0..n {
        for col in 0..n {
            let (ex, ey) = wavenumber(row, col, n, spacing);
            let z = Complex64::new(0.0, (ex * v.0 + ey * v.1) * horizon);
            spec[row * n + col] *= phi1(z) * horizon;
        }
    }
    let exact = from_spectrum(spec, n);
    let peak = exact.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut errors = Vec::with_capacity(delta_values.len());
    let mut mean_gaps = Vec::with_capacity(delta_values.len());
    for &delta in delta_values {
        let steps = (horizon / delta).round();
        if !(delta > 0.0) || (steps * delta - horizon).abs() > 1e-9 * horizon {
            return arg(format!("step length {delta} does not divide the horizon {horizon}"));
        }
        let mut y = Field2::zeros(n, n);
        for _ in 0..steps as usize {
            y = spectral_step(&y, &transport, delta, spacing)?;
            y.axpy(delta, q);
        }
        let diff = y.as_slice().iter().zip(exact.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        errors.push(if peak > 0.0 { diff / peak } else { diff });
        mean_gaps.push((y.mean() - exact.mean()).abs());
    }

    let order = if errors.len() >= 2 && errors.iter().all(|e| *e > 0.0) {
        let xs: Vec<f64> = delta_values.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(GenerationCheck { deltas: delta_values.to_vec(), errors, mean_gaps, order })
}
