//! Anisotropic Gaussian propagation kernel and its discrete 2-D convolution.
//!
//! One propagation step over an interval `delta` moves degradation by
//! `v * delta` and spreads it with covariance `R diag(rho1, rho2) R^T * delta`,
//! where `R` rotates the x axis onto the propagation direction; the
//! propagated amount is attenuated by `exp(-lambda * delta)`.

use rustfft::num_complex::Complex64;

use crate::error::{arg, Error, Result};
use crate::fft::fft2;
use crate::grid::{Field2, SpatialGrid};

/// Default truncation of the kernel window, in standard deviations.
pub const DEFAULT_TRUNCATION_SIGMAS: f64 = 4.0;

/// Kernels with both sides at most this many taps use the direct stencil.
pub const DIRECT_STENCIL_MAX: usize = 15;


pub type Mat2 = [[f64; 2]; 2];

/// Decay rate, propagation velocity and the two kernel variance rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    pub lambda: f64,
    pub v: (f64, f64),
    pub rho1: f64,
    pub rho2: f64,
}

impl PropagationParams {
    pub fn new(lambda: f64, v: (f64, f64), rho1: f64, rho2: f64) -> Result<Self> {
        let p = Self { lambda, v, rho1, rho2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.lambda.is_nan() {
            return arg(format!("decay rate must be non-negative, got {}", self.lambda));
        }
        if !self.v.0.is_finite() || !self.v.1.is_finite() {
            return arg("propagation velocity must be finite");
        }
        if !(self.rho1 > 0.0 && self.rho1.is_finite()) || !(self.rho2 > 0.0 && self.rho2.is_finite()) {
            return arg(format!(
                "kernel variance rates must be positive, got ({}, {})",
                self.rho1, self.rho2
            ));
        }
        Ok(())
    }

    /// `exp(-lambda * delta)`.
    pub fn decay(&self, delta: f64) -> f64 {
        (-self.lambda * delta).exp()
    }
}

/// Counter-clockwise rotation by the angle of `v` from the x axis. The zero
/// vector has no direction and maps to the identity.
pub fn rotation_matrix(v: (f64, f64)) -> Mat2 {
    if v.0 == 0.0 && v.1 == 0.0 {
        return [[1.0, 0.0], [0.0, 1.0]];
    }
    let alpha = v.1.atan2(v.0).rem_euclid(std::f64::consts::TAU);
    let (s, c) = alpha.sin_cos();
    [[c, -s], [s, c]]
}

/// Continuous description of one propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub mean: (f64, f64),
    pub cov: Mat2,
    pub weight: f64,
}

impl KernelSpec {
    /// The `n`-fold self-convolution: mean and covariance scale by `n`, the
    /// weight is raised to the `n`-th power.
    pub fn power(&self, n: u32) -> KernelSpec {
        let k = n as f64;
        KernelSpec {
            mean: (self.mean.0 * k, self.mean.1 * k),
            cov: [[self.cov[0][0] * k, self.cov[0][1] * k], [self.cov[1][0] * k, self.cov[1][1] * k]],
            weight: self.weight.powi(n as i32),
        }
    }

    /// Eigenvalues of the covariance, ascending.
    pub fn cov_eigenvalues(&self) -> (f64, f64) {
        sym_eigenvalues(&self.cov)
    }

    /// Density of the Gaussian part at `x`.
    pub fn density(&self, x: (f64, f64)) -> f64 {
        gaussian_pdf2(x, self.mean, &self.cov)
    }
}

/// Builds the step kernel for interval `delta`.
pub fn kernel_spec(p: &PropagationParams, delta: f64) -> Result<KernelSpec> {
    if !(delta > 0.0) || !delta.is_finite() {
        return arg(format!("time step must be positive, got {delta}"));
    }
    p.validate()?;
    let r = rotation_matrix(p.v);
    let (a, b) = (p.rho1 * delta, p.rho2 * delta);
    // R diag(a, b) R^T
    let cov = [
        [a * r[0][0] * r[0][0] + b * r[0][1] * r[0][1], a * r[0][0] * r[1][0] + b * r[0][1] * r[1][1]],
        [a * r[1][0] * r[0][0] + b * r[1][1] * r[0][1], a * r[1][0] * r[1][0] + b * r[1][1] * r[1][1]],
    ];
    let cov = symmetrize(cov);
    Ok(KernelSpec {
        mean: (p.v.0 * delta, p.v.1 * delta),
        cov,
        weight: p.decay(delta),
    })
}

/// Boundary treatment of the discrete convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Sources outside the domain contribute zero; mass leaves the domain.
    #[default]
    ZeroPad,
    /// Taps are renormalized over the in-domain sources of each cell.
    Renorm,
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-pad" | "zeropad" | "zero" => Ok(Self::ZeroPad),
            "renorm" => Ok(Self::Renorm),
            other => Err(Error::Config(format!("unknown boundary mode `{other}`"))),
        }
    }
}

/// Kernel taps on an odd-sided stencil. Tap `(b, a)` (row, column) sits at
/// the cell displacement `(center.0 + a - rx, center.1 + b - ry)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernel {
    taps: Vec<f64>,
    rx: usize,
    ry: usize,
    center: (i64, i64),
    weight: f64,
    /// Column and row factors when the taps are an outer product.
    factors: Option<(Vec<f64>, Vec<f64>)>,
}

impl DiscreteKernel {
    /// Kernel with a single unit tap at the given displacement.
    pub fn dirac(center: (i64, i64), weight: f64) -> Self {
        Self { taps: vec![1.0], rx: 0, ry: 0, center, weight, factors: Some((vec![1.0], vec![1.0])) }
    }

    pub fn from_taps(taps: Vec<f64>, rx: usize, ry: usize, center: (i64, i64), weight: f64) -> Result<Self> {
        if taps.len() != (2 * rx + 1) * (2 * ry + 1) {
            return arg("tap count does not match the stencil size");
        }
        if taps.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return arg("kernel taps must be finite and non-negative");
        }
        Ok(Self { taps, rx, ry, center, weight, factors: None })
    }

    pub fn width(&self) -> usize {
        2 * self.rx + 1
    }

    pub fn height(&self) -> usize {
        2 * self.ry + 1
    }

    pub fn radius(&self) -> (usize, usize) {
        (self.rx, self.ry)
    }

    pub fn center(&self) -> (i64, i64) {
        self.center
    }

    /// Decay weight applied on top of the normalized taps.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at cell displacement `(dx, dy)`, zero outside the stencil.
    pub fn tap_at(&self, dx: i64, dy: i64) -> f64 {
        let a = dx - self.center.0 + self.rx as i64;
        let b = dy - self.center.1 + self.ry as i64;
        if a < 0 || b < 0 || a >= self.width() as i64 || b >= self.height() as i64 {
            return 0.0;
        }
        self.taps[b as usize * self.width() + a as usize]
    }

    pub fn tap_sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Mean displacement of the taps, in cells.
    pub fn centroid(&self) -> (f64, f64) {
        let m = moments(&self.taps, self.rx, self.ry, self.center);
        (m.0, m.1)
    }

    /// Covariance of the tap distribution, in cells squared.
    pub fn tap_covariance(&self) -> Mat2 {
        moments(&self.taps, self.rx, self.ry, self.center).2
    }

    /// Exact discrete convolution of two kernels; weights multiply.
    pub fn compose(&self, other: &DiscreteKernel) -> DiscreteKernel {
        let (w1, h1) = (self.width(), self.height());
        let (w2, h2) = (other.width(), other.height());
        let (w, h) = (w1 + w2 - 1, h1 + h2 - 1);
        let mut taps = vec![0.0; w * h];
        for b1 in 0..h1 {
            for a1 in 0..w1 {
                let t1 = self.taps[b1 * w1 + a1];
                if t1 == 0.0 {
                    continue;
                }
                for b2 in 0..h2 {
                    let row = &mut taps[(b1 + b2) * w + a1..(b1 + b2) * w + a1 + w2];
                    for (dst, &t2) in row.iter_mut().zip(&other.taps[b2 * w2..(b2 + 1) * w2]) {
                        *dst += t1 * t2;
                    }
                }
            }
        }
        DiscreteKernel {
            taps,
            rx: self.rx + other.rx,
            ry: self.ry + other.ry,
            center: (self.center.0 + other.center.0, self.center.1 + other.center.1),
            weight: self.weight * other.weight,
            factors: None,
        }
    }

    /// Kernel reflected through the origin, `k(-x)`.
    pub fn reflected(&self) -> DiscreteKernel {
        let mut taps = self.taps.clone();
        taps.reverse();
        DiscreteKernel {
            taps,
            rx: self.rx,
            ry: self.ry,
            center: (-self.center.0, -self.center.1),
            weight: self.weight,
            factors: self.factors.as_ref().map(|(fx, fy)| {
                (fx.iter().rev().copied().collect(), fy.iter().rev().copied().collect())
            }),
        }
    }

    /// Rejects stencils wider than four times the grid extent.
    pub fn ensure_fits(&self, grid: &SpatialGrid) -> Result<()> {
        if self.width() > 4 * grid.nx() || self.height() > 4 * grid.ny() {
            return Err(Error::Config(format!(
                "kernel window {}x{} exceeds four times the {}x{} grid",
                self.width(),
                self.height(),
                grid.nx(),
                grid.ny()
            )));
        }
        Ok(())
    }
}

/// Samples the kernel density at cell centres over a window covering
/// `mean +- truncation_sigmas * sqrt(max eigenvalue)` and normalizes the taps
/// to unit mass; the decay weight is stored separately. Past the truncation
/// radius the taps fade to zero over one further cell, so they vary
/// continuously with the kernel parameters. Narrow kernels, whose sampled
/// taps misstate the target moments, are corrected towards the exact mean and
/// covariance: fully when the smallest variance is in `[0.1, 0.5]` cell
/// units squared, fading out towards 0.05 and 1.
pub fn discretize(spec: &KernelSpec, spacing: f64, truncation_sigmas: f64) -> Result<DiscreteKernel> {
    if !(truncation_sigmas >= 3.0) {
        return arg(format!("truncation must be at least 3 sigmas, got {truncation_sigmas}"));
    }
    if !(spacing > 0.0) {
        return arg("grid spacing must be positive");
    }
    let h2 = spacing * spacing;
    let mean = (spec.mean.0 / spacing, spec.mean.1 / spacing);
    let cov = [
        [spec.cov[0][0] / h2, spec.cov[0][1] / h2],
        [spec.cov[1][0] / h2, spec.cov[1][1] / h2],
    ];
    if !mean.0.is_finite() || !mean.1.is_finite() || cov.iter().flatten().any(|v| !v.is_finite()) {
        return arg("kernel moments must be finite");
    }
    let (lo, hi) = sym_eigenvalues(&cov);
    if !(lo >= 0.0) {
        return arg("kernel covariance must be positive semi-definite");
    }
    let center = (mean.0.round() as i64, mean.1.round() as i64);

    if lo < 1e-12 * hi.max(1e-300) || lo < 1e-14 {
        // Degenerate (Dirac-like) kernel: all mass in the nearest cell.
        return Ok(DiscreteKernel::from_factors(vec![1.0], vec![1.0], center, spec.weight));
    }

    let reach = truncation_sigmas * hi.sqrt();
    let span = |m: f64, c: i64| -> usize {
        let lo_cell = (m - reach - 1.0).floor() as i64;
        let hi_cell = (m + reach + 1.0).ceil() as i64;
        (c - lo_cell).max(hi_cell - c).max(0) as usize
    };
    let (rx, ry) = (span(mean.0, center.0), span(mean.1, center.1));
    if rx > 100_000 || ry > 100_000 {
        return Err(Error::Config("kernel window is unreasonably large".into()));
    }
    let strength = correction_strength(lo);

    if cov[0][1].abs() <= 1e-12 * hi {
        let fx = sample_axis(rx, center.0, mean.0, cov[0][0], reach, strength);
        let fy = sample_axis(ry, center.1, mean.1, cov[1][1], reach, strength);
        let (fx, fy) = (trim_axis(fx), trim_axis(fy));
        return Ok(DiscreteKernel::from_factors(fx, fy, center, spec.weight));
    }

    let win = Window { rx, ry, center, anchor: mean, reach };
    let mut taps = win.sample(mean, &cov);
    if strength > 0.0 {
        let (mx, my, c) = moments(&taps, rx, ry, center);
        let blend = |a: f64, b: f64| (1.0 - strength) * a + strength * b;
        let target_mean = (blend(mx, mean.0), blend(my, mean.1));
        let target_cov = [
            [blend(c[0][0], cov[0][0]), blend(c[0][1], cov[0][1])],
            [blend(c[1][0], cov[1][0]), blend(c[1][1], cov[1][1])],
        ];
        if let Some(matched) = win.moment_match(target_mean, &target_cov) {
            taps = matched;
        }
    }
    let (taps, rx, ry) = trim(taps, rx, ry);
    Ok(DiscreteKernel { taps, rx, ry, center, weight: spec.weight, factors: None })
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Multiplier fading from 1 at distance `reach` to 0 one cell further.
fn taper(d: f64, reach: f64) -> f64 {
    1.0 - smoothstep(d - reach)
}

/// Weight of the moment correction for smallest principal variance `lo`.
fn correction_strength(lo: f64) -> f64 {
    if lo < 0.1 {
        smoothstep((lo - 0.05) / 0.05)
    } else {
        1.0 - smoothstep((lo - 0.5) / 0.5)
    }
}

/// Sampling window with its taper anchored at the target mean.
struct Window {
    rx: usize,
    ry: usize,
    center: (i64, i64),
    anchor: (f64, f64),
    reach: f64,
}

impl Window {
    fn sample(&self, mean: (f64, f64), cov: &Mat2) -> Vec<f64> {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let (w, h) = (2 * self.rx + 1, 2 * self.ry + 1);
        let mut taps = Vec::with_capacity(w * h);
        for b in 0..h {
            let yc = (self.center.1 + b as i64 - self.ry as i64) as f64;
            let ty = taper((yc - self.anchor.1).abs(), self.reach);
            let y = yc - mean.1;
            for a in 0..w {
                let xc = (self.center.0 + a as i64 - self.rx as i64) as f64;
                let tx = taper((xc - self.anchor.0).abs(), self.reach);
                let x = xc - mean.0;
                let q = x * x * inv[0][0] + 2.0 * x * y * inv[0][1] + y * y * inv[1][1];
                taps.push(tx * ty * (-0.5 * q).exp());
            }
        }
        let total: f64 = taps.iter().sum();
        if total > 0.0 {
            taps.iter_mut().for_each(|t| *t /= total);
        }
        taps
    }

    /// Damped fixed-point iteration on the sampled Gaussian's parameters until
    /// the taps carry the target first and second moments.
    fn moment_match(&self, mean: (f64, f64), cov: &Mat2) -> Option<Vec<f64>> {
        const DAMPING: f64 = 0.8;
        let mut m = mean;
        let mut s = *cov;
        for _ in 0..200 {
            let taps = self.sample(m, &s);
            let (mx, my, c) = moments(&taps, self.rx, self.ry, self.center);
            let err = (mean.0 - mx)
                .abs()
                .max((mean.1 - my).abs())
                .max((cov[0][0] - c[0][0]).abs())
                .max((cov[1][1] - c[1][1]).abs())
                .max((cov[0][1] - c[0][1]).abs());
            if err < 1e-13 * (1.0 + cov[0][0].max(cov[1][1])) {
                return Some(taps);
            }
            m.0 += DAMPING * (mean.0 - mx);
            m.1 += DAMPING * (mean.1 - my);
            s[0][0] += DAMPING * (cov[0][0] - c[0][0]);
            s[1][1] += DAMPING * (cov[1][1] - c[1][1]);
            s[0][1] += DAMPING * (cov[0][1] - c[0][1]);
            s[1][0] = s[0][1];
            let (lo, _) = sym_eigenvalues(&s);
            if !(lo > 0.0) {
                return None;
            }
        }
        None
    }
}

/// Drops all-zero outer rings while keeping the stencil odd-sided.
fn trim(taps: Vec<f64>, mut rx: usize, mut ry: usize) -> (Vec<f64>, usize, usize) {
    let w0 = 2 * rx + 1;
    let (mut x0, mut y0) = (0, 0);
    let zero_col = |c: usize, y0: usize, ry: usize| (y0..y0 + 2 * ry + 1).all(|r| taps[r * w0 + c] == 0.0);
    while rx > 0 && zero_col(x0, y0, ry) && zero_col(x0 + 2 * rx, y0, ry) {
        x0 += 1;
        rx -= 1;
    }
    let zero_row = |r: usize, x0: usize, rx: usize| (x0..x0 + 2 * rx + 1).all(|c| taps[r * w0 + c] == 0.0);
    while ry > 0 && zero_row(y0, x0, rx) && zero_row(y0 + 2 * ry, x0, rx) {
        y0 += 1;
        ry -= 1;
    }
    let mut out = Vec::with_capacity((2 * rx + 1) * (2 * ry + 1));
    for r in y0..y0 + 2 * ry + 1 {
        out.extend_from_slice(&taps[r * w0 + x0..r * w0 + x0 + 2 * rx + 1]);
    }
    (out, rx, ry)
}

fn trim_axis(mut f: Vec<f64>) -> Vec<f64> {
    while f.len() > 1 && f[0] == 0.0 && f[f.len() - 1] == 0.0 {
        f.pop();
        f.remove(0);
    }
    f
}

impl DiscreteKernel {
    fn from_factors(fx: Vec<f64>, fy: Vec<f64>, center: (i64, i64), weight: f64) -> Self {
        let taps = fy.iter().flat_map(|&g| fx.iter().map(move |&f| f * g)).collect();
        let (rx, ry) = ((fx.len() - 1) / 2, (fy.len() - 1) / 2);
        Self { taps, rx, ry, center, weight, factors: Some((fx, fy)) }
    }

    /// Whether the taps are stored as an outer product of two axis factors.
    pub fn is_separable(&self) -> bool {
        self.factors.is_some()
    }
}

/// One axis of a separable kernel, with the same taper and moment
/// correction as the two-dimensional taps.
fn sample_axis(r: usize, center: i64, mean: f64, var: f64, reach: f64, strength: f64) -> Vec<f64> {
    let sample = |m: f64, s: f64| -> Vec<f64> {
        let mut t: Vec<f64> = (0..2 * r + 1)
            .map(|a| {
                let xc = (center + a as i64 - r as i64) as f64;
                let x = xc - m;
                taper((xc - mean).abs(), reach) * (-0.5 * x * x / s).exp()
            })
            .collect();
        let total: f64 = t.iter().sum();
        t.iter_mut().for_each(|v| *v /= total);
        t
    };
    let axis_moments = |t: &[f64]| -> (f64, f64) {
        let xs = (0..t.len()).map(|a| (center + a as i64 - r as i64) as f64);
        let m: f64 = xs.clone().zip(t).map(|(x, w)| x * w).sum();
        let v: f64 = xs.zip(t).map(|(x, w)| (x - m) * (x - m) * w).sum();
        (m, v)
    };
    let plain = sample(mean, var);
    if strength == 0.0 {
        return plain;
    }
    let (pm, pv) = axis_moments(&plain);
    let target_m = (1.0 - strength) * pm + strength * mean;
    let target_v = (1.0 - strength) * pv + strength * var;
    let (mut m, mut s) = (target_m, target_v);
    for _ in 0..200 {
        let t = sample(m, s);
        let (tm, tv) = axis_moments(&t);
        if (target_m - tm).abs().max((target_v - tv).abs()) < 1e-13 * (1.0 + var) {
            return t;
        }
        m += 0.8 * (target_m - tm);
        s += 0.8 * (target_v - tv);
        if !(s > 0.0) {
            break;
        }
    }
    plain
}

fn moments(taps: &[f64], rx: usize, ry: usize, center: (i64, i64)) -> (f64, f64, Mat2) {
    let w = 2 * rx + 1;
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (i, &t) in taps.iter().enumerate() {
        let x = (center.0 + (i % w) as i64 - rx as i64) as f64;
        let y = (center.1 + (i / w) as i64 - ry as i64) as f64;
        m0 += t;
        mx += t * x;
        my += t * y;
    }
    mx /= m0;
    my /= m0;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (i, &t) in taps.iter().enumerate() {
        let x = (center.0 + (i % w) as i64 - rx as i64) as f64 - mx;
        let y = (center.1 + (i / w) as i64 - ry as i64) as f64 - my;
        sxx += t * x * x;
        sxy += t * x * y;
        syy += t * y * y;
    }
    (mx, my, [[sxx / m0, sxy / m0], [sxy / m0, syy / m0]])
}

/// `out(s) = sum_x taps(x) * field(s - x)`, scaled by the kernel's decay
/// weight. Small stencils run directly, larger ones through the FFT.
pub fn convolve(field: &Field2, k: &DiscreteKernel, boundary: BoundaryMode) -> Field2 {
    if k.width() <= DIRECT_STENCIL_MAX && k.height() <= DIRECT_STENCIL_MAX {
        convolve_direct(field, k, boundary)
    } else {
        convolve_fft(field, k, boundary)
    }
}

pub fn convolve_direct(field: &Field2, k: &DiscreteKernel, boundary: BoundaryMode) -> Field2 {
    if let Some((fx, fy)) = &k.factors {
        return convolve_separable(field, k, fx, fy, boundary);
    }
    let (nx, ny) = (field.nx() as i64, field.ny() as i64);
    let (w, h) = (k.width(), k.height());
    let src = field.as_slice();
    let mut out = Field2::zeros(field.nx(), field.ny());
    let renorm = boundary == BoundaryMode::Renorm;
    for row in 0..ny {
        for col in 0..nx {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for b in 0..h {
                let sy = row - (k.center.1 + b as i64 - k.ry as i64);
                if sy < 0 || sy >= ny {
                    continue;
                }
                let base = (sy * nx) as usize;
                let tap_row = &k.taps[b * w..(b + 1) * w];
                for (a, &t) in tap_row.iter().enumerate() {
                    let sx = col - (k.center.0 + a as i64 - k.rx as i64);
                    if sx < 0 || sx >= nx {
                        continue;
                    }
                    acc += t * src[base + sx as usize];
                    mass += t;
                }
            }
            let v = if renorm {
                if mass > 0.0 {
                    acc / mass
                } else {
                    0.0
                }
            } else {
                acc
            };
            out.set(row as usize, col as usize, k.weight * v);
        }
    }
    out
}

fn convolve_separable(field: &Field2, k: &DiscreteKernel, fx: &[f64], fy: &[f64], boundary: BoundaryMode) -> Field2 {
    let (nx, ny) = (field.nx() as i64, field.ny() as i64);
    let src = field.as_slice();
    let x0 = k.center.0 - k.rx as i64;
    let y0 = k.center.1 - k.ry as i64;
    let valid_mass = |f: &[f64], start: i64, pos: i64, n: i64| -> f64 {
        f.iter()
            .enumerate()
            .filter(|(a, _)| {
                let s = pos - (start + *a as i64);
                s >= 0 && s < n
            })
            .map(|(_, t)| t)
            .sum()
    };

    let mut tmp = vec![0.0; src.len()];
    for row in 0..ny as usize {
        let line = &src[row * nx as usize..(row + 1) * nx as usize];
        for col in 0..nx {
            let mut acc = 0.0;
            for (a, &t) in fx.iter().enumerate() {
                let sx = col - (x0 + a as i64);
                if sx >= 0 && sx < nx {
                    acc += t * line[sx as usize];
                }
            }
            tmp[row * nx as usize + col as usize] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..ny {
        for (b, &t) in fy.iter().enumerate() {
            let sy = row - (y0 + b as i64);
            if sy < 0 || sy >= ny {
                continue;
            }
            let dst = &mut out[(row * nx) as usize..((row + 1) * nx) as usize];
            let srow = &tmp[(sy * nx) as usize..((sy + 1) * nx) as usize];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += t * s;
            }
        }
    }
    if boundary == BoundaryMode::Renorm {
        let mx: Vec<f64> = (0..nx).map(|c| valid_mass(fx, x0, c, nx)).collect();
        for row in 0..ny {
            let my = valid_mass(fy, y0, row, ny);
            for col in 0..nx {
                let m = my * mx[col as usize];
                let v = &mut out[(row * nx + col) as usize];
                *v = if m > 0.0 { *v / m } else { 0.0 };
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= k.weight);
    Field2::from_vec(field.nx(), field.ny(), out).expect("shape preserved")
}

pub fn convolve_fft(field: &Field2, k: &DiscreteKernel, boundary: BoundaryMode) -> Field2 {
    let (nx, ny) = (field.nx(), field.ny());
    let (w, h) = (k.width(), k.height());
    let (cols, rows) = (nx + w - 1, ny + h - 1);
    let zero = Complex64::new(0.0, 0.0);

    let mut kern = vec![zero; rows * cols];
    for b in 0..h {
        for a in 0..w {
            kern[b * cols + a] = Complex64::new(k.taps[b * w + a], 0.0);
        }
    }
    fft2(&mut kern, rows, cols, false);

    let linear = |values: &dyn Fn(usize, usize) -> f64| -> Vec<Complex64> {
        let mut buf = vec![zero; rows * cols];
        for r in 0..ny {
            for c in 0..nx {
                buf[r * cols + c] = Complex64::new(values(r, c), 0.0);
            }
        }
        fft2(&mut buf, rows, cols, false);
        for (x, y) in buf.iter_mut().zip(&kern) {
            *x *= y;
        }
        fft2(&mut buf, rows, cols, true);
        buf
    };

    let num = linear(&|r, c| field.get(r, c));
    let den = match boundary {
        BoundaryMode::Renorm => Some(linear(&|_, _| 1.0)),
        BoundaryMode::ZeroPad => None,
    };
    let norm = (rows * cols) as f64;
    let mut out = Field2::zeros(nx, ny);
    for row in 0..ny {
        let p = row as i64 - k.center.1 + k.ry as i64;
        if p < 0 || p >= rows as i64 {
            continue;
        }
        for col in 0..nx {
            let q = col as i64 - k.center.0 + k.rx as i64;
            if q < 0 || q >= cols as i64 {
                continue;
            }
            let idx = p as usize * cols + q as usize;
            let mut v = num[idx].re / norm;
            if let Some(den) = &den {
                let m = den[idx].re / norm;
                v = if m > 1e-12 { v / m } else { 0.0 };
            }
            out.set(row, col, k.weight * v);
        }
    }
    out
}

pub(crate) fn symmetrize(m: Mat2) -> Mat2 {
    let off = 0.5 * (m[0][1] + m[1][0]);
    [[m[0][0], off], [off, m[1][1]]]
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> (f64, f64) {
    let tr = m[0][0] + m[1][1];
    let diff = 0.5 * (m[0][0] - m[1][1]);
    let off = 0.5 * (m[0][1] + m[1][0]);
    let r = diff.hypot(off);
    (0.5 * tr - r, 0.5 * tr + r)
}

/// Bivariate normal density.
pub fn gaussian_pdf2(x: (f64, f64), mean: (f64, f64), cov: &Mat2) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let dx = x.0 - mean.0;
    let dy = x.1 - mean.1;
    let q = (dx * dx * cov[1][1] - 2.0 * dx * dy * cov[0][1] + dy * dy * cov[0][0]) / det;
    (-0.5 * q).exp() / (std::f64::consts::TAU * det.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn assert_mat(m: Mat2, e: Mat2, tol: f64) {
        for i in 0..2 {
            for j in 0..2 {
                assert!(close(m[i][j], e[i][j], tol), "{m:?} vs {e:?}");
            }
        }
    }

    #[test]
    fn rotation_examples() {
        assert_mat(rotation_matrix((1.0, 0.0)), [[1.0, 0.0], [0.0, 1.0]], 1e-15);
        assert_mat(rotation_matrix((0.0, 1.0)), [[0.0, -1.0], [1.0, 0.0]], 1e-15);
        let h = 0.5f64.sqrt();
        assert_mat(rotation_matrix((1.0, 1.0)), [[h, -h], [h, h]], 1e-15);
        assert_mat(rotation_matrix((0.0, 0.0)), [[1.0, 0.0], [0.0, 1.0]], 0.0);
    }

    #[test]
    fn kernel_spec_examples() {
        let p = PropagationParams::new(0.0, (0.0, 0.0), 1.0, 1.0).unwrap();
        let k = kernel_spec(&p, 1.0).unwrap();
        assert_eq!(k.mean, (0.0, 0.0));
        assert_mat(k.cov, [[1.0, 0.0], [0.0, 1.0]], 1e-15);
        assert_eq!(k.weight, 1.0);

        let p = PropagationParams::new(0.0, (1.0, 0.0), 1.0, 0.25).unwrap();
        assert_mat(kernel_spec(&p, 1.0).unwrap().cov, [[1.0, 0.0], [0.0, 0.25]], 1e-15);

        let p = PropagationParams::new(0.0, (0.0, 0.5), 1.0, 0.25).unwrap();
        let k = kernel_spec(&p, 2.0).unwrap();
        assert_eq!(k.mean, (0.0, 1.0));
        assert_mat(k.cov, [[0.5, 0.0], [0.0, 2.0]], 1e-15);

        assert!(kernel_spec(&p, 0.0).is_err());
    }

    #[test]
    fn major_axis_follows_velocity() {
        let p = PropagationParams::new(0.1, (1.0, 1.0), 2.0, 0.5).unwrap();
        let k = kernel_spec(&p, 1.0).unwrap();
        // variance along (1,1)/sqrt2 is rho1, across is rho2
        let along = 0.5 * (k.cov[0][0] + 2.0 * k.cov[0][1] + k.cov[1][1]);
        let across = 0.5 * (k.cov[0][0] - 2.0 * k.cov[0][1] + k.cov[1][1]);
        assert!(close(along, 2.0, 1e-12));
        assert!(close(across, 0.5, 1e-12));
    }

    #[test]
    fn discretize_isotropic_center_tap() {
        // independent: sum_{x=-4}^{4} exp(-x^2/2) squared
        let s: f64 = (-4..=4).map(|x: i32| (-(x * x) as f64 / 2.0).exp()).sum();
        let expected = 1.0 / (s * s);
        assert!(close(expected, 0.159_155, 1e-5));
        let p = PropagationParams::new(0.0, (0.0, 0.0), 1.0, 1.0).unwrap();
        let k = discretize(&kernel_spec(&p, 1.0).unwrap(), 1.0, 4.0).unwrap();
        assert_eq!((k.width(), k.height()), (9, 9));
        assert!(close(k.tap_at(0, 0), expected, 1e-7));
        assert!(close(k.tap_sum(), 1.0, 1e-14));
    }

    #[test]
    fn discretize_dirac_limit() {
        let spec = KernelSpec { mean: (0.0, 1.0), cov: [[1e-8, 0.0], [0.0, 1e-8]], weight: 1.0 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        assert!(close(k.tap_at(0, 1), 1.0, 1e-12));
    }

    #[test]
    fn discretize_centroid() {
        let spec = KernelSpec { mean: (0.0, 1.0), cov: [[1.0, 0.0], [0.0, 1.0]], weight: 1.0 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let (cx, cy) = k.centroid();
        assert!(close(cx, 0.0, 1e-6) && close(cy, 1.0, 1e-6));
    }

    #[test]
    fn narrow_kernel_keeps_exact_moments() {
        let p = PropagationParams::new(0.1, (0.0, 0.5), 1.0, 0.25).unwrap();
        let k = discretize(&kernel_spec(&p, 1.0).unwrap(), 1.0, 4.0).unwrap();
        let c = k.tap_covariance();
        let (mx, my) = k.centroid();
        assert!(close(mx, 0.0, 1e-12) && close(my, 0.5, 1e-12));
        assert_mat(c, [[0.25, 0.0], [0.0, 1.0]], 1e-12);
        assert!(k.taps().iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn rejects_short_truncation() {
        let spec = KernelSpec { mean: (0.0, 0.0), cov: [[1.0, 0.0], [0.0, 1.0]], weight: 1.0 };
        assert!(discretize(&spec, 1.0, 2.0).is_err());
    }

    #[test]
    fn oversized_window_is_a_config_error() {
        let spec = KernelSpec { mean: (0.0, 0.0), cov: [[100.0, 0.0], [0.0, 100.0]], weight: 1.0 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let g = SpatialGrid::new(5, 5).unwrap();
        assert!(matches!(k.ensure_fits(&g), Err(Error::Config(_))));
    }

    #[test]
    fn zero_field_stays_zero() {
        let spec = KernelSpec { mean: (0.3, -0.2), cov: [[2.0, 0.3], [0.3, 1.0]], weight: 0.9 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let out = convolve(&Field2::zeros(7, 6), &k, BoundaryMode::ZeroPad);
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dirac_kernel_shifts_impulse_north() {
        let spec = KernelSpec { mean: (0.0, 1.0), cov: [[1e-9, 0.0], [0.0, 1e-9]], weight: 1.0 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let mut f = Field2::zeros(5, 5);
        f.set(2, 2, 1.0);
        let out = convolve(&f, &k, BoundaryMode::ZeroPad);
        assert!(close(out.get(3, 2), 1.0, 1e-12));
        assert!(close(out.sum(), 1.0, 1e-12));
    }

    #[test]
    fn renorm_preserves_constants() {
        let spec = KernelSpec { mean: (0.7, 0.4), cov: [[1.5, 0.2], [0.2, 0.8]], weight: 1.0 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let f = Field2::filled(8, 6, 3.5);
        let out = convolve(&f, &k, BoundaryMode::Renorm);
        assert!(out.as_slice().iter().all(|&v| close(v, 3.5, 1e-12)));
    }

    fn smooth_field(nx: usize, ny: usize) -> Field2 {
        Field2::from_fn(nx, ny, |r, c| {
            let x = c as f64 - nx as f64 / 2.0;
            let y = r as f64 - ny as f64 / 2.0;
            (-(x * x + y * y) / 30.0).exp() + 0.1 * (0.3 * x).sin()
        })
    }

    #[test]
    fn semigroup_two_steps_equal_double_step() {
        let spec = KernelSpec { mean: (0.5, 1.0), cov: [[1.2, 0.3], [0.3, 1.5]], weight: 1.0 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let k2 = discretize(&spec.power(2), 1.0, 4.0).unwrap();
        let f = smooth_field(41, 41);
        let twice = convolve(&convolve(&f, &k, BoundaryMode::ZeroPad), &k, BoundaryMode::ZeroPad);
        let once = convolve(&f, &k2, BoundaryMode::ZeroPad);
        let scale = f.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for r in 12..29 {
            for c in 12..29 {
                let diff = (twice.get(r, c) - once.get(r, c)).abs();
                assert!(diff <= 1e-5 * scale, "({r},{c}) differs by {diff}");
            }
        }
    }

    #[test]
    fn taps_vary_continuously() {
        let max_diff = |a: &DiscreteKernel, b: &DiscreteKernel| -> f64 {
            let mut m: f64 = 0.0;
            for dy in -12..=12 {
                for dx in -12..=12 {
                    m = m.max((a.tap_at(dx, dy) - b.tap_at(dx, dy)).abs());
                }
            }
            m
        };
        // window edge (4 sigma = 4 cells) and correction fade-out (variance 1)
        for (v, rho) in [((0.0, 0.5), (1.0, 0.25)), ((0.0, 0.0), (1.0, 1.0)), ((0.3, 0.4), (1.0, 0.5))] {
            let k = |eps: f64| {
                let p = PropagationParams::new(0.1, v, rho.0 + eps, rho.1 + eps).unwrap();
                discretize(&kernel_spec(&p, 1.0).unwrap(), 1.0, 4.0).unwrap()
            };
            assert!(max_diff(&k(-1e-9), &k(1e-9)) < 1e-7, "{v:?} {rho:?}");
        }
        // separable and general paths meet as the axis tilts
        let k = |vx: f64| {
            let p = PropagationParams::new(0.1, (vx, 0.5), 1.0, 0.25).unwrap();
            discretize(&kernel_spec(&p, 1.0).unwrap(), 1.0, 4.0).unwrap()
        };
        assert!(max_diff(&k(0.0), &k(1e-10)) < 1e-7);
    }

    #[test]
    fn separable_path_matches_general_path() {
        let p = PropagationParams::new(0.1, (0.0, 0.5), 1.0, 0.25).unwrap();
        let k = discretize(&kernel_spec(&p, 1.0).unwrap(), 1.0, 4.0).unwrap();
        assert!(k.is_separable());
        let (rx, ry) = k.radius();
        let general = DiscreteKernel::from_taps(k.taps().to_vec(), rx, ry, k.center(), k.weight()).unwrap();
        let f = smooth_field(17, 13);
        for mode in [BoundaryMode::ZeroPad, BoundaryMode::Renorm] {
            let a = convolve_direct(&f, &k, mode);
            let b = convolve_direct(&f, &general, mode);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-14, "{mode:?}");
            }
        }
        let (cx, cy) = k.centroid();
        assert!(close(cx, 0.0, 1e-12) && close(cy, 0.5, 1e-12));
        let c = k.tap_covariance();
        assert!(close(c[0][0], 0.25, 1e-12) && close(c[0][1], 0.0, 1e-14));
    }

    #[test]
    fn direct_and_fft_agree() {
        let spec = KernelSpec { mean: (1.3, -0.6), cov: [[2.0, 0.4], [0.4, 1.1]], weight: 0.8 };
        let k = discretize(&spec, 1.0, 4.0).unwrap();
        let f = smooth_field(23, 19);
        for mode in [BoundaryMode::ZeroPad, BoundaryMode::Renorm] {
            let a = convolve_direct(&f, &k, mode);
            let b = convolve_fft(&f, &k, mode);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!(close(*x, *y, 1e-10));
            }
        }
    }

    #[test]
    fn compose_matches_sequential_convolution() {
        let s1 = KernelSpec { mean: (0.0, 0.5), cov: [[0.25, 0.0], [0.0, 1.0]], weight: 0.9 };
        let k = discretize(&s1, 1.0, 4.0).unwrap();
        let kk = k.compose(&k);
        let f = smooth_field(31, 31);
        let seq = convolve(&convolve(&f, &k, BoundaryMode::ZeroPad), &k, BoundaryMode::ZeroPad);
        let one = convolve(&f, &kk, BoundaryMode::ZeroPad);
        for r in 8..23 {
            for c in 8..23 {
                assert!(close(seq.get(r, c), one.get(r, c), 1e-12));
            }
        }
        assert!(close(kk.weight(), 0.81, 1e-15));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rotation_is_proper(v1 in -5.0f64..5.0, v2 in -5.0f64..5.0) {
            let r = rotation_matrix((v1, v2));
            let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
            prop_assert!((det - 1.0).abs() < 1e-12);
            for i in 0..2 {
                for j in 0..2 {
                    let rtr = r[0][i] * r[0][j] + r[1][i] * r[1][j];
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr - e).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn cov_eigenvalues_are_scaled_rates(
            v1 in -3.0f64..3.0, v2 in -3.0f64..3.0,
            rho1 in 0.05f64..5.0, rho2 in 0.05f64..5.0, delta in 0.1f64..3.0,
        ) {
            let p = PropagationParams::new(0.1, (v1, v2), rho1, rho2).unwrap();
            let k = kernel_spec(&p, delta).unwrap();
            let (lo, hi) = k.cov_eigenvalues();
            let (a, b) = ((rho1 * delta).min(rho2 * delta), (rho1 * delta).max(rho2 * delta));
            prop_assert!((lo - a).abs() < 1e-10 * (1.0 + a));
            prop_assert!((hi - b).abs() < 1e-10 * (1.0 + b));
        }

        #[test]
        fn convolution_is_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000,
        ) {
            let spec = KernelSpec { mean: (0.4, 0.9), cov: [[1.0, 0.2], [0.2, 0.7]], weight: 0.95 };
            let k = discretize(&spec, 1.0, 4.0).unwrap();
            let f = Field2::from_fn(9, 8, |r, c| ((r * 31 + c * 17) as f64 + seed as f64).sin());
            let g = Field2::from_fn(9, 8, |r, c| ((r * 7 + c * 13) as f64 * 0.3 + seed as f64).cos());
            let mut comb = f.clone();
            comb.scale(a);
            comb.axpy(b, &g);
            let lhs = convolve(&comb, &k, BoundaryMode::ZeroPad);
            let mut rhs = convolve(&f, &k, BoundaryMode::ZeroPad);
            rhs.scale(a);
            rhs.axpy(b, &convolve(&g, &k, BoundaryMode::ZeroPad));
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
