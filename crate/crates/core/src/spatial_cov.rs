//! Stationary isotropic covariance families for the generation noise, dense
//! covariance-matrix assembly on a grid, and Gaussian field sampling.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::bessel::bessel_k;
use crate::error::{arg, Error, Result};
use crate::grid::{Field2, SpatialGrid};

/// Initial diagonal nugget, relative to the scaled sill.
pub const NUGGET_START: f64 = 1e-8;
/// Largest nugget tried before giving up on the factorization.
pub const NUGGET_MAX: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovFamily {
    Exponential,
    Gaussian,
    Matern,
}

impl CovFamily {
    pub const ALL: [CovFamily; 3] = [CovFamily::Exponential, CovFamily::Gaussian, CovFamily::Matern];

    pub fn n_params(self) -> usize {
        match self {
            CovFamily::Matern => 3,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CovFamily::Exponential => "exponential",
            CovFamily::Gaussian => "gaussian",
            CovFamily::Matern => "matern",
        }
    }
}

impl std::fmt::Display for CovFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CovFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(CovFamily::Exponential),
            "gaussian" | "gauss" => Ok(CovFamily::Gaussian),
            "matern" | "matérn" => Ok(CovFamily::Matern),
            other => Err(Error::Config(format!("unknown covariance family `{other}`"))),
        }
    }
}

/// A covariance family with its parameters: sill `theta[0]`, range
/// `theta[1]` and, for Matérn, smoothness `theta[2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovModel {
    family: CovFamily,
    theta: Vec<f64>,
}

impl SpatialCovModel {
    pub fn new(family: CovFamily, theta: &[f64]) -> Result<Self> {
        if theta.len() != family.n_params() {
            return arg(format!(
                "{family} covariance takes {} parameters, got {}",
                family.n_params(),
                theta.len()
            ));
        }
        if let Some(t) = theta.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return arg(format!("covariance parameters must be positive and finite, got {t}"));
        }
        Ok(Self { family, theta: theta.to_vec() })
    }

    pub fn exponential(sill: f64, range: f64) -> Result<Self> {
        Self::new(CovFamily::Exponential, &[sill, range])
    }

    pub fn gaussian(sill: f64, range: f64) -> Result<Self> {
        Self::new(CovFamily::Gaussian, &[sill, range])
    }

    pub fn matern(sill: f64, range: f64, smoothness: f64) -> Result<Self> {
        Self::new(CovFamily::Matern, &[sill, range, smoothness])
    }

    pub fn family(&self) -> CovFamily {
        self.family
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sill(&self) -> f64 {
        self.theta[0]
    }

    /// Same family and shape with a different sill.
    pub fn with_sill(&self, sill: f64) -> Result<Self> {
        let mut theta = self.theta.clone();
        theta[0] = sill;
        Self::new(self.family, &theta)
    }

    /// `c(d)` without argument checks; `d` must be non-negative.
    pub fn eval(&self, d: f64) -> f64 {
        let t = &self.theta;
        match self.family {
            CovFamily::Exponential => t[0] * (-d / t[1]).exp(),
            CovFamily::Gaussian => t[0] * (-d * d / t[1]).exp(),
            CovFamily::Matern => {
                let nu = t[2];
                let z = (2.0 * nu).sqrt() * d / t[1];
                if z < 1e-12 {
                    return t[0];
                }
                // theta1 / (2^(nu-1) Gamma(nu)) z^nu K_nu(z), in log space for the prefactor
                let k = bessel_k(nu, z);
                if k == 0.0 {
                    return 0.0;
                }
                let log_pref = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * z.ln();
                t[0] * (log_pref + k.ln()).exp()
            }
        }
    }
}

/// `c(d)` for the model; negative distances are rejected.
pub fn cov_value(m: &SpatialCovModel, d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return arg(format!("distance must be non-negative, got {d}"));
    }
    Ok(m.eval(d))
}

/// Dense `N_s x N_s` covariance `scale * c(|s_i - s_j|)` plus a diagonal
/// nugget, together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    nx: usize,
    ny: usize,
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    nugget: f64,
}

impl CovMatrix {
    /// Factorizes an arbitrary symmetric matrix, escalating a diagonal
    /// nugget from `NUGGET_START * base` up to `NUGGET_MAX * base`.
    pub fn from_matrix(nx: usize, ny: usize, matrix: DMatrix<f64>, base: f64) -> Result<Self> {
        Self::factorize(nx, ny, matrix, base, false)
    }

    /// As [`CovMatrix::from_matrix`], optionally trying the bare matrix first.
    fn factorize(nx: usize, ny: usize, matrix: DMatrix<f64>, base: f64, bare_first: bool) -> Result<Self> {
        if matrix.nrows() != nx * ny || matrix.ncols() != nx * ny {
            return arg("covariance matrix does not match the grid");
        }
        if bare_first {
            if let Some(chol) = Cholesky::new(matrix.clone()) {
                return Ok(Self { nx, ny, matrix, chol, nugget: 0.0 });
            }
        }
        let mut rel = NUGGET_START;
        while rel <= NUGGET_MAX * 1.000001 {
            let nugget = rel * base;
            let mut m = matrix.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += nugget;
            }
            if let Some(chol) = Cholesky::new(m.clone()) {
                return Ok(Self { nx, ny, matrix: m, chol, nugget });
            }
            rel *= 10.0;
        }
        let eig = SymmetricEigen::new(matrix.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Err(Error::Numerical(format!(
            "covariance factorization failed with nugget up to {:.1e}; eigenvalues span [{lo:.3e}, {hi:.3e}]",
            NUGGET_MAX * base
        )))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }

    /// `Sigma^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} B`, column by column; `B` is overwritten.
    pub fn whiten_columns(&self, b: &mut DMatrix<f64>) {
        self.chol.l_dirty().solve_lower_triangular_mut(b);
    }

    /// Quadratic form `x^T Sigma^{-1} x`.
    pub fn mahalanobis(&self, x: &[f64]) -> f64 {
        let mut v = DMatrix::from_column_slice(x.len(), 1, x);
        self.whiten_columns(&mut v);
        v.iter().map(|z| z * z).sum()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }
}

/// Table of `scale * c(spacing * |(dx, dy)|)` over all non-negative cell
/// offsets of a grid.
pub(crate) fn offset_table(m: &SpatialCovModel, grid: &SpatialGrid, scale: f64) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let h = grid.spacing();
    let mut table = vec![0.0; nx * ny];
    for dy in 0..ny {
        for dx in 0..nx {
            table[dy * nx + dx] = scale * m.eval(h * (dx as f64).hypot(dy as f64));
        }
    }
    table
}

/// Covariance matrix of the generation noise over one step of length
/// `scale`, i.e. entries `scale * c(|s_i - s_j|)`. The Gaussian family is
/// assembled as `scale * theta1 * (A_y kron A_x)` from the per-axis
/// correlations of [`KronCorrelation`].
pub fn build_cov_matrix(m: &SpatialCovModel, grid: &SpatialGrid, scale: f64) -> Result<CovMatrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return arg(format!("covariance scale must be positive, got {scale}"));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let n = grid.n_sites();
    let base = m.sill() * scale;
    if m.family() == CovFamily::Gaussian {
        let k = KronCorrelation::new(m.theta()[1], grid)?;
        let matrix = DMatrix::from_fn(n, n, |i, j| base * k.ay[(i / nx, j / nx)] * k.ax[(i % nx, j % nx)]);
        return CovMatrix::factorize(nx, ny, matrix, base, true);
    }
    let table = offset_table(m, grid, scale);
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let (ri, ci) = (i / nx, i % nx);
        let (rj, cj) = (j / nx, j % nx);
        table[ri.abs_diff(rj) * nx + ci.abs_diff(cj)]
    });
    CovMatrix::from_matrix(nx, ny, matrix, base)
}

/// Gaussian-family correlation on a grid, which factors over the two axes as
/// `A_y kron A_x` with `A = C + eps I` per axis (`eps` escalated like the
/// dense nugget until the axis matrix factorizes). Holds the eigen
/// decomposition of both axis matrices.
#[derive(Debug, Clone)]
pub struct KronCorrelation {
    nx: usize,
    ny: usize,
    ax: DMatrix<f64>,
    ay: DMatrix<f64>,
    ux: DMatrix<f64>,
    uy: DMatrix<f64>,
    ex: DVector<f64>,
    ey: DVector<f64>,
}

impl KronCorrelation {
    pub fn new(range: f64, grid: &SpatialGrid) -> Result<Self> {
        if !(range > 0.0) || !range.is_finite() {
            return arg(format!("range must be positive, got {range}"));
        }
        let h = grid.spacing();
        let axis = |n: usize| -> Result<DMatrix<f64>> {
            let c = DMatrix::from_fn(n, n, |i, j| {
                let d = h * i.abs_diff(j) as f64;
                (-d * d / range).exp()
            });
            Ok(CovMatrix::from_matrix(n, 1, c, 1.0)?.matrix)
        };
        let (ax, ay) = (axis(grid.nx())?, axis(grid.ny())?);
        let sx = SymmetricEigen::new(ax.clone());
        let sy = SymmetricEigen::new(ay.clone());
        if sx.eigenvalues.iter().chain(sy.eigenvalues.iter()).any(|e| !(*e > 0.0)) {
            return Err(Error::Numerical("axis correlation is not positive definite".into()));
        }
        Ok(Self {
            nx: grid.nx(),
            ny: grid.ny(),
            ax,
            ay,
            ux: sx.eigenvectors,
            uy: sy.eigenvectors,
            ex: sx.eigenvalues,
            ey: sy.eigenvalues,
        })
    }

    /// Log-determinant of `A_y kron A_x`.
    pub fn log_det(&self) -> f64 {
        let lx: f64 = self.ex.iter().map(|e| e.ln()).sum();
        let ly: f64 = self.ey.iter().map(|e| e.ln()).sum();
        self.ny as f64 * lx + self.nx as f64 * ly
    }

    /// `Lambda^{-1/2} U^T y` for a row-major field `y`, so that the squared
    /// norm of the result is `y^T (A_y kron A_x)^{-1} y`.
    pub fn whiten(&self, y: &[f64]) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.ny, self.nx, y);
        let r = self.uy.transpose() * m * &self.ux;
        let mut out = Vec::with_capacity(y.len());
        for i in 0..self.ny {
            for j in 0..self.nx {
                out.push(r[(i, j)] / (self.ey[i] * self.ex[j]).sqrt());
            }
        }
        out
    }

    pub fn axis_matrices(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.ax, &self.ay)
    }
}

/// One draw `L z` with `z` i.i.d. standard normal.
pub fn sample_field<R: Rng + ?Sized>(cm: &CovMatrix, rng: &mut R) -> Field2 {
    let n = cm.dim();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let l = cm.chol.l_dirty();
    let mut out = vec![0.0; n];
    // lower triangle only; the strict upper part of l_dirty is garbage
    for (j, &zj) in z.iter().enumerate() {
        if zj == 0.0 {
            continue;
        }
        let col = l.column(j);
        for i in j..n {
            out[i] += col[i] * zj;
        }
    }
    Field2::from_vec(cm.nx, cm.ny, out).expect("shape checked at construction")
}

/// Draws generation-noise fields for a covariance model on a grid. The
/// Gaussian family factorizes over the two grid axes, `Sigma = scale *
/// theta1 * (C_y kron C_x)`, and is sampled through the two small factors;
/// other families use the dense factor.
#[derive(Debug, Clone)]
pub enum NoiseSampler {
    Dense(CovMatrix),
    Separable { nx: usize, ny: usize, amp: f64, lx: DMatrix<f64>, ly: DMatrix<f64> },
}

impl NoiseSampler {
    pub fn new(m: &SpatialCovModel, grid: &SpatialGrid, scale: f64) -> Result<Self> {
        if m.family() != CovFamily::Gaussian {
            return Ok(NoiseSampler::Dense(build_cov_matrix(m, grid, scale)?));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return arg(format!("covariance scale must be positive, got {scale}"));
        }
        let k = KronCorrelation::new(m.theta()[1], grid)?;
        let factor = |a: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            Cholesky::new(a.clone())
                .map(|c| c.l())
                .ok_or_else(|| Error::Numerical("axis correlation factorization failed".into()))
        };
        Ok(NoiseSampler::Separable {
            nx: grid.nx(),
            ny: grid.ny(),
            amp: (scale * m.sill()).sqrt(),
            lx: factor(&k.ax)?,
            ly: factor(&k.ay)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Field2 {
        match self {
            NoiseSampler::Dense(cm) => sample_field(cm, rng),
            NoiseSampler::Separable { nx, ny, amp, lx, ly } => {
                let z = DMatrix::from_fn(*ny, *nx, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = ly * z * lx.transpose();
                Field2::from_fn(*nx, *ny, |r, c| amp * y[(r, c)])
            }
        }
    }
}
