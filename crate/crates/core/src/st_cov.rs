//! Space-time covariance of the stationary degradation field.
//!
//! The lag-`j` covariance between sites displaced by `d` is
//! `sum_i e^{-(2i+j) lambda delta} (phi(.; j mu, (2i+j) Sigma) * c_delta)(d)`,
//! where the pair of kernel powers has collapsed to one Gaussian and the
//! `2i + j = 0` term is `c_delta(d)` itself.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::forward::ModelParams;
use crate::grid::fmt_f64;
use crate::kernel::{gaussian_pdf2, kernel_spec, Mat2};
use crate::quad::integrate;
use crate::spatial_cov::{CovFamily, SpatialCovModel};

/// Quadrature window half-width in standard deviations.
const QUAD_SIGMAS: f64 = 6.0;
/// Absolute tolerance of each numeric convolution.
const QUAD_TOL: f64 = 1e-10;
const QUAD_MAX_INTERVALS: usize = 400;

/// Displacement `d = s2 - s1`, time lag in steps, step length and series
/// truncation (`None` picks the default depth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StCovQuery {
    pub d: (f64, f64),
    pub lag: usize,
    pub delta: f64,
    pub n_terms: Option<usize>,
}

impl StCovQuery {
    pub fn new(d: (f64, f64), lag: usize, delta: f64) -> Self {
        Self { d, lag, delta, n_terms: None }
    }
}

/// Smallest `i` with `exp(-2 i lambda delta) < 1e-8`.
pub fn default_n_terms(lambda: f64, delta: f64) -> usize {
    ((1e8f64).ln() / (2.0 * lambda * delta)).floor() as usize + 1
}

/// Covariance between `Y(s, t)` and `Y(s + d, t + lag * delta)`.
pub fn st_covariance(params: &ModelParams, q: &StCovQuery) -> Result<f64> {
    let terms = SeriesTerms::new(params, q.delta, q.n_terms)?;
    terms.eval(q.d, q.lag, false)
}

/// [`st_covariance`] at many `(displacement, lag)` pairs sharing one series
/// setup.
pub fn st_covariance_many(params: &ModelParams, delta: f64, queries: &[((f64, f64), usize)]) -> Result<Vec<f64>> {
    let terms = SeriesTerms::new(params, delta, None)?;
    queries.par_iter().map(|&(d, lag)| terms.eval(d, lag, false)).collect()
}

struct SeriesTerms<'a> {
    spat: &'a SpatialCovModel,
    mean: (f64, f64),
    cov: Mat2,
    rate: f64,
    delta: f64,
    n_terms: usize,
}

impl<'a> SeriesTerms<'a> {
    fn new(params: &'a ModelParams, delta: f64, n_terms: Option<usize>) -> Result<Self> {
        if !(params.prop.lambda > 0.0) {
            return Err(Error::Domain(format!(
                "the covariance series needs a positive decay rate, got {}",
                params.prop.lambda
            )));
        }
        let spec = kernel_spec(&params.prop, delta)?;
        let n_terms = n_terms.unwrap_or_else(|| default_n_terms(params.prop.lambda, delta));
        if n_terms < 1 {
            return arg("at least one series term is required");
        }
        Ok(Self {
            spat: &params.spat,
            mean: spec.mean,
            cov: spec.cov,
            rate: params.prop.lambda * delta,
            delta,
            n_terms,
        })
    }

    fn eval(&self, d: (f64, f64), lag: usize, force_numeric: bool) -> Result<f64> {
        let j = lag as f64;
        let m = (j * self.mean.0, j * self.mean.1);
        let mut total = 0.0;
        for i in 0..=self.n_terms {
            let k = (2 * i + lag) as f64;
            let weight = (-k * self.rate).exp();
            if weight == 0.0 {
                break;
            }
            let value = if 2 * i + lag == 0 {
                self.delta * self.spat.eval(d.0.hypot(d.1))
            } else {
                let s = [[k * self.cov[0][0], k * self.cov[0][1]], [k * self.cov[1][0], k * self.cov[1][1]]];
                if self.spat.family() == CovFamily::Gaussian && !force_numeric {
                    self.gaussian_term(d, m, &s)
                } else {
                    self.numeric_term(d, m, &s)?
                }
            };
            total += weight * value;
        }
        Ok(total)
    }

    /// `(phi(.; m, S) * delta c)(d)` for the Gaussian family:
    /// `delta theta1 pi theta2 phi(d; m, S + theta2/2 I)`.
    fn gaussian_term(&self, d: (f64, f64), m: (f64, f64), s: &Mat2) -> f64 {
        let (t1, t2) = (self.spat.theta()[0], self.spat.theta()[1]);
        let widened = [[s[0][0] + 0.5 * t2, s[0][1]], [s[1][0], s[1][1] + 0.5 * t2]];
        self.delta * t1 * std::f64::consts::PI * t2 * gaussian_pdf2(d, m, &widened)
    }

    /// Same convolution by nested adaptive quadrature in standardized
    /// coordinates `x = m + L z`.
    fn numeric_term(&self, d: (f64, f64), m: (f64, f64), s: &Mat2) -> Result<f64> {
        let l00 = s[0][0].sqrt();
        let l10 = s[1][0] / l00;
        let l11 = (s[1][1] - l10 * l10).max(0.0).sqrt();
        let (ex, ey) = (d.0 - m.0, d.1 - m.1);
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mut inner_err = None;
        let outer = integrate(
            |z1| {
                let inner = integrate(
                    |z2| {
                        let rx = ex - l00 * z1;
                        let ry = ey - l10 * z1 - l11 * z2;
                        norm * (-0.5 * z2 * z2).exp() * self.spat.eval(rx.hypot(ry))
                    },
                    -QUAD_SIGMAS,
                    QUAD_SIGMAS,
                    QUAD_TOL / (4.0 * QUAD_SIGMAS),
                    QUAD_MAX_INTERVALS,
                );
                match inner {
                    Ok(v) => norm * (-0.5 * z1 * z1).exp() * v,
                    Err(e) => {
                        inner_err.get_or_insert(e);
                        0.0
                    }
                }
            },
            -QUAD_SIGMAS,
            QUAD_SIGMAS,
            QUAD_TOL,
            QUAD_MAX_INTERVALS,
        )?;
        if let Some(e) = inner_err {
            return Err(e);
        }
        Ok(self.delta * outer)
    }
}

/// Covariance over a window of grid displacements at one lag.
#[derive(Debug, Clone, PartialEq)]
pub struct StCovSurface {
    pub lag: usize,
    /// Displacements in grid cells, x-major within each y row.
    pub offsets: Vec<(i64, i64)>,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl StCovSurface {
    /// Entry with the largest covariance (first on ties).
    pub fn peak(&self) -> ((i64, i64), f64) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (self.offsets[best], self.values[best])
    }

    pub fn value_at(&self, dx: i64, dy: i64) -> Option<f64> {
        self.offsets.iter().position(|o| *o == (dx, dy)).map(|i| self.values[i])
    }

    /// Writes `dx,dy,lag,cov` with displacements in spatial units.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "dx,dy,lag,cov")?;
        for ((dx, dy), v) in self.offsets.iter().zip(&self.values) {
            writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(*dx as f64 * self.spacing),
                fmt_f64(*dy as f64 * self.spacing),
                self.lag,
                fmt_f64(*v)
            )?;
        }
        Ok(())
    }
}

/// Evaluates the covariance at every displacement `(dx, dy) * spacing` with
/// `|dx| <= half_width.0`, `|dy| <= half_width.1`.
pub fn st_cov_surface(
    params: &ModelParams,
    lag: usize,
    delta: f64,
    half_width: (usize, usize),
    spacing: f64,
    n_terms: Option<usize>,
) -> Result<StCovSurface> {
    if !(spacing > 0.0) {
        return arg("surface spacing must be positive");
    }
    let terms = SeriesTerms::new(params, delta, n_terms)?;
    let (hx, hy) = (half_width.0 as i64, half_width.1 as i64);
    let offsets: Vec<(i64, i64)> = (-hy..=hy).flat_map(|dy| (-hx..=hx).map(move |dx| (dx, dy))).collect();
    let values = offsets
        .par_iter()
        .map(|&(dx, dy)| terms.eval((dx as f64 * spacing, dy as f64 * spacing), lag, false))
        .collect::<Result<Vec<f64>>>()?;
    Ok(StCovSurface { lag, offsets, spacing, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::PropagationParams;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn model(lambda: f64, v: (f64, f64), rho: (f64, f64), spat: SpatialCovModel) -> ModelParams {
        ModelParams::new(PropagationParams::new(lambda, v, rho.0, rho.1).unwrap(), spat, vec![]).unwrap()
    }

    fn study() -> ModelParams {
        model(0.1, (0.0, 0.5), (1.0, 0.25), SpatialCovModel::gaussian(0.01, 5.0).unwrap())
    }

    #[test]
    fn fast_decay_leaves_innovation_variance() {
        let p = model(1e4, (0.0, 0.5), (1.0, 0.25), SpatialCovModel::gaussian(0.01, 5.0).unwrap());
        let v = st_covariance(&p, &StCovQuery::new((0.0, 0.0), 0, 0.5)).unwrap();
        assert!((v - 0.5 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_positive_decay_is_a_domain_error() {
        let mut p = study();
        p.prop.lambda = 0.0;
        assert!(matches!(st_covariance(&p, &StCovQuery::new((0.0, 0.0), 0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn lag_zero_is_symmetric() {
        let p = model(0.2, (0.7, -0.3), (1.5, 0.4), SpatialCovModel::gaussian(0.02, 3.0).unwrap());
        for d in [(1.0, 0.0), (0.5, 2.0), (-3.0, 1.5)] {
            let a = st_covariance(&p, &StCovQuery::new(d, 0, 1.0)).unwrap();
            let b = st_covariance(&p, &StCovQuery::new((-d.0, -d.1), 0, 1.0)).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        let p = model(0.5, (0.7, -0.3), (1.5, 0.4), SpatialCovModel::exponential(0.02, 3.0).unwrap());
        let q = |d| StCovQuery { d, lag: 0, delta: 1.0, n_terms: Some(12) };
        let a = st_covariance(&p, &q((1.0, 2.0))).unwrap();
        let b = st_covariance(&p, &q((-1.0, -2.0))).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let p = study();
        let terms = SeriesTerms::new(&p, 1.0, Some(6)).unwrap();
        for (d, lag) in [((0.0, 0.0), 0), ((1.0, 0.0), 1), ((0.0, 1.0), 2), ((2.0, -1.0), 1)] {
            let closed = terms.eval(d, lag, false).unwrap();
            let numeric = terms.eval(d, lag, true).unwrap();
            assert!((closed - numeric).abs() < 1e-9, "{d:?} {lag}: {closed} vs {numeric}");
        }
    }

    #[test]
    fn dirac_limit_is_separable_in_time() {
        let p = model(0.3, (0.0, 0.0), (1e-13, 1e-13), SpatialCovModel::gaussian(0.01, 5.0).unwrap());
        let d = (1.0, 2.0);
        let c1 = st_covariance(&p, &StCovQuery::new(d, 1, 1.0)).unwrap();
        let c3 = st_covariance(&p, &StCovQuery::new(d, 3, 1.0)).unwrap();
        assert!((c3 / c1 - (-0.6f64).exp()).abs() < 1e-9);
        // lag-1 value is e^{-lambda} c(d) times the geometric sum
        let c = 0.01 * (-5.0f64 / 5.0).exp();
        let geo = 1.0 / (1.0 - (-0.6f64).exp());
        assert!((c1 - (-0.3f64).exp() * c * geo).abs() < 2e-8 * c1);
    }

    #[test]
    fn assembled_matrix_is_psd() {
        let p = study();
        let pts: Vec<(f64, f64, usize)> =
            (0..48).map(|k| ((k % 4) as f64, ((k / 4) % 4) as f64, k / 16)).collect();
        let n = pts.len();
        let mut m = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let (p1, p2) = if pts[a].2 <= pts[b].2 { (pts[a], pts[b]) } else { (pts[b], pts[a]) };
                let q = StCovQuery::new((p2.0 - p1.0, p2.1 - p1.1), p2.2 - p1.2, 1.0);
                let v = st_covariance(&p, &q).unwrap();
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(m).eigenvalues;
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(lo > -1e-12, "{lo}");
    }

    #[test]
    fn surface_shape() {
        let p = study();
        let s0 = st_cov_surface(&p, 0, 1.0, (4, 6), 1.0, None).unwrap();
        let s2 = st_cov_surface(&p, 2, 1.0, (4, 6), 1.0, None).unwrap();
        assert_eq!(s0.peak().0, (0, 0));
        assert!(s2.peak().1 < s0.peak().1);
        let ((px, py), _) = s2.peak();
        assert_eq!(px, 0);
        assert!(py > 0);
        let mut buf = Vec::new();
        s0.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("dx,dy,lag,cov\n"));
        assert_eq!(text.lines().count(), 1 + 9 * 13);
    }

    #[test]
    fn tail_terms_are_bounded() {
        let p = study();
        let n = default_n_terms(0.1, 1.0);
        assert!((-2.0 * n as f64 * 0.1f64).exp() < 1e-8);
        assert!((-2.0 * (n - 1) as f64 * 0.1f64).exp() >= 1e-8);
        let a = st_covariance(&p, &StCovQuery { n_terms: Some(n), ..StCovQuery::new((1.0, 1.0), 1, 1.0) }).unwrap();
        let b = st_covariance(&p, &StCovQuery { n_terms: Some(3 * n), ..StCovQuery::new((1.0, 1.0), 1, 1.0) }).unwrap();
        assert!((a - b).abs() < 1e-8 * 0.01);
    }
}
