//! Model validation: robust empirical semi-variogram of residuals, the
//! semi-variogram implied by a fitted covariance, chi-square QQ data with a
//! parametric bootstrap envelope, and covariance-family selection.

use std::io::Write;

use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared as ChiSquaredDist, ContinuousCDF};

use crate::error::{arg, Error, Result};
use crate::fit::{log_likelihood, mle_fit, whitened_residuals, FitOptions, FitResult, ResidualSeries};
use crate::forward::{CovariateSeries, ModelParams};
use crate::grid::{fmt_f64, FieldSeries};
use crate::rng::{derive_seed, seeded};
use crate::spatial_cov::{build_cov_matrix, CovFamily, CovMatrix, SpatialCovModel};

/// Distance classes of width `width`, centred on multiples of `width`, up to
/// `max_distance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBins {
    pub width: f64,
    pub max_distance: f64,
}

impl Default for VariogramBins {
    fn default() -> Self {
        Self { width: 0.5, max_distance: 10.0 }
    }
}

impl VariogramBins {
    pub fn new(width: f64, max_distance: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) || !(max_distance > 0.0) {
            return arg("bin width and maximum distance must be positive");
        }
        Ok(Self { width, max_distance })
    }

    /// Class of a distance, or `None` beyond the maximum.
    pub fn class_of(&self, d: f64) -> Option<usize> {
        if d > self.max_distance {
            return None;
        }
        Some((d / self.width + 0.5).floor() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBin {
    /// Mean separation of the site pairs in the class.
    pub d: f64,
    pub gamma: f64,
    /// Number of site pairs (zero for theoretical values).
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Variogram {
    pub bins: Vec<VariogramBin>,
}

impl Variogram {
    pub fn distances(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.d).collect()
    }

    /// CSV with header `d,gamma_hat,pairs`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "d,gamma_hat,pairs")?;
        for b in &self.bins {
            writeln!(out, "{},{},{}", fmt_f64(b.d), fmt_f64(b.gamma), b.pairs)?;
        }
        Ok(())
    }
}

/// Cressie-Hawkins robust estimator pooled over all residual slices:
/// `{mean |r_i - r_j|^(1/2)}^4 / (0.914 + 0.988 / n)` where the mean runs
/// over the `n` pair-time increments of a distance class. Empty classes
/// are omitted.
pub fn empirical_semivariogram(residuals: &ResidualSeries, bins: &VariogramBins) -> Result<Variogram> {
    let grid = residuals.grid();
    let ns = grid.n_sites();
    if ns < 2 {
        return arg("the semi-variogram needs at least two sites");
    }
    let n_classes = bins.class_of(bins.max_distance).unwrap_or(0) + 1;
    let nt = residuals.n_times();
    let slices: Vec<&[f64]> = (0..nt).map(|t| residuals.slice_values(t)).collect();

    let accumulate = |i: usize| -> Vec<(f64, f64, usize)> {
        let mut acc = vec![(0.0, 0.0, 0usize); n_classes];
        for j in i + 1..ns {
            let d = grid.site_distance(i, j).expect("valid site");
            let Some(c) = bins.class_of(d) else { continue };
            let s: f64 = slices.iter().map(|r| (r[i] - r[j]).abs().sqrt()).sum();
            acc[c].0 += d;
            acc[c].1 += s;
            acc[c].2 += 1;
        }
        acc
    };
    let totals = (0..ns)
        .into_par_iter()
        .map(accumulate)
        .reduce(
            || vec![(0.0, 0.0, 0usize); n_classes],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.0 += y.0;
                    x.1 += y.1;
                    x.2 += y.2;
                }
                a
            },
        );

    let bins = totals
        .into_iter()
        .filter(|&(_, _, pairs)| pairs > 0)
        .map(|(dsum, root_sum, pairs)| {
            let n = (pairs * nt) as f64;
            VariogramBin { d: dsum / pairs as f64, gamma: (root_sum / n).powi(4) / (0.914 + 0.988 / n), pairs }
        })
        .collect();
    Ok(Variogram { bins })
}

/// `gamma(d) = scale * (c(0) - c(d))` at each requested distance.
pub fn theoretical_semivariogram(m: &SpatialCovModel, scale: f64, d_values: &[f64]) -> Result<Variogram> {
    if let Some(d) = d_values.iter().find(|d| !(**d >= 0.0)) {
        return arg(format!("distances must be non-negative, got {d}"));
    }
    let c0 = m.eval(0.0);
    let bins = d_values
        .iter()
        .map(|&d| VariogramBin { d, gamma: if d == 0.0 { 0.0 } else { scale * (c0 - m.eval(d)) }, pairs: 0 })
        .collect();
    Ok(Variogram { bins })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QqPoint {
    pub theoretical: f64,
    pub sample: f64,
}

/// Chi-square plotting positions `(k - 0.5) / n` for `n` statistics.
pub fn chisq_quantiles(n: usize, dof: usize) -> Result<Vec<f64>> {
    let dist = ChiSquaredDist::new(dof as f64).map_err(|e| Error::Argument(e.to_string()))?;
    Ok((1..=n).map(|k| dist.inverse_cdf((k as f64 - 0.5) / n as f64)).collect())
}

/// Per-slice Mahalanobis statistics `r_t' S^-1 r_t`, sorted and paired with
/// chi-square quantiles on `N_s` degrees of freedom.
pub fn chisq_qq_data(residuals: &ResidualSeries, sigma: &CovMatrix) -> Result<Vec<QqPoint>> {
    let ns = residuals.grid().n_sites();
    if sigma.dim() != ns {
        return arg(format!("covariance has dimension {} but the grid has {ns} sites", sigma.dim()));
    }
    let mut stats: Vec<f64> = (0..residuals.n_times()).map(|t| sigma.mahalanobis(residuals.slice_values(t))).collect();
    stats.sort_by(f64::total_cmp);
    let q = chisq_quantiles(stats.len(), ns)?;
    Ok(q.into_iter().zip(stats).map(|(theoretical, sample)| QqPoint { theoretical, sample }).collect())
}

/// Writes QQ data with header `theoretical,sample`.
pub fn write_qq_csv<W: Write>(points: &[QqPoint], mut out: W) -> Result<()> {
    writeln!(out, "theoretical,sample")?;
    for p in points {
        writeln!(out, "{},{}", fmt_f64(p.theoretical), fmt_f64(p.sample))?;
    }
    Ok(())
}

/// Lower and upper bound for each order statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct QqEnvelope {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Fraction of bootstrap curves lying entirely inside the band.
    pub coverage: f64,
}

impl QqEnvelope {
    /// Number of points falling outside the band.
    pub fn violations(&self, points: &[QqPoint]) -> usize {
        points
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|(p, (lo, hi))| p.sample < **lo || p.sample > **hi)
            .count()
    }
}

/// Simultaneous band for sorted slice statistics under a correctly
/// specified model. Under the model each statistic is exactly chi-square
/// with `dof` degrees of freedom, so bootstrap replicates are drawn from
/// that law directly. The pointwise tail level is lowered until at least
/// `level` of the replicate curves lie entirely inside the band.
pub fn qq_envelope(n: usize, dof: usize, n_boot: usize, level: f64, seed: u64) -> Result<QqEnvelope> {
    if n == 0 || n_boot < 2 || !(level > 0.0 && level < 1.0) {
        return arg("envelope needs n >= 1, at least two replicates and a level in (0, 1)");
    }
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::Argument(e.to_string()))?;
    let curves: Vec<Vec<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = seeded(derive_seed(seed, b as u64));
            let mut v: Vec<f64> = (0..n).map(|_| chi.sample(&mut rng)).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let columns: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut c: Vec<f64> = curves.iter().map(|v| v[k]).collect();
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    let band = |m: usize| -> (Vec<f64>, Vec<f64>) {
        let lo = columns.iter().map(|c| c[m]).collect();
        let hi = columns.iter().map(|c| c[n_boot - 1 - m]).collect();
        (lo, hi)
    };
    let coverage_of = |lo: &[f64], hi: &[f64]| -> f64 {
        let inside = curves.iter().filter(|v| v.iter().zip(lo.iter().zip(hi)).all(|(x, (l, h))| x >= l && x <= h)).count();
        inside as f64 / n_boot as f64
    };
    let mut m = ((1.0 - level) / 2.0 * n_boot as f64).floor() as usize;
    loop {
        let (lo, hi) = band(m);
        let coverage = coverage_of(&lo, &hi);
        if coverage >= level || m == 0 {
            return Ok(QqEnvelope { lower: lo, upper: hi, coverage });
        }
        m -= 1;
    }
}

/// Settings for [`family_selection_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub fit: FitOptions,
    pub bins: VariogramBins,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), bins: VariogramBins::default(), n_boot: 500, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionEntry {
    pub family: CovFamily,
    pub fit: Option<FitResult>,
    /// `sum_d |N(d)| (gamma_hat(d) - gamma(d))^2`; infinite for failed fits.
    pub discrepancy: f64,
    /// Log-likelihood of the assessed parameters; `NaN` for failed fits.
    pub loglik: f64,
    pub envelope_violations: usize,
    pub empirical: Variogram,
    pub theoretical: Variogram,
    pub qq: Vec<QqPoint>,
    pub note: Option<String>,
}

/// Entries ordered from best to worst.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub entries: Vec<SelectionEntry>,
    pub bins: VariogramBins,
}

impl SelectionReport {
    pub fn best(&self) -> Option<CovFamily> {
        self.entries.first().filter(|e| e.discrepancy.is_finite()).map(|e| e.family)
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "distance classes: width {} centred on multiples of the width, up to {}",
            fmt_f64(self.bins.width),
            fmt_f64(self.bins.max_distance)
        )?;
        writeln!(out, "{:<6} {:<12} {:>14} {:>14} {:>11}  note", "rank", "family", "discrepancy", "loglik", "violations")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                out,
                "{:<6} {:<12} {:>14.6e} {:>14.6e} {:>11}  {}",
                i + 1,
                e.family.name(),
                e.discrepancy,
                e.loglik,
                e.envelope_violations,
                e.note.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

fn assess(
    family: CovFamily,
    fit: Result<FitResult>,
    y: &FieldSeries,
    cov: &CovariateSeries,
    opts: &SelectionOptions,
) -> SelectionEntry {
    let failed = |note: String| SelectionEntry {
        family,
        fit: None,
        discrepancy: f64::INFINITY,
        loglik: f64::NAN,
        envelope_violations: 0,
        empirical: Variogram::default(),
        theoretical: Variogram::default(),
        qq: Vec::new(),
        note: Some(note),
    };
    let fit = match fit {
        Ok(f) => f,
        Err(e) => return failed(format!("fit failed: {e}")),
    };
    let note = (!fit.converged).then(|| format!("not converged: {}", fit.diagnostics.join("; ")));
    match assess_params(family, &fit.params, y, cov, opts) {
        Ok(entry) => SelectionEntry { fit: Some(fit), note, ..entry },
        Err(e) => failed(format!("assessment failed: {e}")),
    }
}

/// Variogram discrepancy and QQ diagnostics of one parameter set, with no
/// fit attached.
pub fn assess_params(
    family: CovFamily,
    params: &ModelParams,
    y: &FieldSeries,
    cov: &CovariateSeries,
    opts: &SelectionOptions,
) -> Result<SelectionEntry> {
    let delta = y.times().delta();
    let r = whitened_residuals(params, y, cov, &opts.fit.forward)?;
    let empirical = empirical_semivariogram(&r, &opts.bins)?;
    let theoretical = theoretical_semivariogram(&params.spat, delta, &empirical.distances())?;
    let discrepancy = empirical
        .bins
        .iter()
        .zip(&theoretical.bins)
        .map(|(e, t)| e.pairs as f64 * (e.gamma - t.gamma).powi(2))
        .sum();
    let sigma = build_cov_matrix(&params.spat, y.grid(), delta)?;
    let qq = chisq_qq_data(&r, &sigma)?;
    let env = qq_envelope(qq.len(), y.grid().n_sites(), opts.n_boot, 0.95, opts.seed)?;
    let loglik = log_likelihood(params, y, cov, &opts.fit.forward)?;
    Ok(SelectionEntry {
        family,
        fit: None,
        loglik,
        envelope_violations: env.violations(&qq),
        discrepancy,
        empirical,
        theoretical,
        qq,
        note: None,
    })
}

/// Ranks already assessed entries, best first; entries with an infinite
/// discrepancy go last.
pub fn rank_entries(mut entries: Vec<SelectionEntry>, bins: VariogramBins) -> SelectionReport {
    rank(&mut entries);
    SelectionReport { entries, bins }
}

/// Fits each family by maximum likelihood and ranks them by the
/// pair-weighted squared distance between the empirical and fitted
/// semi-variograms of the whitened residuals. Failed fits rank last.
pub fn family_selection_report(
    y: &FieldSeries,
    cov: &CovariateSeries,
    families: &[CovFamily],
    opts: &SelectionOptions,
) -> Result<SelectionReport> {
    if families.is_empty() {
        return arg("at least one covariance family is required");
    }
    let fits: Vec<Result<FitResult>> = families.iter().map(|&f| mle_fit(y, cov, f, None, &opts.fit)).collect();
    let entries = families.iter().zip(fits).map(|(&f, fit)| assess(f, fit, y, cov, opts)).collect();
    Ok(rank_entries(entries, opts.bins))
}

fn rank(entries: &mut [SelectionEntry]) {
    entries.sort_by(|a, b| a.discrepancy.is_infinite().cmp(&b.discrepancy.is_infinite()).then(a.discrepancy.total_cmp(&b.discrepancy)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SpatialGrid, TimeAxis};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn residuals(nx: usize, ny: usize, nt: usize, mut f: impl FnMut(usize, usize) -> f64) -> ResidualSeries {
        let grid = SpatialGrid::new(nx, ny).unwrap();
        let ns = nx * ny;
        let values = (0..nt * ns).map(|k| f(k / ns, k % ns)).collect();
        ResidualSeries::new(FieldSeries::new(grid, TimeAxis::new(nt, 1.0, 0.0).unwrap(), values).unwrap()).unwrap()
    }

    #[test]
    fn constant_residuals_give_zero() {
        let r = residuals(5, 5, 3, |_, _| 2.5);
        let v = empirical_semivariogram(&r, &VariogramBins::default()).unwrap();
        assert!(!v.bins.is_empty());
        assert!(v.bins.iter().all(|b| b.gamma == 0.0 && b.pairs >= 1));
    }

    #[test]
    fn two_sites_one_slice() {
        let r = residuals(2, 1, 1, |_, s| s as f64);
        let v = empirical_semivariogram(&r, &VariogramBins::default()).unwrap();
        assert_eq!(v.bins.len(), 1);
        assert_eq!(v.bins[0].pairs, 1);
        assert!((v.bins[0].gamma - 1.0 / 1.902).abs() < 1e-12);
    }

    #[test]
    fn iid_residuals_sit_at_the_sill() {
        let mut rng = seeded(11);
        let sigma2: f64 = 0.04;
        let r = residuals(20, 20, 10, |_, _| sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal));
        let v = empirical_semivariogram(&r, &VariogramBins::new(0.5, 6.0).unwrap()).unwrap();
        for b in &v.bins {
            assert!((b.gamma / sigma2 - 1.0).abs() < 0.15, "d={} gamma={}", b.d, b.gamma);
        }
    }

    #[test]
    fn empty_classes_are_omitted() {
        let r = residuals(3, 1, 2, |t, s| (t * 3 + s) as f64);
        let v = empirical_semivariogram(&r, &VariogramBins::default()).unwrap();
        let ds: Vec<f64> = v.bins.iter().map(|b| b.d).collect();
        assert_eq!(ds, vec![1.0, 2.0]);
        assert!(v.bins.iter().all(|b| b.gamma.is_finite()));
    }

    #[test]
    fn needs_two_sites() {
        let r = residuals(1, 1, 3, |_, _| 0.0);
        assert!(matches!(empirical_semivariogram(&r, &VariogramBins::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn theoretical_limits_and_range() {
        let e = SpatialCovModel::exponential(1.0, 1.0).unwrap();
        let v = theoretical_semivariogram(&e, 1.0, &[0.0, 50.0]).unwrap();
        assert_eq!(v.bins[0].gamma, 0.0);
        assert!((v.bins[1].gamma - 1.0).abs() < 1e-6);

        let g = SpatialCovModel::gaussian(0.010, 11.564).unwrap();
        let practical = (11.564f64 * 20f64.ln()).sqrt();
        assert!((practical - 5.9).abs() < 0.05);
        let v = theoretical_semivariogram(&g, 1.0, &[practical]).unwrap();
        assert!((v.bins[0].gamma / 0.010 - 0.95).abs() < 1e-3);
    }

    #[test]
    fn negative_distance_rejected() {
        let g = SpatialCovModel::gaussian(1.0, 1.0).unwrap();
        assert!(theoretical_semivariogram(&g, 1.0, &[-1.0]).is_err());
    }

    #[test]
    fn unit_vector_statistic_is_one() {
        let r = residuals(2, 2, 1, |_, s| if s == 0 { 1.0 } else { 0.0 });
        let sigma = CovMatrix::from_matrix(2, 2, nalgebra::DMatrix::identity(4, 4), 1.0).unwrap();
        let qq = chisq_qq_data(&r, &sigma).unwrap();
        assert_eq!(qq.len(), 1);
        assert!((qq[0].sample - 1.0).abs() < 1e-7);
    }

    #[test]
    fn quantiles_are_increasing() {
        let q = chisq_quantiles(19, 441).unwrap();
        assert!(q.windows(2).all(|w| w[0] < w[1]));
        assert!((q[9] - 440.33).abs() < 0.5);
    }

    #[test]
    fn envelope_is_simultaneous() {
        let env = qq_envelope(19, 25, 500, 0.95, 3).unwrap();
        assert!(env.coverage >= 0.95);
        assert!(env.lower.iter().zip(&env.upper).all(|(l, h)| l < h));
    }

    #[test]
    fn single_family_is_ranked_first() {
        let params = crate::study::study_params(CovFamily::Gaussian);
        let (y, cov) = crate::study::simulate_study(&params, 9, 8, &mut seeded(5)).unwrap();
        let opts = SelectionOptions { n_boot: 100, ..Default::default() };
        let report = family_selection_report(&y, &cov, &[CovFamily::Gaussian], &opts).unwrap();
        assert_eq!(report.best(), Some(CovFamily::Gaussian));
        let mut buf = Vec::new();
        report.write_text(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("gaussian"));
    }

    #[test]
    fn failed_fit_ranks_last() {
        let params = crate::study::study_params(CovFamily::Gaussian);
        let (y, cov) = crate::study::simulate_study(&params, 9, 8, &mut seeded(6)).unwrap();
        let opts = SelectionOptions { n_boot: 100, ..Default::default() };
        let good = assess(CovFamily::Gaussian, mle_fit(&y, &cov, CovFamily::Gaussian, None, &opts.fit), &y, &cov, &opts);
        let bad = assess(CovFamily::Matern, Err(Error::Fit("no start".into())), &y, &cov, &opts);
        let mut entries = vec![bad, good];
        rank(&mut entries);
        assert_eq!(entries[0].family, CovFamily::Gaussian);
        assert!(entries[1].note.as_deref().unwrap().contains("fit failed"));
    }
}
