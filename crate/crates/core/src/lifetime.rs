//! First-passage time and location of the field maximum across a
//! threshold, by Monte Carlo continuation of the recursion, with a kernel
//! density summary of the remaining useful life.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use statrs::statistics::{Data, OrderStatistics, Statistics};

use crate::error::{arg, Result};
use crate::forward::{CovariateSeries, ForwardOptions, ModelParams, Propagator};
use crate::grid::{fmt_f64, Field2, SpatialGrid};
use crate::rng::{derive_seed, seeded};
use crate::spatial_cov::NoiseSampler;

/// Points of the evaluation grid used by [`kde_density`].
pub const KDE_POINTS: usize = 512;

/// Outcome of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassageSample {
    /// Crossing time, or the horizon when censored.
    pub fpt: f64,
    pub censored: bool,
    /// Site of the maximum at the crossing (lowest index on ties).
    pub fpl: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageStudy {
    pub samples: Vec<PassageSample>,
    pub threshold: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub t_start: f64,
    pub horizon: f64,
    pub grid: SpatialGrid,
    /// Crossing frequency per site among uncensored runs.
    pub fpl_probability: Vec<f64>,
    pub censoring_rate: f64,
    pub warnings: Vec<String>,
}

impl PassageStudy {
    /// Remaining useful life `T* - t_start` of the uncensored runs.
    pub fn rul(&self) -> Vec<f64> {
        self.samples.iter().filter(|s| !s.censored).map(|s| s.fpt - self.t_start).collect()
    }

    /// CSV with header `run,fpt,censored,fpl_x,fpl_y`; location fields are
    /// empty for censored runs.
    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "run,fpt,censored,fpl_x,fpl_y")?;
        for (i, s) in self.samples.iter().enumerate() {
            let (x, y) = match s.fpl {
                Some(site) => {
                    let (x, y) = self.grid.coords(site)?;
                    (fmt_f64(x), fmt_f64(y))
                }
                None => (String::new(), String::new()),
            };
            writeln!(out, "{i},{},{},{x},{y}", fmt_f64(s.fpt), s.censored)?;
        }
        Ok(())
    }

    /// CSV with header `x,y,probability` over all sites.
    pub fn write_fpl_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,probability")?;
        for (i, p) in self.fpl_probability.iter().enumerate() {
            let (x, y) = self.grid.coords(i)?;
            writeln!(out, "{},{},{}", fmt_f64(x), fmt_f64(y), fmt_f64(*p))?;
        }
        Ok(())
    }
}

/// Continues the recursion from `initial` (the state at the first time of
/// `future`) until the spatial maximum reaches `threshold` or the time
/// reaches `horizon`. `future` supplies the covariates at `t_start + k
/// delta`; its first slice is not used. Run `i` draws from the seed
/// `derive_seed(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn run_passage_study(
    params: &ModelParams,
    future: &CovariateSeries,
    initial: &Field2,
    threshold: f64,
    horizon: f64,
    n_runs: usize,
    seed: u64,
    opts: &ForwardOptions,
) -> Result<PassageStudy> {
    let grid = *future.grid();
    let times = *future.times();
    let (t_start, delta) = (times.t0(), times.delta());
    if n_runs == 0 {
        return arg("at least one run is required");
    }
    if !threshold.is_finite() {
        return arg("threshold must be finite");
    }
    if !(horizon > t_start) {
        return arg(format!("horizon {horizon} must exceed the start time {t_start}"));
    }
    let n_steps = (((horizon - t_start) / delta) + 1e-9).floor() as usize;
    if n_steps == 0 {
        return arg("horizon is shorter than one time step");
    }
    if times.n_times() < n_steps + 1 {
        return arg(format!("covariates cover {} steps but the horizon needs {n_steps}", times.n_times() - 1));
    }
    if initial.nx() != grid.nx() || initial.ny() != grid.ny() || !initial.is_finite() {
        return arg("initial state must be finite and match the covariate grid");
    }
    future.check_against(&params.beta)?;

    let mut warnings = Vec::new();
    let already = initial.max() >= threshold;
    if already {
        let msg = format!("threshold {threshold} is already reached by the initial state; every run crosses at the first step");
        warn!("{msg}");
        warnings.push(msg);
    }

    let prop = Propagator::new(&params.prop, &grid, delta, opts)?;
    let noise = NoiseSampler::new(&params.spat, &grid, delta)?;
    let generation: Vec<Field2> = (1..=n_steps).map(|t| future.generation(t, &params.beta)).collect();
    let end_time = times.time(n_steps);

    let samples: Vec<PassageSample> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = seeded(derive_seed(seed, run as u64));
            let mut y = initial.clone();
            for (k, g) in generation.iter().enumerate() {
                let mut next = g.clone();
                next.axpy(1.0, &prop.step(&y));
                next.axpy(1.0, &noise.sample(&mut rng));
                if already || next.max() >= threshold {
                    return PassageSample { fpt: times.time(k + 1), censored: false, fpl: Some(next.argmax()) };
                }
                y = next;
            }
            PassageSample { fpt: end_time, censored: true, fpl: None }
        })
        .collect();

    let mut fpl_probability = vec![0.0; grid.n_sites()];
    let crossed = samples.iter().filter(|s| !s.censored).count();
    for site in samples.iter().filter_map(|s| s.fpl) {
        fpl_probability[site] += 1.0;
    }
    if crossed > 0 {
        fpl_probability.iter_mut().for_each(|p| *p /= crossed as f64);
    }
    Ok(PassageStudy {
        censoring_rate: (n_runs - crossed) as f64 / n_runs as f64,
        samples,
        threshold,
        n_runs,
        seed,
        t_start,
        horizon: end_time,
        grid,
        fpl_probability,
        warnings,
    })
}

/// Density estimate evaluated on an even grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub t: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityTable {
    /// Trapezoid-rule integral of the density.
    pub fn integral(&self) -> f64 {
        self.t.windows(2).zip(self.density.windows(2)).map(|(t, d)| 0.5 * (t[1] - t[0]) * (d[0] + d[1])).sum()
    }

    /// CSV with header `t,density`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,density")?;
        for (t, d) in self.t.iter().zip(&self.density) {
            writeln!(out, "{},{}", fmt_f64(*t), fmt_f64(*d))?;
        }
        Ok(())
    }
}

/// Normal-reference bandwidth `1.06 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn normal_reference_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let sd = samples.std_dev();
    let iqr = Data::new(samples.to_vec()).interquartile_range();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    1.06 * spread * n.powf(-0.2)
}

/// Gaussian kernel density on [`KDE_POINTS`] points spanning four
/// bandwidths beyond the sample range. The bandwidth defaults to the normal
/// reference rule and is never below `min_bandwidth`.
pub fn kde_density(samples: &[f64], bandwidth: Option<f64>, min_bandwidth: f64) -> Result<DensityTable> {
    if samples.len() < 2 {
        return arg("density estimation needs at least two samples");
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return arg("samples must be finite");
    }
    if !(min_bandwidth > 0.0) {
        return arg("minimum bandwidth must be positive");
    }
    let h = bandwidth.unwrap_or_else(|| normal_reference_bandwidth(samples));
    let h = if h.is_finite() { h.max(min_bandwidth) } else { min_bandwidth };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let t: Vec<f64> = (0..KDE_POINTS).map(|i| lo + i as f64 * step).collect();
    let density = t
        .par_iter()
        .map(|&x| norm * samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(DensityTable { t, density, bandwidth: h })
}
