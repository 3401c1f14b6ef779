//! Subcommand implementations. Each reads its inputs through [`Config`]
//! and writes into the output directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use stdegrade_core::fit::{mle_fit, read_fit_csv, write_fit_csv, write_fit_report, FitOptions, FitResult};
use stdegrade_core::forward::simulate;
use stdegrade_core::grid::fmt_f64;
use stdegrade_core::lifetime::{kde_density, run_passage_study};
use stdegrade_core::pde_oracle::{first_order_generation_check, verify_kernel_equivalence, TransportParams};
use stdegrade_core::rng::{derive_seed, seeded};
use stdegrade_core::st_cov::st_cov_surface;
use stdegrade_core::study::{simulate_study, study_covariates, study_params};
use stdegrade_core::validate::{
    assess_params, family_selection_report, rank_entries, write_qq_csv, SelectionOptions, VariogramBins,
};
use stdegrade_core::{
    CovFamily, CovariateSeries, Field2, FieldSeries, ForwardOptions, ModelParams, PropagationParams,
    SpatialCovModel, SpatialGrid, TimeAxis,
};
use stdegrade_core::kernel::DEFAULT_TRUNCATION_SIGMAS;

use crate::config::Config;
use crate::error::{CliError, CliResult};

/// `--family` value: one family or all three.
#[derive(Debug, Clone, Copy, PartialEq)]
enum FamilyChoice {
    One(CovFamily),
    All,
}

fn family_choice(cfg: &Config) -> CliResult<FamilyChoice> {
    match cfg.str_or("family", "gaussian").as_str() {
        "all" => Ok(FamilyChoice::All),
        s => Ok(FamilyChoice::One(s.parse()?)),
    }
}

fn single_family(cfg: &Config) -> CliResult<CovFamily> {
    match family_choice(cfg)? {
        FamilyChoice::One(f) => Ok(f),
        FamilyChoice::All => Err(CliError::Usage("this command needs a single covariance family".into())),
    }
}

fn out_dir(cfg: &Config) -> CliResult<PathBuf> {
    let dir = PathBuf::from(cfg.str_or("out", "out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

fn forward_options(cfg: &Config) -> CliResult<ForwardOptions> {
    Ok(ForwardOptions {
        truncation_sigmas: cfg.get_or("truncation_sigmas", DEFAULT_TRUNCATION_SIGMAS)?,
        burn_in: cfg.get_or("burn_in", 0usize)?,
        ..Default::default()
    })
}

fn fit_options(cfg: &Config) -> CliResult<FitOptions> {
    let d = FitOptions::default();
    Ok(FitOptions {
        forward: forward_options(cfg)?,
        max_evals: cfg.get_or("max_evals", d.max_evals)?,
        starts: cfg.get_or("starts", d.starts)?,
        ..d
    })
}

/// Model parameters from a fit file, or from explicit keys on top of an
/// optional preset (`preset = study`). Without a preset every parameter
/// is required.
fn model_params(cfg: &Config, family: CovFamily, default_preset: Option<&str>) -> CliResult<ModelParams> {
    if cfg.contains("fit") {
        let path = cfg.path("fit")?;
        let (_, params) = read_fit_csv(open(&path)?)?;
        return Ok(params);
    }
    let preset = match default_preset {
        Some(d) => Some(cfg.str_or("preset", d)),
        None => cfg.str_opt("preset"),
    };
    let base = match preset.as_deref() {
        None => None,
        Some("study") => Some(study_params(family)),
        Some(other) => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
    };
    let value = |key: &str, preset: Option<f64>| -> CliResult<f64> {
        match (cfg.get_opt::<f64>(key)?, preset) {
            (Some(v), _) => Ok(v),
            (None, Some(v)) => {
                cfg.get_or(key, v)?;
                Ok(v)
            }
            (None, None) => Err(CliError::Usage(format!("missing required parameter `{key}`"))),
        }
    };
    let bp = base.as_ref().map(|p| &p.prop);
    let prop = PropagationParams::new(
        value("lambda", bp.map(|p| p.lambda))?,
        (value("v1", bp.map(|p| p.v.0))?, value("v2", bp.map(|p| p.v.1))?),
        value("rho1", bp.map(|p| p.rho1))?,
        value("rho2", bp.map(|p| p.rho2))?,
    )?;
    let theta: Vec<f64> = (0..family.n_params())
        .map(|i| value(&format!("theta{}", i + 1), base.as_ref().map(|p| p.spat.theta()[i])))
        .collect::<CliResult<_>>()?;
    let spat = SpatialCovModel::new(family, &theta)?;
    let beta = match cfg.list_opt::<f64>("beta")? {
        Some(b) => b,
        None => match &base {
            Some(p) => {
                let text: Vec<String> = p.beta.iter().map(|b| b.to_string()).collect();
                cfg.str_or("beta", &text.join(","));
                p.beta.clone()
            }
            None => return Err(CliError::Usage("missing required parameter `beta`".into())),
        },
    };
    Ok(ModelParams::new(prop, spat, beta)?)
}

fn read_field(cfg: &Config, key: &str, spacing: f64) -> CliResult<FieldSeries> {
    Ok(FieldSeries::read_csv(open(&cfg.path(key)?)?, spacing)?)
}

/// Covariates for a given grid and time axis: the built-in study pattern,
/// none, or a file that must match.
fn covariates_for(
    cfg: &Config,
    key: &str,
    default: Option<&str>,
    grid: SpatialGrid,
    times: TimeAxis,
) -> CliResult<CovariateSeries> {
    let source = match default {
        Some(d) => cfg.str_or(key, d),
        None => cfg.str_opt(key).ok_or_else(|| CliError::Usage(format!("missing required input `{key}`")))?,
    };
    let cov = match source.as_str() {
        "study" => study_covariates(grid, times)?,
        "none" => CovariateSeries::empty(grid, times),
        path => CovariateSeries::read_csv(open(Path::new(path))?, grid.spacing())?,
    };
    if cov.grid().nx() != grid.nx() || cov.grid().ny() != grid.ny() || cov.times() != &times {
        return Err(CliError::Usage(format!("{key}: covariates do not match the field's grid and time axis")));
    }
    Ok(cov)
}

pub fn simulate_cmd(cfg: &Config) -> CliResult<()> {
    let family = single_family(cfg)?;
    let params = model_params(cfg, family, None)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let spacing = cfg.get_or("spacing", 1.0)?;
    let source = cfg.str_or("covariates", "study");
    let cov = match source.as_str() {
        "study" | "none" => {
            let grid = SpatialGrid::with_geometry(cfg.get_or("nx", 21)?, cfg.get_or("ny", 21)?, spacing, (0.0, 0.0))?;
            let times = TimeAxis::new(cfg.get_or("n_times", 20)?, cfg.get_or("delta", 1.0)?, cfg.get_or("t0", 0.0)?)?;
            covariates_for(cfg, "covariates", Some("study"), grid, times)?
        }
        path => CovariateSeries::read_csv(open(Path::new(path))?, spacing)?,
    };
    let grid = *cov.grid();
    let initial = if cfg.contains("initial") {
        let f = read_field(cfg, "initial", spacing)?;
        f.slice(f.n_times() - 1)
    } else {
        Field2::zeros(grid.nx(), grid.ny())
    };
    let y = simulate(&params, &cov, &initial, &mut seeded(seed), &forward_options(cfg)?)?;
    if !y.values().iter().all(|v| v.is_finite()) {
        return Err(CliError::Numerical("simulated field is not finite".into()));
    }
    let dir = out_dir(cfg)?;
    y.write_csv(create(&dir, "field.csv")?)?;
    cov.write_csv(create(&dir, "covariates.csv")?)?;
    Ok(())
}

/// Field and covariates for estimation and validation.
fn observed(cfg: &Config) -> CliResult<(FieldSeries, CovariateSeries)> {
    let spacing = cfg.get_or("spacing", 1.0)?;
    let y = read_field(cfg, "field", spacing)?;
    let cov = covariates_for(cfg, "covariates", None, *y.grid(), *y.times())?;
    Ok((y, cov))
}

fn write_fit_files(dir: &Path, stem: &str, fit: &FitResult) -> CliResult<()> {
    write_fit_report(fit, create(dir, &format!("{stem}_report.txt"))?)?;
    write_fit_csv(fit, create(dir, &format!("{stem}.csv"))?)?;
    Ok(())
}

fn check_converged(fit: &FitResult) -> CliResult<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("{} fit: {}", fit.family, fit.diagnostics.join("; "))))
    }
}

pub fn fit_cmd(cfg: &Config) -> CliResult<()> {
    let choice = family_choice(cfg)?;
    let (y, cov) = observed(cfg)?;
    let opts = fit_options(cfg)?;
    match choice {
        FamilyChoice::One(family) => {
            let fit = mle_fit(&y, &cov, family, None, &opts)?;
            let dir = out_dir(cfg)?;
            write_fit_files(&dir, "fit", &fit)?;
            check_converged(&fit)
        }
        FamilyChoice::All => {
            let sel = selection_options(cfg, opts)?;
            let report = family_selection_report(&y, &cov, &CovFamily::ALL, &sel)?;
            let dir = out_dir(cfg)?;
            report.write_text(create(&dir, "selection.txt")?)?;
            for e in &report.entries {
                if let Some(fit) = &e.fit {
                    write_fit_files(&dir, &format!("fit_{}", e.family.name()), fit)?;
                }
            }
            let best = report.entries.first().and_then(|e| e.fit.as_ref()).ok_or_else(|| {
                CliError::Numerical("no covariance family could be fitted".into())
            })?;
            write_fit_files(&dir, "fit", best)?;
            check_converged(best)
        }
    }
}

fn selection_options(cfg: &Config, fit: FitOptions) -> CliResult<SelectionOptions> {
    let d = SelectionOptions::default();
    Ok(SelectionOptions {
        fit,
        bins: VariogramBins::new(
            cfg.get_or("bin_width", d.bins.width)?,
            cfg.get_or("max_distance", d.bins.max_distance)?,
        )?,
        n_boot: cfg.get_or("n_boot", d.n_boot)?,
        seed: cfg.get_or("seed", 0)?,
    })
}

pub fn validate_cmd(cfg: &Config) -> CliResult<()> {
    if !cfg.contains("fit") {
        return Err(CliError::Usage("validate needs a prior fit: set `fit` to one or more fit CSV files".into()));
    }
    let (y, cov) = observed(cfg)?;
    let opts = selection_options(cfg, fit_options(cfg)?)?;
    let mut entries = Vec::new();
    for path in cfg.str_opt("fit").unwrap_or_default().split(',') {
        let (family, params) = read_fit_csv(open(Path::new(path))?)?;
        let mut entry = assess_params(family, &params, &y, &cov, &opts)?;
        entry.note = Some(format!("from {}", Path::new(path).file_name().map_or(path.into(), |n| n.to_string_lossy())));
        entries.push(entry);
    }
    let report = rank_entries(entries, opts.bins);
    let dir = out_dir(cfg)?;
    report.write_text(create(&dir, "selection.txt")?)?;
    for e in &report.entries {
        let name = e.family.name();
        e.empirical.write_csv(create(&dir, &format!("variogram_{name}.csv"))?)?;
        e.theoretical.write_csv(create(&dir, &format!("variogram_theory_{name}.csv"))?)?;
        write_qq_csv(&e.qq, create(&dir, &format!("qq_{name}.csv"))?)?;
    }
    Ok(())
}

pub fn fpt_cmd(cfg: &Config) -> CliResult<()> {
    let family = single_family(cfg)?;
    let params = model_params(cfg, family, None)?;
    let spacing = cfg.get_or("spacing", 1.0)?;
    let start = read_field(cfg, "initial", spacing)?;
    let last = start.n_times() - 1;
    let initial = start.slice(last);
    let (t_start, delta) = (start.times().time(last), start.times().delta());
    let horizon: f64 = cfg.get_or("horizon", t_start + 100.0 * delta)?;
    if !(horizon > t_start) {
        return Err(CliError::Usage(format!("horizon {horizon} must exceed the start time {t_start}")));
    }
    let steps = ((horizon - t_start) / delta - 1e-9).ceil() as usize;
    let times = TimeAxis::new(steps + 1, delta, t_start)?;
    let future = covariates_for(cfg, "future", Some("study"), *start.grid(), times)?;
    let threshold: f64 = cfg.require("threshold")?;
    let runs: usize = cfg.get_or("runs", 500)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let study = run_passage_study(&params, &future, &initial, threshold, horizon, runs, seed, &forward_options(cfg)?)?;

    let dir = out_dir(cfg)?;
    study.write_runs_csv(create(&dir, "fpt_runs.csv")?)?;
    study.write_fpl_csv(create(&dir, "fpl_map.csv")?)?;
    let rul = study.rul();
    let mut summary = create(&dir, "fpt_summary.txt")?;
    writeln!(summary, "threshold = {}", fmt_f64(threshold))?;
    writeln!(summary, "start_time = {}", fmt_f64(t_start))?;
    writeln!(summary, "horizon = {}", fmt_f64(horizon))?;
    writeln!(summary, "runs = {runs}")?;
    writeln!(summary, "censoring_rate = {}", fmt_f64(study.censoring_rate))?;
    if !rul.is_empty() {
        writeln!(summary, "mean_rul = {}", fmt_f64(rul.iter().sum::<f64>() / rul.len() as f64))?;
    }
    match kde_density(&rul, None, delta / 10.0) {
        Ok(d) => {
            writeln!(summary, "bandwidth = {}", fmt_f64(d.bandwidth))?;
            d.write_csv(create(&dir, "fpt_density.csv")?)?;
        }
        Err(e) => writeln!(summary, "density = unavailable ({e})")?,
    }
    for w in &study.warnings {
        writeln!(summary, "warning = {w}")?;
    }
    Ok(())
}

pub fn covariance_cmd(cfg: &Config) -> CliResult<()> {
    let family = single_family(cfg)?;
    let params = model_params(cfg, family, None)?;
    let lags: Vec<usize> = match cfg.list_opt("lags")? {
        Some(l) => l,
        None => {
            cfg.str_or("lags", "0,1,2");
            vec![0, 1, 2]
        }
    };
    let half: usize = cfg.get_or("half_width", 10)?;
    let spacing = cfg.get_or("spacing", 1.0)?;
    let delta = cfg.get_or("delta", 1.0)?;
    let n_terms: Option<usize> = cfg.get_opt("n_terms")?;
    let dir = out_dir(cfg)?;
    let mut out = create(&dir, "covariance.csv")?;
    for (i, lag) in lags.iter().enumerate() {
        let s = st_cov_surface(&params, *lag, delta, (half, half), spacing, n_terms)?;
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!("non-finite covariance at lag {lag}")));
        }
        let mut buf = Vec::new();
        s.write_csv(&mut buf)?;
        let text = String::from_utf8_lossy(&buf);
        let body = if i == 0 { &text[..] } else { text.split_once('\n').map_or("", |(_, rest)| rest) };
        out.write_all(body.as_bytes())?;
    }
    Ok(())
}

pub fn verify_pde_cmd(cfg: &Config) -> CliResult<()> {
    let k_par: f64 = cfg.get_or("k_par", 1.0)?;
    let k_perp: f64 = cfg.get_or("k_perp", k_par)?;
    let v = (cfg.get_or("v1", 0.0)?, cfg.get_or("v2", 0.0)?);
    let p = TransportParams::new(v, k_par, k_perp, cfg.get_or("tau", f64::INFINITY)?)?;
    let spacing = cfg.get_or("spacing", 0.5)?;
    let domain: usize = cfg.get_or("domain", 128)?;
    let report = verify_kernel_equivalence(
        &p,
        cfg.get_or("delta", 1.0)?,
        domain,
        spacing,
        cfg.get_or("truncation_sigmas", DEFAULT_TRUNCATION_SIGMAS)?,
        cfg.get_or("tolerance", 1e-4)?,
    )?;
    let n = domain.min(64);
    let c = n as f64 * spacing / 2.0;
    let q = Field2::from_fn(n, n, |r, col| {
        let (x, y) = (col as f64 * spacing - c, r as f64 * spacing - c);
        (-0.125 * (x * x + y * y)).exp()
    });
    let v_gen = if v == (0.0, 0.0) { (1.0, 0.5) } else { v };
    let generation = first_order_generation_check(&q, v_gen, spacing, 1.0, &[0.25, 0.125, 0.0625, 0.03125, 0.015625])?;
    let dir = out_dir(cfg)?;
    let mut out = create(&dir, "pde_report.txt")?;
    report.write_text(&mut out)?;
    writeln!(out)?;
    generation.write_text(&mut out)?;
    out.flush()?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "kernel and spectral solutions differ by {:.3e}, above the tolerance {:.3e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

pub fn study_cmd(cfg: &Config) -> CliResult<()> {
    let choice = family_choice(cfg)?;
    let truth_family: CovFamily = cfg.str_or("true_family", "gaussian").parse()?;
    let truth = model_params(cfg, truth_family, Some("study"))?;
    let n: usize = cfg.get_or("nx", 21)?;
    let n_times: usize = cfg.get_or("n_times", 20)?;
    let replicates: usize = cfg.get_or("runs", 50)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let opts = fit_options(cfg)?;
    let dir = out_dir(cfg)?;

    let mut rows = create(&dir, "study_estimates.csv")?;
    writeln!(rows, "replicate,family,parameter,estimate,std_error,converged")?;
    let mut winners = Vec::new();
    let mut estimates: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for r in 0..replicates {
        let (y, cov) = simulate_study(&truth, n, n_times, &mut seeded(derive_seed(seed, r as u64)))?;
        let fits: Vec<FitResult> = match choice {
            FamilyChoice::One(f) => vec![mle_fit(&y, &cov, f, None, &opts)?],
            FamilyChoice::All => {
                let sel = SelectionOptions { seed: derive_seed(seed, r as u64), ..selection_options(cfg, opts)? };
                let report = family_selection_report(&y, &cov, &CovFamily::ALL, &sel)?;
                winners.push(report.best());
                report.entries.iter().filter_map(|e| e.fit.clone()).collect()
            }
        };
        for fit in &fits {
            for (i, name) in fit.names.iter().enumerate() {
                writeln!(
                    rows,
                    "{r},{},{name},{},{},{}",
                    fit.family,
                    fmt_f64(fit.estimates[i]),
                    fmt_f64(fit.std_errors[i]),
                    fit.converged
                )?;
            }
            if fit.family == truth_family {
                names.clone_from(&fit.names);
                estimates.push(fit.estimates.clone());
            }
        }
    }
    rows.flush()?;

    let mut summary = create(&dir, "study_summary.txt")?;
    writeln!(summary, "replicates = {replicates}")?;
    writeln!(summary, "grid = {n} x {n}, times = {n_times}")?;
    writeln!(summary, "true_family = {truth_family}")?;
    if !estimates.is_empty() {
        let t = stdegrade_core::fit::pack_params(&truth);
        writeln!(summary)?;
        writeln!(summary, "{:<10} {:>14} {:>14} {:>14} {:>14}", "parameter", "truth", "mean", "median", "mse")?;
        for (i, name) in names.iter().enumerate() {
            let mut col: Vec<f64> = estimates.iter().map(|e| e[i]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len();
            let mean = col.iter().sum::<f64>() / m as f64;
            let median = if m % 2 == 1 { col[m / 2] } else { 0.5 * (col[m / 2 - 1] + col[m / 2]) };
            let mse = col.iter().map(|e| (e - t[i]).powi(2)).sum::<f64>() / m as f64;
            writeln!(summary, "{name:<10} {:>14.6e} {mean:>14.6e} {median:>14.6e} {mse:>14.6e}", t[i])?;
        }
    }
    if !winners.is_empty() {
        writeln!(summary)?;
        for f in CovFamily::ALL {
            let wins = winners.iter().filter(|w| **w == Some(f)).count();
            writeln!(summary, "selected {} = {wins}", f.name())?;
        }
    }
    Ok(())
}
