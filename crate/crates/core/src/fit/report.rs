//! Text and CSV serialization of estimation results.

use std::io::{BufRead, Write};

use super::{unpack_params, FitResult};
use crate::error::{Error, Result};
use crate::grid::fmt_f64;
use crate::spatial_cov::CovFamily;

const CSV_HEADER: &str = "family,parameter,estimate,std_error,ci_low,ci_high";

/// Key-value header followed by a table of estimates, standard errors and
/// approximate 90% confidence intervals.
pub fn write_fit_report<W: Write>(r: &FitResult, mut out: W) -> Result<()> {
    writeln!(out, "family = {}", r.family)?;
    writeln!(out, "loglik = {}", fmt_f64(r.loglik))?;
    writeln!(out, "converged = {}", r.converged)?;
    writeln!(out, "iterations = {}", r.iterations)?;
    writeln!(out, "evaluations = {}", r.evaluations)?;
    writeln!(out, "pseudo_inverse = {}", r.pseudo_inverse)?;
    for d in &r.diagnostics {
        writeln!(out, "diagnostic = {d}")?;
    }
    writeln!(out)?;
    writeln!(out, "{:<10} {:>14} {:>14} {:>14} {:>14}", "parameter", "estimate", "s.e.", "90% CI low", "90% CI high")?;
    for (i, name) in r.names.iter().enumerate() {
        let (lo, hi) = r.confidence_interval(i);
        writeln!(
            out,
            "{:<10} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
            name, r.estimates[i], r.std_errors[i], lo, hi
        )?;
    }
    Ok(())
}

/// One row per parameter: `family,parameter,estimate,std_error,ci_low,ci_high`.
pub fn write_fit_csv<W: Write>(r: &FitResult, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (i, name) in r.names.iter().enumerate() {
        let (lo, hi) = r.confidence_interval(i);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.family,
            name,
            fmt_f64(r.estimates[i]),
            fmt_f64(r.std_errors[i]),
            fmt_f64(lo),
            fmt_f64(hi)
        )?;
    }
    Ok(())
}

/// Reads back the family and point estimates written by [`write_fit_csv`].
pub fn read_fit_csv<R: BufRead>(input: R) -> Result<(CovFamily, crate::forward::ModelParams)> {
    let parse = |line: usize, message: String| Error::Parse { line, message };
    let mut family = None;
    let mut values = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(parse(n, format!("expected header `{CSV_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(parse(n, format!("expected 6 fields, found {}", cells.len())));
        }
        let f: CovFamily = cells[0].parse().map_err(|e: Error| parse(n, e.to_string()))?;
        if family.is_some_and(|g| g != f) {
            return Err(parse(n, "mixed covariance families".into()));
        }
        family = Some(f);
        let v: f64 = cells[2].trim().parse().map_err(|_| parse(n, format!("bad estimate `{}`", cells[2])))?;
        values.push(v);
    }
    let family = family.ok_or_else(|| parse(1, "no parameter rows".into()))?;
    Ok((family, unpack_params(family, &values)?))
}
