//! Regular-grid geometry, the discrete time axis and the field containers
//! shared by every other module.
//!
//! Sites are numbered row-major: `index = row * nx + col`, where `col` runs
//! along the x (east) axis and `row` along the y (north) axis. Field series
//! are stored time-major, `(t, y, x)`, so every time slice is contiguous.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{arg, Error, Result};

/// Uniform, isotropic rectangular lattice of sites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    nx: usize,
    ny: usize,
    spacing: f64,
    origin: (f64, f64),
}

impl SpatialGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        Self::with_geometry(nx, ny, 1.0, (0.0, 0.0))
    }

    pub fn with_geometry(nx: usize, ny: usize, spacing: f64, origin: (f64, f64)) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return arg(format!("grid must have at least one cell per axis, got {nx}x{ny}"));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return arg(format!("grid spacing must be positive, got {spacing}"));
        }
        if !origin.0.is_finite() || !origin.1.is_finite() {
            return arg("grid origin must be finite");
        }
        Ok(Self { nx, ny, spacing, origin })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    /// Number of sites, `N_s`.
    pub fn n_sites(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.ny || col >= self.nx {
            return arg(format!("cell ({row}, {col}) outside a {}x{} grid", self.nx, self.ny));
        }
        Ok(row * self.nx + col)
    }

    /// Inverse of [`SpatialGrid::index`]: returns `(row, col)`.
    pub fn row_col(&self, index: usize) -> Result<(usize, usize)> {
        self.check(index)?;
        Ok((index / self.nx, index % self.nx))
    }

    /// Physical coordinates `(x, y)` of a site.
    pub fn coords(&self, index: usize) -> Result<(f64, f64)> {
        let (row, col) = self.row_col(index)?;
        Ok((
            self.origin.0 + col as f64 * self.spacing,
            self.origin.1 + row as f64 * self.spacing,
        ))
    }

    /// `s_j - s_i` as a vector.
    pub fn displacement_vector(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        let (ri, ci) = self.row_col(i)?;
        let (rj, cj) = self.row_col(j)?;
        Ok((
            (cj as f64 - ci as f64) * self.spacing,
            (rj as f64 - ri as f64) * self.spacing,
        ))
    }

    /// Euclidean distance between two sites.
    pub fn site_distance(&self, i: usize, j: usize) -> Result<f64> {
        let (dx, dy) = self.displacement_vector(i, j)?;
        Ok(dx.hypot(dy))
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.n_sites() {
            return arg(format!("site index {index} out of range for {} sites", self.n_sites()));
        }
        Ok(())
    }
}

/// Discrete sampling times `t0, t0 + delta, ..., t0 + (n_times - 1) delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAxis {
    n_times: usize,
    delta: f64,
    t0: f64,
}

impl TimeAxis {
    pub fn new(n_times: usize, delta: f64, t0: f64) -> Result<Self> {
        if n_times == 0 {
            return arg("time axis needs at least one time");
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return arg(format!("time step must be positive, got {delta}"));
        }
        if !t0.is_finite() {
            return arg("start time must be finite");
        }
        Ok(Self { n_times, delta, t0 })
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.delta
    }
}

/// A single 2-D slice stored row-major as `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2 {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl Field2 {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self { nx, ny, data: vec![0.0; nx * ny] }
    }

    pub fn filled(nx: usize, ny: usize, value: f64) -> Self {
        Self { nx, ny, data: vec![value; nx * ny] }
    }

    pub fn from_vec(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny {
            return arg(format!("slice of {} values does not match {nx}x{ny}", data.len()));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(nx * ny);
        for row in 0..ny {
            for col in 0..nx {
                data.push(f(row, col));
            }
        }
        Self { nx, ny, data }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.nx + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.nx + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field2) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }
}

/// Degradation values `Y(s, t)` over a grid and a time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    grid: SpatialGrid,
    times: TimeAxis,
    values: Vec<f64>,
}

impl FieldSeries {
    pub fn new(grid: SpatialGrid, times: TimeAxis, values: Vec<f64>) -> Result<Self> {
        let expected = grid.n_sites() * times.n_times();
        if values.len() != expected {
            return arg(format!("field has {} values, expected {expected}", values.len()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return arg(format!("non-finite field value at flat position {pos}"));
        }
        Ok(Self { grid, times, values })
    }

    pub fn from_slices(grid: SpatialGrid, times: TimeAxis, slices: &[Field2]) -> Result<Self> {
        if slices.len() != times.n_times() {
            return arg(format!("{} slices for {} times", slices.len(), times.n_times()));
        }
        let mut values = Vec::with_capacity(grid.n_sites() * slices.len());
        for s in slices {
            if s.nx() != grid.nx() || s.ny() != grid.ny() {
                return arg("slice shape does not match the grid");
            }
            values.extend_from_slice(s.as_slice());
        }
        Self::new(grid, times, values)
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

    pub fn n_times(&self) -> usize {
        self.times.n_times()
    }

    pub fn slice_values(&self, t: usize) -> &[f64] {
        let n = self.grid.n_sites();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn slice(&self, t: usize) -> Field2 {
        Field2 {
            nx: self.grid.nx(),
            ny: self.grid.ny(),
            data: self.slice_values(t).to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<Field2> {
        (0..self.n_times()).map(|t| self.slice(t)).collect()
    }

    pub fn get(&self, t: usize, row: usize, col: usize) -> f64 {
        self.values[(t * self.grid.ny() + row) * self.grid.nx() + col]
    }

    /// Writes the `t,x,y,value` CSV layout, one row per site-time in
    /// row-major site order within each time. `x`/`y` are column/row
    /// indices; values carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,x,y,value")?;
        let mut line = String::new();
        for t in 0..self.n_times() {
            let time = self.times.time(t);
            for row in 0..self.grid.ny() {
                for col in 0..self.grid.nx() {
                    line.clear();
                    let _ = write!(
                        line,
                        "{},{col},{row},{}",
                        fmt_f64(time),
                        fmt_f64(self.get(t, row, col))
                    );
                    writeln!(out, "{line}")?;
                }
            }
        }
        Ok(())
    }

    /// Reads the layout produced by [`FieldSeries::write_csv`]. Grid spacing
    /// is not stored in the file and must be supplied.
    pub fn read_csv<R: BufRead>(input: R, spacing: f64) -> Result<Self> {
        let rows = read_rows(input, &["t", "x", "y", "value"])?;
        let (grid, times, _) = layout_from_rows(&rows, spacing, None)?;
        let mut values = vec![f64::NAN; grid.n_sites() * times.n_times()];
        let time_index = TimeIndexer::new(&times);
        for (line, r) in &rows {
            let t = time_index.index(r[0]).ok_or_else(|| parse_err(*line, "irregular time"))?;
            let (col, row) = (cell(r[1], *line)?, cell(r[2], *line)?);
            values[(t * grid.ny() + row) * grid.nx() + col] = r[3];
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse { line: 0, message: "missing site-time rows".into() });
        }
        Self::new(grid, times, values)
    }
}

/// Formats with 17 significant digits, enough for an exact f64 round-trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) type Row = (usize, Vec<f64>);

pub(crate) fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse { line, message: msg.to_string() }
}

pub(crate) fn read_rows<R: BufRead>(input: R, header: &[&str]) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let first = first?;
    let got: Vec<&str> = first.trim().split(',').map(str::trim).collect();
    if got != header {
        return Err(parse_err(1, &format!("expected header `{}`", header.join(","))));
    }
    for (i, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| parse_err(i + 1, &e.to_string()))?;
        if vals.len() != header.len() {
            return Err(parse_err(i + 1, "wrong number of columns"));
        }
        rows.push((i + 1, vals));
    }
    Ok(rows)
}

pub(crate) fn cell(v: f64, line: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(parse_err(line, "cell index must be a non-negative integer"));
    }
    Ok(v as usize)
}

/// Infers grid and time axis from rows whose first column is time and whose
/// x/y columns follow it, after an optional covariate-index column.
pub(crate) fn layout_from_rows(
    rows: &[Row],
    spacing: f64,
    extra_col: Option<usize>,
) -> Result<(SpatialGrid, TimeAxis, usize)> {
    if rows.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    let (xc, yc) = match extra_col {
        Some(_) => (2, 3),
        None => (1, 2),
    };
    let mut nx = 0;
    let mut ny = 0;
    let mut n_extra = 0;
    let mut times: Vec<f64> = Vec::new();
    for (line, r) in rows {
        nx = nx.max(cell(r[xc], *line)? + 1);
        ny = ny.max(cell(r[yc], *line)? + 1);
        if let Some(c) = extra_col {
            n_extra = n_extra.max(cell(r[c], *line)? + 1);
        }
        if times.last().is_none_or(|&last| r[0] > last) {
            times.push(r[0]);
        } else if !times.contains(&r[0]) {
            return Err(parse_err(*line, "times must appear in increasing order"));
        }
    }
    let grid = SpatialGrid::with_geometry(nx, ny, spacing, (0.0, 0.0))?;
    let delta = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    let axis = TimeAxis::new(times.len(), delta, times[0])?;
    Ok((grid, axis, n_extra))
}

pub(crate) struct TimeIndexer {
    t0: f64,
    delta: f64,
    n: usize,
}

impl TimeIndexer {
    pub(crate) fn new(times: &TimeAxis) -> Self {
        Self { t0: times.t0(), delta: times.delta(), n: times.n_times() }
    }

    pub(crate) fn index(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t0) / self.delta).round();
        if k < 0.0 || k as usize >= self.n {
            return None;
        }
        let k = k as usize;
        let expected = self.t0 + k as f64 * self.delta;
        ((expected - t).abs() <= 1e-9 * (1.0 + t.abs())).then_some(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        let g = SpatialGrid::new(3, 3).unwrap();
        assert_eq!(g.site_distance(4, 4).unwrap(), 0.0);
        assert_eq!(g.site_distance(4, 5).unwrap(), 1.0);
        assert!((g.site_distance(0, 4).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(g.site_distance(0, 9).is_err());
    }

    #[test]
    fn displacement_examples() {
        let g = SpatialGrid::new(5, 5).unwrap();
        let i = g.index(2, 2).unwrap();
        assert_eq!(g.displacement_vector(i, i).unwrap(), (0.0, 0.0));
        let north = g.index(3, 2).unwrap();
        assert_eq!(g.displacement_vector(i, north).unwrap(), (0.0, 1.0));

        let g = SpatialGrid::with_geometry(5, 5, 0.5, (0.0, 0.0)).unwrap();
        let j = g.index(1, 4).unwrap();
        assert_eq!(g.displacement_vector(i, j).unwrap(), (1.0, -0.5));
        assert_eq!(g.displacement_vector(j, i).unwrap(), (-1.0, 0.5));
        assert!(g.displacement_vector(0, 25).is_err());
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(SpatialGrid::new(0, 3).is_err());
        assert!(SpatialGrid::with_geometry(2, 2, 0.0, (0.0, 0.0)).is_err());
        assert!(TimeAxis::new(0, 1.0, 0.0).is_err());
        assert!(TimeAxis::new(3, -1.0, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let g = SpatialGrid::new(2, 1).unwrap();
        let t = TimeAxis::new(1, 1.0, 0.0).unwrap();
        assert!(FieldSeries::new(g, t, vec![1.0, f64::NAN]).is_err());
        assert!(FieldSeries::new(g, t, vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = SpatialGrid::new(3, 2).unwrap();
        let t = TimeAxis::new(2, 0.5, 1.0).unwrap();
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.1).sin() / 3.0).collect();
        let f = FieldSeries::new(g, t, vals).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = FieldSeries::read_csv(&buf[..], 1.0).unwrap();
        assert_eq!(back, f);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn index_round_trip(nx in 1usize..30, ny in 1usize..30, r in 0usize..30, c in 0usize..30) {
            let g = SpatialGrid::new(nx, ny).unwrap();
            let (r, c) = (r % ny, c % nx);
            let i = g.index(r, c).unwrap();
            prop_assert_eq!(g.row_col(i).unwrap(), (r, c));
        }

        #[test]
        fn triangle_inequality(a in 0usize..100, b in 0usize..100, c in 0usize..100, h in 0.1f64..3.0) {
            let g = SpatialGrid::with_geometry(10, 10, h, (0.0, 0.0)).unwrap();
            let ab = g.site_distance(a, b).unwrap();
            let bc = g.site_distance(b, c).unwrap();
            let ac = g.site_distance(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((ab - g.site_distance(b, a).unwrap()).abs() < 1e-15);
        }
    }
}
