//! Time grids and piecewise-linear matrix schedules.
//!
//! Every time-varying matrix in the pipeline (system matrices, cost blocks,
//! Riccati solutions, gain schedules, signals) is represented as samples on a
//! strictly increasing grid, interpolated linearly between neighbouring
//! samples. Linear interpolation commutes with the linear operations applied
//! to schedules (scaling, sums, conic combinations), which keeps every
//! consumer of a schedule consistent with every other one.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative slack applied at the ends of a grid span when locating a query
/// time, so that times produced by integrators (which clamp to the span up to
/// rounding) are not rejected.
const SPAN_SLACK: f64 = 1e-9;

/// Strictly increasing, finite sequence of sample times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// Analysis grid over `[0, T]`. The first point must be exactly zero.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        let grid = Self::from_points(points)?;
        if grid.points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "analysis grid must start at 0 (got {})",
                grid.points[0]
            )));
        }
        Ok(grid)
    }

    /// Grid over an arbitrary span, e.g. the dense output times of a solver
    /// run that only covers part of the horizon.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// Uniform analysis grid with `n` points on `[0, t_end]`.
    pub fn uniform(t_end: f64, n: usize) -> Result<Self> {
        if !(t_end > 0.0) || n < 2 {
            return Err(Error::InvalidGrid(format!(
                "uniform grid needs t_end > 0 and n >= 2 (got t_end = {t_end}, n = {n})"
            )));
        }
        let h = t_end / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
        points[n - 1] = t_end;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn span(&self) -> f64 {
        self.end() - self.start()
    }

    /// Locate `t` in the grid: returns the segment index `k` and the local
    /// coordinate `theta in [0, 1]` such that `t = (1-theta) t_k + theta t_{k+1}`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let slack = SPAN_SLACK * self.span().max(1.0);
        if !t.is_finite() || t < self.start() - slack || t > self.end() + slack {
            return Err(Error::OutOfSpan {
                t,
                lo: self.start(),
                hi: self.end(),
            });
        }
        let t = t.clamp(self.start(), self.end());
        // partition_point returns the first index with point > t; the segment
        // starts one before that.
        let idx = self.points.partition_point(|&p| p <= t);
        let k = idx.clamp(1, self.points.len() - 1) - 1;
        let (a, b) = (self.points[k], self.points[k + 1]);
        Ok((k, (t - a) / (b - a)))
    }
}

/// Matrix-valued function of time, stored as one sample per grid point and
/// interpolated linearly in between.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSchedule {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    samples: Vec<DMatrix<f64>>,
}

impl MatrixSchedule {
    pub fn from_samples(grid: TimeGrid, samples: Vec<DMatrix<f64>>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {}-point grid",
                samples.len(),
                grid.len()
            )));
        }
        let (rows, cols) = samples[0].shape();
        for (k, m) in samples.iter().enumerate() {
            if m.shape() != (rows, cols) {
                return Err(Error::DimensionMismatch(format!(
                    "sample {k} is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "schedule sample",
                    t: grid.points()[k],
                });
            }
        }
        Ok(Self { grid, rows, cols, samples })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> DMatrix<f64>) -> Result<Self> {
        let samples = grid.points().iter().map(|&t| f(t)).collect();
        Self::from_samples(grid, samples)
    }

    pub fn constant(grid: TimeGrid, m: DMatrix<f64>) -> Result<Self> {
        let samples = vec![m; grid.len()];
        Self::from_samples(grid, samples)
    }

    pub fn zeros(grid: TimeGrid, rows: usize, cols: usize) -> Result<Self> {
        Self::constant(grid, DMatrix::zeros(rows, cols))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sample(&self, k: usize) -> &DMatrix<f64> {
        &self.samples[k]
    }

    pub fn samples(&self) -> &[DMatrix<f64>] {
        &self.samples
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.grid == other.grid
    }

    /// Linear interpolation at `t`. Errors if `t` lies outside the grid span.
    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, theta) = self.grid.locate(t)?;
        if theta == 0.0 {
            return Ok(self.samples[k].clone());
        }
        if theta == 1.0 {
            return Ok(self.samples[k + 1].clone());
        }
        Ok(&self.samples[k] * (1.0 - theta) + &self.samples[k + 1] * theta)
    }

    /// Derivative of the piecewise-linear interpolant within the segment
    /// containing `t` (one-sided at grid points).
    pub fn piecewise_derivative(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, _) = self.grid.locate(t)?;
        let dt = self.grid.points()[k + 1] - self.grid.points()[k];
        Ok((&self.samples[k + 1] - &self.samples[k]) / dt)
    }

    /// Apply `f` to every sample, preserving the grid.
    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        let samples = self.samples.iter().map(|m| f(m)).collect();
        Self::from_samples(self.grid.clone(), samples)
    }

    /// Sample-wise conic combination `sum_i c_i * S_i`. All schedules must
    /// share one grid; combining samples and interpolating commute, so the
    /// result is the pointwise combination everywhere on the span.
    pub fn linear_combination(terms: &[(f64, &MatrixSchedule)]) -> Result<Self> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty combination".into()))?;
        for (_, s) in terms.iter().skip(1) {
            if !s.same_grid(first) {
                return Err(Error::GridMismatch);
            }
            if s.rows != first.rows || s.cols != first.cols {
                return Err(Error::DimensionMismatch(format!(
                    "cannot combine {}x{} with {}x{}",
                    first.rows, first.cols, s.rows, s.cols
                )));
            }
        }
        let samples = (0..first.grid.len())
            .map(|k| {
                let mut acc = DMatrix::zeros(first.rows, first.cols);
                for (c, s) in terms {
                    acc += &s.samples[k] * *c;
                }
                acc
            })
            .collect();
        Self::from_samples(first.grid.clone(), samples)
    }

    /// Largest Frobenius norm over the stored samples.
    pub fn max_norm(&self) -> f64 {
        self.samples.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_grid_hits_endpoints() {
        let g = TimeGrid::uniform(5.0, 501).unwrap();
        assert_eq!(g.len(), 501);
        assert_eq!(g.start(), 0.0);
        assert_eq!(g.end(), 5.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
        assert!(TimeGrid::new(vec![0.5, 1.0]).is_err());
        assert!(TimeGrid::from_points(vec![0.5, 1.0]).is_ok());
        assert!(TimeGrid::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn interpolation_is_linear_between_samples() {
        let grid = TimeGrid::new(vec![0.0, 1.0, 3.0]).unwrap();
        let s = MatrixSchedule::from_fn(grid, |t| DMatrix::from_element(1, 1, 2.0 * t)).unwrap();
        assert_relative_eq!(s.eval(0.5).unwrap()[(0, 0)], 1.0);
        assert_relative_eq!(s.eval(2.0).unwrap()[(0, 0)], 4.0);
        assert_relative_eq!(s.eval(3.0).unwrap()[(0, 0)], 6.0);
        assert!(s.eval(3.1).is_err());
        assert!(s.eval(-0.1).is_err());
    }

    #[test]
    fn combination_matches_pointwise_sum() {
        let grid = TimeGrid::uniform(1.0, 11).unwrap();
        let a = MatrixSchedule::from_fn(grid.clone(), |t| DMatrix::from_element(2, 2, t)).unwrap();
        let b = MatrixSchedule::constant(grid, DMatrix::identity(2, 2)).unwrap();
        let c = MatrixSchedule::linear_combination(&[(2.0, &a), (-1.0, &b)]).unwrap();
        let got = c.eval(0.35).unwrap();
        let want = a.eval(0.35).unwrap() * 2.0 - b.eval(0.35).unwrap();
        assert_relative_eq!((got - want).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = MatrixSchedule::zeros(TimeGrid::uniform(1.0, 5).unwrap(), 1, 1).unwrap();
        let b = MatrixSchedule::zeros(TimeGrid::uniform(1.0, 6).unwrap(), 1, 1).unwrap();
        assert!(matches!(
            MatrixSchedule::linear_combination(&[(1.0, &a), (1.0, &b)]),
            Err(Error::GridMismatch)
        ));
    }
}
