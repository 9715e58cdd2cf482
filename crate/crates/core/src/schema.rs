//! JSON serialization of analysis problems and schedules.
//!
//! A problem file carries the augmented system (its time grid plus each
//! matrix-valued coefficient as one row-major flat array per grid point)
//! and the uncertainty descriptions. Standalone schedules — solution dumps,
//! gain traces — use the same matrix layout with their own grid. All
//! numbers survive a round trip bit for bit: the writer emits the shortest
//! decimal form that parses back to the identical double.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lintime::{AugmentedLtv, Iqc};
use crate::schedule::{MatrixSchedule, TimeGrid};

/// Matrix-valued time series riding on a grid stored elsewhere: one
/// row-major `rows * cols` array per grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSeriesDto {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

/// Standalone schedule with its own grid, for solution dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDto {
    pub grid: Vec<f64>,
    #[serde(flatten)]
    pub series: MatrixSeriesDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IqcDto {
    pub label: String,
    pub n_v: usize,
    pub n_w: usize,
    /// Row-major `(n_v + n_w)` square multiplier matrix.
    pub m: Vec<f64>,
}

/// A complete analysis problem: augmented system plus uncertainty blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemDto {
    pub grid: Vec<f64>,
    pub aa: MatrixSeriesDto,
    pub ba: MatrixSeriesDto,
    pub cva: MatrixSeriesDto,
    pub cea: MatrixSeriesDto,
    pub dvw: MatrixSeriesDto,
    pub dew: MatrixSeriesDto,
    pub iqcs: Vec<IqcDto>,
}

fn series_from_schedule(sched: &MatrixSchedule) -> MatrixSeriesDto {
    let data = sched
        .samples()
        .iter()
        .map(|m| {
            // nalgebra stores column-major; emit row-major.
            let mut flat = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    flat.push(m[(i, j)]);
                }
            }
            flat
        })
        .collect();
    MatrixSeriesDto {
        rows: sched.rows(),
        cols: sched.cols(),
        data,
    }
}

fn schedule_from_series(grid: &TimeGrid, series: &MatrixSeriesDto) -> Result<MatrixSchedule> {
    if series.data.len() != grid.len() {
        return Err(Error::Parse(format!(
            "series has {} samples for a grid of {} points",
            series.data.len(),
            grid.len()
        )));
    }
    let (r, c) = (series.rows, series.cols);
    let mut samples = Vec::with_capacity(series.data.len());
    for (k, flat) in series.data.iter().enumerate() {
        if flat.len() != r * c {
            return Err(Error::Parse(format!(
                "sample {k} has {} entries, expected {}",
                flat.len(),
                r * c
            )));
        }
        samples.push(DMatrix::from_row_slice(r, c, flat));
    }
    MatrixSchedule::from_samples(grid.clone(), samples)
}

impl ScheduleDto {
    pub fn from_schedule(sched: &MatrixSchedule) -> Self {
        Self {
            grid: sched.grid().points().to_vec(),
            series: series_from_schedule(sched),
        }
    }

    pub fn to_schedule(&self) -> Result<MatrixSchedule> {
        let grid = TimeGrid::from_points(self.grid.clone())?;
        schedule_from_series(&grid, &self.series)
    }
}

impl IqcDto {
    pub fn from_iqc(iqc: &Iqc) -> Self {
        let n = iqc.n_v + iqc.n_w;
        let mut flat = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                flat.push(iqc.m[(i, j)]);
            }
        }
        Self {
            label: iqc.label.clone(),
            n_v: iqc.n_v,
            n_w: iqc.n_w,
            m: flat,
        }
    }

    pub fn to_iqc(&self) -> Result<Iqc> {
        let n = self.n_v + self.n_w;
        if self.m.len() != n * n {
            return Err(Error::Parse(format!(
                "multiplier '{}' has {} entries, expected {}",
                self.label,
                self.m.len(),
                n * n
            )));
        }
        Iqc::new(
            self.label.clone(),
            self.n_v,
            self.n_w,
            DMatrix::from_row_slice(n, n, &self.m),
        )
    }
}

impl ProblemDto {
    pub fn from_problem(ga: &AugmentedLtv, iqcs: &[Iqc]) -> Self {
        Self {
            grid: ga.grid().points().to_vec(),
            aa: series_from_schedule(&ga.aa),
            ba: series_from_schedule(&ga.ba),
            cva: series_from_schedule(&ga.cva),
            cea: series_from_schedule(&ga.cea),
            dvw: series_from_schedule(&ga.dvw),
            dew: series_from_schedule(&ga.dew),
            iqcs: iqcs.iter().map(IqcDto::from_iqc).collect(),
        }
    }

    pub fn to_problem(&self) -> Result<(AugmentedLtv, Vec<Iqc>)> {
        let grid = TimeGrid::from_points(self.grid.clone())?;
        let ga = AugmentedLtv::from_parts(
            schedule_from_series(&grid, &self.aa)?,
            schedule_from_series(&grid, &self.ba)?,
            schedule_from_series(&grid, &self.cva)?,
            schedule_from_series(&grid, &self.cea)?,
            schedule_from_series(&grid, &self.dvw)?,
            schedule_from_series(&grid, &self.dew)?,
        )?;
        let iqcs = self
            .iqcs
            .iter()
            .map(IqcDto::to_iqc)
            .collect::<Result<Vec<_>>>()?;
        Ok((ga, iqcs))
    }
}

/// Serialize a problem to pretty-printed JSON.
pub fn problem_to_json(ga: &AugmentedLtv, iqcs: &[Iqc]) -> Result<String> {
    serde_json::to_string_pretty(&ProblemDto::from_problem(ga, iqcs))
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Parse a problem from JSON text.
pub fn problem_from_json(text: &str) -> Result<(AugmentedLtv, Vec<Iqc>)> {
    let dto: ProblemDto = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    dto.to_problem()
}

/// Serialize a standalone schedule to pretty-printed JSON.
pub fn schedule_to_json(sched: &MatrixSchedule) -> Result<String> {
    serde_json::to_string_pretty(&ScheduleDto::from_schedule(sched))
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Parse a standalone schedule from JSON text.
pub fn schedule_from_json(text: &str) -> Result<MatrixSchedule> {
    let dto: ScheduleDto = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    dto.to_schedule()
}
