//! Backward Riccati differential sweeps.
//!
//! The certified deviation bound is the last diagonal entry of `Y(0)`, where
//! `Y` solves
//!
//! ```text
//! Y' + A'Y + YA + Q - (YB + S) R^{-1} (YB + S)' = W,    Y(T) given,
//! ```
//!
//! integrated backward from the horizon with `R(t) < 0`. For weight choices
//! that cannot certify a bound the sweep blows up in finite time; that
//! escape is detected (norm threshold or step-size collapse), reported with
//! the partial solution, and later converted into a separating cut. The
//! same integrator solves the nominal LQR design problem through a sign
//! flip of the cost.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::lintime::{check_r_negdef, AugmentedLtv, QsrData, RCheck, EPS_R};
use crate::ode::{solve_ivp, OdeOptions, Termination};
use crate::schedule::{MatrixSchedule, TimeGrid};

/// Default number of output samples per horizon used when the caller does
/// not pin the dense output spacing.
const DENSE_SAMPLES_PER_SPAN: f64 = 2000.0;

#[derive(Debug, Clone)]
pub struct RdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Maximum spacing of the emitted solution samples; `None` uses
    /// `span / 2000`.
    pub dense_dt: Option<f64>,
    /// Frobenius norm threshold that declares a finite escape.
    pub y_max: f64,
    /// Step-size floor as a fraction of the span; steps below it also
    /// declare an escape.
    pub h_min_frac: f64,
    pub max_steps: usize,
}

impl Default for RdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            dense_dt: None,
            y_max: 1e9,
            h_min_frac: 1e-12,
            max_steps: 2_000_000,
        }
    }
}

/// Result of one backward sweep.
#[derive(Debug, Clone)]
pub enum RdeOutcome {
    /// The solution exists on the whole span.
    Solved {
        /// Solution samples, from the start of the span to the horizon.
        y: MatrixSchedule,
        /// Time derivative of the solution at the same samples, taken from
        /// the integrator's interpolant (exact right-hand sides at step
        /// endpoints).
        y_dot: MatrixSchedule,
    },
    /// The solution blew up before reaching the start of the span; samples
    /// cover `[t_esc, T]` only.
    Escaped {
        t_esc: f64,
        y: MatrixSchedule,
        y_dot: MatrixSchedule,
    },
}

impl RdeOutcome {
    pub fn is_solved(&self) -> bool {
        matches!(self, RdeOutcome::Solved { .. })
    }

    pub fn y(&self) -> &MatrixSchedule {
        match self {
            RdeOutcome::Solved { y, .. } | RdeOutcome::Escaped { y, .. } => y,
        }
    }

    pub fn y_dot(&self) -> &MatrixSchedule {
        match self {
            RdeOutcome::Solved { y_dot, .. } | RdeOutcome::Escaped { y_dot, .. } => y_dot,
        }
    }
}

fn vec_to_mat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

fn mat_to_vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Scan a plain `R` schedule for negative definiteness (grid endpoints
/// bound the segments, as entries are linear in `t` per segment).
fn scan_r_schedule(r: &MatrixSchedule) -> Result<()> {
    for (k, &t) in r.grid().points().iter().enumerate() {
        let max_eig = r
            .sample(k)
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if max_eig > -EPS_R {
            return Err(Error::RNotNegativeDefinite { t, max_eig });
        }
    }
    Ok(())
}

/// Backward sweep with explicit coefficient schedules. `w` is an optional
/// right-hand-side perturbation on the same grid.
#[allow(clippy::too_many_arguments)]
pub fn solve_rde_raw(
    a: &MatrixSchedule,
    b: &MatrixSchedule,
    q: &MatrixSchedule,
    s: &MatrixSchedule,
    r: &MatrixSchedule,
    y_terminal: &DMatrix<f64>,
    w: Option<&MatrixSchedule>,
    opts: &RdeOptions,
) -> Result<RdeOutcome> {
    let n = a.rows();
    let n_w = b.cols();
    if a.cols() != n || b.rows() != n {
        return Err(Error::DimensionMismatch("A/B shapes".into()));
    }
    if q.rows() != n || q.cols() != n || s.rows() != n || s.cols() != n_w || r.rows() != n_w {
        return Err(Error::DimensionMismatch("Q/S/R shapes".into()));
    }
    if y_terminal.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "terminal value is {}x{}, expected {n}x{n}",
            y_terminal.nrows(),
            y_terminal.ncols()
        )));
    }
    if let Some(w) = w {
        if w.rows() != n || w.cols() != n {
            return Err(Error::DimensionMismatch("perturbation shape".into()));
        }
    }
    scan_r_schedule(r)?;

    let grid = a.grid();
    let (t_lo, t_hi) = (grid.start(), grid.end());
    let span = t_hi - t_lo;

    let mut y_t = y_terminal.clone();
    symmetrize(&mut y_t);

    // Reverse time: z(tau) = Y(t_hi - tau) turns the backward sweep into a
    // forward integration over [0, span].
    let mut rhs_buf = DMatrix::zeros(n, n);
    let mut rhs = |tau: f64, zv: &DVector<f64>, dzv: &mut DVector<f64>| -> Result<()> {
        let t = (t_hi - tau).clamp(t_lo, t_hi);
        let z = vec_to_mat(zv, n);
        let at = a.eval(t)?;
        let bt = b.eval(t)?;
        let qt = q.eval(t)?;
        let st = s.eval(t)?;
        let rt = r.eval(t)?;
        // G = ZB + S; the quadratic term is G R^{-1} G' = -G (-R)^{-1} G'.
        let g = &z * &bt + st;
        let neg_r = -rt;
        let chol: Cholesky<f64, Dyn> = Cholesky::new(neg_r).ok_or(Error::RNotNegativeDefinite {
            t,
            max_eig: f64::NAN,
        })?;
        let v = chol.solve(&g.transpose());
        // z' = A'Z + ZA + Q - G R^{-1} G' - W (signs flipped by reversal).
        rhs_buf.copy_from(&qt);
        rhs_buf += at.transpose() * &z;
        rhs_buf += &z * at;
        rhs_buf += &g * v;
        if let Some(w) = w {
            rhs_buf -= w.eval(t)?;
        }
        dzv.copy_from(&mat_to_vec(&rhs_buf));
        Ok(())
    };

    // Interior schedule grid points become forced stops, mapped into
    // reversed time.
    let mut stops: Vec<f64> = grid
        .points()
        .iter()
        .rev()
        .map(|&t| t_hi - t)
        .filter(|&tau| tau > 0.0 && tau < span)
        .collect();
    stops.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let ode_opts = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        h_min: opts.h_min_frac * span,
        max_steps: opts.max_steps,
        dense_dt: Some(opts.dense_dt.unwrap_or(span / DENSE_SAMPLES_PER_SPAN)),
    };

    let y_max = opts.y_max;
    let sol = solve_ivp(
        &mut rhs,
        (0.0, span),
        mat_to_vec(&y_t),
        &stops,
        &ode_opts,
        |_, zv| {
            let mut z = vec_to_mat(zv, n);
            symmetrize(&mut z);
            zv.copy_from(&mat_to_vec(&z));
            z.norm() <= y_max
        },
    )?;

    // Map back to original time and increasing order.
    let mut times: Vec<f64> = sol.times.iter().rev().map(|&tau| t_hi - tau).collect();
    let m = times.len();
    times[m - 1] = t_hi;
    let escaped = !matches!(sol.termination, Termination::Completed);
    if !escaped {
        times[0] = t_lo;
    }
    let y_samples: Vec<DMatrix<f64>> = sol.states.iter().rev().map(|v| vec_to_mat(v, n)).collect();
    let y_dot_samples: Vec<DMatrix<f64>> = sol
        .derivs
        .iter()
        .rev()
        .map(|v| -vec_to_mat(v, n))
        .collect();

    if escaped && m < 2 {
        return Err(Error::EscapeAtHorizon { t: t_hi });
    }
    let out_grid = TimeGrid::from_points(times)?;
    let y = MatrixSchedule::from_samples(out_grid.clone(), y_samples)?;
    let y_dot = MatrixSchedule::from_samples(out_grid, y_dot_samples)?;

    if escaped {
        Ok(RdeOutcome::Escaped {
            t_esc: y.grid().start(),
            y,
            y_dot,
        })
    } else {
        Ok(RdeOutcome::Solved { y, y_dot })
    }
}

/// Backward sweep of an assembled analysis problem at multiplier weights
/// `lambda`. Fails up front if `R(t, lambda)` is not negative definite.
pub fn solve_rde_backward(
    ga: &AugmentedLtv,
    qsr: &QsrData,
    lambda: &DVector<f64>,
    y_terminal: &DMatrix<f64>,
    w: Option<&MatrixSchedule>,
    opts: &RdeOptions,
) -> Result<RdeOutcome> {
    if let RCheck::Violation { t, max_eig, .. } = check_r_negdef(qsr, lambda)? {
        return Err(Error::RNotNegativeDefinite { t, max_eig });
    }
    let (q, s, r) = qsr.combined(lambda)?;
    solve_rde_raw(&ga.aa, &ga.ba, &q, &s, &r, y_terminal, w, opts)
}

/// Certified bound extracted from a completed sweep: the last diagonal entry
/// of the solution at the start of the span. Escaped sweeps carry an
/// infinite bound.
pub fn eval_j(outcome: &RdeOutcome) -> f64 {
    match outcome {
        RdeOutcome::Solved { y, .. } => {
            let first = y.sample(0);
            let n = first.nrows();
            first[(n - 1, n - 1)]
        }
        RdeOutcome::Escaped { .. } => f64::INFINITY,
    }
}

/// Finite-horizon LQR gain design on the nominal linearization.
///
/// Minimizing `integral(x'Qw x + u'Rw u) + x(T)'PT x(T)` is the same sweep
/// with the cost signs flipped: the solution of the bound RDE with
/// `Q = -Qw`, `S = 0`, `R = -Rw` and terminal value `-PT` is `-P`. Returns
/// the gain `K(t) = Rw^{-1} B(t)' P(t)` and `P` itself, sampled on the input
/// grid.
pub fn lqr_design(
    a: &MatrixSchedule,
    b: &MatrixSchedule,
    qw: &DMatrix<f64>,
    rw: &DMatrix<f64>,
    pt: &DMatrix<f64>,
    opts: &RdeOptions,
) -> Result<(MatrixSchedule, MatrixSchedule)> {
    let n = a.rows();
    let n_u = b.cols();
    let psd = |name: &str, m: &DMatrix<f64>| -> Result<()> {
        let min_eig = m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 * m.norm().max(1.0) {
            return Err(Error::IndefiniteWeight(format!(
                "{name} has eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(())
    };
    psd("Qw", qw)?;
    psd("PT", pt)?;
    let rw_chol =
        Cholesky::new(rw.clone()).ok_or_else(|| Error::IndefiniteWeight("Rw must be positive definite".into()))?;

    let grid = a.grid().clone();
    let q = MatrixSchedule::constant(grid.clone(), -qw)?;
    let s = MatrixSchedule::zeros(grid.clone(), n, n_u)?;
    let r = MatrixSchedule::constant(grid.clone(), -rw)?;
    let outcome = solve_rde_raw(a, b, &q, &s, &r, &(-pt), None, opts)?;
    let y = match outcome {
        RdeOutcome::Solved { y, .. } => y,
        RdeOutcome::Escaped { t_esc, .. } => {
            return Err(Error::NonFinite {
                context: "LQR Riccati sweep",
                t: t_esc,
            })
        }
    };

    let mut k_samples = Vec::with_capacity(grid.len());
    let mut p_samples = Vec::with_capacity(grid.len());
    for &t in grid.points() {
        let p = -y.eval(t)?;
        k_samples.push(rw_chol.solve(&(b.eval(t)?.transpose() * &p)));
        p_samples.push(p);
    }
    Ok((
        MatrixSchedule::from_samples(grid.clone(), k_samples)?,
        MatrixSchedule::from_samples(grid, p_samples)?,
    ))
}

/// Largest residual of the Riccati equation over the sample grid of a
/// candidate solution `(y, y_dot)`, in Frobenius norm. The derivative comes
/// from the caller (for solver output, the integrator's own interpolant);
/// differencing the samples would limit the check to the sampling order.
#[allow(clippy::too_many_arguments)]
pub fn rde_residual_raw(
    a: &MatrixSchedule,
    b: &MatrixSchedule,
    q: &MatrixSchedule,
    s: &MatrixSchedule,
    r: &MatrixSchedule,
    w: Option<&MatrixSchedule>,
    y: &MatrixSchedule,
    y_dot: &MatrixSchedule,
) -> Result<f64> {
    if !y.same_grid(y_dot) {
        return Err(Error::GridMismatch);
    }
    let mut worst = 0.0f64;
    for (k, &t) in y.grid().points().iter().enumerate() {
        let yk = y.sample(k);
        let at = a.eval(t)?;
        let g = yk * b.eval(t)? + s.eval(t)?;
        let neg_r = -r.eval(t)?;
        let chol = Cholesky::new(neg_r).ok_or(Error::RNotNegativeDefinite {
            t,
            max_eig: f64::NAN,
        })?;
        let v = chol.solve(&g.transpose());
        let mut res = y_dot.sample(k).clone();
        res += at.transpose() * yk;
        res += yk * at;
        res += q.eval(t)?;
        res += g * v; // -(YB+S) R^{-1} (YB+S)'
        if let Some(w) = w {
            res -= w.eval(t)?;
        }
        worst = worst.max(res.norm());
    }
    Ok(worst)
}

/// Residual of a completed analysis sweep against its own equation.
pub fn rde_residual(
    ga: &AugmentedLtv,
    qsr: &QsrData,
    lambda: &DVector<f64>,
    outcome: &RdeOutcome,
    w: Option<&MatrixSchedule>,
) -> Result<f64> {
    let (q, s, r) = qsr.combined(lambda)?;
    rde_residual_raw(&ga.aa, &ga.ba, &q, &s, &r, w, outcome.y(), outcome.y_dot())
}
