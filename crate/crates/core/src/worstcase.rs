//! Worst-case disturbances, subgradients and separating cuts.
//!
//! At feasible multiplier weights the bound `J(lambda)` is attained by an
//! explicit worst-case disturbance: a state feedback built from the Riccati
//! solution. Replaying that disturbance at other weights evaluates a linear
//! lower model of `J`, so the per-multiplier energies of the witness form a
//! subgradient. Infeasible weights yield separating cuts instead: from the
//! sign constraint, from an indefinite `R`, or from the blow-up direction of
//! an escaped sweep.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lintime::{check_r_negdef, AugmentedLtv, QsrData, RCheck};
use crate::ode::{solve_ivp, OdeOptions, Termination};
use crate::rde::{eval_j, solve_rde_backward, RdeOptions, RdeOutcome};
use crate::schedule::{MatrixSchedule, TimeGrid};

/// Norm window in which an escape probe is taken: large enough that the
/// blow-up direction dominates, small enough that the sample is still
/// accurate.
const PROBE_NORM_LO: f64 = 1e6;
const PROBE_NORM_HI: f64 = 1e8;
/// Spectral radius below which a probe cannot anchor a cut.
const PROBE_MIN_RHO: f64 = 1e3;
/// Cuts with a norm at or below this threshold cannot separate anything.
const CUT_MIN_NORM: f64 = 1e-14;

/// Worst-case signal pair sampled on a dense grid: the augmented state
/// trajectory and the disturbance that drives it.
#[derive(Debug, Clone)]
pub struct Witness {
    pub xa: MatrixSchedule,
    pub w: MatrixSchedule,
}

impl Witness {
    pub fn grid(&self) -> &TimeGrid {
        self.xa.grid()
    }

    /// Combined signal energy (state plus disturbance), by trapezoid rule.
    pub fn energy(&self) -> f64 {
        let pts = self.grid().points();
        let mut acc = 0.0;
        let mut prev = 0.0;
        for (k, _) in pts.iter().enumerate() {
            let val = self.xa.sample(k).norm_squared() + self.w.sample(k).norm_squared();
            if k > 0 {
                acc += 0.5 * (val + prev) * (pts[k] - pts[k - 1]);
            }
            prev = val;
        }
        acc
    }

    /// Scale both signals by `c` (the induced quadratic costs scale by
    /// `c^2`).
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Ok(Self {
            xa: self.xa.map(|m| m * c)?,
            w: self.w.map(|m| m * c)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutKind {
    /// Subgradient of `J` at a feasible weight.
    Subgradient,
    /// Violated sign constraint `lambda >= 0`.
    Nonneg,
    /// `R(t, lambda)` not negative definite.
    RIndef,
    /// Finite escape of the Riccati sweep.
    Escape,
}

/// Cutting plane in weight space: feasible minimizers satisfy
/// `g' (alpha - lambda) <= 0` for every cut produced at `lambda` (strictly
/// for the infeasibility kinds).
#[derive(Debug, Clone)]
pub struct CutVector {
    pub g: DVector<f64>,
    pub kind: CutKind,
    pub witness: Option<Witness>,
}

/// Evaluation of the bound at one weight vector: the certified cost (finite
/// only at feasible weights) and a cut.
#[derive(Debug)]
pub struct OracleEval {
    pub cost: f64,
    pub cut: CutVector,
}

/// Anything that can evaluate a cost-plus-cut at a weight vector. The
/// cutting-plane minimizers are written against this interface so that test
/// problems with analytic subgradients can stand in for the full pipeline.
pub trait CutOracle: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, lambda: &DVector<f64>) -> Result<OracleEval>;
}

/// Sign-constraint cut at a weight vector with a negative entry: the most
/// negative coordinate is pushed back toward the feasible orthant.
pub fn nonneg_cut(lambda: &DVector<f64>) -> Result<CutVector> {
    let mut arg = None;
    let mut worst = 0.0;
    for (i, &v) in lambda.iter().enumerate() {
        if v < worst {
            worst = v;
            arg = Some(i);
        }
    }
    let i = arg.ok_or_else(|| {
        Error::InvalidArgument("sign cut requested at a nonnegative weight vector".into())
    })?;
    let mut g = DVector::zeros(lambda.len());
    g[i] = -1.0;
    Ok(CutVector {
        g,
        kind: CutKind::Nonneg,
        witness: None,
    })
}

/// Cut from an indefinite `R(t*, lambda)`: along the offending direction
/// `wbar`, every weight with `R` negative definite satisfies
/// `sum_i alpha_i wbar' Ri(t*) wbar < wbar' R(t*, lambda) wbar`, giving the
/// separating vector `g_i = wbar' Ri(t*) wbar`.
pub fn r_indef_cut(qsr: &QsrData, t_star: f64, wbar: &DVector<f64>) -> Result<CutVector> {
    let m = qsr.num_multipliers();
    let mut g = DVector::zeros(m);
    for i in 0..m {
        let (_, _, ri) = qsr.part(i);
        g[i] = (wbar.transpose() * ri.eval(t_star)? * wbar)[(0, 0)];
    }
    let norm = g.norm();
    if norm <= CUT_MIN_NORM {
        return Err(Error::ZeroCut { norm });
    }
    Ok(CutVector {
        g,
        kind: CutKind::RIndef,
        witness: None,
    })
}

/// Forward sweep of the closed loop `x' = (Aa - Ba R^{-1} (Y Ba + S)') x`
/// over `[t_start, T]`, sampling the state and the disturbance
/// `w = -R^{-1} (Y Ba + S)' x` densely.
fn forward_sweep(
    ga: &AugmentedLtv,
    q_s_r: (&MatrixSchedule, &MatrixSchedule, &MatrixSchedule),
    y: &MatrixSchedule,
    t_start: f64,
    x_start: DVector<f64>,
    opts: &RdeOptions,
) -> Result<Witness> {
    let (_, s, r) = q_s_r;
    let t_end = ga.horizon();
    let n = ga.n_aug();
    let span = t_end - t_start;

    let gain_at = |t: f64| -> Result<DMatrix<f64>> {
        let yt = y.eval(t)?;
        let g = &yt * ga.ba.eval(t)? + s.eval(t)?;
        let chol = Cholesky::new(-r.eval(t)?).ok_or(Error::RNotNegativeDefinite {
            t,
            max_eig: f64::NAN,
        })?;
        // w = F x with F = -R^{-1} G' = (-R)^{-1} G'.
        Ok(chol.solve(&g.transpose()))
    };

    let mut rhs = |t: f64, x: &DVector<f64>, dx: &mut DVector<f64>| -> Result<()> {
        let t = t.clamp(t_start, t_end);
        let f = gain_at(t)?;
        let w = &f * x;
        dx.copy_from(&(ga.aa.eval(t)? * x + ga.ba.eval(t)? * w));
        Ok(())
    };

    let stops: Vec<f64> = ga
        .grid()
        .points()
        .iter()
        .cloned()
        .filter(|&t| t > t_start && t < t_end)
        .collect();
    let ode_opts = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        h_min: 0.0,
        max_steps: opts.max_steps,
        dense_dt: Some(opts.dense_dt.unwrap_or(span / 2000.0)),
    };
    let sol = solve_ivp(&mut rhs, (t_start, t_end), x_start, &stops, &ode_opts, |_, x| {
        x.iter().all(|v| v.is_finite())
    })?;
    if !matches!(sol.termination, Termination::Completed) {
        return Err(Error::NonFinite {
            context: "worst-case forward sweep",
            t: sol.last_time(),
        });
    }

    let mut times = sol.times;
    let k = times.len();
    times[0] = t_start;
    times[k - 1] = t_end;
    let mut xs = Vec::with_capacity(k);
    let mut ws = Vec::with_capacity(k);
    for (t, x) in times.iter().zip(&sol.states) {
        let f = gain_at(*t)?;
        ws.push(DMatrix::from_column_slice(f.nrows(), 1, (&f * x).as_slice()));
        xs.push(DMatrix::from_column_slice(n, 1, x.as_slice()));
    }
    let grid = TimeGrid::from_points(times)?;
    Ok(Witness {
        xa: MatrixSchedule::from_samples(grid.clone(), xs)?,
        w: MatrixSchedule::from_samples(grid, ws)?,
    })
}

/// Worst-case disturbance attaining `J(lambda)` for a completed sweep.
pub fn optimal_disturbance(
    ga: &AugmentedLtv,
    qsr: &QsrData,
    lambda: &DVector<f64>,
    outcome: &RdeOutcome,
    opts: &RdeOptions,
) -> Result<Witness> {
    let y = match outcome {
        RdeOutcome::Solved { y, .. } => y,
        RdeOutcome::Escaped { .. } => {
            return Err(Error::InvalidArgument(
                "worst-case disturbance requires a completed sweep".into(),
            ))
        }
    };
    let (q, s, r) = qsr.combined(lambda)?;
    forward_sweep(
        ga,
        (&q, &s, &r),
        y,
        ga.grid().start(),
        ga.x0(),
        opts,
    )
}

/// Per-multiplier energies of a witness plus the weight-independent cost,
/// by trapezoid quadrature on the witness grid:
/// returns `(c0, g)` with `c0 = integral of z' Phi0 z` and
/// `g_i = integral of z' Phi_i z`, `z = [xa; w]`.
pub fn witness_costs(qsr: &QsrData, witness: &Witness) -> Result<(f64, DVector<f64>)> {
    let m = qsr.num_multipliers();
    let pts = witness.grid().points();
    let mut acc = vec![0.0; m + 1];
    let mut prev = vec![0.0; m + 1];

    let quad = |q: &MatrixSchedule,
                s: &MatrixSchedule,
                r: &MatrixSchedule,
                t: f64,
                xa: &DMatrix<f64>,
                w: &DMatrix<f64>|
     -> Result<f64> {
        let qx = (xa.transpose() * q.eval(t)? * xa)[(0, 0)];
        let sx = (xa.transpose() * s.eval(t)? * w)[(0, 0)];
        let rw = (w.transpose() * r.eval(t)? * w)[(0, 0)];
        Ok(qx + 2.0 * sx + rw)
    };

    for (k, &t) in pts.iter().enumerate() {
        let xa = witness.xa.sample(k);
        let w = witness.w.sample(k);
        let (q0, s0, r0) = qsr.base();
        let mut vals = vec![quad(q0, s0, r0, t, xa, w)?];
        for i in 0..m {
            let (qi, si, ri) = qsr.part(i);
            vals.push(quad(qi, si, ri, t, xa, w)?);
        }
        if k > 0 {
            let dt = pts[k] - pts[k - 1];
            for (j, v) in vals.iter().enumerate() {
                acc[j] += 0.5 * (v + prev[j]) * dt;
            }
        }
        prev = vals;
    }
    Ok((acc[0], DVector::from_vec(acc[1..].to_vec())))
}

/// Subgradient of `J` at a feasible weight vector, evaluated from the
/// worst-case witness.
pub fn subgradient(qsr: &QsrData, witness: &Witness) -> Result<DVector<f64>> {
    Ok(witness_costs(qsr, witness)?.1)
}

/// Cost of a fixed witness under the weights `lambda`; equals `J(lambda)`
/// when the witness is the worst case for `lambda`.
pub fn lq_cost(qsr: &QsrData, lambda: &DVector<f64>, witness: &Witness) -> Result<f64> {
    let (c0, g) = witness_costs(qsr, witness)?;
    Ok(c0 + lambda.dot(&g))
}

/// Separating cut from an escaped sweep.
///
/// A probe state is taken just above the escape time, scaled by the inverse
/// spectral radius of `Y` there, and replayed forward under the worst-case
/// feedback. Its per-multiplier energies separate every feasible weight
/// vector from the current one.
pub fn escape_cut(
    ga: &AugmentedLtv,
    qsr: &QsrData,
    lambda: &DVector<f64>,
    outcome: &RdeOutcome,
    opts: &RdeOptions,
) -> Result<CutVector> {
    let (t_esc, y) = match outcome {
        RdeOutcome::Escaped { t_esc, y, .. } => (*t_esc, y),
        RdeOutcome::Solved { .. } => {
            return Err(Error::InvalidArgument(
                "escape cut requires an escaped sweep".into(),
            ))
        }
    };

    // Probe: earliest sample past the escape whose norm falls in the target
    // window; otherwise the largest sample still below the window's top;
    // otherwise the largest available (step-collapse escapes may never reach
    // the window).
    let pts = y.grid().points();
    let mut probe_idx = None;
    for k in 1..pts.len() {
        let norm = y.sample(k).norm();
        if norm >= PROBE_NORM_LO && norm <= PROBE_NORM_HI {
            probe_idx = Some(k);
            break;
        }
    }
    if probe_idx.is_none() {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 1..pts.len() {
            let norm = y.sample(k).norm();
            if norm <= PROBE_NORM_HI && norm > best.1 {
                best = (k, norm);
            }
        }
        if best.1 > 0.0 {
            probe_idx = Some(best.0);
        }
    }
    let k = probe_idx.unwrap_or(1.min(pts.len() - 1));
    let t_probe = pts[k];
    let y_probe = y.sample(k);

    let eig = y_probe.clone().symmetric_eigen();
    let (mut arg, mut rho) = (0, 0.0);
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > rho {
            rho = ev.abs();
            arg = j;
        }
    }
    if rho < PROBE_MIN_RHO {
        return Err(Error::DegenerateProbe { t: t_probe, rho });
    }
    let x_start = eig.eigenvectors.column(arg) / rho;

    let (q, s, r) = qsr.combined(lambda)?;
    let witness = forward_sweep(ga, (&q, &s, &r), y, t_probe, x_start.into_owned(), opts)?;
    let g = subgradient(qsr, &witness)?;
    let norm = g.norm();
    if norm <= CUT_MIN_NORM {
        return Err(Error::ZeroCut { norm });
    }
    let _ = t_esc;
    Ok(CutVector {
        g,
        kind: CutKind::Escape,
        witness: Some(witness),
    })
}

/// Options shared by the bound evaluations inside the oracle.
#[derive(Debug, Clone, Default)]
pub struct ProblemOptions {
    pub rde: RdeOptions,
}

/// The analysis problem as a cut oracle: classifies each weight vector and
/// produces the matching cost and cut.
///
/// Order of the cases: sign constraint, definiteness scan of `R`, Riccati
/// sweep (subgradient on success, escape cut on blow-up).
pub struct RobustnessProblem {
    ga: AugmentedLtv,
    qsr: QsrData,
    opts: ProblemOptions,
}

impl RobustnessProblem {
    pub fn new(ga: AugmentedLtv, qsr: QsrData, opts: ProblemOptions) -> Result<Self> {
        if qsr.state_dim() != ga.n_aug() || qsr.input_dim() != ga.dims().n_w {
            return Err(Error::DimensionMismatch(
                "cost blocks do not match the augmented system".into(),
            ));
        }
        Ok(Self { ga, qsr, opts })
    }

    pub fn system(&self) -> &AugmentedLtv {
        &self.ga
    }

    pub fn qsr(&self) -> &QsrData {
        &self.qsr
    }

    pub fn options(&self) -> &ProblemOptions {
        &self.opts
    }

    /// Completed sweep at `lambda`, if it exists.
    pub fn solve_at(&self, lambda: &DVector<f64>) -> Result<RdeOutcome> {
        let n = self.ga.n_aug();
        solve_rde_backward(
            &self.ga,
            &self.qsr,
            lambda,
            &DMatrix::zeros(n, n),
            None,
            &self.opts.rde,
        )
    }
}

impl CutOracle for RobustnessProblem {
    fn dim(&self) -> usize {
        self.qsr.num_multipliers()
    }

    fn evaluate(&self, lambda: &DVector<f64>) -> Result<OracleEval> {
        if lambda.iter().any(|&v| v < 0.0) {
            return Ok(OracleEval {
                cost: f64::INFINITY,
                cut: nonneg_cut(lambda)?,
            });
        }
        if let RCheck::Violation { t, direction, .. } = check_r_negdef(&self.qsr, lambda)? {
            return Ok(OracleEval {
                cost: f64::INFINITY,
                cut: r_indef_cut(&self.qsr, t, &direction)?,
            });
        }
        let outcome = self.solve_at(lambda)?;
        match &outcome {
            RdeOutcome::Solved { .. } => {
                let witness =
                    optimal_disturbance(&self.ga, &self.qsr, lambda, &outcome, &self.opts.rde)?;
                let g = subgradient(&self.qsr, &witness)?;
                Ok(OracleEval {
                    cost: eval_j(&outcome),
                    cut: CutVector {
                        g,
                        kind: CutKind::Subgradient,
                        witness: Some(witness),
                    },
                })
            }
            RdeOutcome::Escaped { .. } => Ok(OracleEval {
                cost: f64::INFINITY,
                cut: escape_cut(&self.ga, &self.qsr, lambda, &outcome, &self.opts.rde)?,
            }),
        }
    }
}
