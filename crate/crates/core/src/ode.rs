//! Adaptive explicit Runge-Kutta 5(4) integrator (Dormand-Prince pair) with
//! a fourth-order continuous extension.
//!
//! The solver drives everything time-dependent in this crate: backward
//! Riccati sweeps, forward worst-case sweeps and nominal simulations. Three
//! features beyond a stock RK45 are load-bearing here:
//!
//! * **stop points** — step endpoints can be forced onto a list of interior
//!   times. Schedules are piecewise linear, so their interpolants have
//!   derivative kinks at grid points; landing on them preserves the order of
//!   the method and gives exact samples at analysis-grid times.
//! * **dense output** — each accepted step carries interpolation
//!   coefficients, and the solution is emitted at a caller-chosen maximum
//!   spacing so that downstream linear interpolation and quadrature stay
//!   accurate between accepted steps. Derivatives of the interpolant are
//!   emitted alongside.
//! * **post-accept hook** — the caller may adjust the accepted state (e.g.
//!   re-symmetrize a matrix unknown) and request an early halt (e.g. on
//!   detecting finite escape). Halting is a regular outcome, not an error,
//!   and the partial solution stays available.

use nalgebra::DVector;

use crate::error::{Error, Result};

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
// Fifth-order weights (also the seventh stage row).
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights (error estimator).
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense-output coefficients.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;
const ORDER_EXP: f64 = 1.0 / 5.0;

#[derive(Debug, Clone)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Accepted steps below this size terminate the run with
    /// [`Termination::StepUnderflow`]. Zero disables the check (a machine
    /// precision floor still applies).
    pub h_min: f64,
    pub max_steps: usize,
    /// Emit interpolated samples so that consecutive output times are at
    /// most this far apart. `None` emits accepted step endpoints only.
    pub dense_dt: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h_min: 0.0,
            max_steps: 2_000_000,
            dense_dt: None,
        }
    }
}

/// How an integration run ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    /// Reached the end of the span.
    Completed,
    /// The post-accept hook requested a halt at the given time.
    HookHalt { t: f64 },
    /// The controller could not make progress above the step floor; the
    /// solution is valid up to the given time.
    StepUnderflow { t: f64 },
}

/// Sampled solution of one run. Times are strictly increasing and include
/// every accepted step endpoint; `derivs[k]` is the derivative of the dense
/// interpolant at `times[k]` (the exact right-hand side at step endpoints).
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
    pub termination: Termination,
}

impl OdeSolution {
    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// Number of accepted samples.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

struct DenseStep {
    r1: DVector<f64>,
    r2: DVector<f64>,
    r3: DVector<f64>,
    r4: DVector<f64>,
    r5: DVector<f64>,
    h: f64,
}

impl DenseStep {
    fn build(y0: &DVector<f64>, y1: &DVector<f64>, ks: &[DVector<f64>; 7], h: f64) -> Self {
        let ydiff = y1 - y0;
        let bspl = &ks[0] * h - &ydiff;
        let r4 = &ydiff * 2.0 - (&ks[0] + &ks[6]) * h;
        let r5 = (&ks[0] * D1 + &ks[2] * D3 + &ks[3] * D4 + &ks[4] * D5 + &ks[5] * D6
            + &ks[6] * D7)
            * h;
        Self {
            r1: y0.clone(),
            r2: ydiff,
            r3: bspl,
            r4,
            r5,
            h,
        }
    }

    fn state(&self, theta: f64) -> DVector<f64> {
        let om = 1.0 - theta;
        &self.r1 + (&self.r2 + (&self.r3 + (&self.r4 + &self.r5 * om) * theta) * om) * theta
    }

    fn deriv(&self, theta: f64) -> DVector<f64> {
        let dcon = &self.r2
            + &self.r3 * (1.0 - 2.0 * theta)
            + &self.r4 * (theta * (2.0 - 3.0 * theta))
            + &self.r5 * (2.0 * theta - 6.0 * theta * theta + 4.0 * theta * theta * theta);
        dcon / self.h
    }
}

/// Integrate `y' = f(t, y)` forward over `span = (t0, tf)`, `t0 < tf`.
///
/// `stops` must be sorted; entries strictly inside the span become forced
/// step endpoints. `on_accept` runs after every accepted step with the end
/// time and a mutable reference to the state; returning `false` halts the
/// run at that sample.
pub fn solve_ivp<R, H>(
    mut rhs: R,
    span: (f64, f64),
    y0: DVector<f64>,
    stops: &[f64],
    opts: &OdeOptions,
    mut on_accept: H,
) -> Result<OdeSolution>
where
    R: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> Result<()>,
    H: FnMut(f64, &mut DVector<f64>) -> bool,
{
    let (t0, tf) = span;
    if !(tf > t0) || !t0.is_finite() || !tf.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "integration span must satisfy t0 < tf (got [{t0}, {tf}])"
        )));
    }
    if y0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "initial state",
            t: t0,
        });
    }
    debug_assert!(stops.windows(2).all(|w| w[0] <= w[1]));

    let dim = y0.len();
    let mut ks: [DVector<f64>; 7] = std::array::from_fn(|_| DVector::zeros(dim));
    let mut y_stage = DVector::zeros(dim);

    let mut t = t0;
    let mut y = y0;
    rhs(t, &y, &mut ks[0])?;

    let mut sol = OdeSolution {
        times: vec![t],
        states: vec![y.clone()],
        derivs: vec![ks[0].clone()],
        termination: Termination::Completed,
    };

    let mut stop_idx = stops.partition_point(|&s| s <= t0);
    let span_len = tf - t0;
    let h_floor = |t: f64| (opts.h_min).max(4.0 * f64::EPSILON * t.abs().max(span_len));

    let mut h = {
        let mut f_scratch = DVector::zeros(dim);
        let f0 = ks[0].clone();
        initial_step(&mut rhs, t, &y, &f0, tf, opts, &mut y_stage, &mut f_scratch)?
    };

    let mut steps = 0usize;
    let mut just_rejected = false;

    'outer: loop {
        // Current target: the next interior stop, or the end of the span.
        let target = if stop_idx < stops.len() && stops[stop_idx] < tf - h_floor(tf) {
            stops[stop_idx]
        } else {
            tf
        };
        if t >= target - h_floor(t) {
            if target == tf {
                break;
            }
            stop_idx += 1;
            continue;
        }

        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StepBudget {
                t,
                max_steps: opts.max_steps,
            });
        }

        let remaining = target - t;
        let mut landing = false;
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            landing = true;
        }

        // Stages 2..7; stage 7 evaluates at the candidate endpoint.
        stage(&mut y_stage, &y, h, &[(A21, &ks[0])]);
        rhs(t + C2 * h, &y_stage, &mut ks[1])?;
        stage(&mut y_stage, &y, h, &[(A31, &ks[0]), (A32, &ks[1])]);
        rhs(t + C3 * h, &y_stage, &mut ks[2])?;
        stage(&mut y_stage, &y, h, &[(A41, &ks[0]), (A42, &ks[1]), (A43, &ks[2])]);
        rhs(t + C4 * h, &y_stage, &mut ks[3])?;
        stage(
            &mut y_stage,
            &y,
            h,
            &[(A51, &ks[0]), (A52, &ks[1]), (A53, &ks[2]), (A54, &ks[3])],
        );
        rhs(t + C5 * h, &y_stage, &mut ks[4])?;
        stage(
            &mut y_stage,
            &y,
            h,
            &[
                (A61, &ks[0]),
                (A62, &ks[1]),
                (A63, &ks[2]),
                (A64, &ks[3]),
                (A65, &ks[4]),
            ],
        );
        rhs(t + h, &y_stage, &mut ks[5])?;
        stage(
            &mut y_stage,
            &y,
            h,
            &[
                (B1, &ks[0]),
                (B3, &ks[2]),
                (B4, &ks[3]),
                (B5, &ks[4]),
                (B6, &ks[5]),
            ],
        );
        let y1 = y_stage.clone();
        rhs(t + h, &y1, &mut ks[6])?;

        // Scaled RMS error estimate over the embedded 4th-order solution.
        let mut err_sq = 0.0;
        for i in 0..dim {
            let e = h
                * (E1 * ks[0][i]
                    + E3 * ks[2][i]
                    + E4 * ks[3][i]
                    + E5 * ks[4][i]
                    + E6 * ks[5][i]
                    + E7 * ks[6][i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
            let r = e / sc;
            err_sq += r * r;
        }
        let err = (err_sq / dim as f64).sqrt();

        if !err.is_finite() || err > 1.0 {
            // Rejected: shrink and retry (non-finite estimates shrink hard).
            let scale = if err.is_finite() {
                (SAFETY * err.powf(-ORDER_EXP)).max(MIN_SCALE)
            } else {
                MIN_SCALE
            };
            h *= scale;
            just_rejected = true;
            if h < h_floor(t) {
                sol.termination = Termination::StepUnderflow { t };
                break 'outer;
            }
            continue;
        }

        // Accepted.
        let t1 = if landing { target } else { t + h };
        let dense = DenseStep::build(&y, &y1, &ks, h);
        if let Some(dt) = opts.dense_dt {
            let nseg = (h / dt).ceil().max(1.0) as usize;
            for j in 1..nseg {
                let theta = j as f64 / nseg as f64;
                sol.times.push(t + theta * h);
                sol.states.push(dense.state(theta));
                sol.derivs.push(dense.deriv(theta));
            }
        }

        let mut y_acc = y1;
        let keep_going = on_accept(t1, &mut y_acc);
        sol.times.push(t1);
        sol.states.push(y_acc.clone());
        sol.derivs.push(ks[6].clone());

        if !keep_going {
            sol.termination = Termination::HookHalt { t: t1 };
            break 'outer;
        }
        if opts.h_min > 0.0 && h < opts.h_min {
            sol.termination = Termination::StepUnderflow { t: t1 };
            break 'outer;
        }

        t = t1;
        y = y_acc;
        rhs(t, &y, &mut ks[0])?;
        if landing && target < tf {
            stop_idx += 1;
        }

        let mut scale = SAFETY * err.powf(-ORDER_EXP).min(MAX_SCALE / SAFETY);
        scale = scale.clamp(MIN_SCALE, MAX_SCALE);
        if just_rejected {
            scale = scale.min(1.0);
            just_rejected = false;
        }
        h = (h * scale).min(span_len);
    }

    Ok(sol)
}

fn stage(out: &mut DVector<f64>, y: &DVector<f64>, h: f64, terms: &[(f64, &DVector<f64>)]) {
    out.copy_from(y);
    for (a, k) in terms {
        out.axpy(a * h, k, 1.0);
    }
}

/// Standard starting-step heuristic: compare the scale of the state with the
/// scale of its first two derivatives.
fn initial_step<R>(
    rhs: &mut R,
    t0: f64,
    y0: &DVector<f64>,
    f0: &DVector<f64>,
    tf: f64,
    opts: &OdeOptions,
    y_buf: &mut DVector<f64>,
    f_buf: &mut DVector<f64>,
) -> Result<f64>
where
    R: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> Result<()>,
{
    let span = tf - t0;
    let scaled_rms = |v: &DVector<f64>| {
        let mut s = 0.0;
        for i in 0..v.len() {
            let sc = opts.atol + opts.rtol * y0[i].abs();
            let r = v[i] / sc;
            s += r * r;
        }
        (s / v.len() as f64).sqrt()
    };
    let d0 = scaled_rms(y0);
    let d1 = scaled_rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span);

    y_buf.copy_from(y0);
    y_buf.axpy(h0, f0, 1.0);
    rhs(t0 + h0, y_buf, f_buf)?;
    *f_buf -= f0;
    let d2 = scaled_rms(f_buf) / h0;

    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(ORDER_EXP)
    };
    Ok(h1.min(100.0 * h0).min(span))
}
