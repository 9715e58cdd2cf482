//! Nominal trajectories of nonlinear models and linearization along them.
//!
//! The analysis pipeline starts from a nonlinear model with a disturbance
//! input and two outputs: the channel signal that the uncertainty acts on
//! and the deviation output whose worst-case size is being bounded. The
//! nominal trajectory is simulated with the disturbance at zero, and the
//! model is linearized about it at every grid point, producing the
//! time-varying system data and the nominal channel signal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lintime::LtvSystem;
use crate::ode::{solve_ivp, OdeOptions, Termination};
use crate::schedule::{MatrixSchedule, TimeGrid};

/// Relative step for one-sided coordinate perturbations in the
/// finite-difference Jacobians.
const FD_STEP: f64 = 1e-6;
/// State norm at which the nominal simulation is declared divergent.
const SIM_NORM_MAX: f64 = 1e12;
/// Slack for matching integrator output times to grid points.
const TIME_MATCH_TOL: f64 = 1e-9;

/// A nonlinear model with state `x`, disturbance `w` and the two outputs of
/// the deviation analysis. The deviation output must vanish along the
/// nominal trajectory (it measures the distance from it).
///
/// The Jacobian methods default to `None`, in which case central finite
/// differences are used; models with cheap analytic derivatives can override
/// them.
pub trait NonlinearModel {
    fn n_x(&self) -> usize;
    fn n_w(&self) -> usize;
    fn n_v(&self) -> usize;
    fn n_e(&self) -> usize;

    /// State derivative `f(t, x, w)`.
    fn f(&self, t: f64, x: &DVector<f64>, w: &DVector<f64>, dx: &mut DVector<f64>) -> Result<()>;

    /// Channel output fed to the uncertainty.
    fn output_v(&self, t: f64, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>>;

    /// Deviation output; zero along the nominal trajectory.
    fn output_e(&self, t: f64, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>>;

    fn jac_f_x(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn jac_f_w(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn jac_v_x(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn jac_v_w(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn jac_e_x(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn jac_e_w(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Nominal state trajectory sampled on an analysis grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    x: MatrixSchedule,
}

impl Trajectory {
    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    /// State at grid index `k`.
    pub fn state(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.x.sample(k).as_slice())
    }

    /// Linearly interpolated state.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(self.x.eval(t)?.as_slice()))
    }

    pub fn states(&self) -> &MatrixSchedule {
        &self.x
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        // The nominal trajectory anchors everything downstream, so it is
        // integrated tighter than the analysis sweeps.
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 2_000_000,
        }
    }
}

/// Simulate the model with zero disturbance from `x0`, sampling the state
/// exactly at the grid points.
pub fn simulate_nominal<M: NonlinearModel>(
    model: &M,
    x0: DVector<f64>,
    grid: &TimeGrid,
    opts: &SimOptions,
) -> Result<Trajectory> {
    let n = model.n_x();
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, model expects {n}",
            x0.len()
        )));
    }
    let w0 = DVector::zeros(model.n_w());
    let mut rhs = |t: f64, x: &DVector<f64>, dx: &mut DVector<f64>| model.f(t, x, &w0, dx);

    let pts = grid.points();
    let stops: Vec<f64> = pts[1..pts.len() - 1].to_vec();
    let ode_opts = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        h_min: 0.0,
        max_steps: opts.max_steps,
        dense_dt: None,
    };
    let sol = solve_ivp(
        &mut rhs,
        (grid.start(), grid.end()),
        x0,
        &stops,
        &ode_opts,
        |_, x| x.iter().all(|v| v.is_finite()) && x.norm() <= SIM_NORM_MAX,
    )?;
    match sol.termination {
        Termination::Completed => {}
        Termination::HookHalt { t } => return Err(Error::SimulationDiverged { t }),
        Termination::StepUnderflow { t } => return Err(Error::StepUnderflow { t }),
    }

    // Pull out the states at the grid points; each one is present exactly,
    // as an endpoint or a forced stop.
    let slack = TIME_MATCH_TOL * grid.span().max(1.0);
    let mut samples = Vec::with_capacity(pts.len());
    let mut cursor = 0;
    for &tk in pts {
        while cursor < sol.times.len() && sol.times[cursor] < tk - slack {
            cursor += 1;
        }
        if cursor >= sol.times.len() || (sol.times[cursor] - tk).abs() > slack {
            return Err(Error::InvalidGrid(format!(
                "integrator output is missing the grid point t = {tk}"
            )));
        }
        samples.push(DMatrix::from_column_slice(
            n,
            1,
            sol.states[cursor].as_slice(),
        ));
    }
    Ok(Trajectory {
        x: MatrixSchedule::from_samples(grid.clone(), samples)?,
    })
}

/// Central-difference Jacobian of `func` at `base`, one column per
/// coordinate, with per-coordinate steps scaled to the coordinate size.
fn fd_jacobian<F>(base: &DVector<f64>, rows: usize, mut func: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let m = base.len();
    let mut jac = DMatrix::zeros(rows, m);
    let mut pert = base.clone();
    for j in 0..m {
        let h = FD_STEP * (1.0 + base[j].abs());
        pert[j] = base[j] + h;
        let fp = func(&pert)?;
        pert[j] = base[j] - h;
        let fm = func(&pert)?;
        pert[j] = base[j];
        if fp.len() != rows || fm.len() != rows {
            return Err(Error::DimensionMismatch(
                "model output changed size during differentiation".into(),
            ));
        }
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Linearize the model about a nominal trajectory at every grid point.
///
/// Returns the time-varying deviation system together with the nominal
/// channel signal. Fails if the deviation output does not vanish along the
/// trajectory, since the deviation dynamics are only meaningful about an
/// exact nominal.
pub fn linearize<M: NonlinearModel>(
    model: &M,
    traj: &Trajectory,
) -> Result<(LtvSystem, MatrixSchedule)> {
    let grid = traj.grid().clone();
    let (n, nw, nv, ne) = (model.n_x(), model.n_w(), model.n_v(), model.n_e());
    let w0 = DVector::zeros(nw);

    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut cv = Vec::new();
    let mut dvw = Vec::new();
    let mut ce = Vec::new();
    let mut dew = Vec::new();
    let mut vbar = Vec::new();

    for (k, &t) in grid.points().iter().enumerate() {
        let xk = traj.state(k);

        let ek = model.output_e(t, &xk, &w0)?;
        let scale = 1.0 + xk.norm();
        if ek.norm() > 1e-6 * scale {
            return Err(Error::InvalidArgument(format!(
                "deviation output is nonzero along the nominal at t = {t} (norm {:.3e})",
                ek.norm()
            )));
        }
        vbar.push(to_col(&model.output_v(t, &xk, &w0)?));

        let ak = match model.jac_f_x(t, &xk) {
            Some(j) => j,
            None => fd_jacobian(&xk, n, |x| {
                let mut dx = DVector::zeros(n);
                model.f(t, x, &w0, &mut dx)?;
                Ok(dx)
            })?,
        };
        let bk = match model.jac_f_w(t, &xk) {
            Some(j) => j,
            None => fd_jacobian(&w0, n, |w| {
                let mut dx = DVector::zeros(n);
                model.f(t, &xk, w, &mut dx)?;
                Ok(dx)
            })?,
        };
        let cvk = match model.jac_v_x(t, &xk) {
            Some(j) => j,
            None => fd_jacobian(&xk, nv, |x| model.output_v(t, x, &w0))?,
        };
        let dvwk = match model.jac_v_w(t, &xk) {
            Some(j) => j,
            None => fd_jacobian(&w0, nv, |w| model.output_v(t, &xk, w))?,
        };
        let cek = match model.jac_e_x(t, &xk) {
            Some(j) => j,
            None => fd_jacobian(&xk, ne, |x| model.output_e(t, x, &w0))?,
        };
        let dewk = match model.jac_e_w(t, &xk) {
            Some(j) => j,
            None => fd_jacobian(&w0, ne, |w| model.output_e(t, &xk, w))?,
        };
        a.push(ak);
        b.push(bk);
        cv.push(cvk);
        dvw.push(dvwk);
        ce.push(cek);
        dew.push(dewk);
    }

    let sys = LtvSystem::new(
        MatrixSchedule::from_samples(grid.clone(), a)?,
        MatrixSchedule::from_samples(grid.clone(), b)?,
        MatrixSchedule::from_samples(grid.clone(), cv)?,
        MatrixSchedule::from_samples(grid.clone(), dvw)?,
        MatrixSchedule::from_samples(grid.clone(), ce)?,
        MatrixSchedule::from_samples(grid.clone(), dew)?,
    )?;
    let vbar = MatrixSchedule::from_samples(grid, vbar)?;
    Ok((sys, vbar))
}

fn to_col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}
