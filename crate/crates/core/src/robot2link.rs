//! Two-link planar robot benchmark.
//!
//! A horizontally mounted two-link arm tracks a smooth joint-space
//! trajectory under a computed-torque feedforward and a finite-horizon LQR
//! feedback. The commanded torque passes through a norm-bounded uncertainty
//! before reaching the joints; the analysis bounds the worst-case energy of
//! the tracking error over the maneuver. This module builds the whole
//! closed-loop analysis problem: dynamics, reference, trim torque, gain
//! design, linearization, channel pruning and cost assembly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lintime::{assemble_qsr, augment, AugmentedLtv, Iqc, QsrData};
use crate::rde::{lqr_design, RdeOptions};
use crate::schedule::{MatrixSchedule, TimeGrid};
use crate::traject::{linearize, simulate_nominal, NonlinearModel, SimOptions, Trajectory};

/// Physical parameters of the arm. Lengths are metres, masses kilograms,
/// inertias kg·m².
#[derive(Debug, Clone, Copy)]
pub struct RobotParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub r1: f64,
    pub r2: f64,
    pub i1: f64,
    pub i2: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            m1: 3.0,
            m2: 2.0,
            l1: 0.3,
            l2: 0.3,
            r1: 0.15,
            r2: 0.15,
            i1: 0.09,
            i2: 0.06,
        }
    }
}

impl RobotParams {
    /// Combined inertia coefficient of the first joint.
    pub fn alpha(&self) -> f64 {
        self.i1 + self.i2 + self.m1 * self.r1 * self.r1
            + self.m2 * (self.l1 * self.l1 + self.r2 * self.r2)
    }

    /// Coupling coefficient between the links.
    pub fn beta(&self) -> f64 {
        self.m2 * self.l1 * self.r2
    }

    /// Inertia coefficient of the second link about its own joint.
    pub fn delta(&self) -> f64 {
        self.i2 + self.m2 * self.r2 * self.r2
    }

    /// Joint-space mass matrix; positive definite for the default
    /// parameters at every elbow angle.
    pub fn mass_matrix(&self, theta2: f64) -> DMatrix<f64> {
        let (a, b, d) = (self.alpha(), self.beta(), self.delta());
        let c2 = theta2.cos();
        DMatrix::from_row_slice(2, 2, &[a + 2.0 * b * c2, d + b * c2, d + b * c2, d])
    }

    /// Coriolis/centripetal force vector `C(theta, theta') theta'`.
    pub fn coriolis_vector(&self, theta2: f64, dtheta: &DVector<f64>) -> DVector<f64> {
        let b = self.beta();
        let s2 = theta2.sin();
        let (w1, w2) = (dtheta[0], dtheta[1]);
        DVector::from_vec(vec![
            -b * s2 * (2.0 * w1 * w2 + w2 * w2),
            b * s2 * w1 * w1,
        ])
    }
}

/// Joint accelerations for given torques: `theta'' = M^{-1}(tau - C theta')`.
pub fn dynamics(
    params: &RobotParams,
    theta2: f64,
    dtheta: &DVector<f64>,
    tau: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = params.mass_matrix(theta2);
    let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
        Error::InvalidArgument(format!("mass matrix is singular at theta2 = {theta2}"))
    })?;
    Ok(chol.solve(&(tau - params.coriolis_vector(theta2, dtheta))))
}

/// Torque that produces the given accelerations:
/// `tau = M theta'' + C theta'`.
pub fn inverse_dynamics(
    params: &RobotParams,
    theta2: f64,
    dtheta: &DVector<f64>,
    ddtheta: &DVector<f64>,
) -> DVector<f64> {
    params.mass_matrix(theta2) * ddtheta + params.coriolis_vector(theta2, dtheta)
}

/// Jacobians of the joint acceleration with respect to the full state and
/// the torque, evaluated at `(x, tau)` with `x = [theta; theta']`. The mass
/// and Coriolis terms depend on the elbow angle only, so the derivative
/// with respect to the first joint angle vanishes.
fn accel_jacobians(
    params: &RobotParams,
    x: &DVector<f64>,
    tau: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = params.beta();
    let theta2 = x[1];
    let dtheta = DVector::from_vec(vec![x[2], x[3]]);
    let (s2, c2) = theta2.sin_cos();
    let (w1, w2) = (dtheta[0], dtheta[1]);

    let m = params.mass_matrix(theta2);
    let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
        Error::InvalidArgument(format!("mass matrix is singular at theta2 = {theta2}"))
    })?;
    let ddtheta = chol.solve(&(tau - params.coriolis_vector(theta2, &dtheta)));

    let dm_dtheta2 =
        DMatrix::from_row_slice(2, 2, &[-2.0 * b * s2, -b * s2, -b * s2, 0.0]);
    let dh_dtheta2 = DVector::from_vec(vec![
        -b * c2 * (2.0 * w1 * w2 + w2 * w2),
        b * c2 * w1 * w1,
    ]);
    let dh_ddtheta = DMatrix::from_row_slice(
        2,
        2,
        &[
            -2.0 * b * s2 * w2,
            -2.0 * b * s2 * (w1 + w2),
            2.0 * b * s2 * w1,
            0.0,
        ],
    );

    let dacc_dtheta2 = chol.solve(&(-(&dm_dtheta2 * &ddtheta) - dh_dtheta2));
    let dacc_ddtheta = chol.solve(&(-dh_ddtheta));
    let m_inv = chol.solve(&DMatrix::identity(2, 2));

    // d(theta'')/d[theta1 theta2 theta1' theta2'].
    let mut dacc_dx = DMatrix::zeros(2, 4);
    dacc_dx.set_column(1, &dacc_dtheta2);
    dacc_dx.view_mut((0, 2), (2, 2)).copy_from(&dacc_ddtheta);
    Ok((dacc_dx, m_inv))
}

/// Smooth joint-space reference: both joints sweep from rest to rest along
/// a quintic profile with zero boundary velocity and acceleration.
#[derive(Debug, Clone)]
pub struct JointReference {
    horizon: f64,
    target: [f64; 2],
}

impl JointReference {
    /// Default maneuver: both joints travel a quarter turn over `horizon`.
    pub fn new(horizon: f64) -> Result<Self> {
        Self::with_target(horizon, [std::f64::consts::FRAC_PI_2; 2])
    }

    pub fn with_target(horizon: f64, target: [f64; 2]) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference horizon must be positive and finite, got {horizon}"
            )));
        }
        Ok(Self { horizon, target })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Normalized progress and its first two derivatives: the quintic
    /// `10u^3 - 15u^4 + 6u^5` rises from 0 to 1 with zero boundary slope
    /// and curvature.
    fn profile(&self, t: f64) -> (f64, f64, f64) {
        let u = (t / self.horizon).clamp(0.0, 1.0);
        let s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
        let ds = 30.0 * u * u * (1.0 - u) * (1.0 - u) / self.horizon;
        let dds = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (self.horizon * self.horizon);
        (s, ds, dds)
    }

    pub fn theta(&self, t: f64) -> DVector<f64> {
        let (s, _, _) = self.profile(t);
        DVector::from_vec(vec![self.target[0] * s, self.target[1] * s])
    }

    pub fn theta_dot(&self, t: f64) -> DVector<f64> {
        let (_, ds, _) = self.profile(t);
        DVector::from_vec(vec![self.target[0] * ds, self.target[1] * ds])
    }

    pub fn theta_ddot(&self, t: f64) -> DVector<f64> {
        let (_, _, dds) = self.profile(t);
        DVector::from_vec(vec![self.target[0] * dds, self.target[1] * dds])
    }

    /// Full reference state `[theta; theta']`.
    pub fn state(&self, t: f64) -> DVector<f64> {
        let th = self.theta(t);
        let dth = self.theta_dot(t);
        DVector::from_vec(vec![th[0], th[1], dth[0], dth[1]])
    }

    /// Peak joint speeds, attained at mid-maneuver: `(15/8) |target| / T`.
    pub fn peak_joint_speed(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            1.875 * self.target[0].abs() / self.horizon,
            1.875 * self.target[1].abs() / self.horizon,
        ])
    }

    /// Trim torque that makes the arm follow the reference exactly.
    pub fn trim_torque(&self, params: &RobotParams, t: f64) -> DVector<f64> {
        let th = self.theta(t);
        inverse_dynamics(params, th[1], &self.theta_dot(t), &self.theta_ddot(t))
    }
}

/// Which channels of the torque command the uncertainty may corrupt, and
/// how strongly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncertaintyStructure {
    /// Full 2-by-2 block of gain at most `beta`.
    FullBlock { beta: f64 },
    /// Uncertainty on the first torque channel only.
    Channel1 { beta1: f64 },
    /// Uncertainty on the second torque channel only.
    Channel2 { beta2: f64 },
    /// Independent uncertainty on both channels, no cross-coupling.
    Diagonal { beta1: f64, beta2: f64 },
}

impl UncertaintyStructure {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::FullBlock { beta } => beta > 0.0,
            Self::Channel1 { beta1 } => beta1 > 0.0,
            Self::Channel2 { beta2 } => beta2 > 0.0,
            Self::Diagonal { beta1, beta2 } => beta1 > 0.0 && beta2 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "uncertainty bounds must be positive: {self:?}"
            )))
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::FullBlock { .. } => "full",
            Self::Channel1 { .. } => "ch1",
            Self::Channel2 { .. } => "ch2",
            Self::Diagonal { .. } => "diagonal",
        }
    }
}

/// Weights of the tracking-gain design.
#[derive(Debug, Clone)]
pub struct LqrWeights {
    pub qw: DMatrix<f64>,
    pub rw: DMatrix<f64>,
    pub pt: DMatrix<f64>,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            qw: DMatrix::identity(4, 4),
            rw: DMatrix::identity(2, 2),
            pt: DMatrix::identity(4, 4),
        }
    }
}

/// Knobs of the benchmark build; the defaults reproduce the standard
/// five-second maneuver on a 501-point analysis grid.
#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub horizon: f64,
    pub grid_points: usize,
    pub weights: LqrWeights,
    pub sim: SimOptions,
    pub rde: RdeOptions,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            horizon: 5.0,
            grid_points: 501,
            weights: LqrWeights::default(),
            sim: SimOptions::default(),
            rde: RdeOptions::default(),
        }
    }
}

/// Everything the analysis needs, plus the intermediate artifacts worth
/// inspecting: the gain, the nominal trajectory and the trim torque.
pub struct RobotAnalysis {
    pub ga: AugmentedLtv,
    pub qsr: QsrData,
    pub iqcs: Vec<Iqc>,
    pub gain: MatrixSchedule,
    pub nominal: Trajectory,
    pub feedforward: MatrixSchedule,
}

/// The closed tracking loop as a disturbed nonlinear model: the commanded
/// torque (feedforward plus feedback) is the channel signal the uncertainty
/// sees, its output is added to the torque, and the deviation output is the
/// tracking error.
struct ClosedLoopRobot {
    params: RobotParams,
    reference: JointReference,
    gain: MatrixSchedule,
}

impl ClosedLoopRobot {
    /// Commanded torque at `(t, x)`: trim plus LQR feedback on the error.
    fn command(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let e = self.reference.state(t) - x;
        Ok(self.reference.trim_torque(&self.params, t) + self.gain.eval(t)? * e)
    }
}

impl NonlinearModel for ClosedLoopRobot {
    fn n_x(&self) -> usize {
        4
    }
    fn n_w(&self) -> usize {
        2
    }
    fn n_v(&self) -> usize {
        2
    }
    fn n_e(&self) -> usize {
        4
    }

    fn f(&self, t: f64, x: &DVector<f64>, w: &DVector<f64>, dx: &mut DVector<f64>) -> Result<()> {
        let tau = self.command(t, x)? + w;
        let dtheta = DVector::from_vec(vec![x[2], x[3]]);
        let acc = dynamics(&self.params, x[1], &dtheta, &tau)?;
        dx[0] = x[2];
        dx[1] = x[3];
        dx[2] = acc[0];
        dx[3] = acc[1];
        Ok(())
    }

    fn output_v(&self, t: f64, x: &DVector<f64>, _w: &DVector<f64>) -> Result<DVector<f64>> {
        self.command(t, x)
    }

    fn output_e(&self, t: f64, x: &DVector<f64>, _w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.reference.state(t) - x)
    }

    fn jac_f_x(&self, t: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let tau = self.command(t, x).ok()?;
        let (dacc_dx, m_inv) = accel_jacobians(&self.params, x, &tau).ok()?;
        let k = self.gain.eval(t).ok()?;
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        // Acceleration depends on the state directly and through the
        // feedback torque.
        a.view_mut((2, 0), (2, 4))
            .copy_from(&(dacc_dx - &m_inv * k));
        Some(a)
    }

    fn jac_f_w(&self, t: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let tau = self.command(t, x).ok()?;
        let (_, m_inv) = accel_jacobians(&self.params, x, &tau).ok()?;
        let mut b = DMatrix::zeros(4, 2);
        b.view_mut((2, 0), (2, 2)).copy_from(&m_inv);
        Some(b)
    }

    fn jac_v_x(&self, t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(-self.gain.eval(t).ok()?)
    }

    fn jac_v_w(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(2, 2))
    }

    fn jac_e_x(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(-DMatrix::identity(4, 4))
    }

    fn jac_e_w(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(4, 2))
    }
}

/// Open-loop linearization along the reference, for the gain design.
fn reference_linearization(
    params: &RobotParams,
    reference: &JointReference,
    grid: &TimeGrid,
) -> Result<(MatrixSchedule, MatrixSchedule)> {
    let mut a = Vec::with_capacity(grid.len());
    let mut b = Vec::with_capacity(grid.len());
    for &t in grid.points() {
        let x = reference.state(t);
        let tau = reference.trim_torque(params, t);
        let (dacc_dx, m_inv) = accel_jacobians(params, &x, &tau)?;
        let mut ak = DMatrix::zeros(4, 4);
        ak[(0, 2)] = 1.0;
        ak[(1, 3)] = 1.0;
        ak.view_mut((2, 0), (2, 4)).copy_from(&dacc_dx);
        let mut bk = DMatrix::zeros(4, 2);
        bk.view_mut((2, 0), (2, 2)).copy_from(&m_inv);
        a.push(ak);
        b.push(bk);
    }
    Ok((
        MatrixSchedule::from_samples(grid.clone(), a)?,
        MatrixSchedule::from_samples(grid.clone(), b)?,
    ))
}

/// Restrict a column schedule to a subset of its rows.
fn select_rows(sched: &MatrixSchedule, rows: &[usize]) -> Result<MatrixSchedule> {
    let samples: Vec<DMatrix<f64>> = sched
        .samples()
        .iter()
        .map(|m| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]))
        .collect();
    MatrixSchedule::from_samples(sched.grid().clone(), samples)
}

/// Build the full analysis problem for one uncertainty structure: design
/// the tracking gain, simulate the nominal loop, linearize about it, prune
/// unused uncertainty channels, augment with the nominal channel signal and
/// assemble the cost blocks.
pub fn build_analysis_problem(
    params: &RobotParams,
    structure: &UncertaintyStructure,
    opts: &BenchmarkOptions,
) -> Result<RobotAnalysis> {
    structure.validate()?;
    if opts.grid_points < 2 {
        return Err(Error::InvalidGrid(format!(
            "analysis grid needs at least 2 points, got {}",
            opts.grid_points
        )));
    }
    let grid = TimeGrid::uniform(opts.horizon, opts.grid_points)?;
    let reference = JointReference::new(opts.horizon)?;

    let (a_ol, b_ol) = reference_linearization(params, &reference, &grid)?;
    let (gain, _) = lqr_design(
        &a_ol,
        &b_ol,
        &opts.weights.qw,
        &opts.weights.rw,
        &opts.weights.pt,
        &opts.rde,
    )?;

    let model = ClosedLoopRobot {
        params: *params,
        reference: reference.clone(),
        gain: gain.clone(),
    };
    let nominal = simulate_nominal(&model, reference.state(0.0), &grid, &opts.sim)?;
    let (sys, vbar) = linearize(&model, &nominal)?;

    let (sys, vbar, iqcs) = match *structure {
        UncertaintyStructure::FullBlock { beta } => (
            sys,
            vbar,
            vec![Iqc::norm_bound("full-block torque gain", beta, 2)?],
        ),
        UncertaintyStructure::Channel1 { beta1 } => (
            sys.restrict_channels(&[0], &[0])?,
            select_rows(&vbar, &[0])?,
            vec![Iqc::norm_bound("joint-1 torque gain", beta1, 1)?],
        ),
        UncertaintyStructure::Channel2 { beta2 } => (
            sys.restrict_channels(&[1], &[1])?,
            select_rows(&vbar, &[1])?,
            vec![Iqc::norm_bound("joint-2 torque gain", beta2, 1)?],
        ),
        UncertaintyStructure::Diagonal { beta1, beta2 } => (
            sys,
            vbar,
            vec![
                Iqc::norm_bound_on_channel("joint-1 torque gain", beta1, 0, 2)?,
                Iqc::norm_bound_on_channel("joint-2 torque gain", beta2, 1, 2)?,
            ],
        ),
    };

    let ga = augment(&sys, &vbar)?;
    let qsr = assemble_qsr(&ga, &iqcs)?;
    let feedforward = MatrixSchedule::from_fn(grid, |t| {
        let tau = reference.trim_torque(params, t);
        DMatrix::from_column_slice(2, 1, tau.as_slice())
    })?;
    Ok(RobotAnalysis {
        ga,
        qsr,
        iqcs,
        gain,
        nominal,
        feedforward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{solve_ivp, OdeOptions};
    use crate::rde::{solve_rde_backward, RdeOutcome};
    use approx::assert_relative_eq;

    #[test]
    fn default_parameters_match_the_published_coefficients() {
        let p = RobotParams::default();
        // Exact values from the defining formulas.
        assert_relative_eq!(p.alpha(), 0.4425, epsilon = 1e-15);
        assert_relative_eq!(p.beta(), 0.09, epsilon = 1e-15);
        assert_relative_eq!(p.delta(), 0.105, epsilon = 1e-15);
        // Three-digit display values.
        assert_relative_eq!(p.alpha(), 0.443, epsilon = 1e-3);
    }

    #[test]
    fn mass_matrix_at_right_angle_elbow() {
        let p = RobotParams::default();
        let m = p.mass_matrix(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(m[(0, 0)], p.alpha(), epsilon = 1e-12);
        assert_relative_eq!(m[(0, 1)], p.delta(), epsilon = 1e-12);
        assert_relative_eq!(m[(1, 0)], p.delta(), epsilon = 1e-12);
        assert_relative_eq!(m[(1, 1)], p.delta(), epsilon = 1e-12);
        assert_relative_eq!(m[(0, 0)], 0.443, epsilon = 1e-3);
        assert_relative_eq!(m[(0, 1)], 0.105, epsilon = 1e-12);
    }

    #[test]
    fn rest_with_no_torque_stays_at_rest() {
        let p = RobotParams::default();
        let acc = dynamics(&p, 0.7, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(acc[0], 0.0);
        assert_eq!(acc[1], 0.0);
    }

    #[test]
    fn unforced_motion_conserves_kinetic_energy() {
        let p = RobotParams::default();
        let energy = |x: &DVector<f64>| {
            let dth = DVector::from_vec(vec![x[2], x[3]]);
            0.5 * (dth.transpose() * p.mass_matrix(x[1]) * &dth)[(0, 0)]
        };
        let x0 = DVector::from_vec(vec![0.3, -0.8, 1.1, -0.6]);
        let e0 = energy(&x0);
        let mut rhs = |_t: f64, x: &DVector<f64>, dx: &mut DVector<f64>| {
            let dth = DVector::from_vec(vec![x[2], x[3]]);
            let acc = dynamics(&p, x[1], &dth, &DVector::zeros(2))?;
            dx[0] = x[2];
            dx[1] = x[3];
            dx[2] = acc[0];
            dx[3] = acc[1];
            Ok(())
        };
        let opts = OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        let sol = solve_ivp(&mut rhs, (0.0, 5.0), x0, &[], &opts, |_, _| true).unwrap();
        for x in &sol.states {
            assert!(
                (energy(x) - e0).abs() <= 1e-6 * e0,
                "energy drifted: {} vs {e0}",
                energy(x)
            );
        }
    }

    #[test]
    fn inverse_dynamics_round_trip() {
        let p = RobotParams::default();
        let cases = [
            (0.0, [0.0, 0.0], [1.0, -0.5]),
            (1.1, [0.7, -0.4], [0.3, 0.9]),
            (-2.3, [-1.0, 0.8], [-0.6, 0.2]),
        ];
        for (theta2, dth, acc) in cases {
            let dtheta = DVector::from_row_slice(&dth);
            let want = DVector::from_row_slice(&acc);
            let tau = inverse_dynamics(&p, theta2, &dtheta, &want);
            let got = dynamics(&p, theta2, &dtheta, &tau).unwrap();
            assert_relative_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn reference_boundary_and_midpoint_values() {
        let reference = JointReference::new(5.0).unwrap();
        let quarter = std::f64::consts::FRAC_PI_2;
        assert_eq!(reference.theta(0.0)[0], 0.0);
        assert_eq!(reference.theta_dot(0.0).norm(), 0.0);
        assert_eq!(reference.theta_ddot(0.0).norm(), 0.0);
        assert_relative_eq!(reference.theta(5.0)[0], quarter, epsilon = 1e-15);
        assert_relative_eq!(reference.theta(5.0)[1], quarter, epsilon = 1e-15);
        assert_eq!(reference.theta_dot(5.0).norm(), 0.0);
        assert_eq!(reference.theta_ddot(5.0).norm(), 0.0);
        assert_relative_eq!(reference.theta(2.5)[0], quarter / 2.0, epsilon = 1e-15);
        assert_relative_eq!(reference.theta(2.5)[1], quarter / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn peak_speed_matches_the_quintic_maximum() {
        let reference = JointReference::new(5.0).unwrap();
        let expect = 1.875 * std::f64::consts::FRAC_PI_2 / 5.0;
        assert_relative_eq!(reference.peak_joint_speed()[0], expect, epsilon = 1e-15);
        // Scan confirms the closed form and its location at mid-maneuver.
        let mut best = (0.0, 0.0);
        for k in 0..=5000 {
            let t = 5.0 * k as f64 / 5000.0;
            let speed = reference.theta_dot(t)[0];
            if speed > best.1 {
                best = (t, speed);
            }
        }
        assert_relative_eq!(best.1, expect, max_relative = 1e-6);
        assert_relative_eq!(best.0, 2.5, epsilon = 1e-2);
    }

    #[test]
    fn trim_torque_is_smooth_and_bounded() {
        let p = RobotParams::default();
        let reference = JointReference::new(5.0).unwrap();
        let mut max_torque: f64 = 0.0;
        for k in 0..=500 {
            let t = 5.0 * k as f64 / 500.0;
            let tau = reference.trim_torque(&p, t);
            assert!(tau.iter().all(|v| v.is_finite()));
            max_torque = max_torque.max(tau.norm());
        }
        assert!(max_torque > 0.0 && max_torque < 10.0, "got {max_torque}");
        // The trim reproduces the reference acceleration everywhere.
        for t in [0.8, 2.5, 4.1] {
            let tau = reference.trim_torque(&p, t);
            let acc = dynamics(&p, reference.theta(t)[1], &reference.theta_dot(t), &tau).unwrap();
            assert_relative_eq!(acc, reference.theta_ddot(t), epsilon = 1e-10);
        }
    }

    #[test]
    fn analytic_jacobians_agree_with_finite_differences() {
        let p = RobotParams::default();
        let reference = JointReference::new(5.0).unwrap();
        let grid = TimeGrid::uniform(5.0, 26).unwrap();
        let (a_ol, b_ol) = reference_linearization(&p, &reference, &grid).unwrap();
        let (gain, _) = lqr_design(
            &a_ol,
            &b_ol,
            &DMatrix::identity(4, 4),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(4, 4),
            &RdeOptions::default(),
        )
        .unwrap();

        let with_jac = ClosedLoopRobot {
            params: p,
            reference: reference.clone(),
            gain: gain.clone(),
        };
        /// Same model with the analytic Jacobians suppressed, forcing the
        /// finite-difference path.
        struct NoJac(ClosedLoopRobot);
        impl NonlinearModel for NoJac {
            fn n_x(&self) -> usize {
                self.0.n_x()
            }
            fn n_w(&self) -> usize {
                self.0.n_w()
            }
            fn n_v(&self) -> usize {
                self.0.n_v()
            }
            fn n_e(&self) -> usize {
                self.0.n_e()
            }
            fn f(
                &self,
                t: f64,
                x: &DVector<f64>,
                w: &DVector<f64>,
                dx: &mut DVector<f64>,
            ) -> crate::Result<()> {
                self.0.f(t, x, w, dx)
            }
            fn output_v(
                &self,
                t: f64,
                x: &DVector<f64>,
                w: &DVector<f64>,
            ) -> crate::Result<DVector<f64>> {
                self.0.output_v(t, x, w)
            }
            fn output_e(
                &self,
                t: f64,
                x: &DVector<f64>,
                w: &DVector<f64>,
            ) -> crate::Result<DVector<f64>> {
                self.0.output_e(t, x, w)
            }
        }

        let sim = SimOptions::default();
        let traj = simulate_nominal(&with_jac, reference.state(0.0), &grid, &sim).unwrap();
        let (sys_a, _) = linearize(&with_jac, &traj).unwrap();
        let (sys_f, _) = linearize(&NoJac(with_jac), &traj).unwrap();
        for k in 0..grid.len() {
            let da = (sys_a.a.sample(k) - sys_f.a.sample(k)).norm();
            let db = (sys_a.b.sample(k) - sys_f.b.sample(k)).norm();
            let dc = (sys_a.cv.sample(k) - sys_f.cv.sample(k)).norm();
            assert!(da < 1e-5, "A mismatch {da} at sample {k}");
            assert!(db < 1e-7, "B mismatch {db} at sample {k}");
            assert!(dc < 1e-6, "Cv mismatch {dc} at sample {k}");
        }
    }

    #[test]
    fn nominal_loop_tracks_the_reference_exactly() {
        let opts = BenchmarkOptions {
            grid_points: 101,
            ..Default::default()
        };
        let analysis = build_analysis_problem(
            &RobotParams::default(),
            &UncertaintyStructure::FullBlock { beta: 0.1 },
            &opts,
        )
        .unwrap();
        let reference = JointReference::new(5.0).unwrap();
        for (k, &t) in analysis.nominal.grid().points().iter().enumerate() {
            let err = (analysis.nominal.state(k) - reference.state(t)).norm();
            assert!(err < 1e-7, "tracking error {err} at t = {t}");
        }
        // The nominal channel signal is the trim torque itself.
        for (k, &t) in analysis.ga.grid().points().iter().enumerate() {
            let vbar = analysis.ga.cva.sample(k).column(4).clone_owned();
            let tau = reference.trim_torque(&RobotParams::default(), t);
            assert!((vbar - tau).norm() < 1e-6, "channel offset at t = {t}");
        }
    }

    #[test]
    fn structures_shape_the_problem_correctly() {
        let opts = BenchmarkOptions {
            grid_points: 51,
            ..Default::default()
        };
        let p = RobotParams::default();
        let full =
            build_analysis_problem(&p, &UncertaintyStructure::FullBlock { beta: 0.1 }, &opts)
                .unwrap();
        assert_eq!(full.ga.dims().n_w, 2);
        assert_eq!(full.qsr.num_multipliers(), 1);
        assert_eq!(full.ga.n_aug(), 5);

        let ch1 =
            build_analysis_problem(&p, &UncertaintyStructure::Channel1 { beta1: 0.1 }, &opts)
                .unwrap();
        assert_eq!(ch1.ga.dims().n_w, 1);
        assert_eq!(ch1.qsr.num_multipliers(), 1);

        let ch2 =
            build_analysis_problem(&p, &UncertaintyStructure::Channel2 { beta2: 0.1 }, &opts)
                .unwrap();
        assert_eq!(ch2.ga.dims().n_w, 1);

        let diag = build_analysis_problem(
            &p,
            &UncertaintyStructure::Diagonal {
                beta1: 0.05,
                beta2: 0.8,
            },
            &opts,
        )
        .unwrap();
        assert_eq!(diag.ga.dims().n_w, 2);
        assert_eq!(diag.qsr.num_multipliers(), 2);

        assert!(UncertaintyStructure::FullBlock { beta: 0.0 }.validate().is_err());
    }

    #[test]
    fn moderate_uncertainty_admits_a_certified_bound() {
        let opts = BenchmarkOptions {
            grid_points: 201,
            ..Default::default()
        };
        let analysis = build_analysis_problem(
            &RobotParams::default(),
            &UncertaintyStructure::FullBlock { beta: 0.05 },
            &opts,
        )
        .unwrap();
        let n = analysis.ga.n_aug();
        let mut found = None;
        for lambda in [1.0, 0.5, 2.0, 5.0] {
            let out = solve_rde_backward(
                &analysis.ga,
                &analysis.qsr,
                &DVector::from_element(1, lambda),
                &DMatrix::zeros(n, n),
                None,
                &RdeOptions::default(),
            )
            .unwrap();
            if let RdeOutcome::Solved { y, .. } = out {
                found = Some((lambda, y.sample(0)[(n - 1, n - 1)]));
                break;
            }
        }
        let (lambda, j) = found.expect("no feasible weight among the probes");
        assert!(j.is_finite() && j > 0.0, "J = {j} at lambda = {lambda}");
    }
}
