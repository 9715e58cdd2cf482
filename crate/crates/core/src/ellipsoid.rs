//! Cutting-plane minimizers over the multiplier weights.
//!
//! The outer problem — minimize the certified bound over the nonnegative
//! weight vector — is convex but only subdifferentiable, and infeasible
//! weights yield separating cuts rather than costs. Two strategies cover it:
//! a deep-cut-free ellipsoid method for two or more weights, and golden-free
//! interval bisection when there is a single weight. Both are registered by
//! name and selected at runtime.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::worstcase::{CutKind, CutOracle};

/// Default search radius for the ellipsoid strategy.
pub const DEFAULT_RADIUS_BALL: f64 = 20.0;
/// Default upper end of the bisection interval.
pub const DEFAULT_RADIUS_INTERVAL: f64 = 10.0;
/// Default relative duality-gap target.
pub const DEFAULT_GAP_REL: f64 = 0.01;
/// Iteration budget per weight dimension.
pub const DEFAULT_ITER_PER_DIM: usize = 500;

/// Search ellipsoid `{ x : (x - c)' S^{-1} (x - c) <= 1 }`.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
}

impl Ellipsoid {
    /// Ball of the given radius.
    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid radius must be positive and finite, got {radius}"
            )));
        }
        let m = center.len();
        Ok(Self {
            center,
            shape: DMatrix::from_diagonal_element(m, m, radius * radius),
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Width of the ellipsoid along the cut direction; an upper bound on how
    /// far the minimizer can lie from the center in terms of the linear
    /// model, hence the duality gap of a subgradient cut.
    pub fn gap_along(&self, g: &DVector<f64>) -> f64 {
        (g.dot(&(&self.shape * g))).max(0.0).sqrt()
    }

    /// Minimum-volume ellipsoid containing the half `{ x : g'(x - c) <= 0 }`
    /// of the current one. Requires dimension at least two; in one dimension
    /// the update degenerates and bisection takes over.
    pub fn cut(&self, g: &DVector<f64>) -> Result<Self> {
        let m = self.dim();
        if m < 2 {
            return Err(Error::InvalidArgument(
                "ellipsoid cut requires at least two dimensions".into(),
            ));
        }
        let mf = m as f64;
        let denom_sq = g.dot(&(&self.shape * g));
        if !(denom_sq > 0.0) || !denom_sq.is_finite() {
            return Err(Error::ZeroCut {
                norm: denom_sq.max(0.0).sqrt(),
            });
        }
        let gt = g / denom_sq.sqrt();
        let sg = &self.shape * &gt;
        let center = &self.center - &sg * (1.0 / (mf + 1.0));
        let mut shape =
            (&self.shape - &sg * sg.transpose() * (2.0 / (mf + 1.0))) * (mf * mf / (mf * mf - 1.0));
        // Keep the shape exactly symmetric against rounding drift.
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (shape[(i, j)] + shape[(j, i)]);
                shape[(i, j)] = v;
                shape[(j, i)] = v;
            }
        }
        Ok(Self { center, shape })
    }

    pub fn min_eig(&self) -> f64 {
        self.shape
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exact one-step determinant ratio of the shape update in dimension `m`:
/// `(m^2 / (m^2 - 1))^m * (m - 1) / (m + 1)`.
pub fn shape_det_ratio(m: usize) -> f64 {
    let mf = m as f64;
    (mf * mf / (mf * mf - 1.0)).powi(m as i32) * (mf - 1.0) / (mf + 1.0)
}

/// Exact one-step volume contraction factor (square root of the determinant
/// ratio). It is bounded above by `exp(-1 / (2(m + 1)))` and approaches
/// `exp(-1 / (2m))` from below as `m` grows.
pub fn volume_ratio(m: usize) -> f64 {
    shape_det_ratio(m).sqrt()
}

/// One row of the minimization trace.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    pub lambda: DVector<f64>,
    pub cost: f64,
    pub kind: CutKind,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinimizeStatus {
    /// Best feasible cost is within the gap target of the minimum.
    Converged,
    /// Iteration budget exhausted before the gap target.
    IterationLimit,
    /// The search region collapsed numerically before the gap target.
    ShapeCollapsed,
    /// No feasible weight vector was found.
    NoFeasiblePoint,
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    /// Radius of the initial search region (ball radius, or upper interval
    /// end for bisection). `None` selects the strategy default.
    pub radius: Option<f64>,
    /// Absolute part of the gap target.
    pub gap_abs: f64,
    /// Relative part of the gap target; convergence is declared at a
    /// feasible iterate whose gap is at most `gap_abs + gap_rel * cost`.
    pub gap_rel: f64,
    /// Iteration budget. `None` selects `500 * dim`.
    pub max_iter: Option<usize>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            radius: None,
            gap_abs: 0.0,
            gap_rel: DEFAULT_GAP_REL,
            max_iter: None,
        }
    }
}

#[derive(Debug)]
pub struct MinimizeReport {
    pub status: MinimizeStatus,
    /// Best feasible weight vector found, if any.
    pub best_lambda: Option<DVector<f64>>,
    /// Cost at `best_lambda` (infinite when none was found).
    pub best_cost: f64,
    /// Gap bound certified at termination.
    pub gap: f64,
    /// Full iteration trace.
    pub trace: Vec<IterationRecord>,
    /// Set when the minimizer landed near the boundary of the initial
    /// search region, suggesting the radius was too small.
    pub near_boundary: bool,
}

impl MinimizeReport {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// A minimization strategy for the outer weight problem. Strategies are
/// interchangeable behind this trait and picked by name at runtime.
pub trait Minimizer: Sync {
    fn name(&self) -> &'static str;
    /// Whether the strategy handles problems with `dim` weights.
    fn supports(&self, dim: usize) -> bool;
    fn minimize(&self, oracle: &dyn CutOracle, opts: &MinimizeOptions) -> Result<MinimizeReport>;
}

/// Ellipsoid method with central cuts, for two or more weights.
pub struct EllipsoidMethod;

impl Minimizer for EllipsoidMethod {
    fn name(&self) -> &'static str {
        "ellipsoid"
    }

    fn supports(&self, dim: usize) -> bool {
        dim >= 2
    }

    fn minimize(&self, oracle: &dyn CutOracle, opts: &MinimizeOptions) -> Result<MinimizeReport> {
        let m = oracle.dim();
        if !self.supports(m) {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid strategy needs at least two weights, problem has {m}"
            )));
        }
        let radius = opts.radius.unwrap_or(DEFAULT_RADIUS_BALL);
        let max_iter = opts.max_iter.unwrap_or(DEFAULT_ITER_PER_DIM * m);
        let mut ell = Ellipsoid::ball(DVector::zeros(m), radius)?;

        let mut trace = Vec::new();
        let mut best: Option<(DVector<f64>, f64, f64)> = None;
        let mut status = MinimizeStatus::IterationLimit;

        for iter in 0..max_iter {
            let eval = oracle.evaluate(&ell.center)?;
            let gap = ell.gap_along(&eval.cut.g);
            trace.push(IterationRecord {
                iter,
                lambda: ell.center.clone(),
                cost: eval.cost,
                kind: eval.cut.kind,
                gap,
            });

            if eval.cost.is_finite() {
                if best.as_ref().map_or(true, |(_, c, _)| eval.cost < *c) {
                    best = Some((ell.center.clone(), eval.cost, gap));
                }
                if gap <= opts.gap_abs + opts.gap_rel * eval.cost.abs() {
                    // The linear model certifies the minimum is within `gap`
                    // of this iterate's cost, hence of the best cost too.
                    if let Some(b) = best.as_mut() {
                        b.2 = gap;
                    }
                    status = MinimizeStatus::Converged;
                    break;
                }
            }

            let next = ell.cut(&eval.cut.g)?;
            let min_eig = next.min_eig();
            if !(min_eig > 0.0) || !next.center.iter().all(|v| v.is_finite()) {
                if best.is_none() {
                    return Err(Error::ShapeDegenerate { iter, min_eig });
                }
                status = MinimizeStatus::ShapeCollapsed;
                break;
            }
            ell = next;
        }

        let report = match best {
            Some((lambda, cost, gap)) => {
                let near_boundary = lambda.norm() >= 0.95 * radius;
                MinimizeReport {
                    status,
                    best_lambda: Some(lambda),
                    best_cost: cost,
                    gap,
                    trace,
                    near_boundary,
                }
            }
            None => MinimizeReport {
                status: MinimizeStatus::NoFeasiblePoint,
                best_lambda: None,
                best_cost: f64::INFINITY,
                gap: f64::INFINITY,
                trace,
                near_boundary: false,
            },
        };
        Ok(report)
    }
}

/// Bisection on a single weight: cuts orient the interval, the subgradient
/// sign at feasible midpoints steers toward the minimum.
pub struct IntervalBisection;

impl Minimizer for IntervalBisection {
    fn name(&self) -> &'static str {
        "bisect"
    }

    fn supports(&self, dim: usize) -> bool {
        dim == 1
    }

    fn minimize(&self, oracle: &dyn CutOracle, opts: &MinimizeOptions) -> Result<MinimizeReport> {
        if oracle.dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "bisection handles exactly one weight, problem has {}",
                oracle.dim()
            )));
        }
        let hi0 = opts.radius.unwrap_or(DEFAULT_RADIUS_INTERVAL);
        if !(hi0 > 0.0 && hi0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bisection interval end must be positive and finite, got {hi0}"
            )));
        }
        let max_iter = opts.max_iter.unwrap_or(DEFAULT_ITER_PER_DIM);
        let (mut lo, mut hi) = (0.0_f64, hi0);

        let mut trace = Vec::new();
        let mut best: Option<(f64, f64, f64)> = None;
        let mut status = MinimizeStatus::IterationLimit;

        for iter in 0..max_iter {
            let mid = 0.5 * (lo + hi);
            let lambda = DVector::from_element(1, mid);
            let eval = oracle.evaluate(&lambda)?;
            let g = eval.cut.g[0];
            // Half the interval width bounds the distance to the minimizer,
            // so the linear model is off by at most this much.
            let gap = g.abs() * 0.5 * (hi - lo);
            trace.push(IterationRecord {
                iter,
                lambda,
                cost: eval.cost,
                kind: eval.cut.kind,
                gap,
            });

            if eval.cost.is_finite() {
                if best.map_or(true, |(_, c, _)| eval.cost < c) {
                    best = Some((mid, eval.cost, gap));
                }
                if gap <= opts.gap_abs + opts.gap_rel * eval.cost.abs() {
                    if let Some(b) = best.as_mut() {
                        b.2 = gap;
                    }
                    status = MinimizeStatus::Converged;
                    break;
                }
            }

            // Keep the side the cut allows: feasible points (and the
            // minimizer) satisfy g * (alpha - mid) <= 0.
            if g > 0.0 {
                hi = mid;
            } else if g < 0.0 {
                lo = mid;
            } else {
                // Zero subgradient at a feasible point: exact minimum.
                if eval.cost.is_finite() {
                    if let Some(b) = best.as_mut() {
                        b.2 = 0.0;
                    }
                    status = MinimizeStatus::Converged;
                    break;
                }
                return Err(Error::ZeroCut { norm: 0.0 });
            }
            if hi - lo <= f64::EPSILON * hi0 {
                status = MinimizeStatus::ShapeCollapsed;
                break;
            }
        }

        let report = match best {
            Some((lambda, cost, gap)) => MinimizeReport {
                status,
                best_lambda: Some(DVector::from_element(1, lambda)),
                best_cost: cost,
                gap,
                trace,
                near_boundary: lambda >= 0.95 * hi0,
            },
            None => MinimizeReport {
                status: MinimizeStatus::NoFeasiblePoint,
                best_lambda: None,
                best_cost: f64::INFINITY,
                gap: f64::INFINITY,
                trace,
                near_boundary: false,
            },
        };
        Ok(report)
    }
}

/// All registered minimization strategies.
pub fn registry() -> Vec<Box<dyn Minimizer>> {
    vec![Box::new(EllipsoidMethod), Box::new(IntervalBisection)]
}

/// Look up a strategy by name, or pick one automatically (`"auto"`) that
/// supports the given weight dimension.
pub fn lookup(name: &str, dim: usize) -> Result<Box<dyn Minimizer>> {
    if name == "auto" {
        return registry()
            .into_iter()
            .find(|s| s.supports(dim))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no strategy supports {dim} weight(s)"))
            });
    }
    let strat = registry()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| {
            let names: Vec<_> = registry().iter().map(|s| s.name().to_string()).collect();
            Error::InvalidArgument(format!(
                "unknown minimizer '{name}' (available: {}, auto)",
                names.join(", ")
            ))
        })?;
    if !strat.supports(dim) {
        return Err(Error::InvalidArgument(format!(
            "minimizer '{name}' does not support {dim} weight(s)"
        )));
    }
    Ok(strat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worstcase::{CutVector, OracleEval};
    use approx::assert_relative_eq;

    /// Smooth convex model problem: distance squared to a target point,
    /// optionally guarded by a feasibility threshold on each coordinate.
    struct Paraboloid {
        target: DVector<f64>,
        floor: f64,
    }

    impl CutOracle for Paraboloid {
        fn dim(&self) -> usize {
            self.target.len()
        }

        fn evaluate(&self, lambda: &DVector<f64>) -> crate::Result<OracleEval> {
            for i in 0..lambda.len() {
                if lambda[i] < self.floor {
                    let mut g = DVector::zeros(lambda.len());
                    g[i] = -1.0;
                    return Ok(OracleEval {
                        cost: f64::INFINITY,
                        cut: CutVector {
                            g,
                            kind: CutKind::Nonneg,
                            witness: None,
                        },
                    });
                }
            }
            let diff = lambda - &self.target;
            Ok(OracleEval {
                cost: diff.norm_squared(),
                cut: CutVector {
                    g: diff * 2.0,
                    kind: CutKind::Subgradient,
                    witness: None,
                },
            })
        }
    }

    #[test]
    fn single_cut_matches_closed_form() {
        // Unit ball in two dimensions, cut along the first axis.
        let ell = Ellipsoid::ball(DVector::zeros(2), 1.0).unwrap();
        let g = DVector::from_vec(vec![1.0, 0.0]);
        let next = ell.cut(&g).unwrap();
        assert_relative_eq!(next.center[0], -1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(next.center[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(next.shape[(0, 0)], 4.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(next.shape[(1, 1)], 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(next.shape[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cut_scale_invariance() {
        // The update depends on the cut direction only, not its length.
        let ell = Ellipsoid::ball(DVector::from_vec(vec![1.0, -2.0]), 3.0).unwrap();
        let g = DVector::from_vec(vec![0.3, -0.7]);
        let a = ell.cut(&g).unwrap();
        let b = ell.cut(&(g * 1e6)).unwrap();
        assert_relative_eq!(a.center, b.center, epsilon = 1e-12);
        assert_relative_eq!(a.shape, b.shape, epsilon = 1e-12);
    }

    #[test]
    fn determinant_ratio_matches_closed_form() {
        for m in 2..=6 {
            let mut center = DVector::zeros(m);
            center[0] = 0.7;
            let ell = Ellipsoid::ball(center, 2.5).unwrap();
            // A skew direction exercises the full update.
            let g = DVector::from_fn(m, |i, _| 1.0 + i as f64);
            let next = ell.cut(&g).unwrap();
            let ratio = next.shape.determinant() / ell.shape.determinant();
            assert_relative_eq!(ratio, shape_det_ratio(m), max_relative = 1e-10);
        }
    }

    #[test]
    fn volume_contraction_is_bounded_by_the_dimension_rate() {
        for m in 2..=8 {
            let ratio = volume_ratio(m);
            assert!(ratio < 1.0);
            assert!(
                ratio <= (-1.0 / (2.0 * m as f64)).exp() + 1e-10,
                "m = {m}: {ratio}"
            );
        }
    }

    #[test]
    fn ellipsoid_minimizes_a_smooth_bowl() {
        let oracle = Paraboloid {
            target: DVector::from_vec(vec![1.0, 2.0]),
            floor: f64::NEG_INFINITY,
        };
        let report = EllipsoidMethod
            .minimize(
                &oracle,
                &MinimizeOptions {
                    gap_rel: 1e-6,
                    gap_abs: 1e-9,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(report.status, MinimizeStatus::Converged);
        let best = report.best_lambda.unwrap();
        assert!((best - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-3);
        assert!(report.best_cost < 1e-5);
        assert!(!report.near_boundary);
    }

    #[test]
    fn ellipsoid_respects_feasibility_cuts() {
        // Minimum of the bowl sits inside the infeasible region; the
        // constrained minimizer is the projection onto the feasible corner.
        let oracle = Paraboloid {
            target: DVector::from_vec(vec![-3.0, -1.0]),
            floor: 0.5,
        };
        let report = EllipsoidMethod
            .minimize(
                &oracle,
                &MinimizeOptions {
                    gap_rel: 1e-4,
                    ..Default::default()
                },
            )
            .unwrap();
        let best = report.best_lambda.unwrap();
        assert!((best - DVector::from_vec(vec![0.5, 0.5])).norm() < 2e-2);
        let expect = 3.5_f64.powi(2) + 1.5_f64.powi(2);
        assert_relative_eq!(report.best_cost, expect, max_relative = 1e-2);
    }

    #[test]
    fn radius_choice_does_not_change_the_answer() {
        let target = DVector::from_vec(vec![1.5, 0.9]);
        let mut costs = Vec::new();
        for radius in [10.0, 200.0] {
            let oracle = Paraboloid {
                target: target.clone(),
                floor: 0.0,
            };
            let report = EllipsoidMethod
                .minimize(
                    &oracle,
                    &MinimizeOptions {
                        radius: Some(radius),
                        gap_rel: 1e-6,
                        gap_abs: 1e-9,
                        ..Default::default()
                    },
                )
                .unwrap();
            assert_eq!(report.status, MinimizeStatus::Converged);
            costs.push(report.best_cost);
        }
        assert!(costs.iter().all(|c| *c < 1e-5));
    }

    #[test]
    fn bisection_finds_an_interior_minimum() {
        let oracle = Paraboloid {
            target: DVector::from_element(1, 3.0),
            floor: 1.0,
        };
        let report = IntervalBisection
            .minimize(
                &oracle,
                &MinimizeOptions {
                    gap_rel: 1e-8,
                    gap_abs: 1e-12,
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(report.status, MinimizeStatus::Converged);
        assert_relative_eq!(report.best_lambda.unwrap()[0], 3.0, epsilon = 1e-4);
        assert!(report.best_cost < 1e-7);
    }

    #[test]
    fn bisection_converges_to_a_feasibility_boundary() {
        // The unconstrained minimum at 0.2 is infeasible; the constrained
        // minimizer is the feasibility threshold itself.
        let oracle = Paraboloid {
            target: DVector::from_element(1, 0.2),
            floor: 1.0,
        };
        let report = IntervalBisection
            .minimize(
                &oracle,
                &MinimizeOptions {
                    gap_rel: 1e-6,
                    ..Default::default()
                },
            )
            .unwrap();
        let best = report.best_lambda.unwrap()[0];
        assert!(
            (best - 1.0).abs() < 1e-3,
            "expected the boundary, got {best}"
        );
        assert_relative_eq!(report.best_cost, 0.64, max_relative = 1e-2);
    }

    #[test]
    fn registry_resolves_names_and_auto() {
        assert_eq!(lookup("auto", 1).unwrap().name(), "bisect");
        assert_eq!(lookup("auto", 2).unwrap().name(), "ellipsoid");
        assert_eq!(lookup("auto", 4).unwrap().name(), "ellipsoid");
        assert_eq!(lookup("bisect", 1).unwrap().name(), "bisect");
        assert_eq!(lookup("ellipsoid", 3).unwrap().name(), "ellipsoid");
        assert!(lookup("ellipsoid", 1).is_err());
        assert!(lookup("bisect", 2).is_err());
        assert!(lookup("simplex", 2).is_err());
    }

    #[test]
    fn minimizes_the_scalar_analysis_problem_end_to_end() {
        use crate::lintime::{assemble_qsr, augment, Iqc, LtvSystem};
        use crate::schedule::{MatrixSchedule, TimeGrid};
        use crate::worstcase::{ProblemOptions, RobustnessProblem};
        use nalgebra::DMatrix;

        let grid = TimeGrid::uniform(1.0, 101).unwrap();
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let sys = LtvSystem::new(
            MatrixSchedule::constant(grid.clone(), one(-1.0)).unwrap(),
            MatrixSchedule::constant(grid.clone(), one(1.0)).unwrap(),
            MatrixSchedule::constant(grid.clone(), one(1.0)).unwrap(),
            MatrixSchedule::constant(grid.clone(), one(0.0)).unwrap(),
            MatrixSchedule::constant(grid.clone(), one(1.0)).unwrap(),
            MatrixSchedule::constant(grid.clone(), one(0.0)).unwrap(),
        )
        .unwrap();
        let vbar = MatrixSchedule::constant(grid, one(1.0)).unwrap();
        let ga = augment(&sys, &vbar).unwrap();
        let qsr = assemble_qsr(&ga, &[Iqc::norm_bound("gain", 0.5, 1).unwrap()]).unwrap();
        let problem = RobustnessProblem::new(ga, qsr, ProblemOptions::default()).unwrap();

        let strat = lookup("auto", 1).unwrap();
        let report = strat
            .minimize(&problem, &MinimizeOptions::default())
            .unwrap();
        assert_eq!(report.status, MinimizeStatus::Converged);
        let best = report.best_lambda.as_ref().unwrap()[0];
        assert!(best > 0.0);
        assert!(report.best_cost.is_finite() && report.best_cost > 0.0);

        // Cross-check against a brute scan of the one-dimensional bound.
        let mut scan_best = f64::INFINITY;
        for k in 1..200 {
            let lam = DVector::from_element(1, 0.05 * k as f64);
            if let Ok(eval) = problem.evaluate(&lam) {
                scan_best = scan_best.min(eval.cost);
            }
        }
        assert!(
            report.best_cost <= scan_best * (1.0 + DEFAULT_GAP_REL + 1e-9),
            "minimizer {} vs scan {scan_best}",
            report.best_cost
        );
    }
}
