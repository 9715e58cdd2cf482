//! Randomized structural properties of the schedule, cost-assembly and
//! search-region primitives. These are pure-algebra checks (no integration
//! in the loop), so they run across many generated cases cheaply.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use trajbound::ellipsoid::Ellipsoid;
use trajbound::lintime::{assemble_qsr, augment, Iqc, LtvSystem, QsrData};
use trajbound::schedule::{MatrixSchedule, TimeGrid};

fn small_grid(n: usize, span: f64) -> TimeGrid {
    TimeGrid::uniform(span, n.max(2)).unwrap()
}

/// Random schedule with entries from the provided seed values.
fn schedule_from(vals: &[f64], grid: &TimeGrid, rows: usize, cols: usize) -> MatrixSchedule {
    let per = rows * cols;
    let samples: Vec<DMatrix<f64>> = (0..grid.len())
        .map(|k| {
            DMatrix::from_fn(rows, cols, |i, j| {
                let idx = (k * per + i * cols + j) % vals.len();
                vals[idx]
            })
        })
        .collect();
    MatrixSchedule::from_samples(grid.clone(), samples).unwrap()
}

fn scalar_qsr(vals: &[f64], beta: f64) -> QsrData {
    let grid = small_grid(6, 2.0);
    let mk = |v: f64| MatrixSchedule::constant(grid.clone(), DMatrix::from_element(1, 1, v)).unwrap();
    let sys = LtvSystem::new(
        mk(-1.0),
        mk(1.0),
        schedule_from(vals, &grid, 1, 1),
        mk(0.0),
        mk(1.0),
        mk(0.0),
    )
    .unwrap();
    let vbar = schedule_from(&vals[1..], &grid, 1, 1);
    let ga = augment(&sys, &vbar).unwrap();
    assemble_qsr(&ga, &[Iqc::norm_bound("gain", beta, 1).unwrap()]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Interpolation is exact at grid nodes and linear between them.
    #[test]
    fn interpolation_is_linear_between_nodes(
        vals in prop::collection::vec(-5.0f64..5.0, 8..24),
        theta in 0.0f64..1.0,
    ) {
        let grid = small_grid(5, 1.0);
        let sched = schedule_from(&vals, &grid, 2, 2);
        let pts = grid.points();
        for k in 0..grid.len() {
            prop_assert_eq!(sched.eval(pts[k]).unwrap(), sched.sample(k).clone());
        }
        let (t0, t1) = (pts[1], pts[2]);
        let t = t0 + theta * (t1 - t0);
        let expect = sched.sample(1) * (1.0 - theta) + sched.sample(2) * theta;
        let got = sched.eval(t).unwrap();
        prop_assert!((got - &expect).norm() <= 1e-12 * (1.0 + expect.norm()));
    }

    /// Mixing weighted cost blocks commutes with time interpolation.
    #[test]
    fn weight_mixing_commutes_with_interpolation(
        vals in prop::collection::vec(-2.0f64..2.0, 8..20),
        lambda in 0.0f64..4.0,
        t in 0.0f64..2.0,
    ) {
        let qsr = scalar_qsr(&vals, 0.7);
        let lam = DVector::from_element(1, lambda);
        let (q, s, r) = qsr.combined(&lam).unwrap();
        let (qt, st, rt) = qsr.combine_at(&lam, t).unwrap();
        prop_assert!((q.eval(t).unwrap() - qt).norm() <= 1e-12);
        prop_assert!((s.eval(t).unwrap() - st).norm() <= 1e-12);
        prop_assert!((r.eval(t).unwrap() - rt).norm() <= 1e-12);
    }

    /// The combined blocks are affine in the weights.
    #[test]
    fn combined_blocks_are_affine_in_the_weights(
        vals in prop::collection::vec(-2.0f64..2.0, 8..20),
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
        t in 0.0f64..2.0,
    ) {
        let qsr = scalar_qsr(&vals, 0.4);
        let at = |l: f64| qsr.combine_at(&DVector::from_element(1, l), t).unwrap();
        let (q0, _, r0) = at(0.0);
        let (q1, _, r1) = at(l1);
        let (q2, _, r2) = at(l2);
        let (qs, _, rs) = at(l1 + l2);
        // f(l1 + l2) - f(0) = (f(l1) - f(0)) + (f(l2) - f(0)).
        prop_assert!(((&qs - &q0) - ((&q1 - &q0) + (&q2 - &q0))).norm() <= 1e-10);
        prop_assert!(((&rs - &r0) - ((&r1 - &r0) + (&r2 - &r0))).norm() <= 1e-10);
    }

    /// The gain-bound multiplier encodes exactly the energy balance
    /// `beta^2 |v|^2 - |w|^2`.
    #[test]
    fn gain_bound_multiplier_quadratic_form(
        beta in 0.05f64..3.0,
        v in prop::collection::vec(-4.0f64..4.0, 3),
        w in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let iqc = Iqc::norm_bound("gain", beta, 3).unwrap();
        let z = DVector::from_vec(v.iter().chain(w.iter()).cloned().collect());
        let quad = (z.transpose() * &iqc.m * &z)[(0, 0)];
        let vn: f64 = v.iter().map(|x| x * x).sum();
        let wn: f64 = w.iter().map(|x| x * x).sum();
        let expect = beta * beta * vn - wn;
        prop_assert!((quad - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
    }

    /// A zero nominal channel signal leaves the extra state's blocks
    /// exactly zero after augmentation.
    #[test]
    fn augmentation_with_zero_signal_is_exactly_padded(
        vals in prop::collection::vec(-3.0f64..3.0, 10..30),
    ) {
        let grid = small_grid(4, 1.5);
        let sys = LtvSystem::new(
            schedule_from(&vals, &grid, 2, 2),
            schedule_from(&vals[1..], &grid, 2, 1),
            schedule_from(&vals[2..], &grid, 1, 2),
            schedule_from(&vals[3..], &grid, 1, 1),
            schedule_from(&vals[4..], &grid, 2, 2),
            schedule_from(&vals[5..], &grid, 2, 1),
        ).unwrap();
        let vbar = MatrixSchedule::zeros(grid.clone(), 1, 1).unwrap();
        let ga = augment(&sys, &vbar).unwrap();
        for k in 0..grid.len() {
            let aa = ga.aa.sample(k);
            let n = aa.nrows();
            for i in 0..n {
                prop_assert_eq!(aa[(i, n - 1)], 0.0);
                prop_assert_eq!(aa[(n - 1, i)], 0.0);
            }
            prop_assert_eq!(ga.ba.sample(k)[(n - 1, 0)], 0.0);
            prop_assert_eq!(ga.cva.sample(k)[(0, n - 1)], 0.0);
            prop_assert_eq!(ga.cea.sample(k)[(0, n - 1)], 0.0);
            prop_assert_eq!(ga.cea.sample(k)[(1, n - 1)], 0.0);
        }
    }

    /// After a cut, every point of the previous search region on the kept
    /// side is still inside the new region.
    #[test]
    fn cut_region_contains_the_kept_half(
        cx in -2.0f64..2.0,
        cy in -2.0f64..2.0,
        g1 in -1.0f64..1.0,
        g2 in -1.0f64..1.0,
        angle in 0.0f64..std::f64::consts::TAU,
        rad in 0.0f64..1.0,
    ) {
        prop_assume!(g1.abs() + g2.abs() > 1e-3);
        let center = DVector::from_vec(vec![cx, cy]);
        let ell = Ellipsoid::ball(center.clone(), 1.0).unwrap();
        let g = DVector::from_vec(vec![g1, g2]);
        let next = ell.cut(&g).unwrap();

        // Sample a point of the original ball on the kept side.
        let p = &center
            + DVector::from_vec(vec![rad * angle.cos(), rad * angle.sin()]);
        if g.dot(&(&p - &center)) <= 0.0 {
            let d = &p - &next.center;
            let chol = nalgebra::Cholesky::new(next.shape.clone()).unwrap();
            let level = d.dot(&chol.solve(&d));
            prop_assert!(level <= 1.0 + 1e-9, "excluded kept point: level {level}");
        }
    }
}
