//! Linear time-varying analysis data: deviation systems, their augmented
//! form, multiplier constraints and the quadratic cost blocks they induce.
//!
//! A deviation system describes the linearized dynamics of the tracking
//! error around a nominal trajectory, with the uncertainty channel broken
//! out: `w` enters through `B`/`Dvw`/`Dew`, the uncertainty sees
//! `v = Cv x + Dvw w` and the performance output is `e = Ce x + Dew w`.
//! Augmentation absorbs the nominal channel signal `vbar` into one extra
//! constant state, so the uncertainty input `vbar + v` of the original loop
//! becomes a linear readout of the augmented state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::schedule::{MatrixSchedule, TimeGrid};

/// Slack used when checking `R(t) < 0`: eigenvalues above `-EPS_R` count as
/// a violation, so that the Riccati sweep never divides by a numerically
/// singular `R`.
pub const EPS_R: f64 = 1e-9;

/// Tolerance below which assembled Gram blocks may dip negative.
pub const GRAM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemDims {
    pub n_x: usize,
    pub n_w: usize,
    pub n_v: usize,
    pub n_e: usize,
}

/// Linearized deviation system along a trajectory.
#[derive(Debug, Clone)]
pub struct LtvSystem {
    dims: SystemDims,
    pub a: MatrixSchedule,
    pub b: MatrixSchedule,
    pub cv: MatrixSchedule,
    pub dvw: MatrixSchedule,
    pub ce: MatrixSchedule,
    pub dew: MatrixSchedule,
}

impl LtvSystem {
    pub fn new(
        a: MatrixSchedule,
        b: MatrixSchedule,
        cv: MatrixSchedule,
        dvw: MatrixSchedule,
        ce: MatrixSchedule,
        dew: MatrixSchedule,
    ) -> Result<Self> {
        let n_x = a.rows();
        let n_w = b.cols();
        let n_v = cv.rows();
        let n_e = ce.rows();
        let shapes = [
            ("A", &a, n_x, n_x),
            ("B", &b, n_x, n_w),
            ("Cv", &cv, n_v, n_x),
            ("Dvw", &dvw, n_v, n_w),
            ("Ce", &ce, n_e, n_x),
            ("Dew", &dew, n_e, n_w),
        ];
        for (name, s, r, c) in shapes {
            if s.rows() != r || s.cols() != c {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    s.rows(),
                    s.cols()
                )));
            }
            if !s.same_grid(&a) {
                return Err(Error::GridMismatch);
            }
        }
        Ok(Self {
            dims: SystemDims { n_x, n_w, n_v, n_e },
            a,
            b,
            cv,
            dvw,
            ce,
            dew,
        })
    }

    pub fn dims(&self) -> SystemDims {
        self.dims
    }

    pub fn grid(&self) -> &TimeGrid {
        self.a.grid()
    }

    /// Restrict the uncertainty channel to a subset of `v` rows and `w`
    /// columns (used when a multiplier only constrains part of the channel,
    /// so the unconstrained part must be dropped rather than left with a
    /// singular cost on it).
    pub fn restrict_channels(&self, v_rows: &[usize], w_cols: &[usize]) -> Result<Self> {
        if v_rows.iter().any(|&i| i >= self.dims.n_v)
            || w_cols.iter().any(|&j| j >= self.dims.n_w)
        {
            return Err(Error::InvalidArgument("channel index out of range".into()));
        }
        let pick = |s: &MatrixSchedule, rows: Option<&[usize]>, cols: Option<&[usize]>| {
            s.map(|m| {
                let rs: Vec<usize> = rows.map_or((0..m.nrows()).collect(), |r| r.to_vec());
                let cs: Vec<usize> = cols.map_or((0..m.ncols()).collect(), |c| c.to_vec());
                DMatrix::from_fn(rs.len(), cs.len(), |i, j| m[(rs[i], cs[j])])
            })
        };
        LtvSystem::new(
            self.a.clone(),
            pick(&self.b, None, Some(w_cols))?,
            pick(&self.cv, Some(v_rows), None)?,
            pick(&self.dvw, Some(v_rows), Some(w_cols))?,
            self.ce.clone(),
            pick(&self.dew, None, Some(w_cols))?,
        )
    }
}

/// Deviation system with the nominal channel signal absorbed into one extra
/// always-one state. The initial condition is fixed: zero deviation, last
/// state equal to one.
#[derive(Debug, Clone)]
pub struct AugmentedLtv {
    dims: SystemDims,
    pub aa: MatrixSchedule,
    pub ba: MatrixSchedule,
    pub cva: MatrixSchedule,
    pub cea: MatrixSchedule,
    pub dvw: MatrixSchedule,
    pub dew: MatrixSchedule,
}

impl AugmentedLtv {
    pub fn from_parts(
        aa: MatrixSchedule,
        ba: MatrixSchedule,
        cva: MatrixSchedule,
        cea: MatrixSchedule,
        dvw: MatrixSchedule,
        dew: MatrixSchedule,
    ) -> Result<Self> {
        let na = aa.rows();
        if na < 2 {
            return Err(Error::DimensionMismatch(
                "augmented state must have at least 2 entries".into(),
            ));
        }
        let dims = SystemDims {
            n_x: na - 1,
            n_w: ba.cols(),
            n_v: cva.rows(),
            n_e: cea.rows(),
        };
        let shapes = [
            ("Aa", &aa, na, na),
            ("Ba", &ba, na, dims.n_w),
            ("Cva", &cva, dims.n_v, na),
            ("Cea", &cea, dims.n_e, na),
            ("Dvw", &dvw, dims.n_v, dims.n_w),
            ("Dew", &dew, dims.n_e, dims.n_w),
        ];
        for (name, s, r, c) in shapes {
            if s.rows() != r || s.cols() != c {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    s.rows(),
                    s.cols()
                )));
            }
            if !s.same_grid(&aa) {
                return Err(Error::GridMismatch);
            }
        }
        Ok(Self {
            dims,
            aa,
            ba,
            cva,
            cea,
            dvw,
            dew,
        })
    }

    /// Dimensions of the underlying deviation system; the augmented state has
    /// `n_x + 1` entries.
    pub fn dims(&self) -> SystemDims {
        self.dims
    }

    pub fn n_aug(&self) -> usize {
        self.dims.n_x + 1
    }

    pub fn grid(&self) -> &TimeGrid {
        self.aa.grid()
    }

    pub fn horizon(&self) -> f64 {
        self.grid().end()
    }

    /// Fixed initial condition `[0, .., 0, 1]`.
    pub fn x0(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_aug());
        x[self.dims.n_x] = 1.0;
        x
    }
}

/// Absorb the nominal channel signal into one extra constant state.
///
/// The added row/column blocks are exact zeros (and the dynamics keep them
/// invariant), so a zero nominal signal decouples the extra state exactly.
pub fn augment(sys: &LtvSystem, vbar: &MatrixSchedule) -> Result<AugmentedLtv> {
    let d = sys.dims();
    if vbar.rows() != d.n_v || vbar.cols() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "vbar is {}x{}, expected {}x1",
            vbar.rows(),
            vbar.cols(),
            d.n_v
        )));
    }
    if !vbar.same_grid(&sys.a) {
        return Err(Error::GridMismatch);
    }
    let n = d.n_x;
    let aa = sys.a.map(|a| {
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (n, n)).copy_from(a);
        m
    })?;
    let ba = sys.b.map(|b| {
        let mut m = DMatrix::zeros(n + 1, d.n_w);
        m.view_mut((0, 0), (n, d.n_w)).copy_from(b);
        m
    })?;
    let grid = sys.grid().clone();
    let cva_samples = sys
        .cv
        .samples()
        .iter()
        .zip(vbar.samples())
        .map(|(cv, vb)| {
            let mut m = DMatrix::zeros(d.n_v, n + 1);
            m.view_mut((0, 0), (d.n_v, n)).copy_from(cv);
            m.view_mut((0, n), (d.n_v, 1)).copy_from(vb);
            m
        })
        .collect();
    let cva = MatrixSchedule::from_samples(grid.clone(), cva_samples)?;
    let cea = sys.ce.map(|ce| {
        let mut m = DMatrix::zeros(d.n_e, n + 1);
        m.view_mut((0, 0), (d.n_e, n)).copy_from(ce);
        m
    })?;
    AugmentedLtv::from_parts(aa, ba, cva, cea, sys.dvw.clone(), sys.dew.clone())
}

/// Constant multiplier matrix certifying an integral quadratic constraint on
/// the channel pair `(v, w)`: the uncertainty satisfies
/// `integral of [v; w]' M [v; w] dt >= 0` over the horizon.
#[derive(Debug, Clone)]
pub struct Iqc {
    pub label: String,
    pub n_v: usize,
    pub n_w: usize,
    pub m: DMatrix<f64>,
}

impl Iqc {
    pub fn new(label: impl Into<String>, n_v: usize, n_w: usize, m: DMatrix<f64>) -> Result<Self> {
        let n = n_v + n_w;
        if m.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "multiplier is {}x{}, expected {n}x{n}",
                m.nrows(),
                m.ncols()
            )));
        }
        let asym = (&m - m.transpose()).norm();
        if asym > 1e-12 * m.norm().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "multiplier is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        let m = (&m + m.transpose()) * 0.5;
        Ok(Self {
            label: label.into(),
            n_v,
            n_w,
            m,
        })
    }

    /// Gain bound `|w| <= beta |v|` on the full channel.
    pub fn norm_bound(label: impl Into<String>, beta: f64, n: usize) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            m[(i, i)] = beta * beta;
            m[(n + i, n + i)] = -1.0;
        }
        Iqc::new(label, n, n, m)
    }

    /// Gain bound restricted to a single coordinate of an `n`-wide channel:
    /// the selector weights only that `v`/`w` pair.
    pub fn norm_bound_on_channel(
        label: impl Into<String>,
        beta: f64,
        channel: usize,
        n: usize,
    ) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        if channel >= n {
            return Err(Error::InvalidArgument(format!(
                "channel {channel} out of range for width {n}"
            )));
        }
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m[(channel, channel)] = beta * beta;
        m[(n + channel, n + channel)] = -1.0;
        Iqc::new(label, n, n, m)
    }

    /// Scalar sector constraint `alpha v <= w <= beta v` (as a quadratic
    /// form in `[v; w]`).
    pub fn sector(label: impl Into<String>, alpha: f64, beta: f64) -> Result<Self> {
        if !(beta > alpha) {
            return Err(Error::InvalidArgument(format!(
                "sector needs beta > alpha (got [{alpha}, {beta}])"
            )));
        }
        let m = DMatrix::from_row_slice(2, 2, &[-2.0 * alpha * beta, alpha + beta, alpha + beta, -2.0]);
        Iqc::new(label, 1, 1, m)
    }
}

/// Quadratic cost blocks of the analysis: the multiplier-independent
/// performance block and one block per multiplier, each sampled on the
/// analysis grid. A nonnegative weight vector mixes them into the `(Q, S, R)`
/// data of the Riccati sweep.
#[derive(Debug, Clone)]
pub struct QsrData {
    n: usize,
    n_w: usize,
    q0: MatrixSchedule,
    s0: MatrixSchedule,
    r0: MatrixSchedule,
    qi: Vec<MatrixSchedule>,
    si: Vec<MatrixSchedule>,
    ri: Vec<MatrixSchedule>,
}

impl QsrData {
    /// Assemble from explicit blocks. Symmetric blocks are symmetrized;
    /// the weight-independent block must be positive semidefinite (it is a
    /// Gram matrix whenever it comes from [`assemble_qsr`]).
    pub fn from_parts(
        q0: MatrixSchedule,
        s0: MatrixSchedule,
        r0: MatrixSchedule,
        parts: Vec<(MatrixSchedule, MatrixSchedule, MatrixSchedule)>,
    ) -> Result<Self> {
        let n = q0.rows();
        let n_w = r0.rows();
        let check = |name: &str, s: &MatrixSchedule, r: usize, c: usize| -> Result<()> {
            if s.rows() != r || s.cols() != c {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    s.rows(),
                    s.cols()
                )));
            }
            if !s.same_grid(&q0) {
                return Err(Error::GridMismatch);
            }
            Ok(())
        };
        check("Q0", &q0, n, n)?;
        check("S0", &s0, n, n_w)?;
        check("R0", &r0, n_w, n_w)?;
        for (i, (q, s, r)) in parts.iter().enumerate() {
            check(&format!("Q{}", i + 1), q, n, n)?;
            check(&format!("S{}", i + 1), s, n, n_w)?;
            check(&format!("R{}", i + 1), r, n_w, n_w)?;
        }
        let sym = |s: &MatrixSchedule| s.map(|m| (m + m.transpose()) * 0.5);
        let q0 = sym(&q0)?;
        let r0 = sym(&r0)?;

        // The weight-independent block is a squared quantity; reject data
        // where it is meaningfully indefinite.
        for (k, &t) in q0.grid().points().iter().enumerate() {
            let mut blk = DMatrix::zeros(n + n_w, n + n_w);
            blk.view_mut((0, 0), (n, n)).copy_from(q0.sample(k));
            blk.view_mut((0, n), (n, n_w)).copy_from(s0.sample(k));
            blk.view_mut((n, 0), (n_w, n)).copy_from(&s0.sample(k).transpose());
            blk.view_mut((n, n), (n_w, n_w)).copy_from(r0.sample(k));
            let min_eig = blk
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let scale = q0.sample(k).norm().max(r0.sample(k).norm()).max(1.0);
            if min_eig < -GRAM_TOL * scale {
                return Err(Error::IndefiniteWeight(format!(
                    "weight-independent block indefinite at t = {t} (min eigenvalue {min_eig:.3e})"
                )));
            }
        }

        let mut qi = Vec::with_capacity(parts.len());
        let mut si = Vec::with_capacity(parts.len());
        let mut ri = Vec::with_capacity(parts.len());
        for (q, s, r) in parts {
            qi.push(sym(&q)?);
            si.push(s);
            ri.push(sym(&r)?);
        }
        Ok(Self {
            n,
            n_w,
            q0,
            s0,
            r0,
            qi,
            si,
            ri,
        })
    }

    /// Number of multipliers.
    pub fn num_multipliers(&self) -> usize {
        self.qi.len()
    }

    /// Augmented state dimension the blocks act on.
    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.n_w
    }

    pub fn grid(&self) -> &TimeGrid {
        self.q0.grid()
    }

    pub fn base(&self) -> (&MatrixSchedule, &MatrixSchedule, &MatrixSchedule) {
        (&self.q0, &self.s0, &self.r0)
    }

    pub fn part(&self, i: usize) -> (&MatrixSchedule, &MatrixSchedule, &MatrixSchedule) {
        (&self.qi[i], &self.si[i], &self.ri[i])
    }

    fn check_lambda(&self, lambda: &DVector<f64>) -> Result<()> {
        if lambda.len() != self.qi.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} multipliers",
                lambda.len(),
                self.qi.len()
            )));
        }
        if lambda.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite weight".into()));
        }
        Ok(())
    }

    /// Mix the blocks with weights `lambda` into full `(Q, S, R)` schedules.
    /// Mixing samples and interpolating commute, so the result represents
    /// the mixed blocks everywhere on the span.
    pub fn combined(
        &self,
        lambda: &DVector<f64>,
    ) -> Result<(MatrixSchedule, MatrixSchedule, MatrixSchedule)> {
        self.check_lambda(lambda)?;
        let mix = |base: &MatrixSchedule, parts: &[MatrixSchedule]| {
            let mut terms: Vec<(f64, &MatrixSchedule)> = vec![(1.0, base)];
            for (i, p) in parts.iter().enumerate() {
                terms.push((lambda[i], p));
            }
            MatrixSchedule::linear_combination(&terms)
        };
        Ok((
            mix(&self.q0, &self.qi)?,
            mix(&self.s0, &self.si)?,
            mix(&self.r0, &self.ri)?,
        ))
    }

    /// Evaluate the mixed blocks at a single time.
    pub fn combine_at(
        &self,
        lambda: &DVector<f64>,
        t: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.check_lambda(lambda)?;
        let mut q = self.q0.eval(t)?;
        let mut s = self.s0.eval(t)?;
        let mut r = self.r0.eval(t)?;
        for i in 0..self.qi.len() {
            q += self.qi[i].eval(t)? * lambda[i];
            s += self.si[i].eval(t)? * lambda[i];
            r += self.ri[i].eval(t)? * lambda[i];
        }
        Ok((q, s, r))
    }
}

/// Outcome of the definiteness scan of `R(t, lambda)` over the grid.
#[derive(Debug, Clone)]
pub enum RCheck {
    NegativeDefinite,
    Violation {
        t: f64,
        max_eig: f64,
        /// Unit eigenvector attaining the maximal eigenvalue.
        direction: DVector<f64>,
    },
}

impl RCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, RCheck::NegativeDefinite)
    }
}

/// Scan `R(t, lambda) = R0(t) + sum_i lambda_i Ri(t)` over the grid and
/// report the first point where it fails to be negative definite (up to
/// [`EPS_R`]).
///
/// Between grid points the entries of `R` are linear in `t`, so its maximal
/// eigenvalue is convex on each segment and attains its maximum at the
/// endpoints: passing the scan certifies definiteness on the whole span.
pub fn check_r_negdef(qsr: &QsrData, lambda: &DVector<f64>) -> Result<RCheck> {
    qsr.check_lambda(lambda)?;
    for (k, &t) in qsr.grid().points().iter().enumerate() {
        let mut r = qsr.r0.sample(k).clone();
        for i in 0..qsr.ri.len() {
            r += qsr.ri[i].sample(k) * lambda[i];
        }
        let eig = r.symmetric_eigen();
        let (mut arg, mut max_eig) = (0, f64::NEG_INFINITY);
        for (j, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > max_eig {
                max_eig = ev;
                arg = j;
            }
        }
        if max_eig > -EPS_R {
            return Ok(RCheck::Violation {
                t,
                max_eig,
                direction: eig.eigenvectors.column(arg).into_owned(),
            });
        }
    }
    Ok(RCheck::NegativeDefinite)
}

/// Build the cost blocks of the analysis from an augmented system and its
/// multipliers: the weight-independent block is the Gram matrix of the
/// performance readout `[Cea Dew]`, and each multiplier contributes the
/// quadratic form of its constraint pulled back through the channel readout
/// `[Cva Dvw; 0 I]`.
pub fn assemble_qsr(ga: &AugmentedLtv, iqcs: &[Iqc]) -> Result<QsrData> {
    let d = ga.dims();
    let n = ga.n_aug();
    for (i, iqc) in iqcs.iter().enumerate() {
        if iqc.n_v != d.n_v || iqc.n_w != d.n_w {
            return Err(Error::DimensionMismatch(format!(
                "multiplier {i} ({}) acts on a {}x{} channel, system has {}x{}",
                iqc.label, iqc.n_v, iqc.n_w, d.n_v, d.n_w
            )));
        }
    }
    let grid = ga.grid().clone();
    let npts = grid.len();

    let mut q0 = Vec::with_capacity(npts);
    let mut s0 = Vec::with_capacity(npts);
    let mut r0 = Vec::with_capacity(npts);
    let mut parts: Vec<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> =
        vec![(Vec::new(), Vec::new(), Vec::new()); iqcs.len()];

    for k in 0..npts {
        // Performance block: [Cea Dew]' [Cea Dew].
        let cea = ga.cea.sample(k);
        let dew = ga.dew.sample(k);
        let mut readout = DMatrix::zeros(d.n_e, n + d.n_w);
        readout.view_mut((0, 0), (d.n_e, n)).copy_from(cea);
        readout.view_mut((0, n), (d.n_e, d.n_w)).copy_from(dew);
        let gram = readout.transpose() * &readout;
        q0.push(gram.view((0, 0), (n, n)).into_owned());
        s0.push(gram.view((0, n), (n, d.n_w)).into_owned());
        r0.push(gram.view((n, n), (d.n_w, d.n_w)).into_owned());

        // Channel readout [Cva Dvw; 0 I] shared by all multipliers.
        let cva = ga.cva.sample(k);
        let dvw = ga.dvw.sample(k);
        let mut chan = DMatrix::zeros(d.n_v + d.n_w, n + d.n_w);
        chan.view_mut((0, 0), (d.n_v, n)).copy_from(cva);
        chan.view_mut((0, n), (d.n_v, d.n_w)).copy_from(dvw);
        chan.view_mut((d.n_v, n), (d.n_w, d.n_w))
            .copy_from(&DMatrix::identity(d.n_w, d.n_w));
        for (i, iqc) in iqcs.iter().enumerate() {
            let form = chan.transpose() * &iqc.m * &chan;
            parts[i].0.push(form.view((0, 0), (n, n)).into_owned());
            parts[i].1.push(form.view((0, n), (n, d.n_w)).into_owned());
            parts[i]
                .2
                .push(form.view((n, n), (d.n_w, d.n_w)).into_owned());
        }
    }

    let part_schedules = parts
        .into_iter()
        .map(|(q, s, r)| {
            Ok((
                MatrixSchedule::from_samples(grid.clone(), q)?,
                MatrixSchedule::from_samples(grid.clone(), s)?,
                MatrixSchedule::from_samples(grid.clone(), r)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    QsrData::from_parts(
        MatrixSchedule::from_samples(grid.clone(), q0)?,
        MatrixSchedule::from_samples(grid.clone(), s0)?,
        MatrixSchedule::from_samples(grid, r0)?,
        part_schedules,
    )
}
