//! Multiple-shooting boundary value problem for orbits on a 2D unstable
//! manifold.
//!
//! Unknowns are packed as
//! `z = (x_2, ..., x_k, tau_1, ..., tau_k, s)` where `x_i` is the start of
//! segment `i`, `tau_i = T_i / t_ref` the normalized integration time and `s`
//! the left-boundary parameter (`ln eps` on a periodic orbit, the angle on an
//! equilibrium circle). The start of the first segment is always rebuilt from
//! `s`. The residual stacks the `k - 1` gluing mismatches and the `k` right
//! boundary conditions, giving `N - 1` equations for `N = (k-1) n + k + 1`
//! unknowns.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::ode::{flow, integrate, integrate_until, integrate_variational, IntegratorConfig, OdeError, Reversed, StopCondition, Trajectory, VectorField};
use crate::stability::{EquilibriumPlane, PeriodicOrbit};

/// Right boundary condition `g(gamma, T) = target` for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryCondition {
    /// `g = T`.
    FixedTime { target: f64 },
    /// `g = w . gamma(T)` on the affine plane `w . x = offset`.
    Poincare { normal: Vec<f64>, offset: f64 },
    /// `g = int_0^T |f(gamma)| dt`.
    Arclength { target: f64 },
}

impl BoundaryCondition {
    pub fn poincare(normal: Vec<f64>, offset: f64) -> Result<Self> {
        Self::Poincare { normal, offset }.normalized()
    }

    /// Validates the condition and rescales a section to a unit normal.
    pub fn normalized(self) -> Result<Self> {
        match self {
            Self::FixedTime { target } if !(target > 0.0 && target.is_finite()) => {
                Err(Error::InvalidInput(format!("fixed-time target must be positive, got {target}")))
            }
            Self::Arclength { target } if !(target > 0.0 && target.is_finite()) => {
                Err(Error::InvalidInput(format!("arclength target must be positive, got {target}")))
            }
            Self::Poincare { normal, offset } => {
                let w = norm(&normal);
                if !(w > 0.0 && w.is_finite()) || !offset.is_finite() {
                    return Err(Error::InvalidInput("section normal must be finite and nonzero".into()));
                }
                Ok(Self::Poincare { normal: normal.iter().map(|v| v / w).collect(), offset: offset / w })
            }
            other => Ok(other),
        }
    }

    pub fn target(&self) -> f64 {
        match self {
            Self::FixedTime { target } | Self::Arclength { target } => *target,
            Self::Poincare { offset, .. } => *offset,
        }
    }

    pub fn needs_arclength(&self) -> bool {
        matches!(self, Self::Arclength { .. })
    }

    pub fn stop_condition(&self) -> StopCondition {
        match self {
            Self::FixedTime { target } => StopCondition::Time(*target),
            Self::Arclength { target } => StopCondition::Arclength(*target),
            Self::Poincare { normal, offset } => StopCondition::Section { normal: normal.clone(), offset: *offset },
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        match self {
            Self::Poincare { normal, .. } if normal.len() != n => {
                Err(Error::InvalidInput(format!("section normal has length {}, expected {n}", normal.len())))
            }
            _ => Ok(()),
        }
    }

    /// `g - target` given the segment end, its time and arclength.
    fn mismatch(&self, end: &[f64], t: f64, arclength: Option<f64>) -> f64 {
        match self {
            Self::FixedTime { target } => t - target,
            Self::Poincare { normal, offset } => dot(normal, end) - offset,
            Self::Arclength { target } => arclength.expect("arclength integrated") - target,
        }
    }
}

/// Value and first derivatives of a boundary functional along one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BcLinearization {
    /// `g(gamma, T)` (not shifted by the target).
    pub value: f64,
    /// `dg / dx0`.
    pub gradient: Vec<f64>,
    /// `dg / dT`.
    pub time_derivative: f64,
}

/// Linearizes `bc` along the segment starting at `x0` with duration `t`,
/// transporting all `n` unit directions through the variational equations.
pub fn bc_value_and_gradient<F: VectorField + ?Sized>(
    field: &F,
    bc: &BoundaryCondition,
    x0: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<BcLinearization> {
    let n = field.dim();
    bc.check_dim(n)?;
    if let BoundaryCondition::FixedTime { .. } = bc {
        return Ok(BcLinearization { value: t, gradient: vec![0.0; n], time_derivative: 1.0 });
    }
    let dirs: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let end = integrate_variational(field, x0, &dirs, t, cfg, bc.needs_arclength())?;
    let mut f_end = vec![0.0; n];
    field.eval(&end.state, &mut f_end);
    Ok(match bc {
        BoundaryCondition::Poincare { normal, .. } => BcLinearization {
            value: dot(normal, &end.state),
            gradient: end.directions.iter().map(|d| dot(normal, d)).collect(),
            time_derivative: dot(normal, &f_end),
        },
        BoundaryCondition::Arclength { .. } => BcLinearization {
            value: end.arclength.expect("requested"),
            gradient: end.arclength_derivatives.expect("requested"),
            time_derivative: norm(&f_end),
        },
        BoundaryCondition::FixedTime { .. } => unreachable!(),
    })
}

/// How the start of the first segment depends on the free parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Anchor {
    /// `x_1 = point + e^s direction`; times are normalized by `period`.
    PeriodicOrbitRay { point: Vec<f64>, direction: Vec<f64>, period: f64, multiplier: f64 },
    /// `x_1 = point + radius (cos s e1 + sin s e2)`.
    EquilibriumCircle { point: Vec<f64>, e1: Vec<f64>, e2: Vec<f64>, radius: f64, time_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeftBoundary {
    pub anchor: Anchor,
    /// Integrate backwards in time, giving the stable manifold.
    #[serde(default)]
    pub reverse_time: bool,
}

impl LeftBoundary {
    /// Ray along `sign * u1` from the base point of a periodic orbit with a
    /// computed Floquet pair.
    pub fn periodic_orbit_ray(po: &PeriodicOrbit, sign: f64, reverse_time: bool) -> Result<Self> {
        let pair = po.floquet.as_ref().ok_or_else(|| Error::InvalidInput("periodic orbit has no Floquet pair".into()))?;
        let s = if sign < 0.0 { -1.0 } else { 1.0 };
        Self {
            anchor: Anchor::PeriodicOrbitRay {
                point: po.base_point.clone(),
                direction: pair.u1.iter().map(|v| s * v).collect(),
                period: po.period,
                multiplier: pair.mu1,
            },
            reverse_time,
        }
        .validated()
    }

    pub fn equilibrium_circle(plane: &EquilibriumPlane, radius: f64, reverse_time: bool) -> Result<Self> {
        Self {
            anchor: Anchor::EquilibriumCircle {
                point: plane.point.clone(),
                e1: plane.e1.clone(),
                e2: plane.e2.clone(),
                radius,
                time_scale: plane.time_scale,
            },
            reverse_time,
        }
        .validated()
    }

    /// Checks the anchor data and orthonormalizes the direction vectors.
    pub fn validated(mut self) -> Result<Self> {
        match &mut self.anchor {
            Anchor::PeriodicOrbitRay { point, direction, period, multiplier } => {
                if direction.len() != point.len() {
                    return Err(Error::InvalidInput("ray direction has wrong dimension".into()));
                }
                if !(*period > 0.0) {
                    return Err(Error::InvalidInput("period must be positive".into()));
                }
                let expanding = multiplier.abs() > 1.0;
                if expanding == self.reverse_time || multiplier.abs() == 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "multiplier {multiplier} does not give an {} direction",
                        if self.reverse_time { "contracting" } else { "expanding" }
                    )));
                }
                let d = norm(direction);
                if !(d > 0.0) {
                    return Err(Error::InvalidInput("ray direction must be nonzero".into()));
                }
                direction.iter_mut().for_each(|v| *v /= d);
            }
            Anchor::EquilibriumCircle { point, e1, e2, radius, time_scale } => {
                if e1.len() != point.len() || e2.len() != point.len() {
                    return Err(Error::InvalidInput("plane vectors have wrong dimension".into()));
                }
                if !(*radius > 0.0) || !(*time_scale > 0.0) {
                    return Err(Error::InvalidInput("radius and time scale must be positive".into()));
                }
                let n1 = norm(e1);
                if !(n1 > 0.0) {
                    return Err(Error::InvalidInput("plane vectors must be nonzero".into()));
                }
                e1.iter_mut().for_each(|v| *v /= n1);
                let c = dot(e1, e2);
                axpy(-c, e1, e2);
                let n2 = norm(e2);
                if !(n2 > 1e-12) {
                    return Err(Error::InvalidInput("plane vectors are parallel".into()));
                }
                e2.iter_mut().for_each(|v| *v /= n2);
            }
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        match &self.anchor {
            Anchor::PeriodicOrbitRay { point, .. } | Anchor::EquilibriumCircle { point, .. } => point.len(),
        }
    }

    /// Unit of the normalized integration times.
    pub fn time_scale(&self) -> f64 {
        match &self.anchor {
            Anchor::PeriodicOrbitRay { period, .. } => *period,
            Anchor::EquilibriumCircle { time_scale, .. } => *time_scale,
        }
    }

    /// Start of the first segment for parameter `s`.
    pub fn point(&self, s: f64) -> Vec<f64> {
        match &self.anchor {
            Anchor::PeriodicOrbitRay { point, direction, .. } => {
                let mut x = point.clone();
                axpy(s.exp(), direction, &mut x);
                x
            }
            Anchor::EquilibriumCircle { point, e1, e2, radius, .. } => {
                let mut x = point.clone();
                axpy(radius * s.cos(), e1, &mut x);
                axpy(radius * s.sin(), e2, &mut x);
                x
            }
        }
    }

    /// `d point / d s`.
    pub fn derivative(&self, s: f64) -> Vec<f64> {
        match &self.anchor {
            Anchor::PeriodicOrbitRay { direction, .. } => direction.iter().map(|v| s.exp() * v).collect(),
            Anchor::EquilibriumCircle { e1, e2, radius, .. } => {
                let mut d = vec![0.0; e1.len()];
                axpy(-radius * s.sin(), e1, &mut d);
                axpy(radius * s.cos(), e2, &mut d);
                d
            }
        }
    }

    /// Converts a user-facing start value (`eps` or the angle) to `s`.
    pub fn parameter_from(&self, value: f64) -> Result<f64> {
        match &self.anchor {
            Anchor::PeriodicOrbitRay { .. } => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::InvalidInput(format!("eps must be positive, got {value}")));
                }
                Ok(value.ln())
            }
            Anchor::EquilibriumCircle { .. } => {
                if !value.is_finite() {
                    return Err(Error::InvalidInput("angle must be finite".into()));
                }
                Ok(value)
            }
        }
    }
}

/// Index arithmetic for the packed unknown vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n: usize,
    pub k: usize,
}

impl Layout {
    /// `N = (k-1) n + k + 1`.
    pub fn unknowns(&self) -> usize {
        (self.k - 1) * self.n + self.k + 1
    }

    pub fn equations(&self) -> usize {
        self.unknowns() - 1
    }

    /// Slice range of the start of segment `i` (`1 <= i < k`).
    pub fn point(&self, i: usize) -> std::ops::Range<usize> {
        debug_assert!(i >= 1 && i < self.k);
        (i - 1) * self.n..i * self.n
    }

    pub fn tau(&self, i: usize) -> usize {
        (self.k - 1) * self.n + i
    }

    pub fn param(&self) -> usize {
        self.unknowns() - 1
    }

    /// Row of the boundary condition of segment `i` in the residual.
    pub fn bc_row(&self, i: usize) -> usize {
        (self.k - 1) * self.n + i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Exact directional derivatives from the variational equations.
    #[default]
    Variational,
    /// Central differences of the residual, for cross-validation.
    FiniteDifference,
}

/// Per-segment integration wall times of the last evaluation.
pub type SegmentTimes = Vec<Duration>;

#[derive(Clone)]
pub struct ShootingProblem {
    field: Arc<dyn VectorField>,
    left: LeftBoundary,
    bcs: Vec<BoundaryCondition>,
    cfg: IntegratorConfig,
    mode: JacobianMode,
    workers: usize,
    pool: Option<Arc<rayon::ThreadPool>>,
    dense_limit: usize,
}

impl std::fmt::Debug for ShootingProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShootingProblem")
            .field("n", &self.n())
            .field("left", &self.left)
            .field("bcs", &self.bcs)
            .field("cfg", &self.cfg)
            .field("mode", &self.mode)
            .field("workers", &self.workers)
            .finish()
    }
}

struct SegmentEnd {
    end: Vec<f64>,
    arclength: Option<f64>,
}

impl ShootingProblem {
    /// `field` is the forward vector field; it is reversed internally when
    /// the left boundary asks for backward time.
    pub fn new(field: Arc<dyn VectorField>, left: LeftBoundary, bcs: Vec<BoundaryCondition>, cfg: IntegratorConfig) -> Result<Self> {
        cfg.validate()?;
        let left = left.validated()?;
        let n = field.dim();
        if left.dim() != n {
            return Err(Error::InvalidInput(format!("left boundary has dimension {}, field has {n}", left.dim())));
        }
        if bcs.is_empty() {
            return Err(Error::InvalidInput("at least one boundary condition is required".into()));
        }
        let bcs = bcs.into_iter().map(|b| b.normalized()).collect::<Result<Vec<_>>>()?;
        for b in &bcs {
            b.check_dim(n)?;
        }
        let field: Arc<dyn VectorField> = if left.reverse_time { Arc::new(Reversed(field)) } else { field };
        Ok(Self { field, left, bcs, cfg, mode: JacobianMode::Variational, workers: 1, pool: None, dense_limit: 2000 })
    }

    /// Runs segment integrations on `workers` threads (1 means inline).
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        self.pool = if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        self.workers = workers;
        Ok(self)
    }

    pub fn with_jacobian_mode(mut self, mode: JacobianMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_dense_limit(mut self, limit: usize) -> Self {
        self.dense_limit = limit;
        self
    }

    /// Same problem with a new list of boundary conditions.
    pub fn with_bcs(&self, bcs: Vec<BoundaryCondition>) -> Result<Self> {
        if bcs.is_empty() {
            return Err(Error::InvalidInput("at least one boundary condition is required".into()));
        }
        let bcs = bcs.into_iter().map(|b| b.normalized()).collect::<Result<Vec<_>>>()?;
        for b in &bcs {
            b.check_dim(self.n())?;
        }
        Ok(Self { bcs, ..self.clone() })
    }

    pub fn n(&self) -> usize {
        self.field.dim()
    }

    pub fn k(&self) -> usize {
        self.bcs.len()
    }

    pub fn layout(&self) -> Layout {
        Layout { n: self.n(), k: self.k() }
    }

    pub fn unknowns(&self) -> usize {
        self.layout().unknowns()
    }

    pub fn left(&self) -> &LeftBoundary {
        &self.left
    }

    pub fn bcs(&self) -> &[BoundaryCondition] {
        &self.bcs
    }

    pub fn integrator(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn jacobian_mode(&self) -> JacobianMode {
        self.mode
    }

    /// The field actually integrated (reversed in backward-time mode).
    pub fn field(&self) -> &Arc<dyn VectorField> {
        &self.field
    }

    pub fn time_scale(&self) -> f64 {
        self.left.time_scale()
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        let lay = self.layout();
        if z.len() != lay.unknowns() {
            return Err(Error::InvalidInput(format!("unknown vector has length {}, expected {}", z.len(), lay.unknowns())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("unknown vector is not finite".into()));
        }
        for i in 0..lay.k {
            if !(z[lay.tau(i)] > 0.0) {
                return Err(Error::InvalidInput(format!("segment {i} has non-positive time {}", z[lay.tau(i)])));
            }
        }
        Ok(())
    }

    /// Start point of segment `i`.
    pub fn segment_start(&self, z: &[f64], i: usize) -> Vec<f64> {
        let lay = self.layout();
        if i == 0 {
            self.left.point(z[lay.param()])
        } else {
            z[lay.point(i)].to_vec()
        }
    }

    /// Unnormalized duration of segment `i`.
    pub fn segment_time(&self, z: &[f64], i: usize) -> f64 {
        z[self.layout().tau(i)] * self.time_scale()
    }

    pub fn total_time(&self, z: &[f64]) -> f64 {
        (0..self.k()).map(|i| self.segment_time(z, i)).sum()
    }

    fn par_segments<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        let k = self.k();
        let out: Vec<Result<T>> = match &self.pool {
            Some(pool) => pool.install(|| (0..k).into_par_iter().map(&f).collect()),
            None => (0..k).map(&f).collect(),
        };
        out.into_iter().collect()
    }

    fn seg_err(i: usize) -> impl Fn(OdeError) -> Error {
        move |source| Error::Segment { segment: i, source }
    }

    fn segment_end(&self, z: &[f64], i: usize) -> Result<SegmentEnd> {
        let x0 = self.segment_start(z, i);
        let t = self.segment_time(z, i);
        let (end, arclength) = flow(&*self.field, &x0, t, &self.cfg, self.bcs[i].needs_arclength()).map_err(Self::seg_err(i))?;
        Ok(SegmentEnd { end, arclength })
    }

    fn assemble_residual(&self, z: &[f64], ends: &[SegmentEnd]) -> Vec<f64> {
        let lay = self.layout();
        let mut r = vec![0.0; lay.equations()];
        for i in 0..lay.k - 1 {
            let next = &z[lay.point(i + 1)];
            for j in 0..lay.n {
                r[i * lay.n + j] = next[j] - ends[i].end[j];
            }
        }
        for (i, bc) in self.bcs.iter().enumerate() {
            r[lay.bc_row(i)] = bc.mismatch(&ends[i].end, self.segment_time(z, i), ends[i].arclength);
        }
        r
    }

    /// `F(z)`, length `N - 1`.
    pub fn residual(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.residual_timed(z)?.0)
    }

    /// `F(z)` together with the wall time of each segment integration.
    pub fn residual_timed(&self, z: &[f64]) -> Result<(Vec<f64>, SegmentTimes)> {
        self.check_z(z)?;
        let timed = self.par_segments(|i| {
            let start = Instant::now();
            let end = self.segment_end(z, i)?;
            Ok((end, start.elapsed()))
        })?;
        let (ends, times): (Vec<SegmentEnd>, Vec<Duration>) = timed.into_iter().unzip();
        Ok((self.assemble_residual(z, &ends), times))
    }

    /// Largest gluing mismatch `max_i |x_{i+1} - phi(x_i, T_i)|`.
    pub fn gluing_error(&self, z: &[f64]) -> Result<f64> {
        let r = self.residual(z)?;
        let lay = self.layout();
        Ok((0..lay.k - 1).map(|i| norm(&r[i * lay.n..(i + 1) * lay.n])).fold(0.0, f64::max))
    }

    /// `DF(z) v`.
    pub fn residual_derivative(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let lay = self.layout();
        if v.len() != lay.unknowns() {
            return Err(Error::InvalidInput("direction has wrong length".into()));
        }
        match self.mode {
            JacobianMode::Variational => self.variational_derivative(z, v),
            JacobianMode::FiniteDifference => {
                let vn = norm(v);
                if vn == 0.0 {
                    return Ok(vec![0.0; lay.equations()]);
                }
                let h = 1e-6 * (1.0 + norm(z)) / vn;
                let zp: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b).collect();
                let zm: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b).collect();
                let fp = self.residual(&zp)?;
                let fm = self.residual(&zm)?;
                Ok(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
            }
        }
    }

    fn variational_derivative(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let lay = self.layout();
        let n = lay.n;
        let scale = self.time_scale();
        let param = z[lay.param()];
        let lin = self.par_segments(|i| {
            let x0 = self.segment_start(z, i);
            let t = self.segment_time(z, i);
            let dx0 = if i == 0 {
                self.left.derivative(param).iter().map(|d| d * v[lay.param()]).collect()
            } else {
                v[lay.point(i)].to_vec()
            };
            let dt = scale * v[lay.tau(i)];
            let bc = &self.bcs[i];
            let arc = bc.needs_arclength();
            let end = integrate_variational(&*self.field, &x0, &[dx0], t, &self.cfg, arc).map_err(Self::seg_err(i))?;
            let mut f_end = vec![0.0; n];
            self.field.eval(&end.state, &mut f_end);
            let mut dend = end.directions[0].clone();
            axpy(dt, &f_end, &mut dend);
            let dg = match bc {
                BoundaryCondition::FixedTime { .. } => dt,
                BoundaryCondition::Poincare { normal, .. } => dot(normal, &dend),
                BoundaryCondition::Arclength { .. } => end.arclength_derivatives.expect("requested")[0] + norm(&f_end) * dt,
            };
            Ok((dend, dg))
        })?;
        let mut out = vec![0.0; lay.equations()];
        for i in 0..lay.k - 1 {
            let dnext = &v[lay.point(i + 1)];
            for j in 0..n {
                out[i * n + j] = dnext[j] - lin[i].0[j];
            }
        }
        for (i, (_, dg)) in lin.iter().enumerate() {
            out[lay.bc_row(i)] = *dg;
        }
        Ok(out)
    }

    /// Bordered operator `[DF(z); tangent^T] v`.
    pub fn jacobian_apply(&self, z: &[f64], tangent: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if tangent.len() != self.unknowns() {
            return Err(Error::InvalidInput("tangent has wrong length".into()));
        }
        let mut out = self.residual_derivative(z, v)?;
        out.push(dot(tangent, v));
        Ok(out)
    }

    /// Dense `N x N` bordered matrix by column probing.
    pub fn assemble_dense(&self, z: &[f64], tangent: &[f64]) -> Result<DMatrix<f64>> {
        let nn = self.unknowns();
        if nn > self.dense_limit {
            return Err(Error::DenseLimit { dim: nn, limit: self.dense_limit });
        }
        let mut a = DMatrix::zeros(nn, nn);
        let mut e = vec![0.0; nn];
        for c in 0..nn {
            e[c] = 1.0;
            let col = self.jacobian_apply(z, tangent, &e)?;
            e[c] = 0.0;
            for (r, v) in col.iter().enumerate() {
                a[(r, c)] = *v;
            }
        }
        Ok(a)
    }

    /// Integrates forward from the left boundary at `value` (`eps` or the
    /// angle), splitting the orbit at each successive boundary event.
    pub fn seed_initial_solution(&self, value: f64, t_max: f64) -> Result<Vec<f64>> {
        let s = self.left.parameter_from(value)?;
        let lay = self.layout();
        let mut z = vec![0.0; lay.unknowns()];
        z[lay.param()] = s;
        let mut x = self.left.point(s);
        for (i, bc) in self.bcs.iter().enumerate() {
            let hit = integrate_until(&*self.field, &x, &bc.stop_condition(), &self.cfg, t_max).map_err(Self::seg_err(i))?;
            if hit.grazing {
                log::warn!("segment {i} grazes its section at t = {}", hit.t_hit);
            }
            z[lay.tau(i)] = hit.t_hit / self.time_scale();
            x = hit.trajectory.final_state().to_vec();
            if i + 1 < lay.k {
                z[lay.point(i + 1)].copy_from_slice(&x);
            }
        }
        Ok(z)
    }

    /// Dense trajectories of all segments at `z`.
    pub fn trajectories(&self, z: &[f64]) -> Result<Vec<Trajectory>> {
        self.check_z(z)?;
        self.par_segments(|i| integrate(&*self.field, &self.segment_start(z, i), self.segment_time(z, i), &self.cfg).map_err(Self::seg_err(i)))
    }
}
