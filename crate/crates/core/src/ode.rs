//! Adaptive Dormand-Prince 5(4) integration of `x' = f(x)`, its first
//! variational equations, and event-terminated trajectories.
//!
//! Every integration routine here is a pure function of its inputs. The same
//! step-size controller drives the base system and the extended systems; the
//! error norm is taken over the concatenated state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm};

/// Tolerance on the event function when locating a stop condition.
pub const EVENT_TOL: f64 = 1e-10;

/// Relative threshold on `|dg/dt| / (|grad g| |f|)` below which a hit is
/// reported as grazing.
pub const GRAZING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e}); stiff or singular system")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}; solution blew up")]
    NonFinite { t: f64 },
    #[error("exceeded {max_steps} steps before t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("stop condition not reached before t_max = {t_max}")]
    NoEvent { t_max: f64 },
    #[error("invalid integration input: {0}")]
    InvalidInput(String),
}

/// Right-hand side of an autonomous ODE system.
///
/// Implementors must be shareable across worker threads.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `out`.
    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// Writes `Df(x) v` into `out` and returns `true` if an analytic Jacobian
    /// is available. The default returns `false`.
    fn analytic_jacobian_action(&self, _x: &[f64], _v: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// `Df(x) v`, falling back to a central difference with
    /// `h = sqrt(eps) (1 + |x|)` along the unit direction of `v`.
    fn jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        if self.analytic_jacobian_action(x, v, out) {
            return;
        }
        fd_jacobian_action(self, x, v, out);
    }
}

/// Central finite-difference Jacobian action, exposed for cross-checks.
pub fn fd_jacobian_action<F: VectorField + ?Sized>(field: &F, x: &[f64], v: &[f64], out: &mut [f64]) {
    let n = x.len();
    let vn = norm(v);
    if vn == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let h = f64::EPSILON.sqrt() * (1.0 + norm(x));
    let xp: Vec<f64> = (0..n).map(|i| x[i] + h * v[i] / vn).collect();
    let xm: Vec<f64> = (0..n).map(|i| x[i] - h * v[i] / vn).collect();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    field.eval(&xp, &mut fp);
    field.eval(&xm, &mut fm);
    for i in 0..n {
        out[i] = (fp[i] - fm[i]) / (2.0 * h) * vn;
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval(x, out)
    }
    fn analytic_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        (**self).analytic_jacobian_action(x, v, out)
    }
}

impl<T: VectorField + ?Sized> VectorField for std::sync::Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval(x, out)
    }
    fn analytic_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        (**self).analytic_jacobian_action(x, v, out)
    }
}

/// Vector field given by a closure, without an analytic Jacobian.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Time-reversed field `-f`, used for stable manifolds.
pub struct Reversed<F>(pub F);

impl<F: VectorField> VectorField for Reversed<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.0.eval(x, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }
    fn analytic_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        if self.0.analytic_jacobian_action(x, v, out) {
            out.iter_mut().for_each(|o| *o = -*o);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dormand-Prince 5(4) with cubic Hermite dense output.
    #[default]
    DormandPrince54,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: Option<f64>,
    pub max_steps: usize,
    pub method: Method,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_step: None,
            max_steps: 2_000_000,
            method: Method::DormandPrince54,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tol(rel_tol: f64, abs_tol: f64) -> Self {
        Self { rel_tol, abs_tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(OdeError::InvalidInput("tolerances must be strictly positive".into()));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return Err(OdeError::InvalidInput("max_step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Autonomous first-order system on a flat state vector.
pub(crate) trait OdeSystem {
    fn len(&self) -> usize;
    fn rhs(&self, y: &[f64], dy: &mut [f64]);
}

/// `x' = f(x)`, optionally with the arclength quadrature `s' = |f(x)|`
/// appended as component `n`.
struct BaseSystem<'a, F: ?Sized> {
    field: &'a F,
    arclength: bool,
}

impl<F: VectorField + ?Sized> OdeSystem for BaseSystem<'_, F> {
    fn len(&self) -> usize {
        self.field.dim() + usize::from(self.arclength)
    }
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.field.dim();
        self.field.eval(&y[..n], &mut dy[..n]);
        if self.arclength {
            dy[n] = norm(&dy[..n]);
        }
    }
}

/// `x' = f(x)` together with `m` variational directions `v_j' = Df(x) v_j`.
/// With `arclength`, the tail holds `s' = |f|` and `s_j' = f . Df v_j / |f|`.
struct ExtendedSystem<'a, F: ?Sized> {
    field: &'a F,
    m: usize,
    arclength: bool,
}

impl<F: VectorField + ?Sized> OdeSystem for ExtendedSystem<'_, F> {
    fn len(&self) -> usize {
        let n = self.field.dim();
        n * (self.m + 1) + if self.arclength { self.m + 1 } else { 0 }
    }
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.field.dim();
        let m = self.m;
        let (x, rest) = y.split_at(n);
        let (fx, drest) = dy.split_at_mut(n);
        self.field.eval(x, fx);
        for j in 0..m {
            let v = &rest[j * n..(j + 1) * n];
            self.field.jacobian_action(x, v, &mut drest[j * n..(j + 1) * n]);
        }
        if self.arclength {
            let speed = norm(fx);
            let base = m * n;
            drest[base] = speed;
            for j in 0..m {
                let dv = &drest[j * n..(j + 1) * n];
                let val = if speed > 0.0 { dot(fx, dv) / speed } else { 0.0 };
                drest[base + 1 + j] = val;
            }
        }
    }
}

// Dormand-Prince 5(4) tableau; the stage nodes are not needed for autonomous systems.
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
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Workspace {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl Workspace {
    fn new(len: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; len]),
            tmp: vec![0.0; len],
            y_new: vec![0.0; len],
        }
    }
}

/// One Dormand-Prince step from `(y, f0 = f(y))` with size `h`. Leaves the
/// new state in `ws.y_new`, its slope in `ws.k[6]`, and returns the scaled
/// error norm.
fn dp_step<S: OdeSystem + ?Sized>(sys: &S, y: &[f64], f0: &[f64], h: f64, cfg: &IntegratorConfig, ws: &mut Workspace) -> f64 {
    let len = y.len();
    ws.k[0].copy_from_slice(f0);
    macro_rules! stage {
        ($dst:expr, $($c:expr => $ki:expr),+) => {{
            for i in 0..len {
                ws.tmp[i] = y[i] + h * (0.0 $(+ $c * ws.k[$ki][i])+);
            }
            let (tmp, k) = (&ws.tmp, &mut ws.k[$dst]);
            sys.rhs(tmp, k);
        }};
    }
    stage!(1, A21 => 0);
    stage!(2, A31 => 0, A32 => 1);
    stage!(3, A41 => 0, A42 => 1, A43 => 2);
    stage!(4, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
    stage!(5, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
    for i in 0..len {
        ws.y_new[i] = y[i] + h * (B1 * ws.k[0][i] + B3 * ws.k[2][i] + B4 * ws.k[3][i] + B5 * ws.k[4][i] + B6 * ws.k[5][i]);
    }
    {
        let (y_new, k) = (&ws.y_new, &mut ws.k[6]);
        sys.rhs(y_new, k);
    }
    let mut acc = 0.0;
    for i in 0..len {
        let e = h
            * (E1 * ws.k[0][i] + E3 * ws.k[2][i] + E4 * ws.k[3][i] + E5 * ws.k[4][i] + E6 * ws.k[5][i] + E7 * ws.k[6][i]);
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(ws.y_new[i].abs());
        acc += (e / sc) * (e / sc);
    }
    (acc / len.max(1) as f64).sqrt()
}

fn scaled_norm(v: &[f64], y: &[f64], cfg: &IntegratorConfig) -> f64 {
    let acc: f64 = v
        .iter()
        .zip(y)
        .map(|(vi, yi)| {
            let sc = cfg.abs_tol + cfg.rel_tol * yi.abs();
            (vi / sc) * (vi / sc)
        })
        .sum();
    (acc / v.len().max(1) as f64).sqrt()
}

fn initial_step<S: OdeSystem + ?Sized>(sys: &S, y0: &[f64], f0: &[f64], cfg: &IntegratorConfig) -> f64 {
    let d0 = scaled_norm(y0, y0, cfg);
    let d1 = scaled_norm(f0, y0, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    sys.rhs(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scaled_norm(&diff, y0, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1)
}

/// Piecewise cubic Hermite representation of an integrated solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    /// Augmented rows; the first `dim` entries are the state.
    rows: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    has_arclength: bool,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.rows[i][..self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.rows.iter().map(move |r| &r[..self.dim])
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Accumulated arclength at sample `i`, when the integration carried the
    /// arclength quadrature.
    pub fn arclength(&self, i: usize) -> Option<f64> {
        self.has_arclength.then(|| self.rows[i][self.dim])
    }

    pub fn has_arclength(&self) -> bool {
        self.has_arclength
    }

    fn locate(&self, t: f64) -> Result<usize, usize> {
        // Ok(i): exact node. Err(i): t lies in (times[i], times[i+1]).
        match self.times.binary_search_by(|s| s.partial_cmp(&t).expect("finite times")) {
            Ok(i) => Ok(i),
            Err(0) => Err(0),
            Err(i) if i >= self.times.len() => Err(self.times.len().saturating_sub(2)),
            Err(i) => Err(i - 1),
        }
    }

    fn hermite(&self, i: usize, t: f64, comp: std::ops::Range<usize>) -> Vec<f64> {
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (y0, y1, f0, f1) = (&self.rows[i], &self.rows[i + 1], &self.slopes[i], &self.slopes[i + 1]);
        comp.map(|c| h00 * y0[c] + h * h10 * f0[c] + h01 * y1[c] + h * h11 * f1[c]).collect()
    }

    /// Interpolated state at `t`, clamped to `[0, final_time]`. Exact at the
    /// stored sample times.
    pub fn dense_eval(&self, t: f64) -> Vec<f64> {
        self.dense_range(t, 0..self.dim)
    }

    /// Interpolated arclength at `t`.
    pub fn dense_arclength(&self, t: f64) -> Option<f64> {
        self.has_arclength.then(|| self.dense_range(t, self.dim..self.dim + 1)[0])
    }

    fn dense_range(&self, t: f64, comp: std::ops::Range<usize>) -> Vec<f64> {
        if self.len() == 1 || t <= self.times[0] {
            return self.rows[0][comp].to_vec();
        }
        if t >= self.final_time() {
            return self.rows[self.len() - 1][comp].to_vec();
        }
        match self.locate(t) {
            Ok(i) => self.rows[i][comp].to_vec(),
            Err(i) => self.hermite(i, t, comp),
        }
    }
}

/// Event function over the augmented state, with the hit tolerance.
struct EventSpec<'a> {
    g: &'a dyn Fn(&[f64]) -> f64,
}

/// Accepted times, states and derivatives.
type Record = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

struct DriveOut {
    t: f64,
    y: Vec<f64>,
    f: Vec<f64>,
    record: Option<Record>,
}

/// Core adaptive loop. With an event, `t_final` is the search horizon and the
/// integration stops at the first sign change of the event function after the
/// starting point (a start within `EVENT_TOL` of the surface is skipped).
fn drive<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
    record: bool,
    event: Option<EventSpec<'_>>,
) -> Result<DriveOut, OdeError> {
    cfg.validate()?;
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(OdeError::InvalidInput(format!("final time must be finite and non-negative, got {t_final}")));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::InvalidInput("initial state is not finite".into()));
    }
    let len = sys.len();
    let mut y = y0.to_vec();
    let mut f = vec![0.0; len];
    sys.rhs(&y, &mut f);
    let mut rec = record.then(|| (vec![0.0], vec![y.clone()], vec![f.clone()]));
    if t_final == 0.0 {
        if event.is_some() {
            return Err(OdeError::NoEvent { t_max: t_final });
        }
        return Ok(DriveOut { t: 0.0, y, f, record: rec });
    }

    let max_step = cfg.max_step.unwrap_or(f64::INFINITY);
    let mut h = initial_step(sys, &y, &f, cfg).min(max_step).min(t_final);
    let mut t = 0.0_f64;
    let mut ws = Workspace::new(len);
    let mut steps = 0usize;
    let mut g_prev = event.as_ref().map(|e| (e.g)(&y));
    let mut skip_first = g_prev.map(|g| g.abs() <= EVENT_TOL).unwrap_or(false);

    while t < t_final {
        if steps >= cfg.max_steps {
            return Err(OdeError::TooManySteps { t, max_steps: cfg.max_steps });
        }
        let mut last = false;
        if t + h >= t_final {
            h = t_final - t;
            last = true;
        }
        let err = dp_step(sys, &y, &f, h, cfg, &mut ws);
        if !err.is_finite() || err > 1.0 {
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
            let h_new = h * fac;
            if h_new < 16.0 * f64::EPSILON * t.abs().max(1.0) {
                return Err(if err.is_finite() { OdeError::StepUnderflow { t, h: h_new } } else { OdeError::NonFinite { t } });
            }
            h = h_new;
            continue;
        }
        steps += 1;
        let t_new = if last { t_final } else { t + h };

        if let Some(ev) = &event {
            let g_a = g_prev.expect("event state");
            let g_b = (ev.g)(&ws.y_new);
            let crossed = !skip_first && ((g_a < 0.0 && g_b >= 0.0) || (g_a > 0.0 && g_b <= 0.0));
            if crossed {
                let (t_hit, y_hit, f_hit) = locate_root(sys, &y, &f, t, t_new, g_a, g_b, ev, cfg);
                if let Some((times, rows, slopes)) = rec.as_mut() {
                    times.push(t_hit);
                    rows.push(y_hit.clone());
                    slopes.push(f_hit.clone());
                }
                return Ok(DriveOut { t: t_hit, y: y_hit, f: f_hit, record: rec });
            }
            if skip_first && g_b.abs() > EVENT_TOL {
                skip_first = false;
            }
            g_prev = Some(g_b);
        }

        std::mem::swap(&mut y, &mut ws.y_new);
        f.copy_from_slice(&ws.k[6]);
        t = t_new;
        if let Some((times, rows, slopes)) = rec.as_mut() {
            times.push(t);
            rows.push(y.clone());
            slopes.push(f.clone());
        }
        if !last {
            let fac = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
            h = (h * fac).min(max_step);
        }
    }
    if event.is_some() {
        return Err(OdeError::NoEvent { t_max: t_final });
    }
    Ok(DriveOut { t, y, f, record: rec })
}

/// Locates the event inside an accepted step. States at trial times come from
/// a single Dormand-Prince step out of the step's left end, which is what a
/// plain integration to the hit time produces for its final (clipped) step.
#[allow(clippy::too_many_arguments)]
fn locate_root<S: OdeSystem + ?Sized>(
    sys: &S,
    y_a: &[f64],
    f_a: &[f64],
    t_a: f64,
    t_b: f64,
    g_a: f64,
    g_b: f64,
    ev: &EventSpec<'_>,
    cfg: &IntegratorConfig,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut ws = Workspace::new(y_a.len());
    let mut eval = |t: f64| -> (f64, Vec<f64>, Vec<f64>) {
        dp_step(sys, y_a, f_a, t - t_a, cfg, &mut ws);
        ((ev.g)(&ws.y_new), ws.y_new.clone(), ws.k[6].clone())
    };
    let (mut lo, mut hi) = (t_a, t_b);
    let (mut g_lo, mut g_hi) = (g_a, g_b);
    let mut best = None;
    // Illinois-modified regula falsi with a bisection safeguard.
    let mut side = 0i32;
    for it in 0..200 {
        let mut t = if g_hi != g_lo { hi - g_hi * (hi - lo) / (g_hi - g_lo) } else { 0.5 * (lo + hi) };
        if !(t > lo && t < hi) || it % 8 == 7 {
            t = 0.5 * (lo + hi);
        }
        if t <= t_a {
            t = 0.5 * (lo + hi);
        }
        let (g, yy, ff) = eval(t);
        best = Some((t, yy, ff));
        if g.abs() <= EVENT_TOL || hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
        if (g < 0.0) == (g_lo < 0.0) && g != 0.0 {
            lo = t;
            g_lo = g;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = t;
            g_hi = g;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
    }
    best.expect("at least one root-finding iteration")
}

fn check_dim(field: &dyn Fn() -> usize, x0: &[f64]) -> Result<(), OdeError> {
    if field() != x0.len() {
        return Err(OdeError::InvalidInput(format!("state has length {}, field dimension is {}", x0.len(), field())));
    }
    Ok(())
}

fn build_trajectory(dim: usize, out: DriveOut, has_arclength: bool) -> Trajectory {
    let (times, rows, slopes) = out.record.expect("recording enabled");
    Trajectory { dim, times, rows, slopes, has_arclength }
}

/// Integrates `x' = f(x)` from `x0` over `[0, t_final]`, recording every
/// accepted step for dense output.
pub fn integrate<F: VectorField + ?Sized>(field: &F, x0: &[f64], t_final: f64, cfg: &IntegratorConfig) -> Result<Trajectory, OdeError> {
    check_dim(&|| field.dim(), x0)?;
    let sys = BaseSystem { field, arclength: false };
    let out = drive(&sys, x0, t_final, cfg, true, None)?;
    Ok(build_trajectory(field.dim(), out, false))
}

/// As [`integrate`], carrying the arclength quadrature `s' = |f|`.
pub fn integrate_with_arclength<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, OdeError> {
    check_dim(&|| field.dim(), x0)?;
    let sys = BaseSystem { field, arclength: true };
    let mut y0 = x0.to_vec();
    y0.push(0.0);
    let out = drive(&sys, &y0, t_final, cfg, true, None)?;
    Ok(build_trajectory(field.dim(), out, true))
}

/// End point of a flow without recording. Returns `(phi(x0, t), arclength)`;
/// the arclength is computed only when requested.
pub fn flow<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
    with_arclength: bool,
) -> Result<(Vec<f64>, Option<f64>), OdeError> {
    check_dim(&|| field.dim(), x0)?;
    let n = field.dim();
    let sys = BaseSystem { field, arclength: with_arclength };
    let mut y0 = x0.to_vec();
    if with_arclength {
        y0.push(0.0);
    }
    let out = drive(&sys, &y0, t_final, cfg, false, None)?;
    let s = with_arclength.then(|| out.y[n]);
    let mut y = out.y;
    y.truncate(n);
    Ok((y, s))
}

/// End point of the extended system.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalEnd {
    pub state: Vec<f64>,
    /// `D phi(x0, t) v_j` for each input direction.
    pub directions: Vec<Vec<f64>>,
    pub arclength: Option<f64>,
    /// Derivative of the arclength functional along each input direction.
    pub arclength_derivatives: Option<Vec<f64>>,
}

/// Integrates the state and its variational equations for several
/// directions at once. Directions are normalized internally and rescaled on
/// output; zero directions map to zero without being integrated.
pub fn integrate_variational<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    directions: &[Vec<f64>],
    t_final: f64,
    cfg: &IntegratorConfig,
    with_arclength: bool,
) -> Result<VariationalEnd, OdeError> {
    check_dim(&|| field.dim(), x0)?;
    let n = field.dim();
    for d in directions {
        if d.len() != n {
            return Err(OdeError::InvalidInput(format!("direction has length {}, expected {n}", d.len())));
        }
    }
    let scales: Vec<f64> = directions.iter().map(|d| norm(d)).collect();
    let active: Vec<usize> = (0..directions.len()).filter(|&j| scales[j] > 0.0).collect();
    let m = active.len();
    let sys = ExtendedSystem { field, m, arclength: with_arclength };
    let mut y0 = Vec::with_capacity(sys.len());
    y0.extend_from_slice(x0);
    for &j in &active {
        y0.extend(directions[j].iter().map(|v| v / scales[j]));
    }
    if with_arclength {
        y0.extend(std::iter::repeat_n(0.0, m + 1));
    }
    let out = drive(&sys, &y0, t_final, cfg, false, None)?;
    let y = out.y;
    let mut dirs = vec![vec![0.0; n]; directions.len()];
    for (slot, &j) in active.iter().enumerate() {
        dirs[j] = y[n * (slot + 1)..n * (slot + 2)].iter().map(|v| v * scales[j]).collect();
    }
    let (arclength, arclength_derivatives) = if with_arclength {
        let base = n * (m + 1);
        let mut ds = vec![0.0; directions.len()];
        for (slot, &j) in active.iter().enumerate() {
            ds[j] = y[base + 1 + slot] * scales[j];
        }
        (Some(y[base]), Some(ds))
    } else {
        (None, None)
    };
    Ok(VariationalEnd { state: y[..n].to_vec(), directions: dirs, arclength, arclength_derivatives })
}

/// `(phi(x0, t), D phi(x0, t) v0)`.
pub fn integrate_extended<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    v0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, Vec<f64>), OdeError> {
    let mut end = integrate_variational(field, x0, &[v0.to_vec()], t_final, cfg, false)?;
    Ok((end.state, end.directions.pop().expect("one direction")))
}

/// Full flow Jacobian `D phi(x0, t)` (row-major, `n x n`) via `n` variational
/// directions.
pub fn flow_jacobian<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_final: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>), OdeError> {
    let n = field.dim();
    let dirs: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let end = integrate_variational(field, x0, &dirs, t_final, cfg, false)?;
    let jac = nalgebra::DMatrix::from_fn(n, n, |i, j| end.directions[j][i]);
    Ok((end.state, jac))
}

/// Condition terminating [`integrate_until`].
#[derive(Debug, Clone, PartialEq)]
pub enum StopCondition {
    /// Crossing of the affine section `normal . x = offset` (either direction).
    Section { normal: Vec<f64>, offset: f64 },
    /// Accumulated arclength reaching the target.
    Arclength(f64),
    /// Elapsed time reaching the target.
    Time(f64),
}

#[derive(Debug, Clone)]
pub struct StopHit {
    pub trajectory: Trajectory,
    pub t_hit: f64,
    /// The flow was nearly tangent to the section at the hit.
    pub grazing: bool,
}

/// Integrates until `stop` is met, searching up to `t_max`.
pub fn integrate_until<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    stop: &StopCondition,
    cfg: &IntegratorConfig,
    t_max: f64,
) -> Result<StopHit, OdeError> {
    check_dim(&|| field.dim(), x0)?;
    let n = field.dim();
    match stop {
        StopCondition::Time(c) => {
            if *c > t_max {
                return Err(OdeError::NoEvent { t_max });
            }
            let trajectory = integrate(field, x0, *c, cfg)?;
            Ok(StopHit { trajectory, t_hit: *c, grazing: false })
        }
        StopCondition::Arclength(c) => {
            if !(*c > 0.0) {
                return Err(OdeError::InvalidInput("arclength target must be positive".into()));
            }
            let sys = BaseSystem { field, arclength: true };
            let mut y0 = x0.to_vec();
            y0.push(0.0);
            let target = *c;
            let g = move |y: &[f64]| y[n] - target;
            let out = drive(&sys, &y0, t_max, cfg, true, Some(EventSpec { g: &g }))?;
            let speed = norm(&out.f[..n]);
            let t_hit = out.t;
            Ok(StopHit { trajectory: build_trajectory(n, out, true), t_hit, grazing: speed == 0.0 })
        }
        StopCondition::Section { normal, offset } => {
            if normal.len() != n {
                return Err(OdeError::InvalidInput("section normal has wrong length".into()));
            }
            let sys = BaseSystem { field, arclength: false };
            let g = |y: &[f64]| dot(normal, &y[..n]) - offset;
            let out = drive(&sys, x0, t_max, cfg, true, Some(EventSpec { g: &g }))?;
            let fx = &out.f[..n];
            let denom = norm(normal) * norm(fx);
            let grazing = denom == 0.0 || dot(normal, fx).abs() < GRAZING_TOL * denom;
            if grazing {
                log::warn!("grazing section hit at t = {}", out.t);
            }
            let t_hit = out.t;
            Ok(StopHit { trajectory: build_trajectory(n, out, false), t_hit, grazing })
        }
    }
}
