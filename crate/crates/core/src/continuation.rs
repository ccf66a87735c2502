//! Pseudo-arclength continuation of the shooting problem: secant predictor,
//! bordered Newton-Krylov corrector, step control, fold flags, interval
//! splitting and mesh accumulation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bvp::{Anchor, BoundaryCondition, Layout, LeftBoundary, ShootingProblem};
use crate::error::{Error, Result};
use crate::krylov::{gmres, FnOperator, LinearOperator};
use crate::linalg::{axpy, dot, norm, sub};
use crate::ode::{flow, integrate_extended, integrate_with_arclength, Trajectory};
use crate::stability::segment_amplification;

const GROW: f64 = 1.3;
const SHRINK: f64 = 0.5;
/// Newton iteration count up to which the step grows.
const FAST_NEWTON: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationConfig {
    pub ds0: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub newton_tol: f64,
    pub newton_max: usize,
    /// Cap on the relative GMRES tolerance `d = min(gmres_tol, |F|)`.
    pub gmres_tol: f64,
    /// Accepted steps after the seed.
    pub max_steps: usize,
    /// Stop once the left-boundary parameter exceeds this value.
    pub max_param: Option<f64>,
    pub min_param: Option<f64>,
    /// Stop once the total integration time exceeds this value.
    pub max_total_time: Option<f64>,
    /// Segments whose flow-map norm exceeds this are split.
    pub amplification_threshold: f64,
    pub amplification_probes: usize,
    pub max_intervals: usize,
    /// Largest accepted distance between consecutive points in `z`; `None`
    /// means `2 ds_max`.
    pub mesh_gap: Option<f64>,
    pub samples_per_orbit: usize,
    /// Locate flagged folds by root finding on the kernel tangent and add
    /// the fold orbit to the mesh.
    pub refine_folds: bool,
    pub seed: u64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            ds0: 0.05,
            ds_min: 1e-6,
            ds_max: 0.5,
            newton_tol: 1e-8,
            newton_max: 8,
            gmres_tol: 1e-3,
            max_steps: 100,
            max_param: None,
            min_param: None,
            max_total_time: None,
            amplification_threshold: 1e6,
            amplification_probes: 3,
            max_intervals: 64,
            mesh_gap: None,
            samples_per_orbit: 200,
            refine_folds: true,
            seed: 1,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if !(self.ds_min > 0.0 && self.ds_min <= self.ds0 && self.ds0 <= self.ds_max) {
            return bad("need 0 < ds_min <= ds0 <= ds_max");
        }
        if !(self.newton_tol > 0.0 && self.gmres_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.newton_max == 0 {
            return bad("newton_max must be at least 1");
        }
        if !(self.amplification_threshold > 1.0) {
            return bad("amplification_threshold must exceed 1");
        }
        if self.mesh_gap.is_some_and(|g| !(g > 0.0)) {
            return bad("mesh_gap must be positive");
        }
        if self.samples_per_orbit < 2 {
            return bad("samples_per_orbit must be at least 2");
        }
        Ok(())
    }

    pub fn mesh_gap(&self) -> f64 {
        self.mesh_gap.unwrap_or(2.0 * self.ds_max)
    }
}

/// One Newton iteration of the corrector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonIteration {
    /// `|F|` before the update.
    pub residual: f64,
    /// Relative GMRES residuals, starting at 1.
    pub gmres_history: Vec<f64>,
    pub gmres_iterations: usize,
    pub gmres_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub z: Vec<f64>,
    /// Number of Newton updates applied.
    pub iterations: Vec<NewtonIteration>,
    pub final_residual: f64,
    /// `|F|` before every update and after the last.
    pub residuals: Vec<f64>,
    /// `|t . sum dz| / |sum dz|` (zero when nothing moved).
    pub orthogonality: f64,
}

/// Newton-Krylov solve of `F(z) = 0, t . (z - z_pred) = 0` from `z_pred`.
pub fn correct(p: &ShootingProblem, z_pred: &[f64], tangent: &[f64], cfg: &ContinuationConfig) -> Result<Correction> {
    let nn = p.unknowns();
    if z_pred.len() != nn || tangent.len() != nn {
        return Err(Error::InvalidInput("prediction or tangent has wrong length".into()));
    }
    let mut z = z_pred.to_vec();
    let mut iterations = Vec::new();
    let mut residuals = Vec::new();
    loop {
        let f = p.residual(&z)?;
        let r = norm(&f);
        residuals.push(r);
        if !r.is_finite() || r > 1e6 * (residuals[0] + cfg.newton_tol) {
            return Err(Error::NewtonDiverged { iterations: iterations.len(), residual: r });
        }
        if r <= cfg.newton_tol {
            let total = sub(&z, z_pred);
            let moved = norm(&total);
            let orthogonality = if moved > 0.0 { dot(tangent, &total).abs() / moved } else { 0.0 };
            return Ok(Correction { z, iterations, final_residual: r, residuals, orthogonality });
        }
        if iterations.len() >= cfg.newton_max {
            return Err(Error::NewtonDiverged { iterations: iterations.len(), residual: r });
        }
        let zc = z.clone();
        let op = FnOperator::new(nn, |v: &[f64]| p.jacobian_apply(&zc, tangent, v));
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        rhs.push(0.0);
        let d = cfg.gmres_tol.min(r);
        let rep = gmres(&op, &rhs, d, op.dim())?;
        let mut dz = rep.solution;
        // Keep the update exactly in the hyperplane orthogonal to the tangent.
        let c = dot(tangent, &dz);
        axpy(-c, tangent, &mut dz);
        for (zi, di) in z.iter_mut().zip(&dz) {
            *zi += di;
        }
        iterations.push(NewtonIteration {
            residual: r,
            gmres_iterations: rep.iterations,
            gmres_history: rep.residual_history,
            gmres_tol: d,
        });
    }
}

/// Secant tangent `(z - z_prev) / |z - z_prev|` oriented along `previous`;
/// the first step (`z_prev = None`) uses the last unit vector.
pub fn tangent_fd(z: &[f64], z_prev: Option<&[f64]>, previous: Option<&[f64]>) -> Result<Vec<f64>> {
    let Some(zp) = z_prev else {
        let mut t = vec![0.0; z.len()];
        *t.last_mut().ok_or_else(|| Error::InvalidInput("empty unknown vector".into()))? = 1.0;
        return Ok(t);
    };
    let mut t = sub(z, zp);
    let len = norm(&t);
    if !(len > 0.0) {
        return Err(Error::DegenerateTangent);
    }
    t.iter_mut().for_each(|v| *v /= len);
    if let Some(prev) = previous {
        if prev.len() == t.len() && dot(prev, &t) < 0.0 {
            t.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(t)
}

/// Unit kernel direction of `DF(z)` oriented by `reference`, from the
/// bordered system `[DF; reference^T] x = e_N`.
pub fn kernel_tangent(p: &ShootingProblem, z: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    let nn = p.unknowns();
    let op = FnOperator::new(nn, |v: &[f64]| p.jacobian_apply(z, reference, v));
    let mut rhs = vec![0.0; nn];
    rhs[nn - 1] = 1.0;
    let rep = gmres(&op, &rhs, 1e-12, nn)?;
    let len = norm(&rep.solution);
    if !(len > 0.0) || !rep.solution.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular("bordered tangent system".into()));
    }
    Ok(rep.solution.iter().map(|v| v / len).collect())
}

/// Finds the fold on the branch near `z0`, where the parameter component of
/// the kernel tangent vanishes. The root is bracketed within `ds` along the
/// predictor direction `t0`, ahead of `z0` first and then behind it, since a
/// secant tangent lags the branch. Returns `None` when no sign change is
/// bracketed.
pub fn locate_fold(p: &ShootingProblem, z0: &[f64], t0: &[f64], ds: f64, cfg: &ContinuationConfig) -> Result<Option<Correction>> {
    let ip = p.layout().param();
    let eval = |sigma: f64| -> Result<(Correction, f64)> {
        let mut zp = z0.to_vec();
        axpy(sigma, t0, &mut zp);
        let c = correct(p, &zp, t0, cfg)?;
        let k = kernel_tangent(p, &c.z, t0)?;
        Ok((c, k[ip]))
    };
    let f0 = kernel_tangent(p, z0, t0)?[ip];
    let (mut hi, (mut hi_c, mut fh)) = (ds, eval(ds)?);
    if f0 * fh > 0.0 {
        hi = -ds;
        (hi_c, fh) = eval(hi)?;
        if f0 * fh > 0.0 {
            return Ok(None);
        }
    }
    let (mut lo, mut fl) = (0.0, f0);
    let mut side = 0;
    for _ in 0..60 {
        if (hi - lo).abs() <= 1e-12 * ds || fh.abs() <= 1e-12 {
            break;
        }
        let (a, b) = (lo.min(hi), lo.max(hi));
        let mut sigma = hi - fh * (hi - lo) / (fh - fl);
        if !(sigma > a && sigma < b) {
            sigma = 0.5 * (lo + hi);
        }
        let (c, fm) = eval(sigma)?;
        if fm * fh < 0.0 {
            lo = hi;
            fl = fh;
            side = 0;
        } else if side == 1 {
            fl *= 0.5;
        } else {
            side = 1;
        }
        hi = sigma;
        fh = fm;
        hi_c = c;
    }
    Ok(Some(hi_c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Converged(usize),
    Rejected,
}

pub fn step_control(outcome: StepOutcome, ds: f64, cfg: &ContinuationConfig) -> Result<f64> {
    match outcome {
        StepOutcome::Rejected => {
            if ds <= cfg.ds_min {
                Err(Error::StepSizeUnderflow { ds_min: cfg.ds_min })
            } else {
                Ok((SHRINK * ds).max(cfg.ds_min))
            }
        }
        StepOutcome::Converged(m) if m <= FAST_NEWTON => Ok((GROW * ds).min(cfg.ds_max)),
        StepOutcome::Converged(_) => Ok(ds),
    }
}

fn unpack(lay: Layout, z: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let starts = (1..lay.k).map(|i| z[lay.point(i)].to_vec()).collect();
    let taus = (0..lay.k).map(|i| z[lay.tau(i)]).collect();
    (starts, taus, z[lay.param()])
}

fn pack(starts: &[Vec<f64>], taus: &[f64], param: f64) -> Vec<f64> {
    let mut z: Vec<f64> = starts.iter().flatten().copied().collect();
    z.extend_from_slice(taus);
    z.push(param);
    z
}

/// Result of interval management: the rewritten problem and state.
#[derive(Debug, Clone)]
pub struct Split {
    pub problem: ShootingProblem,
    pub z: Vec<f64>,
    pub tangent: Vec<f64>,
    /// Indices (in the original numbering) of the segments that were split.
    pub split: Vec<usize>,
}

/// Amplification estimates of all segments at `z`.
pub fn segment_amplifications(p: &ShootingProblem, z: &[f64], cfg: &ContinuationConfig) -> Result<Vec<f64>> {
    (0..p.k())
        .map(|i| {
            segment_amplification(&**p.field(), &p.segment_start(z, i), p.segment_time(z, i), p.integrator(), cfg.amplification_probes, cfg.seed)
                .map_err(|e| match e {
                    Error::Ode(source) => Error::Segment { segment: i, source },
                    other => other,
                })
        })
        .collect()
}

/// Splits every segment whose amplification exceeds the threshold at its
/// time midpoint, repeating until all segments pass or `max_intervals` is
/// reached. Returns `None` when nothing changed.
pub fn manage_intervals(p: &ShootingProblem, z: &[f64], tangent: &[f64], cfg: &ContinuationConfig) -> Result<Option<Split>> {
    let mut cur = Split { problem: p.clone(), z: z.to_vec(), tangent: tangent.to_vec(), split: Vec::new() };
    // Original index of each current segment.
    let mut origin: Vec<usize> = (0..p.k()).collect();
    loop {
        let amps = segment_amplifications(&cur.problem, &cur.z, cfg)?;
        let offenders: Vec<usize> = (0..amps.len()).filter(|&i| amps[i] > cfg.amplification_threshold).collect();
        if offenders.is_empty() || cur.problem.k() >= cfg.max_intervals {
            break;
        }
        for &i in offenders.iter().rev() {
            if cur.problem.k() >= cfg.max_intervals {
                break;
            }
            cur = split_segment(&cur.problem, &cur.z, &cur.tangent, i, cur.split)?;
            cur.split.push(origin[i]);
            origin.insert(i + 1, origin[i]);
        }
    }
    if cur.split.is_empty() {
        return Ok(None);
    }
    cur.split.sort_unstable();
    cur.split.dedup();
    Ok(Some(cur))
}

fn split_segment(p: &ShootingProblem, z: &[f64], tangent: &[f64], i: usize, split: Vec<usize>) -> Result<Split> {
    let lay = p.layout();
    let half = 0.5 * p.segment_time(z, i);
    let x0 = p.segment_start(z, i);
    let dx0 = if i == 0 {
        p.left().derivative(z[lay.param()]).iter().map(|d| d * tangent[lay.param()]).collect()
    } else {
        tangent[lay.point(i)].to_vec()
    };
    let (mid, dmid) = if norm(&dx0) > 0.0 {
        integrate_extended(&**p.field(), &x0, &dx0, half, p.integrator())
    } else {
        flow(&**p.field(), &x0, half, p.integrator(), false).map(|(x, _)| (x, vec![0.0; lay.n]))
    }
    .map_err(|source| Error::Segment { segment: i, source })?;

    // Time and arclength targets are cumulative along the segment, so the
    // second half keeps only what remains after the first.
    let mut bcs = p.bcs().to_vec();
    bcs[i] = match &bcs[i] {
        BoundaryCondition::FixedTime { target } => BoundaryCondition::FixedTime { target: target - half },
        BoundaryCondition::Arclength { target } => {
            let (_, s) = flow(&**p.field(), &x0, half, p.integrator(), true).map_err(|source| Error::Segment { segment: i, source })?;
            let rest = target - s.expect("requested");
            if !(rest > 0.0) {
                return Err(Error::InvalidInput(format!("segment {i} cannot be split: no arclength left for the second half")));
            }
            BoundaryCondition::Arclength { target: rest }
        }
        other => other.clone(),
    };
    bcs.insert(i, BoundaryCondition::FixedTime { target: half });
    let problem = p.with_bcs(bcs)?;

    let (mut starts, mut taus, param) = unpack(lay, z);
    starts.insert(i, mid);
    let tau = taus[i];
    taus.splice(i..=i, [0.5 * tau, 0.5 * tau]);
    let z_new = pack(&starts, &taus, param);

    let (mut dstarts, mut dtaus, dparam) = unpack(lay, tangent);
    dstarts.insert(i, dmid);
    let dtau = dtaus[i];
    dtaus.splice(i..=i, [0.0, dtau]);
    let mut t_new = pack(&dstarts, &dtaus, dparam);
    let tn = norm(&t_new);
    t_new.iter_mut().for_each(|v| *v /= tn);
    Ok(Split { problem, z: z_new, tangent: t_new, split })
}

/// Everything needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState {
    pub step: usize,
    pub bcs: Vec<BoundaryCondition>,
    pub z: Vec<f64>,
    pub tangent: Vec<f64>,
    /// Previous accepted point in the current layout (none right after a
    /// seed or an interval split).
    pub z_prev: Option<Vec<f64>>,
    pub ds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshOrbit {
    pub step: usize,
    pub k: usize,
    pub z: Vec<f64>,
    pub tangent: Vec<f64>,
    /// Left-boundary parameter (`ln eps` or angle).
    pub param: f64,
    pub eps: Option<f64>,
    pub total_time: f64,
    pub segment_starts: Vec<Vec<f64>>,
    pub segment_times: Vec<f64>,
    pub newton_iterations: usize,
    pub residual: f64,
    pub gluing_error: f64,
    pub fold: bool,
    /// Distance to the previous orbit in the unknown vector.
    pub gap: Option<f64>,
    /// Orbit samples at uniform arclength spacing.
    pub samples: Vec<Vec<f64>>,
    pub arclength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshMetadata {
    pub dim: usize,
    pub left: LeftBoundary,
    pub initial_bcs: Vec<BoundaryCondition>,
    pub param_kind: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub created: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldMesh {
    pub metadata: MeshMetadata,
    pub orbits: Vec<MeshOrbit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramRow {
    pub step: usize,
    pub param: f64,
    pub eps: Option<f64>,
    pub total_tau: f64,
    pub fold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub step: usize,
    pub newton_iter: usize,
    pub gmres_iter: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonRow {
    pub step: usize,
    pub newton_iter: usize,
    pub residual: f64,
    pub gmres_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: usize,
    pub wall_seconds: f64,
    pub workers: usize,
    pub segment_seconds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxSteps,
    ParamLimit,
    TimeLimit,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for Failure {
    fn from(e: &Error) -> Self {
        Self { kind: e.kind().into(), message: e.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mesh: ManifoldMesh,
    pub diagram: Vec<DiagramRow>,
    pub convergence: Vec<ConvergenceRow>,
    pub newton: Vec<NewtonRow>,
    pub timing: Vec<TimingRow>,
    /// Resume point after the last accepted step.
    pub checkpoint: ContinuationState,
    /// The problem in its final layout.
    pub problem: ShootingProblem,
    pub termination: Termination,
    pub failure: Option<Failure>,
}

fn sample_orbit(trajs: &[Trajectory], count: usize) -> (Vec<Vec<f64>>, f64) {
    let lengths: Vec<f64> = trajs.iter().map(|t| t.arclength(t.len() - 1).unwrap_or(0.0)).collect();
    let total: f64 = lengths.iter().sum();
    let mut out = Vec::with_capacity(count);
    let (mut seg, mut offset) = (0, 0.0);
    for j in 0..count {
        let target = total * j as f64 / (count - 1) as f64;
        while seg + 1 < trajs.len() && target > offset + lengths[seg] {
            offset += lengths[seg];
            seg += 1;
        }
        let tr = &trajs[seg];
        let s = (target - offset).clamp(0.0, lengths[seg]);
        out.push(tr.dense_eval(invert_arclength(tr, s)));
    }
    (out, total)
}

/// Time at which the dense arclength reaches `s`.
fn invert_arclength(tr: &Trajectory, s: f64) -> f64 {
    let times = tr.times();
    let idx = (1..tr.len()).find(|&i| tr.arclength(i).unwrap_or(0.0) >= s).unwrap_or(tr.len() - 1);
    if idx == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (times[idx - 1], times[idx]);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tr.dense_arclength(mid).unwrap_or(0.0) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn param_kind(left: &LeftBoundary) -> &'static str {
    match left.anchor {
        Anchor::PeriodicOrbitRay { .. } => "log_eps",
        Anchor::EquilibriumCircle { .. } => "angle",
    }
}

struct Driver {
    p: ShootingProblem,
    cfg: ContinuationConfig,
    out_mesh: Vec<MeshOrbit>,
    diagram: Vec<DiagramRow>,
    convergence: Vec<ConvergenceRow>,
    newton: Vec<NewtonRow>,
    timing: Vec<TimingRow>,
}

impl Driver {
    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, step: usize, corr: &Correction, tangent: &[f64], fold: bool, gap: Option<f64>, wall: f64) -> Result<()> {
        let p = &self.p;
        let lay = p.layout();
        let z = &corr.z;
        let param = z[lay.param()];
        let eps = matches!(p.left().anchor, Anchor::PeriodicOrbitRay { .. }).then(|| param.exp());
        let (res, seg_times) = p.residual_timed(z)?;
        let trajs: Vec<Trajectory> = (0..p.k())
            .map(|i| {
                integrate_with_arclength(&**p.field(), &p.segment_start(z, i), p.segment_time(z, i), p.integrator())
                    .map_err(|source| Error::Segment { segment: i, source })
            })
            .collect::<Result<_>>()?;
        let (samples, arclength) = sample_orbit(&trajs, self.cfg.samples_per_orbit);
        let gluing_error = (0..lay.k - 1).map(|i| norm(&res[i * lay.n..(i + 1) * lay.n])).fold(0.0, f64::max);
        let total_tau: f64 = (0..p.k()).map(|i| z[lay.tau(i)]).sum();
        self.out_mesh.push(MeshOrbit {
            step,
            k: p.k(),
            z: z.clone(),
            tangent: tangent.to_vec(),
            param,
            eps,
            total_time: p.total_time(z),
            segment_starts: (0..p.k()).map(|i| p.segment_start(z, i)).collect(),
            segment_times: (0..p.k()).map(|i| p.segment_time(z, i)).collect(),
            newton_iterations: corr.iterations.len(),
            residual: corr.final_residual,
            gluing_error,
            fold,
            gap,
            samples,
            arclength,
        });
        self.diagram.push(DiagramRow { step, param, eps, total_tau, fold });
        for (j, it) in corr.iterations.iter().enumerate() {
            for (g, rel) in it.gmres_history.iter().enumerate() {
                self.convergence.push(ConvergenceRow { step, newton_iter: j, gmres_iter: g, relative_residual: *rel });
            }
            self.newton.push(NewtonRow { step, newton_iter: j, residual: it.residual, gmres_iterations: it.gmres_iterations });
        }
        self.newton.push(NewtonRow { step, newton_iter: corr.iterations.len(), residual: corr.final_residual, gmres_iterations: 0 });
        self.timing.push(TimingRow {
            step,
            wall_seconds: wall,
            workers: p.workers(),
            segment_seconds: seg_times.iter().map(|d| d.as_secs_f64()).collect(),
        });
        Ok(())
    }

    fn finish(self, state: ContinuationState, termination: Termination, failure: Option<Failure>, metadata: MeshMetadata) -> RunOutput {
        RunOutput {
            mesh: ManifoldMesh { metadata, orbits: self.out_mesh },
            diagram: self.diagram,
            convergence: self.convergence,
            newton: self.newton,
            timing: self.timing,
            checkpoint: state,
            problem: self.p,
            termination,
            failure,
        }
    }
}

fn metadata(p: &ShootingProblem) -> MeshMetadata {
    MeshMetadata {
        dim: p.n(),
        left: p.left().clone(),
        initial_bcs: p.bcs().to_vec(),
        param_kind: param_kind(p.left()).into(),
        model: None,
        created: None,
    }
}

/// Corrects the seed `z0` and continues from it. Setup errors (bad config,
/// seed not converging) are returned as `Err`; failures during the run end
/// it early with the partial mesh kept.
pub fn run(p: &ShootingProblem, z0: &[f64], cfg: &ContinuationConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let t0 = tangent_fd(z0, None, None)?;
    let corr = correct(p, z0, &t0, cfg)?;
    let mut driver = Driver {
        p: p.clone(),
        cfg: cfg.clone(),
        out_mesh: Vec::new(),
        diagram: Vec::new(),
        convergence: Vec::new(),
        newton: Vec::new(),
        timing: Vec::new(),
    };
    driver.record(0, &corr, &t0, false, None, start.elapsed().as_secs_f64())?;
    let mut state = ContinuationState { step: 0, bcs: p.bcs().to_vec(), z: corr.z, tangent: t0, z_prev: None, ds: cfg.ds0 };
    if let Some(split) = manage_intervals(&driver.p, &state.z, &state.tangent, cfg)? {
        log::info!("seed: split segments {:?}, now {} intervals", split.split, split.problem.k());
        driver.p = split.problem;
        state.bcs = driver.p.bcs().to_vec();
        state.z = split.z;
        state.tangent = split.tangent;
    }
    Ok(continue_run(driver, state))
}

/// Resumes from a checkpoint. `p` supplies everything except the boundary
/// conditions, which come from the checkpoint.
pub fn resume(p: &ShootingProblem, state: ContinuationState, cfg: &ContinuationConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let p = p.with_bcs(state.bcs.clone())?;
    if state.z.len() != p.unknowns() || state.tangent.len() != p.unknowns() {
        return Err(Error::InvalidInput("checkpoint does not match the problem layout".into()));
    }
    let driver = Driver {
        p,
        cfg: cfg.clone(),
        out_mesh: Vec::new(),
        diagram: Vec::new(),
        convergence: Vec::new(),
        newton: Vec::new(),
        timing: Vec::new(),
    };
    Ok(continue_run(driver, state))
}

fn continue_run(mut driver: Driver, mut state: ContinuationState) -> RunOutput {
    let cfg = driver.cfg.clone();
    let meta = metadata(&driver.p);
    while state.step < cfg.max_steps {
        let lay = driver.p.layout();
        let param = state.z[lay.param()];
        if cfg.max_param.is_some_and(|m| param >= m) || cfg.min_param.is_some_and(|m| param <= m) {
            return driver.finish(state, Termination::ParamLimit, None, meta);
        }
        if cfg.max_total_time.is_some_and(|m| driver.p.total_time(&state.z) >= m) {
            return driver.finish(state, Termination::TimeLimit, None, meta);
        }
        match advance(&mut driver, &mut state) {
            Ok(()) => {}
            Err(e) => {
                log::error!("continuation stopped at step {}: {e}", state.step);
                let failure = Failure::from(&e);
                return driver.finish(state, Termination::Failed, Some(failure), meta);
            }
        }
    }
    driver.finish(state, Termination::MaxSteps, None, meta)
}

/// Predicts, corrects and records one accepted step, shrinking the step on
/// rejection.
fn advance(driver: &mut Driver, state: &mut ContinuationState) -> Result<()> {
    let cfg = driver.cfg.clone();
    let started = Instant::now();
    let gap_limit = cfg.mesh_gap();
    loop {
        let mut z_pred = state.z.clone();
        axpy(state.ds, &state.tangent, &mut z_pred);
        let attempt = correct(&driver.p, &z_pred, &state.tangent, &cfg).and_then(|c| {
            let gap = norm(&sub(&c.z, &state.z));
            if gap > gap_limit {
                Err(Error::InvalidInput(format!("step moved {gap:e}, beyond the mesh gap {gap_limit:e}")))
            } else {
                Ok((c, gap))
            }
        });
        let (corr, _) = match attempt {
            Ok(v) => v,
            Err(e) => {
                log::debug!("step {} rejected at ds = {:e}: {e}", state.step + 1, state.ds);
                state.ds = step_control(StepOutcome::Rejected, state.ds, &cfg)?;
                continue;
            }
        };
        let m = corr.iterations.len();
        let tangent = tangent_fd(&corr.z, Some(&state.z), Some(&state.tangent))?;
        let lay = driver.p.layout();
        let fold = tangent[lay.param()] * state.tangent[lay.param()] < 0.0;
        if fold {
            log::info!("fold between steps {} and {}", state.step, state.step + 1);
        }
        let mut prev = state.z.clone();
        let mut refined = false;
        if fold && cfg.refine_folds {
            match locate_fold(&driver.p, &state.z, &state.tangent, state.ds, &cfg) {
                Ok(Some(fc)) => {
                    let ft = kernel_tangent(&driver.p, &fc.z, &state.tangent)?;
                    let fgap = norm(&sub(&fc.z, &state.z));
                    state.step += 1;
                    driver.record(state.step, &fc, &ft, true, Some(fgap), started.elapsed().as_secs_f64())?;
                    prev = fc.z;
                    refined = true;
                }
                Ok(None) => log::warn!("fold not bracketed by the kernel tangent; flagging the accepted point"),
                Err(e) => log::warn!("fold refinement failed: {e}; flagging the accepted point"),
            }
        }
        state.step += 1;
        let gap = norm(&sub(&corr.z, &prev));
        let flag = fold && !refined;
        driver.record(state.step, &corr, &tangent, flag, Some(gap), started.elapsed().as_secs_f64())?;
        state.ds = step_control(StepOutcome::Converged(m), state.ds, &cfg)?;
        state.z_prev = Some(std::mem::replace(&mut state.z, corr.z));
        state.tangent = tangent;
        if let Some(split) = manage_intervals(&driver.p, &state.z, &state.tangent, &cfg)? {
            log::info!("step {}: split segments {:?}, now {} intervals", state.step, split.split, split.problem.k());
            driver.p = split.problem;
            state.bcs = driver.p.bcs().to_vec();
            state.z = split.z;
            state.tangent = split.tangent;
            state.z_prev = None;
        }
        return Ok(());
    }
}
