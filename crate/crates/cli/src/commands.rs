use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use manifold_core::bvp::{LeftBoundary, ShootingProblem};
use manifold_core::continuation::{self, ContinuationState, ManifoldMesh, RunOutput, Termination};
use manifold_core::krylov::{verify_iteration_bound, FnOperator};
use manifold_core::models::{LinearSaddle, Lorenz, ModelSpec};
use manifold_core::ode::{IntegratorConfig, Reversed, VectorField};
use manifold_core::stability::{
    equilibrium_unstable_plane, leading_floquet, refine_periodic_orbit, FloquetOptions, FloquetPair, PeriodicOrbit, RefineOptions,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::output::{fmt_opt, read_json, Header, OutDir};

pub const ORBIT_FILE: &str = "periodic_orbit.json";
pub const MESH_FILE: &str = "mesh.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Failure of a command that still produced partial output.
#[derive(Debug)]
pub struct CommandFailure {
    pub kind: String,
    pub message: String,
    pub outputs: Vec<PathBuf>,
}

impl std::fmt::Display for CommandFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CommandFailure {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitFile {
    pub orbit: PeriodicOrbit,
    /// `true` when the Floquet pair describes the contracting direction.
    #[serde(default)]
    pub stable: bool,
    #[serde(default)]
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub state: ContinuationState,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeshFile {
    pub mesh: ManifoldMesh,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    termination: Termination,
    failure: Option<&'a continuation::Failure>,
    accepted_points: usize,
    final_intervals: usize,
    workers: usize,
    model: &'a ModelSpec,
}

fn field_of(loaded: &Loaded) -> Result<(Arc<dyn VectorField>, ModelSpec)> {
    Ok(loaded.config.model.build(Some(&loaded.base_dir))?)
}

fn floquet_opts(loaded: &Loaded) -> FloquetOptions {
    FloquetOptions { seed: loaded.config.continuation.seed, ..Default::default() }
}

/// Refines the orbit guess from the config.
fn refine(loaded: &Loaded, field: &dyn VectorField) -> Result<OrbitFile> {
    let section = loaded.config.orbit.as_ref().context("config has no [orbit] table")?;
    let (point, period) = match (&section.point, section.period) {
        (Some(p), Some(t)) => (p, t),
        _ => bail!("[orbit] needs `point` and `period` for refinement"),
    };
    let opts = RefineOptions { tol: section.tol, ..Default::default() };
    let r = refine_periodic_orbit(field, point, period, &loaded.config.integrator, &opts)?;
    log::info!("refined orbit: period {}, residual {:e} after {} iterations", r.orbit.period, r.orbit.residual, r.iterations);
    Ok(OrbitFile { orbit: r.orbit, stable: false, residual_history: r.residual_history })
}

/// Adds the Floquet pair for the configured mode. For stable modes the pair
/// comes from the reversed flow and the stored multiplier is inverted.
fn add_floquet(loaded: &Loaded, field: &Arc<dyn VectorField>, mut file: OrbitFile) -> Result<OrbitFile> {
    let cfg = &loaded.config.integrator;
    let opts = floquet_opts(loaded);
    let stable = loaded.config.mode.reverse_time();
    let pair = if stable {
        let rev = Reversed(field.clone());
        let p = leading_floquet(&rev, &file.orbit, cfg, &opts)?;
        FloquetPair { mu1: 1.0 / p.mu1, u1: p.u1, residual: p.residual }
    } else {
        leading_floquet(&**field, &file.orbit, cfg, &opts)?
    };
    log::info!("leading multiplier {} (residual {:e})", pair.mu1, pair.residual);
    file.orbit.floquet = Some(pair);
    file.stable = stable;
    Ok(file)
}

fn orbit_path(loaded: &Loaded, out: &OutDir, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match loaded.config.orbit.as_ref().and_then(|o| o.file.as_ref()) {
        Some(f) => loaded.resolve(f),
        None => out.path(ORBIT_FILE),
    }
}

pub fn refine_po(loaded: &Loaded, out: &OutDir) -> Result<Vec<PathBuf>> {
    let (field, _) = field_of(loaded)?;
    let file = refine(loaded, &*field)?;
    Ok(vec![out.write_json(ORBIT_FILE, &file)?])
}

pub fn floquet(loaded: &Loaded, out: &OutDir, orbit: Option<&Path>) -> Result<Vec<PathBuf>> {
    if !loaded.config.mode.is_periodic() {
        bail!("floquet applies to periodic-orbit modes only");
    }
    let (field, _) = field_of(loaded)?;
    let path = orbit_path(loaded, out, orbit);
    let file: OrbitFile = read_json(&path)?.body;
    let file = add_floquet(loaded, &field, file)?;
    Ok(vec![out.write_json(ORBIT_FILE, &file)?])
}

/// Left boundary for the configured mode, refining the orbit and computing
/// its Floquet pair when they are not supplied.
fn left_boundary(loaded: &Loaded, out: &OutDir, field: &Arc<dyn VectorField>, written: &mut Vec<PathBuf>) -> Result<LeftBoundary> {
    let cfg = &loaded.config;
    let reverse = cfg.mode.reverse_time();
    if cfg.mode.is_periodic() {
        let section = cfg.orbit.as_ref().context("config has no [orbit] table")?;
        let mut file = match &section.file {
            Some(f) => read_json::<OrbitFile>(&loaded.resolve(f))?.body,
            None => refine(loaded, &**field)?,
        };
        if file.orbit.floquet.is_none() || file.stable != reverse {
            file = add_floquet(loaded, field, file)?;
            written.push(out.write_json(ORBIT_FILE, &file)?);
        }
        Ok(LeftBoundary::periodic_orbit_ray(&file.orbit, cfg.start.sign, reverse)?)
    } else {
        let eq = cfg.equilibrium.as_ref().context("config has no [equilibrium] table")?;
        let plane = if reverse {
            equilibrium_unstable_plane(&Reversed(field.clone()), &eq.point)?
        } else {
            equilibrium_unstable_plane(&**field, &eq.point)?
        };
        log::info!("unstable eigenvalues {:?}", plane.eigenvalues);
        let radius = cfg.start.radius.context("start.radius is required for equilibria")?;
        Ok(LeftBoundary::equilibrium_circle(&plane, radius, reverse)?)
    }
}

/// Worker count: flag, then config, then the available cores; capped at the
/// number of segments.
pub fn worker_count(flag: Option<usize>, config: Option<usize>, segments: usize) -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    flag.or(config).unwrap_or(cores).clamp(1, segments.max(1))
}

fn build_problem(loaded: &Loaded, out: &OutDir, workers: Option<usize>, written: &mut Vec<PathBuf>) -> Result<(ShootingProblem, ModelSpec)> {
    let (field, spec) = field_of(loaded)?;
    let left = left_boundary(loaded, out, &field, written)?;
    let cfg = &loaded.config;
    let w = worker_count(workers, cfg.workers, cfg.bcs.len());
    let p = ShootingProblem::new(field, left, cfg.bcs.clone(), cfg.integrator.clone())?.with_workers(w)?;
    Ok((p, spec))
}

pub fn continue_run(loaded: &Loaded, out: &OutDir, workers: Option<usize>, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let (p, spec) = build_problem(loaded, out, workers, &mut written)?;
    let cc = &loaded.config.continuation;
    let result = match checkpoint {
        Some(path) => {
            let env = read_json::<CheckpointFile>(path)?;
            // Extending a run changes limits such as max_steps, so a different
            // hash is expected; resume rejects layouts that do not fit.
            if env.header.config_hash != loaded.hash {
                log::warn!("checkpoint {} was written with config hash {}", path.display(), env.header.config_hash);
            }
            continuation::resume(&p, env.body.state, cc)?
        }
        None => {
            let z0 = p.seed_initial_solution(loaded.config.start.value, loaded.config.start.t_max)?;
            continuation::run(&p, &z0, cc)?
        }
    };
    written.extend(write_run(out, &result, &spec)?);
    if let Some(f) = &result.failure {
        return Err(CommandFailure { kind: f.kind.clone(), message: f.message.clone(), outputs: written }.into());
    }
    Ok(written)
}

fn write_run(out: &OutDir, r: &RunOutput, spec: &ModelSpec) -> Result<Vec<PathBuf>> {
    let mut mesh = r.mesh.clone();
    mesh.metadata.model = Some(spec.name.clone());
    let mut paths = vec![out.write_json(MESH_FILE, &MeshFile { mesh })?];
    paths.push(out.write_csv(
        "diagram.csv",
        &["step", "delta", "eps", "total_tau", "fold"],
        r.diagram
            .iter()
            .map(|d| vec![d.step.to_string(), d.param.to_string(), fmt_opt(d.eps), d.total_tau.to_string(), u8::from(d.fold).to_string()]),
    )?);
    paths.push(out.write_csv(
        "convergence.csv",
        &["continuation_step", "newton_iter", "gmres_iter", "relative_residual"],
        r.convergence
            .iter()
            .map(|c| vec![c.step.to_string(), c.newton_iter.to_string(), c.gmres_iter.to_string(), c.relative_residual.to_string()]),
    )?);
    paths.push(out.write_csv(
        "newton.csv",
        &["continuation_step", "newton_iter", "residual", "gmres_iterations"],
        r.newton
            .iter()
            .map(|n| vec![n.step.to_string(), n.newton_iter.to_string(), n.residual.to_string(), n.gmres_iterations.to_string()]),
    )?);
    paths.push(out.write_csv(
        "timing.csv",
        &["step", "workers", "wall_seconds", "segment", "segment_seconds"],
        r.timing.iter().flat_map(|t| {
            t.segment_seconds.iter().enumerate().map(move |(i, s)| {
                vec![t.step.to_string(), t.workers.to_string(), t.wall_seconds.to_string(), i.to_string(), s.to_string()]
            })
        }),
    )?);
    paths.push(out.write_json(CHECKPOINT_FILE, &CheckpointFile { state: r.checkpoint.clone() })?);
    let summary = RunSummary {
        termination: r.termination,
        failure: r.failure.as_ref(),
        accepted_points: r.mesh.orbits.len(),
        final_intervals: r.problem.k(),
        workers: r.problem.workers(),
        model: spec,
    };
    paths.push(out.write_json("run.json", &summary)?);
    Ok(paths)
}

pub fn export(loaded: Option<&Loaded>, out: &OutDir, mesh: Option<&Path>) -> Result<Vec<PathBuf>> {
    let path = mesh.map(Path::to_path_buf).unwrap_or_else(|| out.path(MESH_FILE));
    let env = read_json::<MeshFile>(&path)?;
    if let Some(l) = loaded {
        if env.header.config_hash != l.hash {
            log::warn!("{} was written with config hash {}", path.display(), env.header.config_hash);
        }
    }
    let mesh = env.body.mesh;
    let n = mesh.metadata.dim;
    let coords: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let mut cols = vec!["step", "sample", "param", "eps", "fold"];
    cols.extend(coords.iter().map(String::as_str));
    let samples = out.write_csv(
        "mesh_samples.csv",
        &cols,
        mesh.orbits.iter().flat_map(|o| {
            o.samples.iter().enumerate().map(move |(j, x)| {
                let mut row = vec![o.step.to_string(), j.to_string(), o.param.to_string(), fmt_opt(o.eps), u8::from(o.fold).to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                row
            })
        }),
    )?;
    let mut cols = vec!["step", "segment", "time"];
    cols.extend(coords.iter().map(String::as_str));
    let segments = out.write_csv(
        "mesh_segments.csv",
        &cols,
        mesh.orbits.iter().flat_map(|o| {
            o.segment_starts.iter().zip(&o.segment_times).enumerate().map(move |(i, (x, t))| {
                let mut row = vec![o.step.to_string(), i.to_string(), t.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                row
            })
        }),
    )?;
    Ok(vec![samples, segments])
}

#[derive(Debug, Serialize)]
struct VerifyCase {
    name: String,
    intervals: usize,
    unknowns: usize,
    gmres_iterations: Option<usize>,
    gmres_bound: usize,
    gmres_tolerance: f64,
    gmres_held: bool,
    /// Eigenvalues of the dense bordered operator within `1e-6` of 1.
    eigenvalues_near_one: Option<usize>,
    multiplicity_required: usize,
    rank_deficiency: Option<usize>,
    rank_deficiency_required: usize,
    jacobian_max_relative_error: f64,
    passed: bool,
    #[serde(skip)]
    gmres_history: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    passed: bool,
    cases: Vec<VerifyCase>,
}

const LORENZ_AB_POINT: [f64; 3] = [-13.763610682134, -19.578751942452, 27.0];
const LORENZ_AB_PERIOD: f64 = 1.558652210716;

fn builtin_problems(cfg: &IntegratorConfig) -> Result<Vec<(String, ShootingProblem)>> {
    let mut out = Vec::new();
    let lorenz = Lorenz::standard();
    let mut po = refine_periodic_orbit(&lorenz, &LORENZ_AB_POINT, LORENZ_AB_PERIOD, cfg, &RefineOptions::default())?.orbit;
    po.floquet = Some(leading_floquet(&lorenz, &po, cfg, &FloquetOptions::default())?);
    let section = manifold_core::bvp::BoundaryCondition::poincare(vec![0.0, 0.0, 1.0], 27.0)?;
    for k in [2, 3] {
        let mut bcs = vec![manifold_core::bvp::BoundaryCondition::FixedTime { target: 0.5 * po.period }];
        bcs.extend((1..k).map(|i| if i % 2 == 1 { section.clone() } else { manifold_core::bvp::BoundaryCondition::FixedTime { target: 0.4 } }));
        let left = LeftBoundary::periodic_orbit_ray(&po, 1.0, false)?;
        out.push((format!("lorenz k={k}"), ShootingProblem::new(Arc::new(lorenz), left, bcs, cfg.clone())?));
    }
    let saddle = LinearSaddle::new(0.5, 1.0, 6)?;
    let mut spo = PeriodicOrbit { base_point: saddle.periodic_point(), period: saddle.period(), residual: 0.0, floquet: None };
    spo.floquet = Some(leading_floquet(&saddle, &spo, cfg, &FloquetOptions::default())?);
    let u = spo.floquet.as_ref().map(|f| f.u1.clone()).unwrap_or_default();
    let inward = if u.iter().zip(&spo.base_point).map(|(a, b)| a * b).sum::<f64>() < 0.0 { 1.0 } else { -1.0 };
    for k in [2, 3] {
        let bcs = (0..k).map(|_| manifold_core::bvp::BoundaryCondition::FixedTime { target: 0.3 }).collect();
        let left = LeftBoundary::periodic_orbit_ray(&spo, inward, false)?;
        out.push((format!("linear_saddle n=6 k={k}"), ShootingProblem::new(Arc::new(saddle.clone()), left, bcs, cfg.clone())?));
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest problem for which `verify` assembles the dense operator.
const DENSE_VERIFY_LIMIT: usize = 400;

fn verify_case(name: String, p: &ShootingProblem, z0: &[f64], seed: u64) -> Result<VerifyCase> {
    let cc = continuation::ContinuationConfig::default();
    let t0 = continuation::tangent_fd(z0, None, None)?;
    let z = continuation::correct(p, z0, &t0, &cc)?.z;
    let t = continuation::kernel_tangent(p, &z, &t0)?;
    let nn = p.unknowns();
    let (n, k) = (p.n(), p.k());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rhs: Vec<f64> = (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let op = FnOperator::new(nn, |v: &[f64]| p.jacobian_apply(&z, &t, v));
    let bound = verify_iteration_bound(&op, &rhs, k)?;

    let mut jac_err = 0.0f64;
    for _ in 0..5 {
        let v: Vec<f64> = (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jv = p.residual_derivative(&z, &v)?;
        let h = 1e-6 * (1.0 + norm(&z)) / norm(&v);
        let zp: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (fp, fm) = (p.residual(&zp)?, p.residual(&zm)?);
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let diff: Vec<f64> = jv.iter().zip(&fd).map(|(a, b)| a - b).collect();
        jac_err = jac_err.max(norm(&diff) / norm(&fd).max(f64::MIN_POSITIVE));
    }

    let required = (k - 1) * (n - 1);
    let (near_one, deficiency) = if nn <= DENSE_VERIFY_LIMIT {
        let a = p.assemble_dense(&z, &t)?;
        let near = a.complex_eigenvalues().iter().filter(|l| (l.re - 1.0).hypot(l.im) <= 1e-6).count();
        let shifted = &a - DMatrix::identity(nn, nn);
        let sv = shifted.singular_values();
        let thresh = sv.max() * nn as f64 * f64::EPSILON;
        (Some(near), Some(sv.iter().filter(|s| **s <= thresh).count()))
    } else {
        (None, None)
    };
    let passed = bound.held
        && jac_err <= 1e-5
        && near_one.is_none_or(|m| m >= required)
        && deficiency.is_none_or(|d| d >= n - 1);
    Ok(VerifyCase {
        name,
        intervals: k,
        unknowns: nn,
        gmres_iterations: bound.iterations_needed,
        gmres_bound: bound.bound,
        gmres_tolerance: bound.tolerance,
        gmres_held: bound.held,
        eigenvalues_near_one: near_one,
        multiplicity_required: required,
        rank_deficiency: deficiency,
        rank_deficiency_required: n - 1,
        jacobian_max_relative_error: jac_err,
        passed,
        gmres_history: bound.residual_history,
    })
}

/// Dense oracles and the iteration bound on the bundled small problems, plus
/// the configured problem when a config is given.
pub fn verify(loaded: Option<&Loaded>, out: &OutDir, workers: Option<usize>) -> Result<Vec<PathBuf>> {
    let integ = IntegratorConfig::with_tol(1e-11, 1e-13);
    let mut cases = Vec::new();
    for (name, p) in builtin_problems(&integ)? {
        let z0 = p.seed_initial_solution(1e-4, 100.0)?;
        cases.push(verify_case(name, &p, &z0, 1)?);
    }
    let mut written = Vec::new();
    if let Some(l) = loaded {
        let (p, spec) = build_problem(l, out, workers, &mut written)?;
        let z0 = p.seed_initial_solution(l.config.start.value, l.config.start.t_max)?;
        cases.push(verify_case(format!("config: {}", spec.name), &p, &z0, l.config.continuation.seed)?);
    }
    written.push(out.write_csv(
        "verify_convergence.csv",
        &["case", "gmres_iter", "relative_residual"],
        cases
            .iter()
            .flat_map(|c| c.gmres_history.iter().enumerate().map(|(i, r)| vec![c.name.clone(), i.to_string(), r.to_string()])),
    )?);
    for c in &cases {
        log::info!(
            "{}: GMRES {:?} of {} iterations, eigenvalues near 1 {:?} (need {}), Jacobian error {:.1e}: {}",
            c.name,
            c.gmres_iterations,
            c.gmres_bound,
            c.eigenvalues_near_one,
            c.multiplicity_required,
            c.jacobian_max_relative_error,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    let report = VerifyReport { passed: cases.iter().all(|c| c.passed), cases };
    written.push(out.write_json("verify.json", &report)?);
    if !report.passed {
        let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(CommandFailure { kind: "verification_failed".into(), message: format!("failed cases: {}", failed.join(", ")), outputs: written }.into());
    }
    Ok(written)
}

pub fn header_for(loaded: Option<&Loaded>) -> Header {
    Header::new(loaded.map_or("none", |l| l.hash.as_str()))
}

pub fn missing(what: &str) -> anyhow::Error {
    anyhow!("{what} requires --config")
}
