#![allow(dead_code)]

pub mod eig;

use std::sync::Arc;

use manifold_core::bvp::{BoundaryCondition, LeftBoundary, ShootingProblem};
use manifold_core::models::{LinearSaddle, Lorenz};
use manifold_core::ode::{flow, IntegratorConfig};
use manifold_core::stability::{leading_floquet, refine_periodic_orbit, FloquetOptions, PeriodicOrbit, RefineOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point on the shortest periodic orbit of the standard Lorenz system, on
/// the plane z = 27, and its period.
pub const LORENZ_AB_POINT: [f64; 3] = [-13.763610682134, -19.578751942452, 27.0];
pub const LORENZ_AB_PERIOD: f64 = 1.558652210716;

pub fn cfg() -> IntegratorConfig {
    IntegratorConfig::with_tol(1e-11, 1e-13)
}

pub fn section(normal: &[f64], offset: f64) -> BoundaryCondition {
    BoundaryCondition::poincare(normal.to_vec(), offset).unwrap()
}

pub fn fixed(t: f64) -> BoundaryCondition {
    BoundaryCondition::FixedTime { target: t }
}

pub fn lorenz_ab() -> PeriodicOrbit {
    let lorenz = Lorenz::standard();
    let mut po = refine_periodic_orbit(&lorenz, &LORENZ_AB_POINT, LORENZ_AB_PERIOD, &cfg(), &RefineOptions::default())
        .unwrap()
        .orbit;
    po.floquet = Some(leading_floquet(&lorenz, &po, &cfg(), &FloquetOptions::default()).unwrap());
    po
}

/// Mixed boundary conditions: a fixed half period first, then alternating
/// crossings of z = 27 and fixed times.
pub fn lorenz_mixed_bcs(k: usize) -> Vec<BoundaryCondition> {
    let mut bcs = vec![fixed(0.5 * LORENZ_AB_PERIOD)];
    for i in 1..k {
        bcs.push(if i % 2 == 1 { section(&[0.0, 0.0, 1.0], 27.0) } else { fixed(0.4) });
    }
    bcs
}

/// Only section crossings.
pub fn lorenz_section_bcs() -> Vec<BoundaryCondition> {
    vec![
        section(&[1.0, 0.0, 0.0], -5.0),
        section(&[0.0, 0.0, 1.0], 27.0),
        section(&[0.0, 0.0, 1.0], 27.0),
        section(&[1.0, 0.0, 0.0], 0.0),
    ]
}

pub fn lorenz_problem(po: &PeriodicOrbit, bcs: Vec<BoundaryCondition>, cfg: IntegratorConfig) -> (ShootingProblem, Vec<f64>) {
    let left = LeftBoundary::periodic_orbit_ray(po, 1.0, false).unwrap();
    let p = ShootingProblem::new(Arc::new(Lorenz::standard()), left, bcs, cfg).unwrap();
    let z = p.seed_initial_solution(1e-4, 50.0).unwrap();
    (p, z)
}

pub fn saddle_orbit(model: &LinearSaddle) -> PeriodicOrbit {
    let mut po = PeriodicOrbit { base_point: model.periodic_point(), period: model.period(), residual: 0.0, floquet: None };
    po.floquet = Some(leading_floquet(model, &po, &cfg(), &FloquetOptions::default()).unwrap());
    po
}

/// Saddle problem on the inward half of the unstable manifold. Segments
/// alternate fixed quarter turns with crossings of the `q = 0` line.
pub fn saddle_problem(model: &LinearSaddle, k: usize, cfg: IntegratorConfig) -> (ShootingProblem, Vec<f64>) {
    let po = saddle_orbit(model);
    let inward = if manifold_dot(po.u1().unwrap(), &model.periodic_point()) < 0.0 { 1.0 } else { -1.0 };
    let left = LeftBoundary::periodic_orbit_ray(&po, inward, false).unwrap();
    let q = model.basis_vector(1);
    let bcs = (0..k).map(|i| if i % 2 == 0 { fixed(0.3 * model.period()) } else { section(&q, 0.0) }).collect();
    let p = ShootingProblem::new(Arc::new(model.clone()), left, bcs, cfg).unwrap();
    let z = p.seed_initial_solution(1e-3, 50.0).unwrap();
    (p, z)
}

pub fn manifold_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn vnorm(a: &[f64]) -> f64 {
    manifold_dot(a, a).sqrt()
}

pub fn vsub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Residual evaluated from scratch: rebuild the first start point from the
/// ray, integrate each segment with the plain flow and compare.
pub fn reference_residual(po: &PeriodicOrbit, sign: f64, bcs: &[BoundaryCondition], z: &[f64], cfg: &IntegratorConfig) -> Vec<f64> {
    let lorenz = Lorenz::standard();
    let n = po.dim();
    let k = bcs.len();
    let eps = z[z.len() - 1].exp();
    let u = po.u1().unwrap();
    let mut starts = vec![po.base_point.iter().zip(u).map(|(x, v)| x + sign * eps * v).collect::<Vec<f64>>()];
    for i in 1..k {
        starts.push(z[(i - 1) * n..i * n].to_vec());
    }
    let times: Vec<f64> = (0..k).map(|i| z[(k - 1) * n + i] * po.period).collect();
    let mut gluing = Vec::new();
    let mut bc_rows = Vec::new();
    for i in 0..k {
        let want_arc = matches!(bcs[i], BoundaryCondition::Arclength { .. });
        let (end, arc) = flow(&lorenz, &starts[i], times[i], cfg, want_arc).unwrap();
        if i + 1 < k {
            gluing.extend(starts[i + 1].iter().zip(&end).map(|(a, b)| a - b));
        }
        bc_rows.push(match &bcs[i] {
            BoundaryCondition::FixedTime { target } => times[i] - target,
            BoundaryCondition::Poincare { normal, offset } => manifold_dot(normal, &end) - offset,
            BoundaryCondition::Arclength { target } => arc.unwrap() - target,
        });
    }
    gluing.extend(bc_rows);
    gluing
}

/// Random point near `z`: interior points moved by up to `spread`, times
/// scaled by up to 5% and the parameter shifted by up to 0.5.
pub fn perturb(z: &[f64], n: usize, k: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = z.to_vec();
    for v in out.iter_mut().take((k - 1) * n) {
        *v += rng.gen_range(-spread..spread);
    }
    for i in 0..k {
        out[(k - 1) * n + i] *= 1.0 + rng.gen_range(-0.05..0.05);
    }
    let last = out.len() - 1;
    out[last] += rng.gen_range(-0.5..0.5);
    out
}

pub fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = vnorm(&v);
    v.iter().map(|x| x / n).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central difference `(F(z + h v) - F(z - h v)) / 2h` with
/// `h = 1e-6 (1 + |z|)`.
pub fn fd_derivative(p: &ShootingProblem, z: &[f64], v: &[f64]) -> Vec<f64> {
    let h = 1e-6 * (1.0 + vnorm(z));
    let zp: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let zm: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let fp = p.residual(&zp).unwrap();
    let fm = p.residual(&zm).unwrap();
    fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}
