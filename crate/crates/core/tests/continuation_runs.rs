mod common;

use std::sync::Arc;

use common::*;
use manifold_core::bvp::{LeftBoundary, ShootingProblem};
use manifold_core::continuation::{manage_intervals, resume, run, segment_amplifications, tangent_fd, ContinuationConfig, ContinuationState, Termination};
use manifold_core::models::{LinearSaddle, Lorenz};
use manifold_core::ode::VectorField;
use manifold_core::stability::{dense_jacobian, equilibrium_unstable_plane};

fn short() -> ContinuationConfig {
    ContinuationConfig { max_steps: 8, ds_max: 0.3, ..Default::default() }
}

#[test]
fn lorenz_branch_is_glued_orthogonal_and_covered() {
    let po = lorenz_ab();
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(3), cfg());
    let cc = short();
    let out = run(&p, &z, &cc).unwrap();
    assert_eq!(out.termination, Termination::MaxSteps);
    assert_eq!(out.mesh.orbits.len(), cc.max_steps + 1);
    for orbit in &out.mesh.orbits {
        assert!(orbit.residual <= cc.newton_tol);
        assert!(orbit.gluing_error <= cc.newton_tol);
        if let Some(gap) = orbit.gap {
            assert!(gap <= cc.mesh_gap(), "gap {gap} at step {}", orbit.step);
        }
    }
    // eps grows along the branch.
    let eps: Vec<f64> = out.diagram.iter().map(|r| r.eps.unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] > w[0]), "{eps:?}");
}

#[test]
fn corrector_updates_stay_orthogonal_to_the_tangent() {
    let po = lorenz_ab();
    let (p, z0) = lorenz_problem(&po, lorenz_mixed_bcs(2), cfg());
    let cc = ContinuationConfig::default();
    let c0 = manifold_core::continuation::correct(&p, &z0, &tangent_fd(&z0, None, None).unwrap(), &cc).unwrap();
    let mut z1 = c0.z.clone();
    *z1.last_mut().unwrap() += 0.3;
    let c1 = manifold_core::continuation::correct(&p, &z1, &tangent_fd(&z1, None, None).unwrap(), &cc).unwrap();
    let t = tangent_fd(&c1.z, Some(&c0.z), None).unwrap();
    let mut pred = c1.z.clone();
    for (zi, ti) in pred.iter_mut().zip(&t) {
        *zi += 0.2 * ti;
    }
    let c2 = manifold_core::continuation::correct(&p, &pred, &t, &cc).unwrap();
    assert!(!c2.iterations.is_empty());
    assert!(c2.orthogonality <= 1e-9, "{:e}", c2.orthogonality);
}

#[test]
fn worker_count_does_not_change_the_branch() {
    let po = lorenz_ab();
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(3), cfg());
    let cc = short();
    let a = run(&p.clone().with_workers(1).unwrap(), &z, &cc).unwrap();
    let b = run(&p.clone().with_workers(3).unwrap(), &z, &cc).unwrap();
    assert_eq!(a.mesh.orbits.len(), b.mesh.orbits.len());
    for (x, y) in a.mesh.orbits.iter().zip(&b.mesh.orbits) {
        assert!(x.z.iter().zip(&y.z).all(|(u, v)| u.to_bits() == v.to_bits()), "step {}", x.step);
    }
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_run() {
    let po = lorenz_ab();
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(3), cfg());
    let full = run(&p, &z, &ContinuationConfig { max_steps: 6, ..short() }).unwrap();
    let half = run(&p, &z, &ContinuationConfig { max_steps: 3, ..short() }).unwrap();
    let text = serde_json::to_string(&half.checkpoint).unwrap();
    let state: ContinuationState = serde_json::from_str(&text).unwrap();
    assert_eq!(state, half.checkpoint);
    let rest = resume(&p, state, &ContinuationConfig { max_steps: 6, ..short() }).unwrap();
    let tail = &full.mesh.orbits[4..];
    assert_eq!(rest.mesh.orbits.len(), tail.len());
    for (x, y) in rest.mesh.orbits.iter().zip(tail) {
        assert_eq!(x.step, y.step);
        assert!(x.z.iter().zip(&y.z).all(|(u, v)| u.to_bits() == v.to_bits()), "step {}", x.step);
    }
}

/// Inward unstable manifold of the saddle cycle with the second segment
/// ending on the plane `p = 0.95`. The orbits shrink as eps grows, so
/// eventually one only touches the plane.
fn fold_problem() -> (LinearSaddle, ShootingProblem, Vec<f64>) {
    let model = LinearSaddle::new(0.5, 1.0, 3).unwrap();
    let po = saddle_orbit(&model);
    let inward = if manifold_dot(po.u1().unwrap(), &model.periodic_point()) < 0.0 { 1.0 } else { -1.0 };
    let left = LeftBoundary::periodic_orbit_ray(&po, inward, false).unwrap();
    let bcs = vec![fixed(0.5), section(&model.basis_vector(0), 0.95)];
    let p = ShootingProblem::new(Arc::new(model.clone()), left, bcs, cfg()).unwrap();
    let z = p.seed_initial_solution(0.003, 50.0).unwrap();
    (model, p, z)
}

#[test]
fn fold_is_a_tangency_with_the_section() {
    let (model, p, z) = fold_problem();
    let cc = ContinuationConfig { max_steps: 40, ds0: 0.02, ds_max: 0.1, ..Default::default() };
    let out = run(&p, &z, &cc).unwrap();
    let folds: Vec<_> = out.mesh.orbits.iter().filter(|o| o.fold).collect();
    assert_eq!(folds.len(), 1, "diagram: {:?}", out.diagram.iter().map(|r| (r.eps, r.total_tau)).collect::<Vec<_>>());
    let fold = folds[0];
    let w = model.basis_vector(0);
    let lay = out.problem.layout();
    let tr = out.problem.trajectories(&fold.z).unwrap();
    let end = tr[lay.k - 1].final_state();
    let mut f = vec![0.0; 3];
    model.eval(end, &mut f);
    let along = manifold_dot(&w, &f).abs();
    assert!(along <= 1e-4 * vnorm(&f), "w . f = {along:e}, |f| = {:e}", vnorm(&f));
    // The parameter turns around: eps on both sides of the fold is smaller.
    let i = out.mesh.orbits.iter().position(|o| o.fold).unwrap();
    let eps = |j: usize| out.mesh.orbits[j].eps.unwrap();
    assert!(eps(i - 1) < eps(i) && eps(i + 1) < eps(i));
}

#[test]
fn long_segments_are_split() {
    let po = lorenz_ab();
    let bcs = vec![fixed(2.0 * LORENZ_AB_PERIOD), section(&[0.0, 0.0, 1.0], 27.0)];
    let (p, z0) = lorenz_problem(&po, bcs, cfg());
    let cc = ContinuationConfig { amplification_threshold: 1e2, ..Default::default() };
    let t = tangent_fd(&z0, None, None).unwrap();
    let z = manifold_core::continuation::correct(&p, &z0, &t, &cc).unwrap().z;
    let before = segment_amplifications(&p, &z, &cc).unwrap();
    assert!(before[0] > 1e2, "{before:?}");
    let split = manage_intervals(&p, &z, &t, &cc).unwrap().expect("segment 0 is split");
    assert!(split.problem.k() > 2);
    assert!(split.split.iter().all(|&i| i == 0 || before[i] > 1e2));
    let after = segment_amplifications(&split.problem, &split.z, &cc).unwrap();
    assert!(after.iter().all(|a| *a <= 1e2), "{after:?}");
    let r = split.problem.residual(&split.z).unwrap();
    assert!(vnorm(&r) <= 1e-8, "{:e}", vnorm(&r));
    assert!((split.problem.total_time(&split.z) - p.total_time(&z)).abs() <= 1e-12 * p.total_time(&z));
}

#[test]
fn equilibrium_plane_is_invariant_and_continues() {
    let lorenz = Lorenz::standard();
    let eq = lorenz.nontrivial_equilibria().unwrap()[0];
    let plane = equilibrium_unstable_plane(&lorenz, &eq).unwrap();
    let jac = dense_jacobian(&lorenz, &eq);
    for e in [&plane.e1, &plane.e2] {
        let je: Vec<f64> = (0..3).map(|r| (0..3).map(|c| jac[(r, c)] * e[c]).sum()).collect();
        let c1 = manifold_dot(&je, &plane.e1);
        let c2 = manifold_dot(&je, &plane.e2);
        let rest: Vec<f64> = (0..3).map(|i| je[i] - c1 * plane.e1[i] - c2 * plane.e2[i]).collect();
        assert!(vnorm(&rest) <= 1e-10 * vnorm(&je));
    }
    let left = LeftBoundary::equilibrium_circle(&plane, 1e-3, false).unwrap();
    let p = ShootingProblem::new(Arc::new(lorenz), left, vec![fixed(0.5), fixed(0.5)], cfg()).unwrap();
    let z = p.seed_initial_solution(0.0, 10.0).unwrap();
    let out = run(&p, &z, &ContinuationConfig { max_steps: 5, ..Default::default() }).unwrap();
    assert_eq!(out.termination, Termination::MaxSteps);
    assert_eq!(out.mesh.metadata.param_kind, "angle");
    assert!(out.mesh.orbits.iter().all(|o| o.residual <= 1e-8 && o.eps.is_none()));
}
