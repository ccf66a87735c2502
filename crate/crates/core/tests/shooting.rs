mod common;

use common::*;
use manifold_core::bvp::{bc_value_and_gradient, JacobianMode};
use manifold_core::continuation::{correct, tangent_fd, ContinuationConfig};
use manifold_core::krylov::{verify_iteration_bound, FnOperator};
use manifold_core::models::Lorenz;
use manifold_core::ode::EVENT_TOL;
use proptest::prelude::*;

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn seeds_satisfy_the_boundary_conditions() {
    let po = lorenz_ab();
    for bcs in (2..=5).map(lorenz_mixed_bcs).chain([lorenz_section_bcs()]) {
        let k = bcs.len();
        let (p, z) = lorenz_problem(&po, bcs, cfg());
        let r = p.residual(&z).unwrap();
        assert!(max_abs(&r) <= 10.0 * EVENT_TOL, "k = {k}: |F| = {:e}", max_abs(&r));
    }
}

#[test]
fn residual_matches_independent_evaluation() {
    let po = lorenz_ab();
    let bcs = lorenz_mixed_bcs(4);
    let (p, z0) = lorenz_problem(&po, bcs.clone(), cfg());
    let mut rng = rng(3);
    for _ in 0..5 {
        let z = perturb(&z0, 3, 4, 0.1, &mut rng);
        let ours = p.residual(&z).unwrap();
        let theirs = reference_residual(&po, 1.0, &bcs, &z, &cfg());
        assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn residual_rows_depend_only_on_their_segment() {
    let po = lorenz_ab();
    let k = 4;
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(k), cfg());
    let lay = p.layout();
    let base = p.residual(&z).unwrap();
    let changed = |dz: usize| -> Vec<usize> {
        let mut zp = z.clone();
        zp[dz] += 1e-3;
        let r = p.residual(&zp).unwrap();
        (0..r.len()).filter(|&i| r[i] != base[i]).collect()
    };
    let gluing = |i: usize| (i * 3..(i + 1) * 3).collect::<Vec<_>>();
    for i in 1..k {
        let mut want = gluing(i - 1);
        if i + 1 < k {
            want.extend(gluing(i));
        }
        want.push(lay.bc_row(i));
        want.sort();
        for c in lay.point(i) {
            let got = changed(c);
            assert!(got.iter().all(|r| want.contains(r)), "x_{i}: rows {got:?} outside {want:?}");
        }
    }
    for i in 0..k {
        let mut want = if i + 1 < k { gluing(i) } else { vec![] };
        want.push(lay.bc_row(i));
        let got = changed(lay.tau(i));
        assert!(got.iter().all(|r| want.contains(r)), "tau_{i}: rows {got:?} outside {want:?}");
    }
    let mut want = gluing(0);
    want.push(lay.bc_row(0));
    let got = changed(lay.param());
    assert!(got.iter().all(|r| want.contains(r)), "param: rows {got:?}");
}

#[test]
fn dense_operator_has_identity_coupling_blocks() {
    let po = lorenz_ab();
    let k = 3;
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(k), cfg());
    let lay = p.layout();
    let t = tangent_fd(&z, None, None).unwrap();
    let a = p.assemble_dense(&z, &t).unwrap();
    for i in 0..k - 1 {
        let next = lay.point(i + 1);
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert_eq!(a[(i * 3 + r, next.start + c)], want);
            }
        }
        // Gluing row i does not see points other than x_i and x_{i+1}.
        for j in 1..k {
            if j != i && j != i + 1 {
                for c in lay.point(j) {
                    for r in 0..3 {
                        assert_eq!(a[(i * 3 + r, c)], 0.0);
                    }
                }
            }
        }
    }
    let last = a.nrows() - 1;
    for c in 0..a.ncols() {
        assert_eq!(a[(last, c)], t[c]);
    }
}

#[test]
fn finite_difference_mode_agrees_with_variational() {
    let po = lorenz_ab();
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(3), cfg());
    let fd = p.clone().with_jacobian_mode(JacobianMode::FiniteDifference);
    let mut rng = rng(9);
    for _ in 0..5 {
        let v = random_unit(p.unknowns(), &mut rng);
        let a = p.residual_derivative(&z, &v).unwrap();
        let b = fd.residual_derivative(&z, &v).unwrap();
        assert!(vnorm(&vsub(&a, &b)) <= 1e-5 * vnorm(&a));
    }
}

#[test]
fn poincare_gradient_matches_finite_differences() {
    let lorenz = Lorenz::standard();
    let bc = section(&[0.3, -0.2, 1.0], 27.0);
    let x0 = [-13.0, -19.0, 25.0];
    let t = 0.37;
    let lin = bc_value_and_gradient(&lorenz, &bc, &x0, t, &cfg()).unwrap();
    let value = |x: &[f64], t: f64| bc_value_and_gradient(&lorenz, &bc, x, t, &cfg()).unwrap().value;
    let h = 1e-6;
    for j in 0..3 {
        let (mut xp, mut xm) = (x0, x0);
        xp[j] += h;
        xm[j] -= h;
        let fd = (value(&xp, t) - value(&xm, t)) / (2.0 * h);
        assert!((fd - lin.gradient[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "component {j}: {fd} vs {}", lin.gradient[j]);
    }
    let fd_t = (value(&x0, t + h) - value(&x0, t - h)) / (2.0 * h);
    assert!((fd_t - lin.time_derivative).abs() <= 1e-6 * (1.0 + fd_t.abs()));
}

#[test]
fn bordered_operator_meets_the_iteration_bound() {
    let po = lorenz_ab();
    let cc = ContinuationConfig::default();
    for k in [2, 3, 5] {
        let (p, z0) = lorenz_problem(&po, lorenz_mixed_bcs(k), cfg());
        let t0 = tangent_fd(&z0, None, None).unwrap();
        let z = correct(&p, &z0, &t0, &cc).unwrap().z;
        let op = FnOperator::new(p.unknowns(), |v: &[f64]| p.jacobian_apply(&z, &t0, v));
        let mut rng = rng(k as u64);
        let rhs = random_unit(p.unknowns(), &mut rng);
        let rep = verify_iteration_bound(&op, &rhs, k).unwrap();
        assert!(rep.held, "k = {k}: needed {:?}, bound {}", rep.iterations_needed, rep.bound);
        // The operator is linear only up to integration error.
        assert!(rep.true_residual_at_bound <= 1e-7, "k = {k}: {:e}", rep.true_residual_at_bound);
    }
}

#[test]
fn all_section_problem_corrects() {
    let po = lorenz_ab();
    let (p, z0) = lorenz_problem(&po, lorenz_section_bcs(), cfg());
    let t = tangent_fd(&z0, None, None).unwrap();
    let mut z = z0.clone();
    *z.last_mut().unwrap() += 0.2;
    let c = correct(&p, &z, &t, &ContinuationConfig::default()).unwrap();
    assert!(c.final_residual <= 1e-8);
    // The bordering row pins the parameter.
    assert!((c.z.last().unwrap() - z.last().unwrap()).abs() <= 1e-14);
}

#[test]
fn residual_is_identical_for_any_worker_count() {
    let po = lorenz_ab();
    let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(5), cfg());
    let r1 = p.clone().with_workers(1).unwrap().residual(&z).unwrap();
    for w in 2..=5 {
        let rw = p.clone().with_workers(w).unwrap().residual(&z).unwrap();
        assert!(r1.iter().zip(&rw).all(|(a, b)| a.to_bits() == b.to_bits()), "W = {w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn jacobian_action_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let po = lorenz_ab();
        let (p, z) = lorenz_problem(&po, lorenz_mixed_bcs(3), cfg());
        let mut rng = rng(seed);
        let u = random_unit(p.unknowns(), &mut rng);
        let v = random_unit(p.unknowns(), &mut rng);
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let ju = p.residual_derivative(&z, &u).unwrap();
        let jv = p.residual_derivative(&z, &v).unwrap();
        let jw = p.residual_derivative(&z, &w).unwrap();
        let combo: Vec<f64> = ju.iter().zip(&jv).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(vnorm(&vsub(&jw, &combo)) <= 1e-7 * (1.0 + vnorm(&jw)));
    }
}
