//! Matrix-free GMRES with a Householder-orthogonalized Arnoldi basis.
//!
//! No restarts and no preconditioning: the bordered shooting operators have a
//! spectrum that GMRES resolves in at most `3k - 1` steps (for `k` shooting
//! intervals), so full GMRES over a short basis is the natural choice.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Linear map on `R^N`, typically applied matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Dense matrix wrapper, used by tests and oracles.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = nalgebra::DVector::from_column_slice(x);
        Ok((&self.0 * v).as_slice().to_vec())
    }
}

/// Operator given by a closure.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>>> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>>> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.f)(x)
    }
}

/// Probes `op` column by column into a dense matrix.
pub fn assemble<O: LinearOperator + ?Sized>(op: &O) -> Result<DMatrix<f64>> {
    let n = op.dim();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        e[j] = 0.0;
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    Ok(m)
}

/// Reflector `P = I - 2 w w^T` acting on indices `start..`.
#[derive(Debug, Clone)]
struct Reflector {
    start: usize,
    w: Vec<f64>,
}

impl Reflector {
    /// Reflector mapping `x[start..]` onto `alpha e_start`; returns it with `alpha`.
    fn annihilate(x: &[f64], start: usize) -> (Self, f64) {
        let tail = &x[start..];
        let sigma = norm(tail);
        if sigma == 0.0 {
            return (Self { start, w: vec![0.0; tail.len()] }, 0.0);
        }
        let alpha = if tail[0] >= 0.0 { -sigma } else { sigma };
        let mut w = tail.to_vec();
        w[0] -= alpha;
        let wn = norm(&w);
        if wn > 0.0 {
            w.iter_mut().for_each(|v| *v /= wn);
        }
        (Self { start, w }, alpha)
    }

    fn apply(&self, x: &mut [f64]) {
        let tail = &mut x[self.start..];
        let c = 2.0 * dot(&self.w, tail);
        if c != 0.0 {
            for (t, w) in tail.iter_mut().zip(&self.w) {
                *t -= c * w;
            }
        }
    }
}

/// Incrementally built Arnoldi factorization `A V_m = V_{m+1} H_m` with the
/// basis generated by Householder reflections.
#[derive(Debug, Clone)]
pub struct HouseholderArnoldi {
    dim: usize,
    reflectors: Vec<Reflector>,
    basis: Vec<Vec<f64>>,
    /// Column `j` holds `h_{0..=j+1, j}`.
    columns: Vec<Vec<f64>>,
    beta: f64,
    /// Set when the Krylov space became invariant.
    invariant: bool,
}

impl HouseholderArnoldi {
    /// Starts from `r0`; `beta()` is the signed coefficient with `r0 = beta v_0`.
    pub fn new(r0: &[f64]) -> Self {
        let dim = r0.len();
        let (p0, beta) = Reflector::annihilate(r0, 0);
        let mut s = Self { dim, reflectors: vec![p0], basis: Vec::new(), columns: Vec::new(), beta, invariant: beta == 0.0 };
        if !s.invariant {
            let v0 = s.basis_vector(0);
            s.basis.push(v0);
        }
        s
    }

    fn basis_vector(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[j] = 1.0;
        for p in self.reflectors[..=j].iter().rev() {
            p.apply(&mut v);
        }
        v
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn is_invariant(&self) -> bool {
        self.invariant
    }

    /// Orthonormal basis vectors generated so far.
    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Extends the factorization by one column. Returns `false` once the
    /// space is invariant or the full dimension is reached.
    pub fn step<O: LinearOperator + ?Sized>(&mut self, op: &O) -> Result<bool> {
        let j = self.columns.len();
        if self.invariant || j >= self.dim {
            return Ok(false);
        }
        let mut z = op.apply(&self.basis[j])?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("operator produced a non-finite vector".into()));
        }
        let scale = norm(&z);
        for p in &self.reflectors {
            p.apply(&mut z);
        }
        let mut col = z[..=j].to_vec();
        if j + 1 < self.dim {
            let (p, alpha) = Reflector::annihilate(&z, j + 1);
            col.push(alpha);
            let tiny = alpha.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE);
            self.reflectors.push(p);
            self.columns.push(col);
            if tiny {
                self.invariant = true;
            } else {
                let v = self.basis_vector(j + 1);
                self.basis.push(v);
            }
        } else {
            col.push(0.0);
            self.columns.push(col);
            self.invariant = true;
        }
        Ok(!self.invariant)
    }

    /// The `(m+1) x m` Hessenberg matrix.
    pub fn hessenberg(&self) -> DMatrix<f64> {
        let m = self.columns.len();
        let mut h = DMatrix::zeros(m + 1, m);
        for (j, col) in self.columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                h[(i, j)] = *v;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmresStatus {
    Converged,
    /// Krylov space became invariant; the solution is exact up to roundoff.
    LuckyBreakdown,
    /// The least-squares factor became singular.
    NumericalBreakdown,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmresReport {
    pub solution: Vec<f64>,
    /// Relative residual estimates, starting with 1 at iteration 0.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub status: GmresStatus,
}

impl GmresReport {
    /// First iteration whose residual estimate is at most `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.residual_history.iter().position(|r| *r <= tol)
    }
}

/// Full GMRES from a zero initial guess; convergence is measured by
/// `|A x - b| / |b|`.
pub fn gmres<O: LinearOperator + ?Sized>(op: &O, rhs: &[f64], tol: f64, max_iter: usize) -> Result<GmresReport> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::InvalidInput(format!("rhs has length {}, operator dimension {n}", rhs.len())));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("GMRES tolerance must be positive".into()));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("GMRES right-hand side is not finite".into()));
    }
    let max_iter = max_iter.min(n);
    let bnorm = norm(rhs);
    if bnorm == 0.0 {
        return Ok(GmresReport {
            solution: vec![0.0; n],
            residual_history: vec![0.0],
            iterations: 0,
            converged: true,
            status: GmresStatus::Converged,
        });
    }

    let mut arnoldi = HouseholderArnoldi::new(rhs);
    // Least-squares rhs and Givens rotations.
    let mut g = vec![arnoldi.beta()];
    let mut rotations: Vec<(f64, f64)> = Vec::new();
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut history = vec![1.0];
    let mut status = GmresStatus::MaxIterations;

    while arnoldi.len() < max_iter {
        arnoldi.step(op)?;
        let j = arnoldi.len() - 1;
        let mut col = arnoldi.columns[j].clone();
        for (i, &(c, s)) in rotations.iter().enumerate() {
            let (a, b) = (col[i], col[i + 1]);
            col[i] = c * a + s * b;
            col[i + 1] = -s * a + c * b;
        }
        let (a, b) = (col[j], col[j + 1]);
        let r = a.hypot(b);
        let (c, s) = if r == 0.0 { (1.0, 0.0) } else { (a / r, b / r) };
        col[j] = r;
        col[j + 1] = 0.0;
        rotations.push((c, s));
        let gj = g[j];
        g[j] = c * gj;
        g.push(-s * gj);
        col.truncate(j + 1);
        r_cols.push(col);
        let res = (g[j + 1] / bnorm).abs();
        history.push(res);
        if r == 0.0 || r.abs() <= 1e-300 {
            status = GmresStatus::NumericalBreakdown;
            r_cols.pop();
            break;
        }
        if res <= tol {
            status = GmresStatus::Converged;
            break;
        }
        if arnoldi.is_invariant() {
            status = GmresStatus::LuckyBreakdown;
            break;
        }
    }

    // Back substitution R y = g.
    let m = r_cols.len();
    let mut y = vec![0.0; m];
    for i in (0..m).rev() {
        let mut acc = g[i];
        for k in i + 1..m {
            acc -= r_cols[k][i] * y[k];
        }
        y[i] = acc / r_cols[i][i];
    }
    let mut x = vec![0.0; n];
    for (yj, v) in y.iter().zip(arnoldi.basis()) {
        crate::linalg::axpy(*yj, v, &mut x);
    }
    let iterations = arnoldi.len();
    let converged = matches!(status, GmresStatus::Converged | GmresStatus::LuckyBreakdown);
    Ok(GmresReport { solution: x, residual_history: history, iterations, converged, status })
}

/// Outcome of checking the `3k - 1` GMRES iteration bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationBoundReport {
    pub intervals: usize,
    pub bound: usize,
    /// Iterations needed to reach the tolerance, if reached at all.
    pub iterations_needed: Option<usize>,
    pub tolerance: f64,
    /// `|A x - b| / |b|` of the iterate after `bound` steps, recomputed with
    /// one extra operator application.
    pub true_residual_at_bound: f64,
    pub held: bool,
    pub residual_history: Vec<f64>,
}

/// Relative tolerance used by [`verify_iteration_bound`].
pub const BOUND_CHECK_TOL: f64 = 1e-10;

/// Runs GMRES on a bordered `k`-interval shooting operator and reports whether
/// the tolerance was met within `3k - 1` iterations. Finite precision can
/// shift the count; a violation is reported, not raised.
pub fn verify_iteration_bound<O: LinearOperator + ?Sized>(op: &O, rhs: &[f64], k: usize) -> Result<IterationBoundReport> {
    let bound = (3 * k).saturating_sub(1).max(1);
    let full = gmres(op, rhs, BOUND_CHECK_TOL, op.dim())?;
    let at_bound = gmres(op, rhs, BOUND_CHECK_TOL, bound)?;
    let ax = op.apply(&at_bound.solution)?;
    let true_res = norm(&crate::linalg::sub(&ax, rhs)) / norm(rhs).max(f64::MIN_POSITIVE);
    let needed = full.iterations_to(BOUND_CHECK_TOL);
    Ok(IterationBoundReport {
        intervals: k,
        bound,
        iterations_needed: needed,
        tolerance: BOUND_CHECK_TOL,
        true_residual_at_bound: true_res,
        held: needed.is_some_and(|it| it <= bound),
        residual_history: full.residual_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, n, |i, j| if i == j { 5.0 } else { 0.0 } + rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_converges_in_one_step() {
        let op = DenseOperator(DMatrix::identity(4, 4));
        let b = [1.0, -2.0, 0.5, 3.0];
        let rep = gmres(&op, &b, 1e-12, 4).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        for i in 0..4 {
            assert!((rep.solution[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_three_distinct_eigenvalues() {
        let op = DenseOperator(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0])));
        let rep = gmres(&op, &[1.0, 1.0, 1.0], 1e-12, 3).unwrap();
        assert!(rep.converged && rep.iterations <= 3);
        let want = [1.0, 0.5, 1.0 / 3.0];
        for i in 0..3 {
            assert!((rep.solution[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_random_matches_lu() {
        let a = random_matrix(20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tol = 1e-12;
        let rep = gmres(&DenseOperator(a.clone()), &b, tol, 20).unwrap();
        assert!(rep.converged);
        let lu = a.clone().lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
        let err: f64 = (0..20).map(|i| (rep.solution[i] - lu[i]).powi(2)).sum::<f64>().sqrt();
        let cond = a.clone().svd(false, false).singular_values;
        let kappa = cond.max() / cond.min();
        assert!(err <= tol * 10.0 * kappa * lu.norm(), "err {err}");
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let rep = gmres(&DenseOperator(random_matrix(5, 1)), &[0.0; 5], 1e-10, 5).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.solution, vec![0.0; 5]);
    }

    #[test]
    fn max_iterations_returns_best_iterate() {
        let a = random_matrix(30, 9);
        let b = vec![1.0; 30];
        let rep = gmres(&DenseOperator(a), &b, 1e-14, 3).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.status, GmresStatus::MaxIterations);
        assert_eq!(rep.iterations, 3);
        assert!(*rep.residual_history.last().unwrap() < 1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let op = DenseOperator(DMatrix::identity(2, 2));
        assert!(gmres(&op, &[1.0], 1e-8, 2).is_err());
        assert!(gmres(&op, &[1.0, 1.0], 0.0, 2).is_err());
        assert!(gmres(&op, &[f64::NAN, 1.0], 1e-8, 2).is_err());
    }

    #[test]
    fn householder_basis_stays_orthogonal_when_ill_conditioned() {
        // Condition number 1e10 via graded singular values.
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q1 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
        let q2 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| 10f64.powf(-10.0 * i as f64 / (n - 1) as f64)));
        let a = &q1 * s * q2.transpose();
        let op = DenseOperator(a);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut arn = HouseholderArnoldi::new(&b);
        while arn.len() < 30 && arn.step(&op).unwrap() {}
        let v = arn.basis();
        let mut worst: f64 = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(&v[i], &v[j]) - target).abs());
            }
        }
        assert!(worst <= 1e-12, "orthogonality loss {worst}");
    }

    #[test]
    fn arnoldi_relation_holds() {
        let a = random_matrix(12, 5);
        let op = DenseOperator(a.clone());
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut arn = HouseholderArnoldi::new(&b);
        for _ in 0..6 {
            arn.step(&op).unwrap();
        }
        let v = DMatrix::from_fn(12, 7, |i, j| arn.basis()[j][i]);
        let lhs = &a * v.columns(0, 6);
        let rhs = &v * arn.hessenberg();
        assert!((lhs - rhs).amax() < 1e-12);
        // r0 = beta v0
        for i in 0..12 {
            assert!((arn.beta() * arn.basis()[0][i] - b[i]).abs() < 1e-14);
        }
    }

    /// Matrix with eigenvalues `distinct` plus a Jordan block of size `s` on
    /// `distinct[0]`, in a random basis.
    fn jordan_matrix(distinct: &[f64], s: usize, seed: u64) -> DMatrix<f64> {
        let n = distinct.len() - 1 + s;
        let mut j = DMatrix::zeros(n, n);
        for i in 0..s {
            j[(i, i)] = distinct[0];
            if i + 1 < s {
                j[(i, i + 1)] = 1.0;
            }
        }
        for (off, lam) in distinct[1..].iter().enumerate() {
            j[(s + off, s + off)] = *lam;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)) + DMatrix::identity(n, n) * 3.0;
        let qinv = q.clone().try_inverse().unwrap();
        q * j * qinv
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn jordan_form_iteration_count(m in 2usize..6, s in 1usize..4, seed in 0u64..1000) {
            let distinct: Vec<f64> = (0..m).map(|i| 1.0 + 0.7 * i as f64).collect();
            let a = jordan_matrix(&distinct, s, seed);
            let n = a.nrows();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rep = gmres(&DenseOperator(a), &b, 1e-8, n).unwrap();
            prop_assert!(rep.converged);
            prop_assert!(rep.iterations < m + s, "iterations {} > {}", rep.iterations, m + s - 1);
        }

        #[test]
        fn residual_history_is_monotone(n in 3usize..25, seed in 0u64..1000) {
            let a = random_matrix(n, seed);
            let b: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 * 0.37).cos()).collect();
            let rep = gmres(&DenseOperator(a), &b, 1e-13, n).unwrap();
            for w in rep.residual_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 10.0 * f64::EPSILON);
            }
        }
    }
}
