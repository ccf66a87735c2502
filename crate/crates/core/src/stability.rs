//! Periodic-orbit refinement, matrix-free Floquet analysis and flow-map
//! amplification estimates.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{gmres, FnOperator, HouseholderArnoldi, LinearOperator};
use crate::linalg::{axpy, dot, norm, sub};
use crate::ode::{flow, integrate_extended, integrate_variational, IntegratorConfig, VectorField};

/// Leading Floquet multiplier and its unit eigenvector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloquetPair {
    pub mu1: f64,
    pub u1: Vec<f64>,
    /// `|M u1 - mu1 u1|`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub base_point: Vec<f64>,
    pub period: f64,
    /// `|phi(base_point, period) - base_point|`.
    pub residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floquet: Option<FloquetPair>,
}

impl PeriodicOrbit {
    pub fn dim(&self) -> usize {
        self.base_point.len()
    }

    pub fn mu1(&self) -> Option<f64> {
        self.floquet.as_ref().map(|f| f.mu1)
    }

    pub fn u1(&self) -> Option<&[f64]> {
        self.floquet.as_ref().map(|f| f.u1.as_slice())
    }
}

/// Default periodic-orbit residual tolerance `1e-9 (1 + |x|)`.
pub fn default_po_tol(x: &[f64]) -> f64 {
    1e-9 * (1.0 + norm(x))
}

/// `M v = D phi(base_point, P) v`.
pub fn monodromy_action<F: VectorField + ?Sized>(field: &F, po: &PeriodicOrbit, v: &[f64], cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    if norm(v) == 0.0 {
        return Err(Error::InvalidInput("monodromy direction must be nonzero".into()));
    }
    let (_, mv) = integrate_extended(field, &po.base_point, v, po.period, cfg)?;
    Ok(mv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FloquetOptions {
    pub eig_tol: f64,
    pub max_dim: usize,
    pub seed: u64,
}

impl Default for FloquetOptions {
    fn default() -> Self {
        Self { eig_tol: 1e-6, max_dim: 30, seed: 1 }
    }
}

/// Flips `v` so that its first non-negligible component is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn ritz_pairs(h: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut ev: Vec<Complex<f64>> = h.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Null vector of `H - lambda I` for a real Ritz value, by SVD.
fn ritz_vector(h: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let m = h.nrows();
    let shifted = h - DMatrix::identity(m, m) * lambda;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, s)| if *s < bv { (i, *s) } else { (bi, bv) });
    v_t.row(imin).transpose()
}

/// Dominant Floquet pair by Householder Arnoldi on the monodromy action. The
/// trivial multiplier along `f(x)` is deflated by projecting the operator onto
/// the complement of the flow direction.
pub fn leading_floquet<F: VectorField + ?Sized>(
    field: &F,
    po: &PeriodicOrbit,
    cfg: &IntegratorConfig,
    opts: &FloquetOptions,
) -> Result<FloquetPair> {
    let n = po.dim();
    if field.dim() != n {
        return Err(Error::InvalidInput("periodic orbit dimension does not match the field".into()));
    }
    let mut fx = vec![0.0; n];
    field.eval(&po.base_point, &mut fx);
    let fnorm = norm(&fx);
    let p: Option<Vec<f64>> = (fnorm > 1e-12 * (1.0 + norm(&po.base_point))).then(|| fx.iter().map(|v| v / fnorm).collect());
    let project = |v: &mut Vec<f64>| {
        if let Some(p) = &p {
            let c = dot(p, v);
            axpy(-c, p, v);
        }
    };

    let op = FnOperator::new(n, |v: &[f64]| {
        let mut w = v.to_vec();
        project(&mut w);
        if norm(&w) == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut mw = monodromy_action(field, po, &w, cfg)?;
        project(&mut mw);
        Ok(mw)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    project(&mut start);
    let mut arnoldi = HouseholderArnoldi::new(&start);
    let max_dim = opts.max_dim.min(n).max(1);

    let mut last_ritz = Vec::new();
    let mut last_resid = f64::INFINITY;
    while arnoldi.len() < max_dim {
        let more = arnoldi.step(&op)?;
        let m = arnoldi.len();
        let hfull = arnoldi.hessenberg();
        let h = hfull.view((0, 0), (m, m)).into_owned();
        let ritz = ritz_pairs(&h);
        last_ritz = ritz.clone();
        let lead = ritz[0];
        let complex = lead.im.abs() > 1e-8 * lead.norm().max(1e-300);
        let tied = ritz.len() > 1 && (ritz[1].norm() - lead.norm()).abs() <= 1e-8 * lead.norm() && (ritz[1] - lead).norm() > 1e-8 * lead.norm();
        if !complex && !tied && lead.norm() > 0.0 {
            let y = ritz_vector(&h, lead.re);
            let estimate = (hfull[(m, m - 1)] * y[m - 1]).abs();
            last_resid = estimate;
            if estimate <= 0.1 * opts.eig_tol * lead.re.abs() || !more {
                return finish_pair(field, po, cfg, opts, &arnoldi, &y, lead.re, p.as_deref());
            }
        }
        if !more {
            break;
        }
    }
    Err(Error::FloquetNotConverged { ritz: last_ritz.iter().map(|c| (c.re, c.im)).collect(), residual: last_resid })
}

#[allow(clippy::too_many_arguments)]
fn finish_pair<F: VectorField + ?Sized>(
    field: &F,
    po: &PeriodicOrbit,
    cfg: &IntegratorConfig,
    opts: &FloquetOptions,
    arnoldi: &HouseholderArnoldi,
    y: &DVector<f64>,
    mu: f64,
    p: Option<&[f64]>,
) -> Result<FloquetPair> {
    let n = po.dim();
    let mut u = vec![0.0; n];
    for (j, v) in arnoldi.basis().iter().take(y.len()).enumerate() {
        axpy(y[j], v, &mut u);
    }
    // Restore the flow-direction component removed by the deflation:
    // M u' = mu u' + (mu - 1) c p  =>  u = u' + c p.
    if let Some(p) = p {
        let mu_prime = monodromy_action(field, po, &u, cfg)?;
        let beta = dot(p, &mu_prime);
        if (mu - 1.0).abs() > 1e-14 {
            axpy(beta / (mu - 1.0), p, &mut u);
        }
    }
    let un = norm(&u);
    u.iter_mut().for_each(|v| *v /= un);
    canonical_sign(&mut u);
    let mu_vec = monodromy_action(field, po, &u, cfg)?;
    let residual = norm(&sub(&mu_vec, &u.iter().map(|v| mu * v).collect::<Vec<_>>()));
    if residual > opts.eig_tol * mu.abs() {
        return Err(Error::FloquetNotConverged { ritz: vec![(mu, 0.0)], residual });
    }
    Ok(FloquetPair { mu1: mu, u1: u, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    /// Residual tolerance; `None` uses `1e-9 (1 + |x|)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { tol: None, max_iter: 25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub orbit: PeriodicOrbit,
    /// `|phi(x, P) - x|` before each Newton update and after the last.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
}

/// Newton-Krylov solve of `phi(x, P) = x` with the phase condition
/// `f(x_guess) . (x - x_guess) = 0`.
pub fn refine_periodic_orbit<F: VectorField + ?Sized>(
    field: &F,
    guess_point: &[f64],
    guess_period: f64,
    cfg: &IntegratorConfig,
    opts: &RefineOptions,
) -> Result<Refinement> {
    let n = field.dim();
    if guess_point.len() != n {
        return Err(Error::InvalidInput("guess point has wrong dimension".into()));
    }
    if !(guess_period > 0.0) {
        return Err(Error::InvalidInput("period guess must be positive".into()));
    }
    let mut f_anchor = vec![0.0; n];
    field.eval(guess_point, &mut f_anchor);
    if norm(&f_anchor) == 0.0 {
        return Err(Error::Singular("phase condition is degenerate at an equilibrium".into()));
    }
    let mut x = guess_point.to_vec();
    let mut period = guess_period;
    let mut history = Vec::new();

    for it in 0..=opts.max_iter {
        let (end, _) = flow(field, &x, period, cfg, false)?;
        let gap = sub(&end, &x);
        let res = norm(&gap);
        let tol = opts.tol.unwrap_or_else(|| default_po_tol(&x));
        history.push(res);
        if !res.is_finite() {
            return Err(Error::NewtonDiverged { iterations: it, residual: res });
        }
        if res <= tol {
            return Ok(Refinement {
                orbit: PeriodicOrbit { base_point: x, period, residual: res, floquet: None },
                residual_history: history,
                iterations: it,
            });
        }
        if it == opts.max_iter || res > 1e3 * (history[0] + 1e-300) {
            return Err(Error::NewtonDiverged { iterations: it, residual: res });
        }
        let phase = dot(&f_anchor, &sub(&x, guess_point));
        let mut f_end = vec![0.0; n];
        field.eval(&end, &mut f_end);
        let (xc, pc) = (x.clone(), period);
        let op = FnOperator::new(n + 1, |v: &[f64]| {
            let (dx, dp) = (&v[..n], v[n]);
            let mut out = vec![0.0; n + 1];
            let (_, mdx) = integrate_extended(field, &xc, dx, pc, cfg)?;
            for i in 0..n {
                out[i] = mdx[i] - dx[i] + f_end[i] * dp;
            }
            out[n] = dot(&f_anchor, dx);
            Ok(out)
        });
        let mut rhs: Vec<f64> = gap.iter().map(|g| -g).collect();
        rhs.push(-phase);
        let rep = gmres(&op, &rhs, 1e-12, op.dim())?;
        if !rep.converged && *rep.residual_history.last().unwrap_or(&1.0) > 1e-6 {
            return Err(Error::Singular("periodic-orbit Newton system".into()));
        }
        for i in 0..n {
            x[i] += rep.solution[i];
        }
        period += rep.solution[n];
        if !(period > 0.0) {
            return Err(Error::NewtonDiverged { iterations: it + 1, residual: res });
        }
    }
    unreachable!("loop returns")
}

/// Estimate of `|D phi(x0, T)|_2` from the images of `probes` random
/// orthonormal directions (all `n` directions give the exact norm).
pub fn segment_amplification<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidInput("segment time must be non-negative".into()));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let n = field.dim();
    let k = probes.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
    let dirs: Vec<Vec<f64>> = (0..k).map(|j| omega.column(j).iter().copied().collect()).collect();
    let end = integrate_variational(field, x0, &dirs, t, cfg, false)?;
    let y = DMatrix::from_fn(n, k, |i, j| end.directions[j][i]);
    let sv = y.singular_values();
    Ok(sv.iter().fold(0.0_f64, |m, s| m.max(*s)))
}

/// Unstable plane of an equilibrium with exactly two unstable eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPlane {
    pub point: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    /// Unstable eigenvalues as `(re, im)`.
    pub eigenvalues: [(f64, f64); 2],
    /// `1 / sqrt(re1 re2)`, the time unit for normalized integration times.
    pub time_scale: f64,
}

/// Dense Jacobian at `x` by probing the Jacobian action.
pub fn dense_jacobian<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> DMatrix<f64> {
    let n = field.dim();
    let mut j = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for c in 0..n {
        e[c] = 1.0;
        field.jacobian_action(x, &e, &mut col);
        e[c] = 0.0;
        for r in 0..n {
            j[(r, c)] = col[r];
        }
    }
    j
}

pub fn equilibrium_unstable_plane<F: VectorField + ?Sized>(field: &F, point: &[f64]) -> Result<EquilibriumPlane> {
    let n = field.dim();
    let mut fx = vec![0.0; n];
    field.eval(point, &mut fx);
    if norm(&fx) > 1e-8 * (1.0 + norm(point)) {
        return Err(Error::InvalidInput(format!("point is not an equilibrium (|f| = {:e})", norm(&fx))));
    }
    let jac = dense_jacobian(field, point);
    let eig = jac.complex_eigenvalues();
    let unstable: Vec<Complex<f64>> = eig.iter().copied().filter(|l| l.re > 0.0).collect();
    if unstable.len() != 2 {
        return Err(Error::InvalidInput(format!("equilibrium has {} unstable eigenvalues, need exactly 2", unstable.len())));
    }
    let (l1, l2) = (unstable[0], unstable[1]);
    // (J - l1)(J - l2) has real coefficients for a real or conjugate pair.
    let trace = (l1 + l2).re;
    let det = (l1 * l2).re;
    let k = &jac * &jac - &jac * trace + DMatrix::identity(n, n) * det;
    let svd = k.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| svd.singular_values[*a].partial_cmp(&svd.singular_values[*b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut e1: Vec<f64> = v_t.row(order[0]).iter().copied().collect();
    let mut e2: Vec<f64> = v_t.row(order[1]).iter().copied().collect();
    let n1 = norm(&e1);
    e1.iter_mut().for_each(|v| *v /= n1);
    let c = dot(&e1, &e2);
    axpy(-c, &e1, &mut e2);
    let n2 = norm(&e2);
    e2.iter_mut().for_each(|v| *v /= n2);
    canonical_sign(&mut e1);
    canonical_sign(&mut e2);
    Ok(EquilibriumPlane {
        point: point.to_vec(),
        e1,
        e2,
        eigenvalues: [(l1.re, l1.im), (l2.re, l2.im)],
        time_scale: 1.0 / (l1.re * l2.re).sqrt(),
    })
}
