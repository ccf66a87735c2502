#![allow(clippy::needless_range_loop)]

//! Eigenvalues of a real dense matrix by balancing, elimination to upper
//! Hessenberg form and the Francis double-shift QR iteration, generic over
//! the working precision so defective clusters can be resolved in
//! double-double arithmetic.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

pub trait Real: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    const EPS: f64;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    /// `|self|` with the sign of `sign`.
    fn with_sign_of(self, sign: Self) -> Self {
        if sign >= Self::zero() {
            self.abs()
        } else {
            -self.abs()
        }
    }
}

impl Real for f64 {
    const EPS: f64 = f64::EPSILON;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + (self.hi * o.lo + self.lo * o.hi);
        quick_two_sum(p, e)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::from_f64(q3)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&o.lo),
            other => other,
        }
    }
}

impl Real for Dd {
    const EPS: f64 = 4.93e-32;
    fn from_f64(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::zero();
        }
        let y = Dd::from_f64(self.hi.sqrt());
        y + (self - y * y) / (Dd::from_f64(2.0) * y)
    }
}

fn balance<T: Real>(a: &mut [Vec<T>]) {
    let n = a.len();
    let two = T::from_f64(2.0);
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = T::zero();
            let mut c = T::zero();
            for j in 0..n {
                if j != i {
                    c = c + a[j][i].abs();
                    r = r + a[i][j].abs();
                }
            }
            if c != T::zero() && r != T::zero() {
                let mut g = r / two;
                let mut f = T::from_f64(1.0);
                let s = c + r;
                while c < g {
                    f = f * two;
                    c = c * T::from_f64(4.0);
                }
                g = r * two;
                while c > g {
                    f = f / two;
                    c = c / T::from_f64(4.0);
                }
                if (c + r) / f < T::from_f64(0.95) * s {
                    done = false;
                    let inv = T::from_f64(1.0) / f;
                    for j in 0..n {
                        a[i][j] = a[i][j] * inv;
                    }
                    for row in a.iter_mut() {
                        row[i] = row[i] * f;
                    }
                }
            }
        }
    }
}

fn elmhes<T: Real>(a: &mut [Vec<T>]) {
    let n = a.len();
    for m in 1..n.saturating_sub(1) {
        let mut x = T::zero();
        let mut piv = m;
        for j in m..n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                piv = j;
            }
        }
        if piv != m {
            a.swap(piv, m);
            for row in a.iter_mut() {
                row.swap(piv, m);
            }
        }
        if x != T::zero() {
            for i in m + 1..n {
                let mut y = a[i][m - 1];
                if y != T::zero() {
                    y = y / x;
                    a[i][m - 1] = y;
                    for j in m..n {
                        let v = a[m][j];
                        a[i][j] = a[i][j] - y * v;
                    }
                    for row in a.iter_mut() {
                        let v = row[i];
                        row[m] = row[m] + y * v;
                    }
                }
            }
        }
    }
    for i in 2..n {
        for j in 0..i - 1 {
            a[i][j] = T::zero();
        }
    }
}

fn hqr<T: Real>(a: &mut [Vec<T>]) -> Vec<(f64, f64)> {
    let n = a.len() as isize;
    let eps = T::from_f64(T::EPS);
    let mut out = vec![(0.0, 0.0); n as usize];
    let mut anorm = T::zero();
    for i in 0..n {
        for j in (i - 1).max(0)..n {
            anorm = anorm + a[i as usize][j as usize].abs();
        }
    }
    let at = |a: &[Vec<T>], i: isize, j: isize| a[i as usize][j as usize];
    let mut nn = n - 1;
    let mut t = T::zero();
    let (mut p, mut q, mut r) = (T::zero(), T::zero(), T::zero());
    let (mut x, mut y, mut z, mut w, mut s);
    while nn >= 0 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l > 0 {
                s = at(a, l - 1, l - 1).abs() + at(a, l, l).abs();
                if s == T::zero() {
                    s = anorm;
                }
                if at(a, l, l - 1).abs() <= eps * s {
                    a[l as usize][(l - 1) as usize] = T::zero();
                    break;
                }
                l -= 1;
            }
            x = at(a, nn, nn);
            if l == nn {
                out[nn as usize] = ((x + t).to_f64(), 0.0);
                nn -= 1;
            } else {
                y = at(a, nn - 1, nn - 1);
                w = at(a, nn, nn - 1) * at(a, nn - 1, nn);
                if l == nn - 1 {
                    p = T::from_f64(0.5) * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x = x + t;
                    if q >= T::zero() {
                        z = p + z.with_sign_of(p);
                        let hi = x + z;
                        out[(nn - 1) as usize] = (hi.to_f64(), 0.0);
                        out[nn as usize] = (if z != T::zero() { x - w / z } else { hi }.to_f64(), 0.0);
                    } else {
                        out[nn as usize] = ((x + p).to_f64(), -z.to_f64());
                        out[(nn - 1) as usize] = ((x + p).to_f64(), z.to_f64());
                    }
                    nn -= 2;
                } else {
                    assert!(its < 60, "QR iteration did not converge");
                    if its == 10 || its == 20 {
                        t = t + x;
                        for i in 0..=nn {
                            a[i as usize][i as usize] = a[i as usize][i as usize] - x;
                        }
                        s = at(a, nn, nn - 1).abs() + at(a, nn - 1, nn - 2).abs();
                        x = T::from_f64(0.75) * s;
                        y = x;
                        w = T::from_f64(-0.4375) * s * s;
                    }
                    its += 1;
                    let mut m = nn - 2;
                    while m >= l {
                        z = at(a, m, m);
                        r = x - z;
                        s = y - z;
                        p = (r * s - w) / at(a, m + 1, m) + at(a, m, m + 1);
                        q = at(a, m + 1, m + 1) - z - r - s;
                        r = at(a, m + 2, m + 1);
                        s = p.abs() + q.abs() + r.abs();
                        p = p / s;
                        q = q / s;
                        r = r / s;
                        if m == l {
                            break;
                        }
                        let u = at(a, m, m - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs() * (at(a, m - 1, m - 1).abs() + z.abs() + at(a, m + 1, m + 1).abs());
                        if u <= eps * v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nn - 1 {
                        a[(i + 2) as usize][i as usize] = T::zero();
                        if i != m {
                            a[(i + 2) as usize][(i - 1) as usize] = T::zero();
                        }
                    }
                    let mut k = m;
                    while k < nn {
                        if k != m {
                            p = at(a, k, k - 1);
                            q = at(a, k + 1, k - 1);
                            r = T::zero();
                            if k + 1 != nn {
                                r = at(a, k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != T::zero() {
                                p = p / x;
                                q = q / x;
                                r = r / x;
                            }
                        }
                        s = (p * p + q * q + r * r).sqrt().with_sign_of(p);
                        if s != T::zero() {
                            if k == m {
                                if l != m {
                                    a[k as usize][(k - 1) as usize] = -at(a, k, k - 1);
                                }
                            } else {
                                a[k as usize][(k - 1) as usize] = -s * x;
                            }
                            p = p + s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q = q / p;
                            r = r / p;
                            for j in k..=nn {
                                let (ku, ju) = (k as usize, j as usize);
                                p = a[ku][ju] + q * a[ku + 1][ju];
                                if k + 1 != nn {
                                    p = p + r * a[ku + 2][ju];
                                    a[ku + 2][ju] = a[ku + 2][ju] - p * z;
                                }
                                a[ku + 1][ju] = a[ku + 1][ju] - p * y;
                                a[ku][ju] = a[ku][ju] - p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                let (iu, ku) = (i as usize, k as usize);
                                p = x * a[iu][ku] + y * a[iu][ku + 1];
                                if k + 1 != nn {
                                    p = p + z * a[iu][ku + 2];
                                    a[iu][ku + 2] = a[iu][ku + 2] - p * r;
                                }
                                a[iu][ku + 1] = a[iu][ku + 1] - p * q;
                                a[iu][ku] = a[iu][ku] - p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if !(l + 1 < nn) {
                break;
            }
        }
    }
    out
}

/// Eigenvalues `(re, im)` of `m` computed in precision `T`.
pub fn eigenvalues<T: Real>(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    assert!(m.is_square());
    let n = m.nrows();
    let mut a: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| T::from_f64(m[(i, j)])).collect()).collect();
    balance(&mut a);
    elmhes(&mut a);
    hqr(&mut a)
}

/// Number of eigenvalues of `m` within `radius` of `1`, in double-double.
pub fn count_near_one(m: &DMatrix<f64>, radius: f64) -> usize {
    eigenvalues::<Dd>(m).iter().filter(|(re, im)| (re - 1.0).hypot(*im) <= radius).count()
}
