//! Bundled vector fields with analytic Jacobian actions.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::ode::VectorField;

/// Descriptive metadata of a bundled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub parameters: BTreeMap<String, f64>,
    pub note: String,
}

/// Lorenz system `x' = s(y - x)`, `y' = x(r - z) - y`, `z' = xy - bz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Lorenz {
    pub fn new(sigma: f64, rho: f64, beta: f64) -> Result<Self> {
        if !(sigma.is_finite() && rho.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidInput("Lorenz parameters must be finite".into()));
        }
        Ok(Self { sigma, rho, beta })
    }

    /// sigma = 10, rho = 28, beta = 8/3.
    pub fn standard() -> Self {
        Self { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }

    /// The two symmetric equilibria `(+-q, +-q, rho - 1)`, `q = sqrt(beta (rho - 1))`.
    pub fn nontrivial_equilibria(&self) -> Option<[[f64; 3]; 2]> {
        if self.rho <= 1.0 {
            return None;
        }
        let q = (self.beta * (self.rho - 1.0)).sqrt();
        Some([[q, q, self.rho - 1.0], [-q, -q, self.rho - 1.0]])
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            name: "lorenz".into(),
            dim: 3,
            parameters: [("sigma", self.sigma), ("rho", self.rho), ("beta", self.beta)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            note: "Lorenz (1963) convection model".into(),
        }
    }
}

impl VectorField for Lorenz {
    fn dim(&self) -> usize {
        3
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * (x[1] - x[0]);
        out[1] = x[0] * (self.rho - x[2]) - x[1];
        out[2] = x[0] * x[1] - self.beta * x[2];
    }

    fn analytic_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        out[0] = self.sigma * (v[1] - v[0]);
        out[1] = (self.rho - x[2]) * v[0] - v[1] - x[0] * v[2];
        out[2] = x[1] * v[0] + x[0] * v[1] - self.beta * v[2];
        true
    }
}

/// Linear field `x' = A x` with a dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim || dim == 0 {
            return Err(Error::InvalidInput(format!("linear field needs a {dim}x{dim} matrix")));
        }
        Ok(Self { dim, matrix })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut matrix = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * n + i] = *d;
        }
        Self { dim: n, matrix }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.matrix[i * self.dim..(i + 1) * self.dim], x);
        }
    }

    fn analytic_jacobian_action(&self, _x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        self.eval(v, out);
        true
    }
}

/// Repelling limit cycle in a 2D plane with a contracting complement, in
/// rotated coordinates `x = Q w`:
///
/// ```text
/// p' = (a/2)(r^2 - 1) p - omega q
/// q' = (a/2)(r^2 - 1) q + omega p        r^2 = p^2 + q^2
/// w_j' = -b w_j                          j >= 2
/// ```
///
/// The unit circle is a periodic orbit of period `2 pi / omega` with radial
/// Floquet multiplier `exp(a P)`; its unstable manifold is the plane
/// `span(Q e_0, Q e_1)`. `Q` is a fixed Householder reflection so that the
/// plane is not aligned with the coordinate axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSaddle {
    pub a: f64,
    pub b: f64,
    pub omega: f64,
    dim: usize,
    reflector: Vec<f64>,
}

impl LinearSaddle {
    pub fn new(a: f64, b: f64, dim: usize) -> Result<Self> {
        Self::with_frequency(a, b, dim, 2.0 * std::f64::consts::PI)
    }

    pub fn with_frequency(a: f64, b: f64, dim: usize, omega: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidInput("linear_saddle rates a and b must be positive".into()));
        }
        if dim < 3 {
            return Err(Error::InvalidInput("linear_saddle needs dim >= 3".into()));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::InvalidInput("linear_saddle frequency must be positive".into()));
        }
        let mut u: Vec<f64> = (0..dim).map(|i| 1.0 + 0.37 * i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let un = norm(&u);
        u.iter_mut().for_each(|x| *x /= un);
        Ok(Self { a, b, omega, dim, reflector: u })
    }

    fn reflect(&self, x: &[f64]) -> Vec<f64> {
        let c = 2.0 * dot(&self.reflector, x);
        x.iter().zip(&self.reflector).map(|(xi, ui)| xi - c * ui).collect()
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    /// Exact leading Floquet multiplier of the cycle.
    pub fn multiplier(&self) -> f64 {
        (self.a * self.period()).exp()
    }

    /// Point `Q e_0` on the periodic orbit.
    pub fn periodic_point(&self) -> Vec<f64> {
        self.basis_vector(0)
    }

    /// Unit vector `Q e_i`.
    pub fn basis_vector(&self, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.dim];
        e[i] = 1.0;
        self.reflect(&e)
    }

    /// Orthonormal basis of the unstable plane.
    pub fn unstable_plane(&self) -> [Vec<f64>; 2] {
        [self.basis_vector(0), self.basis_vector(1)]
    }

    /// Euclidean distance from `x` to the unstable plane.
    pub fn distance_to_plane(&self, x: &[f64]) -> f64 {
        let w = self.reflect(x);
        norm(&w[2..])
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            name: "linear_saddle".into(),
            dim: self.dim,
            parameters: [("a", self.a), ("b", self.b), ("omega", self.omega)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            note: "repelling planar cycle with contracting complement; exact unstable plane".into(),
        }
    }
}

impl VectorField for LinearSaddle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let w = self.reflect(x);
        let (p, q) = (w[0], w[1]);
        let s = 0.5 * self.a * (p * p + q * q - 1.0);
        let mut g = vec![0.0; self.dim];
        g[0] = s * p - self.omega * q;
        g[1] = s * q + self.omega * p;
        for j in 2..self.dim {
            g[j] = -self.b * w[j];
        }
        out.copy_from_slice(&self.reflect(&g));
    }

    fn analytic_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        let w = self.reflect(x);
        let dw = self.reflect(v);
        let (p, q) = (w[0], w[1]);
        let s = 0.5 * self.a * (p * p + q * q - 1.0);
        let mut g = vec![0.0; self.dim];
        g[0] = (s + self.a * p * p) * dw[0] + (self.a * p * q - self.omega) * dw[1];
        g[1] = (self.a * p * q + self.omega) * dw[0] + (s + self.a * q * q) * dw[1];
        for j in 2..self.dim {
            g[j] = -self.b * dw[j];
        }
        out.copy_from_slice(&self.reflect(&g));
        true
    }
}

/// Generic quadratic ODE `x_i' = b_i + L_ij x_j + Q_ijk x_j x_k` loaded from
/// a sparse text description. This is the form taken by Galerkin truncations
/// of fluid equations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuadraticModel {
    dim: usize,
    constant: Vec<(usize, f64)>,
    linear: Vec<(usize, usize, f64)>,
    quadratic: Vec<(usize, usize, usize, f64)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Dim,
    Constant,
    Linear,
    Quadratic,
}

impl QuadraticModel {
    pub fn new(
        dim: usize,
        constant: Vec<(usize, f64)>,
        linear: Vec<(usize, usize, f64)>,
        quadratic: Vec<(usize, usize, usize, f64)>,
    ) -> Result<Self> {
        let bad = constant.iter().any(|&(i, _)| i >= dim)
            || linear.iter().any(|&(i, j, _)| i >= dim || j >= dim)
            || quadratic.iter().any(|&(i, j, k, _)| i >= dim || j >= dim || k >= dim);
        if dim == 0 || bad {
            return Err(Error::InvalidInput("quadratic model index out of range".into()));
        }
        Ok(Self { dim, constant, linear, quadratic })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses the sectioned text format (`[dim]`, `[constant]`, `[linear]`,
    /// `[quadratic]`; 0-based indices followed by a coefficient; `#` starts a
    /// comment).
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = None;
        let mut dim: Option<usize> = None;
        let mut model = QuadraticModel::default();
        let err = |line: usize, msg: &str| Error::ModelParse { line, msg: msg.to_string() };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = Some(match line {
                    "[dim]" => Section::Dim,
                    "[constant]" => Section::Constant,
                    "[linear]" => Section::Linear,
                    "[quadratic]" => Section::Quadratic,
                    other => return Err(err(line_no, &format!("unknown section {other}"))),
                });
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let sec = section.ok_or_else(|| err(line_no, "entry before any section header"))?;
            if sec == Section::Dim {
                if fields.len() != 1 || dim.is_some() {
                    return Err(err(line_no, "[dim] takes exactly one integer"));
                }
                let d: usize = fields[0].parse().map_err(|_| err(line_no, "dimension is not an integer"))?;
                if d == 0 {
                    return Err(err(line_no, "dimension must be positive"));
                }
                dim = Some(d);
                continue;
            }
            let n = dim.ok_or_else(|| err(line_no, "[dim] must precede coefficient sections"))?;
            let nidx = match sec {
                Section::Constant => 1,
                Section::Linear => 2,
                Section::Quadratic => 3,
                Section::Dim => unreachable!(),
            };
            if fields.len() != nidx + 1 {
                return Err(err(line_no, &format!("expected {nidx} indices and a coefficient")));
            }
            let mut ix = [0usize; 3];
            for (slot, f) in fields[..nidx].iter().enumerate() {
                let v: usize = f.parse().map_err(|_| err(line_no, &format!("bad index {f}")))?;
                if v >= n {
                    return Err(err(line_no, &format!("index {v} out of range for dimension {n}")));
                }
                ix[slot] = v;
            }
            let c: f64 = fields[nidx].parse().map_err(|_| err(line_no, "bad coefficient"))?;
            if !c.is_finite() {
                return Err(err(line_no, "coefficient is not finite"));
            }
            match sec {
                Section::Constant => model.constant.push((ix[0], c)),
                Section::Linear => model.linear.push((ix[0], ix[1], c)),
                Section::Quadratic => model.quadratic.push((ix[0], ix[1], ix[2], c)),
                Section::Dim => unreachable!(),
            }
        }
        model.dim = dim.ok_or_else(|| err(text.lines().count().max(1), "missing [dim] section"))?;
        Ok(model)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("[dim]\n{}\n[constant]\n", self.dim);
        for (i, c) in &self.constant {
            s.push_str(&format!("{i} {c:e}\n"));
        }
        s.push_str("[linear]\n");
        for (i, j, c) in &self.linear {
            s.push_str(&format!("{i} {j} {c:e}\n"));
        }
        s.push_str("[quadratic]\n");
        for (i, j, k, c) in &self.quadratic {
            s.push_str(&format!("{i} {j} {k} {c:e}\n"));
        }
        s
    }

    /// Rate of change of `|x|^2` contributed by the quadratic terms alone.
    pub fn quadratic_energy_rate(&self, x: &[f64]) -> f64 {
        self.quadratic.iter().map(|&(i, j, k, c)| 2.0 * x[i] * c * x[j] * x[k]).sum()
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            name: "quadratic".into(),
            dim: self.dim,
            parameters: BTreeMap::new(),
            note: format!(
                "{} constant, {} linear, {} quadratic terms",
                self.constant.len(),
                self.linear.len(),
                self.quadratic.len()
            ),
        }
    }
}

impl VectorField for QuadraticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(i, c) in &self.constant {
            out[i] += c;
        }
        for &(i, j, c) in &self.linear {
            out[i] += c * x[j];
        }
        for &(i, j, k, c) in &self.quadratic {
            out[i] += c * x[j] * x[k];
        }
    }

    fn analytic_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(i, j, c) in &self.linear {
            out[i] += c * v[j];
        }
        for &(i, j, k, c) in &self.quadratic {
            out[i] += c * (v[j] * x[k] + x[j] * v[k]);
        }
        true
    }
}

/// Serializable model selection used by run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSelection {
    Lorenz {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    LinearSaddle {
        a: f64,
        b: f64,
        dim: usize,
        #[serde(default)]
        omega: Option<f64>,
    },
    Quadratic {
        path: String,
    },
    Linear {
        dim: usize,
        matrix: Vec<f64>,
    },
}

fn default_sigma() -> f64 {
    10.0
}
fn default_rho() -> f64 {
    28.0
}
fn default_beta() -> f64 {
    8.0 / 3.0
}

impl ModelSelection {
    /// Instantiates the field. Relative plugin paths resolve against `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> Result<(Arc<dyn VectorField>, ModelSpec)> {
        Ok(match self {
            ModelSelection::Lorenz { sigma, rho, beta } => {
                let m = Lorenz::new(*sigma, *rho, *beta)?;
                let spec = m.spec();
                (Arc::new(m), spec)
            }
            ModelSelection::LinearSaddle { a, b, dim, omega } => {
                let m = match omega {
                    Some(w) => LinearSaddle::with_frequency(*a, *b, *dim, *w)?,
                    None => LinearSaddle::new(*a, *b, *dim)?,
                };
                let spec = m.spec();
                (Arc::new(m), spec)
            }
            ModelSelection::Quadratic { path } => {
                let p = Path::new(path);
                let full = match base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.to_path_buf(),
                };
                let m = QuadraticModel::from_file(full)?;
                let spec = m.spec();
                (Arc::new(m), spec)
            }
            ModelSelection::Linear { dim, matrix } => {
                let m = LinearField::new(*dim, matrix.clone())?;
                let spec = ModelSpec { name: "linear".into(), dim: *dim, parameters: BTreeMap::new(), note: String::new() };
                (Arc::new(m), spec)
            }
        })
    }
}
