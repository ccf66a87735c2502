use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use manifold_core::bvp::BoundaryCondition;
use manifold_core::continuation::ContinuationConfig;
use manifold_core::models::ModelSelection;
use manifold_core::ode::IntegratorConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    UnstablePo,
    UnstableEq,
    StablePo,
    StableEq,
}

impl Mode {
    pub fn is_periodic(self) -> bool {
        matches!(self, Mode::UnstablePo | Mode::StablePo)
    }

    pub fn reverse_time(self) -> bool {
        matches!(self, Mode::StablePo | Mode::StableEq)
    }
}

/// Initial guess for a periodic orbit, or a previously written orbit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSection {
    #[serde(default)]
    pub point: Option<Vec<f64>>,
    #[serde(default)]
    pub period: Option<f64>,
    /// Orbit JSON from `refine-po` or `floquet`; relative to the config file.
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// Residual tolerance for refinement; defaults to `1e-9 (1 + |x|)`.
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumSection {
    pub point: Vec<f64>,
}

/// Left boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSection {
    /// `eps0` for periodic orbits, the angle `theta0` for equilibria.
    pub value: f64,
    /// Side of the periodic orbit, `+1` or `-1` along `u1`.
    #[serde(default = "one")]
    pub sign: f64,
    /// Circle radius around an equilibrium.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Search horizon when seeding the segments.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn one() -> f64 {
    1.0
}

fn default_t_max() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelSelection,
    #[serde(default)]
    pub orbit: Option<OrbitSection>,
    #[serde(default)]
    pub equilibrium: Option<EquilibriumSection>,
    pub start: StartSection,
    pub bcs: Vec<BoundaryCondition>,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks everything that can be checked before computing.
    pub fn validate(&self) -> Result<()> {
        if self.bcs.is_empty() {
            bail!("at least one boundary condition is required");
        }
        for bc in &self.bcs {
            bc.clone().normalized()?;
        }
        self.continuation.validate()?;
        self.integrator.validate()?;
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        if self.mode.is_periodic() {
            let orbit = self.orbit.as_ref().context("periodic-orbit modes need an [orbit] table")?;
            if orbit.file.is_none() && (orbit.point.is_none() || orbit.period.is_none()) {
                bail!("[orbit] needs either `file` or both `point` and `period`");
            }
            if self.start.value.is_nan() || self.start.value <= 0.0 {
                bail!("start.value is eps0 and must be positive");
            }
        } else {
            if self.equilibrium.is_none() {
                bail!("equilibrium modes need an [equilibrium] table");
            }
            if !self.start.radius.is_some_and(|r| r > 0.0) {
                bail!("equilibrium modes need a positive start.radius");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config = RunConfig::parse(&text)?;
        let hash = config.hash()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir, hash })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.config.output) {
            (Some(dir), _) => dir.to_path_buf(),
            (None, Some(dir)) => self.resolve(dir),
            (None, None) => self.base_dir.join("out"),
        }
    }
}
