use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub manifold_version: String,
    pub config_hash: String,
}

impl Header {
    pub fn new(config_hash: &str) -> Self {
        Self { manifold_version: VERSION.into(), config_hash: config_hash.into() }
    }

    fn csv_line(&self) -> String {
        format!("# manifold {} config_hash={}", self.manifold_version, self.config_hash)
    }
}

/// JSON outputs wrap their payload next to the header.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub header: Header,
    #[serde(flatten)]
    pub body: T,
}

pub struct OutDir {
    pub dir: PathBuf,
    pub header: Header,
}

impl OutDir {
    pub fn create(dir: PathBuf, header: Header) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, header })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let env = Envelope { header: self.header.clone(), body };
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        serde_json::to_writer_pretty(&mut w, &env)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(path)
    }

    /// CSV with a `#` provenance line before the column names.
    pub fn write_csv(&self, name: &str, columns: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<PathBuf> {
        let path = self.path(name);
        let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(file, "{}", self.header.csv_line())?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(columns)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(path)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
