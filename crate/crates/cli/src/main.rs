mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

use commands::CommandFailure;
use config::Loaded;
use output::OutDir;

/// Two-dimensional unstable and stable manifolds of periodic orbits and
/// equilibria by multiple shooting and pseudo-arclength continuation.
#[derive(Parser)]
#[command(name = "manifold", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for segment integration.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine the periodic-orbit guess from the config.
    RefinePo,
    /// Compute the leading Floquet pair of a refined orbit.
    Floquet {
        /// Orbit file; defaults to the config's `orbit.file` or the output directory.
        #[arg(long)]
        orbit: Option<PathBuf>,
    },
    /// Seed and continue the manifold, writing the mesh and run logs.
    Continue {
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the dense oracles and the GMRES iteration bound on small problems.
    Verify,
    /// Flatten a mesh file into CSV tables for plotting.
    Export {
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    if cli.workers == Some(0) {
        anyhow::bail!("--workers must be at least 1");
    }
    let loaded = cli.config.as_deref().map(Loaded::from_path).transpose()?;
    let dir = match &loaded {
        Some(l) => l.output_dir(cli.out.as_deref()),
        None => cli.out.clone().unwrap_or_else(|| PathBuf::from("out")),
    };
    let out = OutDir::create(dir, commands::header_for(loaded.as_ref()))?;
    let need = |what: &str| loaded.as_ref().ok_or_else(|| commands::missing(what));
    match &cli.command {
        Command::RefinePo => commands::refine_po(need("refine-po")?, &out),
        Command::Floquet { orbit } => commands::floquet(need("floquet")?, &out, orbit.as_deref()),
        Command::Continue { checkpoint } => commands::continue_run(need("continue")?, &out, cli.workers, checkpoint.as_deref()),
        Command::Verify => commands::verify(loaded.as_ref(), &out, cli.workers),
        Command::Export { mesh } => commands::export(loaded.as_ref(), &out, mesh.as_deref()),
    }
}

fn error_kind(e: &anyhow::Error) -> String {
    if let Some(f) = e.downcast_ref::<CommandFailure>() {
        return f.kind.clone();
    }
    e.chain()
        .find_map(|c| c.downcast_ref::<manifold_core::Error>())
        .map_or_else(|| "cli".to_string(), |c| c.kind().to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MANIFOLD_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outputs) => {
            println!("{}", json!({ "status": "ok", "outputs": outputs }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let outputs = e.downcast_ref::<CommandFailure>().map(|f| f.outputs.clone()).unwrap_or_default();
            let report = json!({
                "status": "error",
                "error": { "kind": error_kind(&e), "message": format!("{e:#}") },
                "outputs": outputs,
            });
            println!("{report}");
            ExitCode::FAILURE
        }
    }
}
