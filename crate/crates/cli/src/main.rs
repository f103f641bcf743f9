use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arbenkf::harness::{self, Experiment, CACHE_DIR_ENV};
use arbenkf::ExperimentConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

mod selftest;

#[derive(Parser)]
#[command(name = "arbenkf", version, about = "Twin experiments for adaptive reduced-basis ensemble Kalman filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the truth trajectory and archive into the cache directory.
    Truth(Common),
    /// Run all replicates of one configuration and write the results.
    Run {
        #[command(flatten)]
        common: Common,
        /// Results directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Nodes per axis.
    #[arg(long)]
    mesh: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

/// Failure reported as a single JSON object on stderr.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<arbenkf::Error> for Failure {
    fn from(e: arbenkf::Error) -> Self {
        let (kind, code) = match e {
            arbenkf::Error::Config(_) | arbenkf::Error::InvalidMesh(_) | arbenkf::Error::UnalignedMesh => ("config", 2),
            arbenkf::Error::Io(_) => ("io", 1),
            _ => ("runtime", 1),
        };
        Failure { kind, message: e.to_string(), code }
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure { kind: "io", message: format!("{}: {e}", p.display()), code: 1 })?;
                ExperimentConfig::from_kv_str(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
        }
        if let Some(m) = self.mesh {
            cfg.mesh = m;
        }
        cfg.validate()?;
        if let Some(t) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| Failure { kind: "config", message: format!("thread pool: {e}"), code: 2 })?;
        }
        Ok(cfg)
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV).map_or_else(|| PathBuf::from("arbenkf-cache"), PathBuf::from)
}

fn truth(common: &Common) -> Result<(), Failure> {
    let cfg = common.resolve()?;
    let exp = Experiment::new(cfg)?;
    let dir = cache_dir();
    let t = harness::load_or_generate_truth(&exp, Some(&dir))?;
    let out = json!({
        "truth_hash": exp.config.truth_hash(),
        "cache_dir": dir,
        "n_dofs": exp.model.n_dofs(),
        "windows": t.states.ncols(),
        "archive_snapshots": t.archive.len(),
    });
    println!("{out}");
    Ok(())
}

fn run(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = common.resolve()?;
    let exp = Experiment::new(cfg)?;
    let t = harness::load_or_generate_truth(&exp, Some(&cache_dir()))?;
    let records = harness::run_replicates(&exp, &t)?;
    harness::emit_results(&exp.config, &records, out)?;
    print!("{}", harness::report(out)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            return fail(Failure { kind: "usage", message: message.trim().to_string(), code: 2 });
        }
    };
    let result = match &cli.command {
        Command::Truth(c) => truth(c),
        Command::Run { common, out } => run(common, out),
        Command::Report { out } => harness::report(out).map(|r| print!("{r}")).map_err(Failure::from),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
    ExitCode::from(f.code)
}
