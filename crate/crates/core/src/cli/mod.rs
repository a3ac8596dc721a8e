//! The `linksae` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 computation.
//! Failures print one JSON object on stderr.

pub mod config;
mod commands;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
pub use config::Strategy;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_COMPUTE: i32 = 5;

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "LINKSAE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "linksae", version, about = "Record linkage and small-area estimation on linked data")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Random seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the environment and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fellegi–Sunter linkage: EM fit, scores and thresholded one-to-one links.
    LinkFs(Common),
    /// Bayesian linkage by MCMC over the matching.
    LinkBayes(Common),
    /// Unit-level EBLUP, optionally adjusted for linkage errors.
    SaeFit {
        #[command(flatten)]
        common: Common,
        /// Fit the linkage-error-adjusted model.
        #[arg(long)]
        adjusted: bool,
        /// Per-domain λ (`domain, lambda`).
        #[arg(long, conflicts_with = "audit_file")]
        lambda_file: Option<PathBuf>,
        /// True links for estimating λ from the audited links.
        #[arg(long)]
        audit_file: Option<PathBuf>,
    },
    /// Hierarchical Bayes unit-level model.
    SaeBayes {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
    },
    /// Replicated simulation comparing the estimators.
    Simulate(Common),
    /// Print the tables of a finished simulation.
    Report {
        /// Output directory of a `simulate` run.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a synthetic register, its perturbed copy and the true links.
    Generate(Common),
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) => ("config", EXIT_CONFIG),
        Error::Io { .. } | Error::Parse { .. } => ("io", EXIT_IO),
        _ => ("computation", EXIT_COMPUTE),
    }
}

fn emit_error(kind: &str, message: String, exit_code: i32) -> i32 {
    let line = ErrorLine {
        error: kind,
        message,
        exit_code,
    };
    eprintln!("{}", serde_json::to_string(&line).expect("error line serializes"));
    exit_code
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            return emit_error("usage", msg.trim().to_string(), EXIT_USAGE);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = classify(&e);
            emit_error(kind, e.to_string(), code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let body = || match cli.command {
        Command::LinkFs(c) => commands::link_fs(&c.config, &ctx(&c)),
        Command::LinkBayes(c) => commands::link_bayes(&c.config, &ctx(&c)),
        Command::SaeFit {
            common,
            adjusted,
            lambda_file,
            audit_file,
        } => commands::sae_fit(
            &common.config,
            &ctx(&common),
            commands::SaeFitFlags {
                adjusted,
                lambda_file,
                audit_file,
            },
        ),
        Command::SaeBayes { common, strategy } => commands::sae_bayes(&common.config, &ctx(&common), strategy),
        Command::Simulate(c) => commands::simulate(&c.config, &ctx(&c)),
        Command::Report { dir } => commands::report(&dir),
        Command::Generate(c) => commands::generate(&c.config, &ctx(&c)),
    };
    match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Command-line overrides shared by the subcommands.
pub(crate) struct RunCtx {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn ctx(c: &Common) -> RunCtx {
    RunCtx {
        seed: c.seed,
        out: c.out.clone(),
    }
}

impl RunCtx {
    /// Flag, then environment, then config.
    pub fn output_dir(&self, configured: Option<&Path>) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| configured.map(Path::to_path_buf))
            .ok_or_else(|| Error::Config(format!("no output directory: pass --out, set {OUT_DIR_ENV} or set output_dir")))?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn seed(&self, configured: Option<u64>) -> u64 {
        self.seed.or(configured).unwrap_or(0)
    }
}

#[derive(Serialize)]
pub(crate) struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub seed: Option<u64>,
    pub config_text: &'a str,
    pub config: &'a C,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub(crate) fn write_manifest<C: Serialize>(dir: &Path, m: &Manifest<'_, C>) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
