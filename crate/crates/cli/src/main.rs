mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfpm_core::builder::SandboxPolicy;

#[derive(Parser, Debug)]
#[command(
    name = "mfpm",
    version,
    about = "A miniature functional package manager with a reproducibility audit"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Physical directory backing the logical /mfpm/store
    #[arg(
        long = "store-root",
        alias = "store",
        global = true,
        env = "MFPM_STORE_ROOT",
        default_value = ".mfpm/store"
    )]
    pub store: PathBuf,
    /// Directory for records, reports, logs and shell environments
    #[arg(long, global = true, env = "MFPM_STATE_DIR", default_value = ".mfpm/state")]
    pub state: PathBuf,
    /// Directory fixed-output fetchers read sources from
    #[arg(long, global = true)]
    pub source_mirror: Option<PathBuf>,
    /// Log filter for diagnostics on stderr (e.g. info, mfpm_core=debug)
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Override an impure builtin, e.g. sysVersion=2.7 or inShell=true
    #[arg(long = "impure-stub", value_name = "NAME=VALUE")]
    pub impure_stubs: Vec<String>,
    /// Platform jobs are evaluated for
    #[arg(long, default_value = "x86_64-linux")]
    pub platform: String,
    /// Concurrent evaluation / build workers
    #[arg(long, default_value_t = 4)]
    pub max_parallel: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate a recipe file and list its jobs as `name drvPath outPath`
    Eval {
        file: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate a recipe file and realize jobs
    Build {
        file: PathBuf,
        /// Jobs to build (display names); all jobs when omitted
        attrs: Vec<String>,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "v2")]
        sandbox: SandboxPolicy,
        /// Binary cache (directory or http URL) to substitute from
        #[arg(long = "substituter")]
        substituters: Vec<String>,
        /// Rebuild this job even when its outputs exist or are cached
        #[arg(long = "force-rebuild", value_name = "ATTR")]
        force_rebuild: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Realize a job's inputs and write a shell rc file with its build environment
    ShellEnv {
        file: PathBuf,
        attr: String,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "v2")]
        sandbox: SandboxPolicy,
        #[arg(long = "substituter")]
        substituters: Vec<String>,
    },
    /// Print a derivation file as pretty JSON
    ShowDrv {
        /// Store path of a .drv file (logical or physical)
        path: String,
    },
    /// Continuous integration
    #[command(subcommand)]
    Ci(CiCommand),
    /// Binary cache operations
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Reproducibility audit of recorded revisions
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Canonical archives of store objects
    #[command(subcommand)]
    Archive(ArchiveCommand),
}

#[derive(Subcommand, Debug)]
pub enum CiCommand {
    /// Evaluate, build and record every revision of a manifest
    Run {
        /// Directory holding the revision snapshots
        #[arg(long)]
        revisions: PathBuf,
        /// `<timestamp>\t<dirname>` manifest (default: <revisions>/revisions.tsv)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Binary cache directory or URL to push to
        #[arg(long)]
        cache: String,
        /// Comma-separated jobs that must succeed for the channel to advance
        #[arg(long, value_delimiter = ',')]
        important: Vec<String>,
        #[arg(long, default_value = "v2")]
        sandbox: SandboxPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop jobs with dotted attribute names, as the old CI did
        #[arg(long)]
        simulate_dot_bug: bool,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum CacheCommand {
    /// Serve a cache directory over HTTP
    Serve {
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ThresholdArgs {
    /// Minimum output-path match rate for a passing audit
    #[arg(long, default_value_t = 1.0)]
    pub min_match_rate: f64,
    /// Minimum rebuild success rate for a passing audit
    #[arg(long, default_value_t = 1.0)]
    pub min_success_rate: f64,
    /// Pass even if the job sets differ
    #[arg(long)]
    pub allow_job_set_diff: bool,
}

#[derive(Subcommand, Debug)]
pub enum AuditCommand {
    /// Choose regularly spaced revisions from a manifest
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(short = 'k', long, default_value_t = 200)]
        k: usize,
    },
    /// Re-evaluate a recorded revision and compare job sets and output paths
    Eval {
        /// Revision id, id prefix or snapshot name
        #[arg(long)]
        revision: String,
        /// Ignore dotted job names on both sides
        #[arg(long)]
        hydra_dot_bug: bool,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Rebuild the historically successful jobs of a revision
    Rebuild {
        #[arg(long)]
        revision: String,
        #[arg(long)]
        cache: String,
        #[arg(long, default_value = "v2")]
        sandbox: SandboxPolicy,
        #[arg(long, default_value_t = 3)]
        retries: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum ArchiveCommand {
    /// Write the canonical archive of a store path
    Export {
        path: String,
        /// Output file (stdout when omitted)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Register an archive file under a store path
    Import {
        #[arg(long)]
        path: String,
        file: PathBuf,
        #[arg(long = "reference")]
        references: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .or_else(|_| tracing_subscriber::EnvFilter::try_new(&cli.global.log_level))
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();

    match commands::run(cli.global, cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
