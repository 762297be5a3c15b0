use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvqp_harness::report::{emit_csv, render_table};
use kvqp_harness::{run_sweep, HarnessError, Result, SweepConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "kvqp", version, about = "KV-cache quantized pruning sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write its CSV.
    Run {
        /// Config file, or `demo` for the built-in sweep.
        #[arg(long)]
        config: PathBuf,
        /// CSV path; defaults to the config's `output`, else sweep.csv in $KVQP_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        verbose: bool,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in demo sweep and print its table.
    Demo {
        #[arg(long)]
        verbose: bool,
    },
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn default_out(cfg: &SweepConfig) -> PathBuf {
    if let Some(p) = &cfg.output {
        return p.clone();
    }
    let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    dir.join("sweep.csv")
}

fn sweep(cfg: &SweepConfig, parallel: Option<usize>) -> Result<Vec<kvqp_harness::SweepRow>> {
    match parallel {
        None => run_sweep(cfg),
        Some(0) => Err(HarnessError::Config("--parallel must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(|| run_sweep(cfg)),
    }
}

fn run(config: &Path, out: Option<PathBuf>, parallel: Option<usize>) -> Result<()> {
    let cfg = SweepConfig::load(config)?;
    cfg.validate()?;
    let out = out.unwrap_or_else(|| default_out(&cfg));
    log::info!("seeds {:?}", cfg.seeds);
    let rows = sweep(&cfg, parallel)?;
    emit_csv(&rows, &out)?;
    print!("{}", render_table(&rows));
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            parallel,
            verbose,
        } => {
            init_logging(verbose);
            run(&config, out, parallel)
        }
        Command::Validate { config } => {
            init_logging(false);
            SweepConfig::load(&config).and_then(|c| c.validate()).map(|()| println!("ok"))
        }
        Command::Demo { verbose } => {
            init_logging(verbose);
            run_sweep(&SweepConfig::demo()).map(|rows| print!("{}", render_table(&rows)))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
