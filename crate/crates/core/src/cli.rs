//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
//! resume error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::data::{center_scale_for_separation, make_blobs, write_embeddings, BlobSpec};
use crate::error::Error;
use crate::orchestrator::report::{
    comparison_table, encode_metrics, read_metrics, summarize,
};
use crate::orchestrator::{load_config, rescore_run, run_experiment_with, Method};
use crate::orchestrator::checkpoint::{RunDir, METRICS_FILE, SNAPSHOT_FILE};
use crate::orchestrator::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "mscincd", version, about = "Class-incremental novel class discovery on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run or resume an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-key assignment applied to the config, e.g. train.epochs=50.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Write a labelled synthetic MSCE file of Gaussian blobs.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Center norm in within-class standard deviations.
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
        /// Center radius; overrides --separation.
        #[arg(long)]
        center_scale: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        within_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-score the saved step models of a run and print metrics CSV.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare the final metrics of several runs as a markdown table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, overrides, quiet } => {
            let cfg = load_config(&config, &overrides)?;
            let report = run_experiment_with(&cfg, |m| {
                if !quiet {
                    println!(
                        "step {}: accuracy {:.4} forgetting {:.4}",
                        m.step, m.accuracy, m.forgetting
                    );
                }
            })?;
            if !quiet {
                let state = if report.complete { "complete" } else { "stopped early" };
                println!("{} run {state}: {}", cfg.method, cfg.output_dir.display());
            }
            Ok(())
        }
        Command::Synth {
            classes,
            per_class,
            dim,
            views,
            separation,
            center_scale,
            within_std,
            seed,
            out,
        } => {
            let spec = BlobSpec {
                n_classes: classes,
                per_class,
                dim,
                views,
                center_scale: center_scale.unwrap_or_else(|| center_scale_for_separation(separation, within_std)),
                within_std,
                seed,
            };
            write_embeddings(&make_blobs(&spec)?, &out)
        }
        Command::Eval { run } => {
            let metrics = rescore_run(&run)?;
            let snap = std::fs::read_to_string(RunDir::new(&run).file(SNAPSHOT_FILE))
                .map_err(|e| Error::io(&run, e))?;
            let method = ExperimentConfig::from_toml(&snap)?.method;
            print!("{}", String::from_utf8_lossy(&encode_metrics(method, &metrics)));
            Ok(())
        }
        Command::Report { runs, out } => {
            let rows = runs
                .iter()
                .map(|r| read_metrics(&RunDir::new(r).file(METRICS_FILE)))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(bad) = rows.iter().flatten().find(|r| Method::parse(&r.method).is_none()) {
                return Err(Error::invalid(format!("unknown method {:?} in metrics", bad.method)));
            }
            let table = comparison_table(&summarize(&rows)?);
            match out {
                Some(path) => std::fs::write(&path, &table).map_err(|e| Error::io(&path, e)),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
