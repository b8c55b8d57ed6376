use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use care_cli::commands::{self, CasesArgs, CurateArgs, ReportArgs, RunArgs, SimulateArgs};
use care_cli::report::render_markdown;
use care_core::canonical::to_canonical_json;
use care_core::orchestrator::PipelineId;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "care", version, about = "Contrastive two-hypothesis adjudication harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a labelled manifest: XOR labels, hedge exclusion, class balance.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hedge phrase list, one per line; built-in list when omitted.
        #[arg(long)]
        phrases: Option<PathBuf>,
        /// Allowed class-count gap after balancing.
        #[arg(long, default_value_t = 0)]
        tolerance: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured pipelines into a resumable run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Run pipelines on synthetic studies through the simulator backend.
    Simulate {
        #[arg(long)]
        sim_config: Option<PathBuf>,
        #[arg(long, default_value = "edema_vs_pneumonia")]
        task: String,
        #[arg(long, short = 'n', default_value_t = 10_000)]
        n_studies: usize,
        #[arg(long, value_delimiter = ',', default_value = "baseline,majority_vote_3,care")]
        pipelines: Vec<PipelineId>,
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
        #[arg(long, default_value_t = 0)]
        width: usize,
        #[arg(long, default_value_t = 9999)]
        n_perm: u64,
        #[arg(long, default_value_t = 0)]
        perm_seed: u64,
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-study records under `<out>/records`.
        #[arg(long, requires = "out")]
        records: bool,
    },
    /// Build metric and comparison tables from finished run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Row pair `A,B` to compare; repeatable.
        #[arg(long = "compare")]
        comparisons: Vec<String>,
        #[arg(long, default_value_t = 9999)]
        n_perm: u64,
        #[arg(long, default_value_t = 0)]
        perm_seed: u64,
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export CARE cases as JSON lines, optionally filtered.
    Cases {
        run_dir: PathBuf,
        #[arg(long)]
        pipeline: Option<PipelineId>,
        /// e.g. `contradictory>0`, `unsupported_b>=1`, `overturned`; repeat to AND.
        #[arg(long = "filter")]
        filters: Vec<String>,
        /// Print only study ids.
        #[arg(long)]
        ids: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Curate {
            manifest,
            task,
            seed,
            phrases,
            tolerance,
            out,
        } => {
            let report = commands::cmd_curate(&CurateArgs {
                manifest,
                task,
                seed,
                phrases,
                tolerance,
                out,
            })?;
            print!("{}", report.summary());
        }
        Command::Run { config, out, run_dir } => {
            let outcome = commands::cmd_run(&RunArgs { config, out, run_dir })?;
            for p in &outcome.pipelines {
                println!(
                    "{}: {} completed, {} resumed, {} failed",
                    p.pipeline,
                    p.completed,
                    p.skipped,
                    p.failed.len()
                );
                for (id, err) in &p.failed {
                    eprintln!("  {id}: {err}");
                }
            }
            println!(
                "run directory {} ({} backend calls)",
                outcome.dir.display(),
                outcome.backend_calls
            );
            if !outcome.all_completed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Simulate {
            sim_config,
            task,
            n_studies,
            pipelines,
            run_seed,
            width,
            n_perm,
            perm_seed,
            bootstrap,
            out,
            records,
        } => {
            let table = commands::cmd_simulate(&SimulateArgs {
                sim_config,
                task,
                n_studies,
                pipelines,
                run_seed,
                width,
                n_perm,
                perm_seed,
                bootstrap,
                out,
                write_records: records,
            })?;
            print!("{}", render_markdown(&table));
        }
        Command::Report {
            run_dirs,
            comparisons,
            n_perm,
            perm_seed,
            bootstrap,
            out,
        } => {
            let table = commands::cmd_report(&ReportArgs {
                run_dirs,
                comparisons,
                n_perm,
                perm_seed,
                bootstrap,
                out,
            })?;
            print!("{}", render_markdown(&table));
        }
        Command::Cases {
            run_dir,
            pipeline,
            filters,
            ids,
        } => {
            let cases = commands::cmd_cases(&CasesArgs {
                run_dir,
                pipeline,
                filters,
            })?;
            for c in &cases {
                if ids {
                    println!("{}", c.study_id);
                } else {
                    println!("{}", to_canonical_json(c)?);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
