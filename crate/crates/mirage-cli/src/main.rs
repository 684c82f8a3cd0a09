//! `mirage`: build co-occurrence graphs from generated descriptions,
//! corrupt them into preference pairs, drive curriculum-scheduled
//! iterations, and evaluate hallucination metrics.
//!
//! Exit codes: 0 success, 2 configuration error, 3 malformed or
//! unusable input data, 4 filesystem I/O failure, 5 backend or hook
//! failure (including an exceeded backend-failure budget).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use mirage_core::Error;

#[derive(Parser)]
#[command(
    name = "mirage",
    version,
    about = "Hallucination self-injection pipeline: preference-pair synthesis and evaluation"
)]
struct Cli {
    /// TOML configuration file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all randomized behavior (config: master_seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Lexicon file (config: paths.lexicon).
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,

    /// Guiding-template file (config: paths.templates).
    #[arg(long, global = true)]
    templates: Option<PathBuf>,

    /// Backend kind, "mock" or "http" (config: backend.kind).
    #[arg(long, global = true)]
    backend: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a co-occurrence graph from a response corpus.
    BuildGraph {
        /// Response corpus (JSONL: sample_id, image_ref, prompt, text).
        #[arg(long)]
        corpus: PathBuf,
        /// Output graph file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a response corpus into preference pairs.
    Inject {
        /// Response corpus (JSONL).
        #[arg(long)]
        corpus: PathBuf,
        /// Co-occurrence graph built from a compatible corpus.
        #[arg(long)]
        graph: PathBuf,
        /// Output preference dataset (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Injection rate in (0, 1] (config: injection.rho).
        #[arg(long)]
        rho: Option<f64>,
        /// Iteration index recorded in the output and mixed into seeds.
        #[arg(long, default_value_t = 0)]
        iteration: u32,
    },
    /// Run the full iterative pipeline under the configured run directory.
    Iterate {
        /// Continue an aborted run instead of refusing to overwrite it.
        #[arg(long)]
        resume: bool,
        /// Run directory name (config: run.run_id).
        #[arg(long)]
        run_id: Option<String>,
        /// Parent directory for runs (config: paths.output_root).
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Hallucination metrics and diagnostics.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Train the built-in toy preference model and print per-epoch stats.
    ToyDpo(ToyDpoArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Hallucinated-object and hallucinated-response rates.
    Chair {
        #[arg(long)]
        responses: PathBuf,
        /// Ground truth (TSV: sample_id<TAB>tag,tag,...).
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-step Hellinger distance between image and text-only heads.
    Pdmh {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Log-probability gap between the two sides of each pair.
    Gap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Hallucination rate by normalized sentence position.
    Positional {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Co-occurrence ranks of hallucinated tags against correct ones.
    CooccurStats {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ToyDpoArgs {
    /// Number of synthetic preference pairs.
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    /// Preference-strength coefficient.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 20.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1500)]
    epochs: usize,
    /// Write the full per-epoch stats (JSONL) here.
    #[arg(long)]
    stats: Option<PathBuf>,
}

fn apply_overrides(config: &mut RunConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(lexicon) = &cli.lexicon {
        config.paths.lexicon = lexicon.display().to_string();
    }
    if let Some(templates) = &cli.templates {
        config.paths.templates = templates.display().to_string();
    }
    if let Some(backend) = &cli.backend {
        config.backend.kind = backend.clone();
    }
}

fn run(cli: Cli) -> mirage_core::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut config, &cli);
    match &cli.command {
        Command::BuildGraph { corpus, out } => commands::build_graph_cmd(&config, corpus, out),
        Command::Inject {
            corpus,
            graph,
            out,
            rho,
            iteration,
        } => {
            if let Some(rho) = rho {
                config.injection.rho = *rho;
            }
            if !(config.injection.rho > 0.0 && config.injection.rho <= 1.0) {
                return Err(Error::Config(format!(
                    "injection rate must lie in (0, 1], got {}",
                    config.injection.rho
                )));
            }
            commands::inject_cmd(&config, corpus, graph, out, *iteration)
        }
        Command::Iterate {
            resume,
            run_id,
            output_root,
        } => {
            if let Some(run_id) = run_id {
                config.run.run_id = run_id.clone();
            }
            if let Some(root) = output_root {
                config.paths.output_root = root.display().to_string();
            }
            commands::iterate_cmd(&config, *resume)
        }
        Command::Eval { what } => match what {
            EvalCommand::Chair {
                responses,
                annotations,
                report,
            } => commands::eval_chair_cmd(&config, responses, annotations, report.as_deref()),
            EvalCommand::Pdmh { responses, report } => {
                commands::eval_pdmh_cmd(&config, responses, report.as_deref())
            }
            EvalCommand::Gap { dataset, report } => {
                commands::eval_gap_cmd(&config, dataset, report.as_deref())
            }
            EvalCommand::Positional {
                dataset,
                bins,
                report,
            } => commands::eval_positional_cmd(&config, dataset, *bins, report.as_deref()),
            EvalCommand::CooccurStats {
                responses,
                annotations,
                graph,
                report,
            } => commands::eval_cooccur_cmd(
                &config,
                responses,
                annotations,
                graph,
                report.as_deref(),
            ),
        },
        Command::ToyDpo(args) => commands::toy_dpo_cmd(
            args.pairs,
            config.master_seed,
            args.beta,
            args.learning_rate,
            args.epochs,
            args.stats.as_deref(),
        ),
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) => 2,
        Error::Io { .. } => 4,
        Error::Transport(_)
        | Error::Rejected(_)
        | Error::Timeout(_)
        | Error::Capability(_)
        | Error::Hook(_) => 5,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
