use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparseseg::config::ExperimentConfig;
use sparseseg::pipeline;

#[derive(Parser)]
#[command(name = "sparseseg", version, about = "Few-shot segmentation from sparse labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic datasets.
    Synth,
    /// Meta-train on all tasks but the held-out one and pretrain finetune sources.
    MetaTrain,
    /// Tune every plan cell and save the adapted checkpoints.
    Adapt,
    /// Evaluate adapted checkpoints and write results.csv.
    Eval,
    /// Adapt and evaluate every cell, then write results and the report.
    Sweep,
    /// Rebuild the report from results.csv.
    Report,
}

fn load(cli: &Cli) -> sparseseg::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(command: Command, config: &ExperimentConfig) -> sparseseg::Result<()> {
    match command {
        Command::Synth => {
            let manifest = pipeline::synth(config)?;
            println!("wrote {} datasets", manifest.datasets.len());
        }
        Command::MetaTrain => {
            let summary = pipeline::meta_train(config)?;
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("log: {}", summary.log.display());
            for p in &summary.pretrained {
                println!("pretrained: {}", p.display());
            }
        }
        Command::Adapt => {
            let paths = pipeline::adapt(config)?;
            println!("adapted {} cells", paths.len());
        }
        Command::Eval => {
            let records = pipeline::eval(config)?;
            println!("evaluated {} cells", records.len());
        }
        Command::Sweep => {
            let summary = pipeline::sweep(config)?;
            println!("results: {} ({} rows)", summary.results.display(), summary.records.len());
            println!("report: {}", summary.report.aggregate_csv.display());
        }
        Command::Report => {
            let files = pipeline::report(config)?;
            println!("report: {} ({} figures)", files.aggregate_csv.display(), files.plots.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = load(&cli).and_then(|config| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build_global()
            .map_err(|e| sparseseg::Error::Config(format!("thread pool: {e}")))?;
        run(cli.command, &config)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code() as u8;
            let report = anyhow::Error::new(e).context(format!("{} failed", cli.config.display()));
            eprintln!("error: {report:#}");
            ExitCode::from(code)
        }
    }
}
