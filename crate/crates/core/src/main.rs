use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trendlens::pipeline::{error_kind, exit_code, Command, Pipeline, PipelineConfig};
use trendlens::Error;

#[derive(Parser)]
#[command(name = "trendlens", version, about = "Feature influence scoring and sales-class forecasting for product catalogs")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of sales classes (3, 4 or 5).
    #[arg(long, global = true)]
    classes: Option<u8>,
    /// Frequency weight in the influence score.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Synonym similarity threshold.
    #[arg(long, global = true)]
    tau0: Option<f64>,
    /// builtin, file:<path> or remote:<url>.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic catalog (and images) under <out>/raw.
    Synth,
    /// Validate a catalog and store it as <out>/catalog.jsonl.
    Ingest {
        /// Catalog to read (JSONL or CSV); overrides paths.catalog.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the cleaned phrase universe with frequencies.
    Clean,
    /// Group synonymous phrases and map captions to canonical features.
    Cluster,
    /// Rank features by influence score.
    Score,
    /// Split the catalog and assign quantile sales classes.
    Label,
    /// Fit the encoder and train the forest.
    Train,
    /// Kendall tau over product triples.
    EvalTriples,
    /// Feature-removal ablation on top and bottom features.
    Ablate,
    /// Accuracy, triplet and ablation tables plus a sales histogram.
    Report,
}

fn config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = cli.classes {
        cfg.classes = c;
    }
    if let Some(l) = cli.lambda {
        cfg.lambda = l;
    }
    if let Some(t) = cli.tau0 {
        cfg.dedup.tau0 = t;
    }
    if let Some(p) = &cli.provider {
        cfg.provider = p.clone();
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if let Cmd::Ingest { input: Some(path) } = &cli.command {
        cfg.paths.catalog = Some(path.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let command = match cli.command {
        Cmd::Synth => Command::Synth,
        Cmd::Ingest { .. } => Command::Ingest,
        Cmd::Clean => Command::Clean,
        Cmd::Cluster => Command::Cluster,
        Cmd::Score => Command::Score,
        Cmd::Label => Command::Label,
        Cmd::Train => Command::Train,
        Cmd::EvalTriples => Command::EvalTriples,
        Cmd::Ablate => Command::Ablate,
        Cmd::Report => Command::Report,
    };
    let pipeline = Pipeline::new(config(cli)?)?;
    let entry = pipeline.run(&command)?;
    for (path, hash) in &entry.outputs {
        println!("{hash}  {path}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{line}");
            ExitCode::from(code as u8)
        }
    }
}
