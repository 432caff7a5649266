use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use terrafit::config::RunConfig;
use terrafit::pipeline;
use terrafit::render::Palette;
use terrafit::scalespace::CredState;
use terrafit::Error;

/// Layered compaction fields and scale-space credibility maps from roller
/// measurement values.
#[derive(Parser)]
#[command(name = "terrafit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic RMV data and the true fields.
    Simulate(RunArgs),
    /// Fit every selected cell and write fit.json plus estimated fields.
    Fit(RunArgs),
    /// Draw posterior samples from fit.json and write their mean and sd.
    Sample(RunArgs),
    /// Credibility maps for every layer and smoothing level.
    Scalespace(RunArgs),
    /// Fit, sample and scale space in one run.
    Pipeline(RunArgs),
    /// Render grid CSV files to PPM images with a legend.
    Render(RenderArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Analyze only this cell.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// smooth_sign or detail.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// diverging or grayscale.
    #[arg(long, default_value = "diverging")]
    palette: String,
    /// Pixels per grid node along each axis.
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Directory for the images; defaults to next to each input.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(cell) = &args.cell {
        cfg.cells = Some(vec![cell.clone()]);
        cfg.sim_cell = cell.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse().map_err(|e: Error| Failure::Config(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("TERRAFIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("TERRAFIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn warn_unconverged(report: &pipeline::FitReport) {
    for (layer, est) in report.fit.layers.iter().zip(&report.fit.estimates) {
        if !est.converged {
            eprintln!(
                "warning: cell {} layer {} did not converge in {} iterations (last change {:.3e})",
                report.cell,
                layer.index(),
                est.iterations,
                est.final_delta
            );
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            for path in pipeline::run_simulate(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Fit(args) => {
            let cfg = load_config(&args)?;
            for report in pipeline::run_fit(&cfg)? {
                warn_unconverged(&report);
                let iters: Vec<String> = report.fit.estimates.iter().map(|e| e.iterations.to_string()).collect();
                println!("cell {}: c = {}, iterations {}", report.cell, report.fit.c, iters.join("/"));
            }
            pipeline::write_manifest(&cfg, "fit")?;
        }
        Command::Sample(args) => {
            let cfg = load_config(&args)?;
            let summaries = pipeline::run_sample(&cfg)?;
            println!("{} cell(s), {} samples each", summaries.len(), cfg.samples);
            pipeline::write_manifest(&cfg, "sample")?;
        }
        Command::Scalespace(args) => {
            let cfg = load_config(&args)?;
            for (cell, maps) in pipeline::run_scalespace(&cfg)? {
                println!("cell {cell}: {} maps", maps.len());
            }
            pipeline::write_manifest(&cfg, "scalespace")?;
        }
        Command::Pipeline(args) => {
            let cfg = load_config(&args)?;
            for result in pipeline::run_pipeline(&cfg)? {
                warn_unconverged(&result.report);
                println!("cell {}: c = {}", result.report.cell, result.report.fit.c);
                for map in &result.maps {
                    println!(
                        "  layer {} lambda {}: {} soft, {} undecided, {} hard",
                        map.layer.map_or(0, |l| l.index()),
                        map.lambda,
                        map.count(CredState::CredNegative),
                        map.count(CredState::Undecided),
                        map.count(CredState::CredPositive)
                    );
                }
            }
            pipeline::write_manifest(&cfg, "pipeline")?;
        }
        Command::Render(args) => {
            let palette: Palette = args.palette.parse().map_err(|e: Error| Failure::Config(e.to_string()))?;
            for file in &args.files {
                let out = pipeline::render_grid_file(file, palette, args.scale, args.out.as_deref())?;
                println!("{}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
