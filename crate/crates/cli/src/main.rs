use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mctnerf::pipeline::{self, PipelineConfig, PipelineError, RunOptions};

/// Environment variable that overrides `paths.output`.
const OUTPUT_ENV: &str = "MCTNERF_OUTPUT";

#[derive(Parser)]
#[command(name = "mctnerf", version, about = "Tiled radiance-field reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "mctnerf.toml")]
    config: PathBuf,

    /// Restrict training and the sampling comparison to one region, as ROW,COL.
    #[arg(long, global = true, value_parser = parse_region)]
    region: Option<(usize, usize)>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Write zero wall-clock times so repeated runs are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into poses, images and a reference cloud.
    Synth,
    /// Split the scene into sub-regions.
    Partition,
    /// Cut per-region tiles from the source images.
    Tile,
    /// Train one field per sub-region.
    Train,
    /// Render color and depth for every source view.
    Render,
    /// Fuse depth maps into a point cloud and a TSDF mesh.
    Extract,
    /// Compare the reconstruction with the reference cloud.
    Eval,
    /// Aggregate memory, convergence and metric outputs.
    Report,
    /// Every stage in order.
    Run,
}

fn parse_region(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    Ok((r.trim().parse().map_err(|e| format!("row: {e}"))?, c.trim().parse().map_err(|e| format!("col: {e}"))?))
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(out) = std::env::var_os(OUTPUT_ENV) {
        cfg.paths.output = PathBuf::from(out);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| PipelineError::Other(e.to_string()))?;
    }
    let opts = RunOptions { region: cli.region, deterministic: cli.deterministic };
    match cli.command {
        Command::Synth => println!("rendered {} views", pipeline::cmd_synth(&cfg)?),
        Command::Partition => println!("{} regions", pipeline::cmd_partition(&cfg)?.regions.len()),
        Command::Tile => {
            let m = pipeline::cmd_tile(&cfg)?;
            let n: usize = m.regions.iter().map(|r| r.tiles.len()).sum();
            println!("{n} tiles, {} failures", m.failures.len());
            for (view, reason) in &m.failures {
                eprintln!("tile from {view} skipped: {reason}");
            }
        }
        Command::Train => {
            for s in pipeline::cmd_train(&cfg, &opts)? {
                println!("{}: {} iterations, {}", s.region, s.iters, s.outcome);
            }
        }
        Command::Render => {
            for (view, psnr) in pipeline::cmd_render(&cfg)? {
                println!("{view}: {psnr:.2} dB");
            }
        }
        Command::Extract => {
            let s = pipeline::cmd_extract(&cfg)?;
            println!("{} points, {} vertices, {} triangles", s.points, s.vertices, s.triangles);
        }
        Command::Eval => pipeline::cmd_eval(&cfg, &opts)?,
        Command::Report => print!("{}", pipeline::cmd_report(&cfg)?),
        Command::Run => print!("{}", pipeline::run_all(&cfg, &opts)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
