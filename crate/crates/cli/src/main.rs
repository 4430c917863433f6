//! `scalae`: synthetic data, training, generation, population editing,
//! evaluation and the HTTP service from one binary.
//!
//! Exit codes: 0 on success, 1 on runtime or validation failure, 2 on a
//! usage error (reported before any work starts).

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "scalae", version, about = "Population-conditioned satellite tile generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic world: one .scr record per tile plus manifest.json
    SynthData(SynthDataArgs),
    /// Train a model on a dataset directory and save a .sck checkpoint
    Train(TrainArgs),
    /// Render one tile from a seed or a saved style under a population grid
    Generate(GenerateArgs),
    /// Encode a record's image and render it back under its own population
    Reconstruct(ReconstructArgs),
    /// Keep a record's style and render it under an edited population
    Repopulate(RepopulateArgs),
    /// Reconstruction distances and Fréchet distance on held-out tiles
    Eval(EvalArgs),
    /// Mean per-pixel change between two populations over sampled styles
    EffectMap(EffectMapArgs),
    /// Serve the JSON API for a checkpoint
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    tiles: usize,
    /// Image side length in pixels
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Tiles held out for evaluation (default: a tenth)
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    epochs_per_stage: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    r1_gamma: f64,
    /// Channels per stage, comma separated (default 64,64,32,32 trimmed or padded to the data)
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Per-epoch losses as CSV
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "style_file", required_unless_present = "style_file")]
    seed: Option<u64>,
    /// JSON array holding a style vector
    #[arg(long)]
    style_file: Option<PathBuf>,
    /// Raw population: JSON rows of persons per cell, or a .scr record
    #[arg(long)]
    pop: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the style vector used as JSON
    #[arg(long)]
    style_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    record: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    style_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RepopulateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    record: PathBuf,
    /// Edited population: JSON rows of persons per cell, or a .scr record
    #[arg(long)]
    pop_new: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-pixel |change| against the plain reconstruction, as a grayscale PNG
    #[arg(long)]
    delta_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Fréchet distance between generated and held-out feature statistics
    #[arg(long)]
    fid: bool,
    /// Per-tile reconstruction distances
    #[arg(long)]
    pairs: bool,
    #[arg(long, default_value_t = 10)]
    hist_bins: usize,
    /// Seed for the latents of the generated set
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report printed on stdout
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EffectMapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pop_a: PathBuf,
    #[arg(long)]
    pop_b: PathBuf,
    /// Number of sampled styles
    #[arg(long, default_value_t = scalae_core::metrics::DEFAULT_EFFECT_STYLES)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Raw little-endian map: "SEM1", u32 height, u32 width, f32 values
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
