//! `standseg` — forest stand segmentation pipeline.
//!
//! Exit codes: 0 success, 2 validation error (bad flags, missing or invalid
//! inputs), 3 runtime failure (i/o mid-write, numeric divergence).

mod commands;
mod config;
mod manifest;
mod report;
mod tiles;

use clap::{Parser, Subcommand};
use commands::Context;
use config::PipelineConfig;
use standseg_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "standseg", version, about = "Forest stand delineation from orthophotos and lidar")]
struct Cli {
    /// Pipeline config (JSON); flags override config values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed override for the invoked step
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root for step outputs (default: config paths.workdir, else ".")
    #[arg(long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,

    /// Worker threads (default: $STANDSEG_THREADS, else all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a lidar point cloud into a canopy height model
    BuildChm {
        /// XYZ point cloud (default: config paths.points)
        #[arg(long)]
        points: Option<PathBuf>,
        /// Take grid and extent from this raster
        #[arg(long, value_name = "RASTER")]
        like: Option<PathBuf>,
        #[arg(long)]
        origin_x: Option<f64>,
        #[arg(long)]
        origin_y: Option<f64>,
        #[arg(long)]
        cell_size: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Block-mean downsample a raster by an integer factor
    Downsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        factor: usize,
    },
    /// Stack spectral bands with the CHM and normalize to [0,1]
    Stack {
        /// 4-band orthophoto (default: config paths.orthophoto)
        #[arg(long)]
        spectral: Option<PathBuf>,
        /// CHM raster (default: <workdir>/chm/chm.rstr)
        #[arg(long)]
        chm: Option<PathBuf>,
        /// CHM normalization ceiling in meters (default: config chm_max)
        #[arg(long)]
        chm_max: Option<f64>,
        /// Skip normalization, keep raw band values
        #[arg(long)]
        raw: bool,
    },
    /// Cut the composite into labeled training tiles
    Tile {
        /// Composite raster (default: <workdir>/stack/composite.rstr)
        #[arg(long)]
        composite: Option<PathBuf>,
        /// Stand polygons GeoJSON (default: config paths.stands)
        #[arg(long)]
        stands: Option<PathBuf>,
        /// Tile edge in pixels (default: config tile_pixels)
        #[arg(long)]
        size: Option<usize>,
    },
    /// Assign train/val/test splits to a tile set
    Split {
        /// Tile directory (default: <workdir>/tiles)
        #[arg(long)]
        tiles: Option<PathBuf>,
        /// Comma-separated fractions, e.g. 0.7,0.15,0.15
        #[arg(long)]
        fractions: Option<String>,
    },
    /// Train the segmentation model on the tile set
    Train {
        #[arg(long)]
        tiles: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Hyperparameter search with median pruning
    Tune {
        #[arg(long)]
        tiles: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        trials: u64,
    },
    /// Evaluate a checkpoint on a split and write the metrics report
    Evaluate {
        #[arg(long)]
        tiles: Option<PathBuf>,
        /// Weights file (default: <workdir>/train/best.unw1)
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Apply the minimum-mapping-unit merge before scoring
        #[arg(long)]
        mmu: bool,
        #[arg(long, default_value_t = 0.2)]
        min_area_ha: f64,
    },
    /// Predict a full scene with overlap-tiled stitching
    Predict {
        #[arg(long)]
        composite: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        tile_pixels: Option<usize>,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
    },
    /// Trace a class map into stand polygons with an MMU filter
    Vectorize {
        /// Class raster (default: <workdir>/predict/classmap.rstr)
        #[arg(long)]
        classmap: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        min_area_ha: f64,
    },
    /// Render the training history chart and evaluation matrix
    Report {
        /// History file (default: <workdir>/train/history.jsonl)
        #[arg(long)]
        history: Option<PathBuf>,
        /// Metrics JSON (default: <workdir>/evaluate/metrics.json if present)
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate a synthetic scene in the pipeline's input formats
    Synth {
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 24)]
        n_stands: usize,
        /// Spectral noise in DN (default: scene default)
        #[arg(long)]
        noise: Option<f64>,
        /// Point density per square meter (default: scene default)
        #[arg(long)]
        density: Option<f64>,
    },
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("STANDSEG_THREADS") {
        Ok(text) => {
            let n = text.parse::<usize>().map_err(|e| {
                Error::Input(format!("STANDSEG_THREADS={text:?}: {e}"))
            })?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Input("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let workdir = cli
        .workdir
        .or_else(|| config.paths.workdir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&workdir)?;
    let ctx = Context { config, workdir, seed: cli.seed };

    match cli.command {
        Command::BuildChm { points, like, origin_x, origin_y, cell_size, width, height } => {
            commands::cmd_build_chm(&ctx, points, like, origin_x, origin_y, cell_size, width, height)
        }
        Command::Downsample { input, factor } => commands::cmd_downsample(&ctx, input, factor),
        Command::Stack { spectral, chm, chm_max, raw } => {
            commands::cmd_stack(&ctx, spectral, chm, chm_max, raw)
        }
        Command::Tile { composite, stands, size } => {
            commands::cmd_tile(&ctx, composite, stands, size)
        }
        Command::Split { tiles, fractions } => commands::cmd_split(&ctx, tiles, fractions),
        Command::Train { tiles, epochs, batch_size, learning_rate } => {
            commands::cmd_train(&ctx, tiles, epochs, batch_size, learning_rate)
        }
        Command::Tune { tiles, trials } => commands::cmd_tune(&ctx, tiles, trials),
        Command::Evaluate { tiles, weights, split, mmu, min_area_ha } => {
            commands::cmd_evaluate(&ctx, tiles, weights, &split, mmu, min_area_ha)
        }
        Command::Predict { composite, weights, tile_pixels, overlap } => {
            commands::cmd_predict(&ctx, composite, weights, tile_pixels, overlap)
        }
        Command::Vectorize { classmap, min_area_ha } => {
            commands::cmd_vectorize(&ctx, classmap, min_area_ha)
        }
        Command::Report { history, metrics } => commands::cmd_report(&ctx, history, metrics),
        Command::Synth { width, height, n_stands, noise, density } => {
            commands::cmd_synth(&ctx, width, height, n_stands, noise, density)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
