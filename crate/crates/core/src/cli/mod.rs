//! Command-line interface: argument parsing and dispatch.

pub mod commands;
pub mod grid;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::imageio::load_image;
use commands::{LoadedModel, MANIFEST_FILE};
use grid::GridSpec;

pub const SEED_ENV: &str = "PARGAN_SEED";

/// `PARGAN_SEED`, if set. Unparseable values are an error rather than ignored.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Comma-separated list of numbers, e.g. `0.1,0.5,0.9`.
#[derive(Clone, Debug, PartialEq)]
pub struct NumList(pub Vec<f64>);

impl std::str::FromStr for NumList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"))).collect::<std::result::Result<_, _>>().map(Self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pargan", version, about = "Parametric unpaired image-to-image translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the parametrized beam dataset over base covers.
    RenderSynth(RenderSynthArgs),
    /// Render toy domains from a domain spec file.
    GenDomains(GenDomainsArgs),
    /// Build a soft-parametrized target manifest from unlabeled domains.
    BuildSoft(BuildSoftArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate one image under a parametrization.
    Infer(InferArgs),
    /// Render a sweep or mixing grid montage.
    Sweep(SweepArgs),
    /// Sweep matrix of distances between generated and real sets.
    EvalSweep(EvalSweepArgs),
    /// Distances to source and target sets as p increases.
    EvalMono(EvalMonoArgs),
    /// PCA of bottleneck activations over a p grid.
    Latent(LatentArgs),
    /// Run a full pipeline recipe.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct RenderSynthArgs {
    /// Output directory; covers/ and beam/ are written inside.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of beam images.
    #[arg(long)]
    pub count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = crate::synth::DEFAULT_SIZE)]
    pub size: usize,
    /// Dataset seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Directory of square PNG base images (procedural covers if omitted).
    #[arg(long)]
    pub bases: Option<PathBuf>,
    /// Number of procedural covers when --bases is omitted.
    #[arg(long, default_value_t = 50)]
    pub n_bases: usize,
}

#[derive(Debug, Args)]
pub struct GenDomainsArgs {
    /// TOML file with one [[domain]] table per domain.
    #[arg(long)]
    pub spec: PathBuf,
    /// Images per domain.
    #[arg(long)]
    pub count: usize,
    /// Output directory; one subdirectory per domain.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = crate::synth::DEFAULT_SIZE)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct BuildSoftArgs {
    /// Source-domain manifest (p = 0 on every axis).
    #[arg(long)]
    pub source: PathBuf,
    /// One manifest per target domain, in axis order.
    #[arg(long, num_args = 1.., required = true)]
    pub target: Vec<PathBuf>,
    /// Path of the manifest to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with `[train]` and `[model]` tables.
    #[arg(long)]
    pub config: PathBuf,
    /// Source-domain manifest.
    #[arg(long)]
    pub source: PathBuf,
    /// Target-domain manifest carrying p.
    #[arg(long)]
    pub target: PathBuf,
    /// Run directory for the loss log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input PNG.
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated parametrization (omit for unconditional models).
    #[arg(long, allow_hyphen_values = true)]
    pub p: Option<NumList>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the target-to-source generator.
    #[arg(long)]
    pub inverse: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input PNG.
    #[arg(long)]
    pub image: PathBuf,
    /// Axis index to vary; repeat together with --values for mixing grids.
    #[arg(long, required = true)]
    pub axis: Vec<usize>,
    /// Comma-separated values, one list per --axis.
    #[arg(long, required = true, allow_hyphen_values = true)]
    pub values: Vec<NumList>,
    /// Values of the axes that are not varied (zeros if omitted).
    #[arg(long, allow_hyphen_values = true)]
    pub base_p: Option<NumList>,
    /// Grid rows (derived from the value lists if omitted).
    #[arg(long)]
    pub rows: Option<usize>,
    /// Grid columns (derived from the value lists if omitted).
    #[arg(long)]
    pub cols: Option<usize>,
    /// Burn parameter values into each cell.
    #[arg(long)]
    pub labels: bool,
    /// Use the target-to-source generator.
    #[arg(long)]
    pub inverse: bool,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalSweepArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest of input images.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Manifest of real parametrized images.
    #[arg(long)]
    pub reals: PathBuf,
    /// Comma-separated values of the swept axis.
    #[arg(long)]
    pub grid: NumList,
    /// Index of the swept axis.
    #[arg(long)]
    pub axis: usize,
    /// frechet, perceptual or pixel_l1.
    #[arg(long, default_value = "frechet")]
    pub metric: Metric,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMonoArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest of input images.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Manifest of the source domain reference set.
    #[arg(long)]
    pub source: PathBuf,
    /// Manifest of the target domain reference set.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub p_values: NumList,
    /// Axis that p-values are applied to.
    #[arg(long, default_value_t = 0)]
    pub axis: usize,
    /// frechet, perceptual or pixel_l1.
    #[arg(long, default_value = "frechet")]
    pub metric: Metric,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LatentArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest of input images.
    #[arg(long)]
    pub inputs: PathBuf,
    /// One parametrization per occurrence, comma-separated.
    #[arg(long = "p", required = true, allow_hyphen_values = true)]
    pub p_grid: Vec<NumList>,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Pipeline recipe (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Build the grid from flags and render the montage.
fn render_grid(a: &SweepArgs) -> Result<()> {
    let model = LoadedModel::load(&a.ckpt, a.inverse)?;
    if a.axis.len() != a.values.len() {
        return Err(Error::Config(format!("{} --axis flags but {} --values lists", a.axis.len(), a.values.len())));
    }
    let values: Vec<Vec<f64>> = a.values.iter().map(|v| v.0.clone()).collect();
    let cells: usize = values.iter().map(Vec::len).product();
    let (rows, cols) = match (a.rows, a.cols, a.axis.len()) {
        (Some(r), Some(c), _) => (r, c),
        (None, None, 1) => (1, cells),
        (None, None, _) => (values[0].len(), cells / values[0].len().max(1)),
        (Some(r), None, _) => (r, cells / r.max(1)),
        (None, Some(c), _) => (cells / c.max(1), c),
    };
    let spec = GridSpec { axes: a.axis.clone(), values, rows, cols, labels: a.labels };
    let base = a.base_p.as_ref().map(|b| b.0.clone()).unwrap_or_else(|| vec![0.0; model.p_dim()]);
    let img = commands::sweep_grid(&model, &load_image(&a.image)?, &spec, &base)?;
    crate::imageio::save_rgb(&a.out, &img)
}

/// Execute a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RenderSynth(a) => {
            let (covers, beams) = commands::render_synth(&a.out, a.count, a.size, a.seed, a.n_bases, a.bases.as_deref())?;
            log::info!("wrote {} covers and {} beam images under {}", covers.len(), beams.len(), a.out.display());
        }
        Command::GenDomains(a) => {
            let ms = commands::gen_domains(&a.spec, a.count, a.size, a.seed, &a.out)?;
            log::info!("wrote {} domains under {}", ms.len(), a.out.display());
        }
        Command::BuildSoft(a) => {
            let m = commands::build_soft(&a.source, &a.target, &a.out)?;
            log::info!("wrote {} soft-labelled records to {}", m.len(), a.out.display());
        }
        Command::Train(a) => {
            let setup = commands::load_setup(&a.config, seed_override()?)?;
            let outcome = commands::train(&setup, &a.source, &a.target, &a.out, a.resume.as_deref())?;
            log::info!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Infer(a) => commands::infer(&a.ckpt, &a.image, a.p.as_ref().map(|p| p.0.as_slice()), &a.out, a.inverse)?,
        Command::Sweep(a) => render_grid(&a)?,
        Command::EvalSweep(a) => {
            let model = LoadedModel::load(&a.ckpt, false)?;
            let m = commands::eval_sweep(
                &model,
                &Manifest::load(&a.inputs)?,
                &Manifest::load(&a.reals)?,
                &a.grid.0,
                a.axis,
                a.metric,
                &commands::default_extractor(),
            )?;
            commands::write_csv(&a.out, &m.to_csv())?;
        }
        Command::EvalMono(a) => {
            let model = LoadedModel::load(&a.ckpt, false)?;
            let r = commands::eval_mono(
                &model,
                &Manifest::load(&a.inputs)?,
                &Manifest::load(&a.source)?,
                &Manifest::load(&a.target)?,
                &a.p_values.0,
                a.axis,
                a.metric,
                &commands::default_extractor(),
            )?;
            commands::write_csv(&a.out, &r.to_csv())?;
        }
        Command::Latent(a) => {
            let model = LoadedModel::load(&a.ckpt, false)?;
            let grid: Vec<Vec<f64>> = a.p_grid.into_iter().map(|p| p.0).collect();
            let pca = commands::latent(&model, &Manifest::load(&a.inputs)?, &grid)?;
            commands::write_csv(&a.out, &pca.to_csv())?;
        }
        Command::Run(a) => {
            let outcome = pipeline::run_pipeline(&a.config, &a.out, seed_override()?)?;
            log::info!("run finished: {}", outcome.manifest_path.display());
        }
    }
    Ok(())
}

/// Default manifest location inside a generated dataset directory.
pub fn manifest_in(dir: &std::path::Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
