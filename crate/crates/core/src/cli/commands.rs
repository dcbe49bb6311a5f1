//! Subcommand implementations, shared by the CLI and the pipeline runner.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::grid::{draw_label, montage, GridSpec};
use crate::data::{build_soft_labels, Manifest, Parametrization, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{
    bottleneck_activations, latent_pca, monotonicity_report, FeatureExtractor, GeneratorHandle, Metric,
    MonotonicityReport, Pca, RandomProjectionExtractor, SweepMatrix,
};
use crate::imageio::{from_rgb8, load_image, save_image, to_rgb8, Image};
use crate::model::Generator;
use crate::synth::{self, DomainSpecFile};
use crate::train::{self, load_generators, FitOutcome, RunConfig, TrainData, TrainSetup};

pub const COVERS_DIR: &str = "covers";
pub const BEAM_DIR: &str = "beam";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Square PNGs of a directory, sorted by file name.
fn load_base_dir(dir: &Path, size: usize) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG base images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = to_rgb8(&load_image(p)?)?;
            if img.width() as usize != size {
                return Err(Error::Image { path: p.clone(), message: format!("base image is {}px, expected {size}px", img.width()) });
            }
            Ok(img)
        })
        .collect()
}

/// Base covers under `out/covers` and `count` beam renders under `out/beam`.
pub fn render_synth(out: &Path, count: usize, size: usize, seed: u64, covers: usize, bases: Option<&Path>) -> Result<(Manifest, Manifest)> {
    let base_images = match bases {
        Some(dir) => load_base_dir(dir, size)?,
        None => {
            if covers == 0 {
                return Err(Error::Config("at least one base cover is required".into()));
            }
            synth::procedural_covers(covers, size, seed)
        }
    };
    let cover_manifest = synth::write_domain(&base_images, "cover", &out.join(COVERS_DIR))?;
    let tensors: Vec<Image> = base_images.iter().map(from_rgb8).collect();
    let beam_manifest = synth::generate_dataset(&tensors, count, seed, &out.join(BEAM_DIR))?;
    Ok((cover_manifest, beam_manifest))
}

pub fn gen_domains(spec: &Path, count: usize, size: usize, seed: u64, out: &Path) -> Result<Vec<Manifest>> {
    let specs = DomainSpecFile::load(spec)?;
    synth::generate_toy_domains(&specs.domains, count, size, seed, out)
}

pub fn build_soft(source: &Path, targets: &[PathBuf], out: &Path) -> Result<Manifest> {
    let src = Manifest::load(source)?;
    let tgts = targets.iter().map(|t| Manifest::load(t)).collect::<Result<Vec<_>>>()?;
    let soft = build_soft_labels(&src, &tgts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    soft.save(out)?;
    Ok(soft)
}

pub fn load_setup(path: &Path, seed_override: Option<u64>) -> Result<TrainSetup> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut setup: TrainSetup = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if let Some(seed) = seed_override {
        setup.train.seed = seed;
    }
    setup.validate()?;
    Ok(setup)
}

pub fn train(setup: &TrainSetup, source: &Path, target: &Path, out: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
    let data = TrainData::load(Manifest::load(source)?, Manifest::load(target)?)?;
    train::fit(setup, &data, out, resume)
}

/// Loaded translator plus the axes its conditioning is validated against.
pub struct LoadedModel {
    pub generator: Generator<f32>,
    pub run: RunConfig,
}

impl LoadedModel {
    /// `inverse` selects F (target to source) instead of G.
    pub fn load(ckpt: &Path, inverse: bool) -> Result<Self> {
        let (g, f, run) = load_generators(ckpt).map_err(|e| {
            Error::Checkpoint(format!("{e} (pass the checkpoint directory containing meta.json and params.bin)"))
        })?;
        Ok(Self { generator: if inverse { f } else { g }, run })
    }

    pub fn p_dim(&self) -> usize {
        self.run.setup.model.generator.p_dim
    }

    /// Validate `p` against the training axes.
    pub fn check_p(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.p_dim() {
            return Err(Error::Param(format!(
                "checkpoint expects p of length {}, got {} (axes: {})",
                self.p_dim(),
                p.len(),
                self.run.axes.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        if self.run.axes.len() == p.len() {
            Parametrization::new(p.to_vec(), self.run.axes.clone())?;
        }
        Ok(p.to_vec())
    }
}

impl GeneratorHandle for LoadedModel {
    fn generate(&self, x: &Image, p: &[f64]) -> Result<Image> {
        let p = self.check_p(p)?;
        self.generator.generate(x, &p)
    }
}

pub fn infer(ckpt: &Path, image: &Path, p: Option<&[f64]>, out: &Path, inverse: bool) -> Result<()> {
    let model = LoadedModel::load(ckpt, inverse)?;
    let x = load_image(image)?;
    let y = model.generate(&x, p.unwrap_or(&[]))?;
    save_image(out, &y)
}

/// Generate `image` under every grid cell and tile the results.
pub fn sweep_grid<G: GeneratorHandle + ?Sized>(gen: &G, image: &Image, grid: &GridSpec, base_p: &[f64]) -> Result<RgbImage> {
    grid.validate(base_p.len())?;
    let cells = grid
        .parametrizations(base_p)
        .iter()
        .map(|p| {
            let mut cell = to_rgb8(&gen.generate(image, p)?)?;
            if grid.labels {
                draw_label(&mut cell, &grid.label(p));
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;
    montage(&cells, grid.rows, grid.cols)
}

pub fn load_images(m: &Manifest) -> Result<Vec<Image>> {
    m.records.iter().map(|r| load_image(&r.path)).collect()
}

/// Sweep over `grid` values of `axis`. Column `j` generates every input with the
/// p of its index-aligned real image whose `axis` value is `grid[j]`; rows and
/// columns are labelled by the swept value alone.
pub fn eval_sweep<E: FeatureExtractor + ?Sized>(
    model: &LoadedModel,
    inputs: &Manifest,
    reals: &Manifest,
    grid: &[f64],
    axis: usize,
    metric: Metric,
    extractor: &E,
) -> Result<SweepMatrix> {
    if axis >= model.p_dim() {
        return Err(Error::Param(format!("axis {axis} out of range for p_dim {}", model.p_dim())));
    }
    let input_images = load_images(inputs)?;
    let mut real_sets = Vec::with_capacity(grid.len());
    let mut generated = Vec::with_capacity(grid.len());
    let mut params = Vec::with_capacity(grid.len());
    for &v in grid {
        let records: Vec<&SampleRecord> = reals
            .records
            .iter()
            .filter(|r| r.p.as_ref().is_some_and(|p| p.len() > axis && (p[axis] - v).abs() < 1e-9))
            .collect();
        if records.is_empty() {
            return Err(Error::Config(format!("no real images with axis {axis} = {v}")));
        }
        let set = records.iter().map(|r| load_image(&r.path)).collect::<Result<Vec<_>>>()?;
        let gen = input_images
            .iter()
            .enumerate()
            .map(|(k, x)| model.generate(x, records[k % records.len()].p.as_deref().unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        params.push(vec![v]);
        real_sets.push(set);
        generated.push(gen);
    }
    SweepMatrix::from_sets(&generated, &real_sets, &params, metric, extractor)
}

#[allow(clippy::too_many_arguments)]
pub fn eval_mono<E: FeatureExtractor + ?Sized>(
    model: &LoadedModel,
    inputs: &Manifest,
    source: &Manifest,
    target: &Manifest,
    p_values: &[f64],
    axis: usize,
    metric: Metric,
    extractor: &E,
) -> Result<MonotonicityReport> {
    let p_dim = model.p_dim();
    if axis >= p_dim {
        return Err(Error::Param(format!("axis {axis} out of range for p_dim {p_dim}")));
    }
    let make_p = |v: f64| {
        let mut p = vec![0.0; p_dim];
        p[axis] = v;
        p
    };
    monotonicity_report(model, &load_images(inputs)?, &load_images(source)?, &load_images(target)?, p_values, make_p, metric, extractor)
}

pub fn latent(model: &LoadedModel, inputs: &Manifest, p_grid: &[Vec<f64>]) -> Result<Pca> {
    for p in p_grid {
        model.check_p(p)?;
    }
    latent_pca(&bottleneck_activations(&model.generator, &load_images(inputs)?, p_grid)?)
}

pub fn default_extractor() -> RandomProjectionExtractor {
    RandomProjectionExtractor::default()
}

pub fn write_csv(path: &Path, csv: &str) -> Result<()> {
    write_text(path, csv)
}
