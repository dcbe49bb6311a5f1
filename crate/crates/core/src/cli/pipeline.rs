//! End-to-end recipes: data → (soft labels) → train → eval → grids.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::commands::{self, LoadedModel, BEAM_DIR, COVERS_DIR, MANIFEST_FILE};
use super::grid::GridSpec;
use crate::data::{Axis, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{Metric, MonotonicityReport, SweepMatrix};
use crate::imageio::{from_rgb8, load_image, save_image};
use crate::synth::{self, BeamSpec, DomainSpecFile};
use crate::train::TrainSetup;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const LOCK_FILE: &str = ".lock";
const HOLDOUT_SEED_OFFSET: u64 = 0x0BAD_5EED;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Training sub-config, relative to the recipe file.
    pub train_config: PathBuf,
    pub data: DataStage,
    pub eval: EvalStage,
    #[serde(default)]
    pub montage: Option<GridSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataStage {
    /// Beam renders over procedural covers (or a directory of bases).
    Beam {
        image_size: usize,
        covers: usize,
        count: usize,
        #[serde(default)]
        bases: Option<PathBuf>,
    },
    /// Toy domains with soft labels: `source` unlabeled, one axis per target.
    Soft {
        image_size: usize,
        domains: PathBuf,
        count: usize,
        source: String,
        targets: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    /// Held-out inputs rendered with a seed distinct from the training data.
    pub holdout: usize,
    pub metric: Metric,
    pub axis: usize,
    /// Sweep grid (beam) or monotonicity p values (soft).
    pub values: Vec<f64>,
    /// Fixed values of the other axes; sampled per input when omitted.
    #[serde(default)]
    pub base_p: Option<Vec<f64>>,
}

/// A recipe with its sub-configs resolved and checked.
#[derive(Clone, Debug)]
pub struct ResolvedPipeline {
    pub config: PipelineConfig,
    pub setup: TrainSetup,
    pub config_sha256: String,
    pub train_config_sha256: String,
    domains: Option<DomainSpecFile>,
    bases: Option<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ResolvedPipeline {
    /// Parse a recipe and every file it references, without touching the output.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let train_path = resolve(dir, &config.train_config);
        if !train_path.is_file() {
            return Err(Error::Config(format!("train_config {} does not exist", train_path.display())));
        }
        let train_sha = sha256_hex(&read(&train_path)?);
        let setup = commands::load_setup(&train_path, Some(config.seed))?;
        let (size, p_dim, domains, bases) = match &config.data {
            DataStage::Beam { image_size, covers, count, bases } => {
                if *count == 0 || (*covers == 0 && bases.is_none()) {
                    return Err(Error::Config("beam data needs count > 0 and at least one cover".into()));
                }
                let bases = bases.as_ref().map(|b| resolve(dir, b));
                if let Some(b) = bases.as_ref().filter(|b| !b.is_dir()) {
                    return Err(Error::Config(format!("bases directory {} does not exist", b.display())));
                }
                (*image_size, 3, None, bases)
            }
            DataStage::Soft { image_size, domains, count, source, targets } => {
                let specs = DomainSpecFile::load(&resolve(dir, domains))?;
                for name in std::iter::once(source).chain(targets) {
                    if !specs.domains.iter().any(|d| &d.name == name) {
                        return Err(Error::Config(format!("domain `{name}` is not declared in {}", domains.display())));
                    }
                }
                if targets.is_empty() || *count == 0 {
                    return Err(Error::Config("soft data needs at least one target and count > 0".into()));
                }
                (*image_size, targets.len(), Some(specs), None)
            }
        };
        let model = &setup.model.generator;
        if model.image_size != size {
            return Err(Error::Config(format!("model image_size {} differs from data image_size {size}", model.image_size)));
        }
        if model.p_dim != p_dim {
            return Err(Error::Config(format!("model p_dim {} but the data has {p_dim} axes", model.p_dim)));
        }
        let ev = &config.eval;
        if ev.axis >= p_dim {
            return Err(Error::Config(format!("eval axis {} out of range for {p_dim} axes", ev.axis)));
        }
        if ev.base_p.as_ref().is_some_and(|b| b.len() != p_dim) {
            return Err(Error::Config(format!("eval base_p must have {p_dim} entries")));
        }
        if ev.holdout < 2 || ev.values.len() < 3 {
            return Err(Error::Config("eval needs holdout >= 2 and at least 3 values".into()));
        }
        if let Some(m) = &config.montage {
            m.validate(p_dim)?;
        }
        Ok(Self { config, setup, config_sha256: sha256_hex(&bytes), train_config_sha256: train_sha, domains, bases })
    }

    fn p_dim(&self) -> usize {
        self.setup.model.generator.p_dim
    }

    fn image_size(&self) -> usize {
        self.setup.model.generator.image_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub train_config_sha256: String,
    pub seed: u64,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Evaluation result of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalSummary {
    Sweep { matrix: SweepMatrix, diagonal_minimum: Vec<bool>, columns_passing: usize, spearman: f64 },
    Monotonicity { report: MonotonicityReport },
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
    pub summary: EvalSummary,
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (delete {} if that run is no longer alive)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Every file under `dir`, sorted, with paths relative to `root`.
pub fn checksum_tree(root: &Path, dir: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    files.iter().map(|f| checksum_file(root, f)).collect()
}

fn checksum_file(root: &Path, file: &Path) -> Result<Artifact> {
    Ok(Artifact { path: file.strip_prefix(root).unwrap_or(file).to_path_buf(), sha256: sha256_hex(&read(file)?) })
}

struct Runner<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn write(&self) -> Result<()> {
        let path = self.out.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("serializable run manifest");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Run one stage, recording its artifacts or its failure.
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<(T, Vec<Artifact>)>) -> Result<T> {
        log::info!("stage {name}");
        match f() {
            Ok((value, artifacts)) => {
                self.manifest.stages.push(StageRecord { name: name.into(), status: StageStatus::Ok, error: None, artifacts });
                self.write()?;
                Ok(value)
            }
            Err(e) => {
                let message = format!("{}: {e}", e.code());
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    error: Some(message.clone()),
                    artifacts: vec![],
                });
                self.manifest.status = StageStatus::Failed;
                self.manifest.failed_stage = Some(name.into());
                self.write()?;
                Err(Error::Stage { stage: name.into(), message })
            }
        }
    }
}

/// Training manifests of a run: (source, target).
struct TrainManifests {
    source: PathBuf,
    target: PathBuf,
}

/// Load, lock and execute the recipe at `config_path` into `out_dir`.
pub fn run_pipeline(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<RunOutcome> {
    let plan = ResolvedPipeline::load(config_path, seed_override)?;
    let _lock = RunLock::acquire(out_dir)?;
    let mut runner = Runner {
        out: out_dir,
        manifest: RunManifest {
            config_path: config_path.to_path_buf(),
            config_sha256: plan.config_sha256.clone(),
            train_config_sha256: plan.train_config_sha256.clone(),
            seed: plan.config.seed,
            status: StageStatus::Ok,
            failed_stage: None,
            stages: vec![],
        },
    };
    runner.write()?;
    let seed = plan.config.seed;
    let data_dir = out_dir.join("data");

    let manifests = match &plan.config.data {
        DataStage::Beam { image_size, covers, count, .. } => runner.stage("data", || {
            let (c, b) = commands::render_synth(&data_dir, *count, *image_size, seed, *covers, plan.bases.as_deref())?;
            let _ = (c, b);
            let m = TrainManifests {
                source: data_dir.join(COVERS_DIR).join(MANIFEST_FILE),
                target: data_dir.join(BEAM_DIR).join(MANIFEST_FILE),
            };
            Ok((m, checksum_tree(out_dir, &data_dir)?))
        })?,
        DataStage::Soft { image_size, count, source, targets, .. } => {
            let specs = plan.domains.as_ref().expect("resolved soft recipe");
            let domain_dir = data_dir.join("domains");
            runner.stage("data", || {
                synth::generate_toy_domains(&specs.domains, *count, *image_size, seed, &domain_dir)?;
                Ok(((), checksum_tree(out_dir, &domain_dir)?))
            })?;
            runner.stage("soft_labels", || {
                let src = domain_dir.join(source).join(MANIFEST_FILE);
                let tgts: Vec<PathBuf> = targets.iter().map(|t| domain_dir.join(t).join(MANIFEST_FILE)).collect();
                let out = data_dir.join("soft").join(MANIFEST_FILE);
                commands::build_soft(&src, &tgts, &out)?;
                let art = checksum_file(out_dir, &out)?;
                Ok((TrainManifests { source: src, target: out }, vec![art]))
            })?
        }
    };

    let train_dir = out_dir.join("train");
    let ckpt = runner.stage("train", || {
        let outcome = commands::train(&plan.setup, &manifests.source, &manifests.target, &train_dir, None)?;
        let mut arts = vec![checksum_file(out_dir, &outcome.loss_log)?];
        arts.extend(checksum_tree(out_dir, &outcome.final_checkpoint)?);
        Ok((outcome.final_checkpoint, arts))
    })?;

    let eval_dir = out_dir.join("eval");
    let (summary, first_input, montage_base) = runner.stage("eval", || {
        let model = LoadedModel::load(&ckpt, false)?;
        let res = evaluate(&plan, &model, &eval_dir)?;
        Ok((res, checksum_tree(out_dir, &eval_dir)?))
    })?;

    let grid_dir = out_dir.join("grids");
    runner.stage("grids", || {
        let model = LoadedModel::load(&ckpt, false)?;
        let spec = plan.config.montage.clone().unwrap_or_else(|| {
            let mut g = GridSpec::strip(plan.config.eval.axis, plan.config.eval.values.clone());
            g.labels = true;
            g
        });
        let img = commands::sweep_grid(&model, &load_image(&first_input)?, &spec, &montage_base)?;
        let path = grid_dir.join("sweep.png");
        crate::imageio::save_rgb(&path, &img)?;
        Ok(((), vec![checksum_file(out_dir, &path)?]))
    })?;

    runner.write()?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        manifest_path: out_dir.join(RUN_MANIFEST_FILE),
        manifest: runner.manifest,
        summary,
    })
}

/// Render held-out data, score the model and write reports under `eval_dir`.
/// Returns the summary, the first held-out input and the base p for grids.
fn evaluate(plan: &ResolvedPipeline, model: &LoadedModel, eval_dir: &Path) -> Result<(EvalSummary, PathBuf, Vec<f64>)> {
    let ev = &plan.config.eval;
    let size = plan.image_size();
    let holdout_seed = plan.config.seed.wrapping_add(HOLDOUT_SEED_OFFSET);
    let extractor = commands::default_extractor();
    let (summary, first, base) = match &plan.config.data {
        DataStage::Beam { .. } => {
            let covers = synth::procedural_covers(ev.holdout, size, holdout_seed);
            let inputs = synth::write_domain(&covers, "cover", &eval_dir.join("inputs"))?;
            let reals_dir = eval_dir.join("reals");
            fs::create_dir_all(&reals_dir).map_err(|e| Error::io(&reals_dir, e))?;
            let mut rng = ChaCha8Rng::seed_from_u64(holdout_seed);
            let specs: Vec<BeamSpec> = (0..ev.holdout)
                .map(|_| {
                    let s = synth::sample_beam(&mut rng);
                    match &ev.base_p {
                        Some(b) => BeamSpec { cx: b[0], cy: b[1], intensity: b[2], ..s },
                        None => s,
                    }
                })
                .collect();
            let mut records = Vec::new();
            for (j, &v) in ev.values.iter().enumerate() {
                for (k, cover) in covers.iter().enumerate() {
                    let mut p = specs[k].p();
                    p[ev.axis] = v;
                    let spec = BeamSpec { cx: p[0], cy: p[1], intensity: p[2], ..specs[k] };
                    let img = synth::render_beam(&from_rgb8(cover), &spec)?;
                    let path = reals_dir.join(format!("real_{j:02}_{k:05}.png"));
                    save_image(&path, &img)?;
                    records.push(SampleRecord { path, domain: "beam".into(), p: Some(p) });
                }
            }
            let axes = vec![Axis::unit("x"), Axis::unit("y"), Axis::unit("intensity")];
            let reals = Manifest::new(axes, records);
            reals.save(&reals_dir.join(MANIFEST_FILE))?;
            let matrix = commands::eval_sweep(model, &inputs, &reals, &ev.values, ev.axis, ev.metric, &extractor)?;
            commands::write_csv(&eval_dir.join("sweep_matrix.csv"), &matrix.to_csv())?;
            let diagonal_minimum = matrix.diagonal_minimum();
            let columns_passing = diagonal_minimum.iter().filter(|b| **b).count();
            let spearman = matrix.distance_correlation()?;
            let base = ev.base_p.clone().unwrap_or_else(|| specs[0].p());
            (EvalSummary::Sweep { matrix, diagonal_minimum, columns_passing, spearman }, inputs.records[0].path.clone(), base)
        }
        DataStage::Soft { image_size, source, targets, .. } => {
            let specs = plan.domains.as_ref().expect("resolved soft recipe");
            let wanted: Vec<_> = specs
                .domains
                .iter()
                .filter(|d| &d.name == source || d.name == targets[ev.axis])
                .cloned()
                .collect();
            let ms = synth::generate_toy_domains(&wanted, ev.holdout, *image_size, holdout_seed, &eval_dir.join("domains"))?;
            let by_name = |n: &str| ms.iter().find(|m| m.domain() == Some(n)).expect("generated domain");
            let (src, tgt) = (by_name(source), by_name(&targets[ev.axis]));
            let report = commands::eval_mono(model, src, src, tgt, &ev.values, ev.axis, ev.metric, &extractor)?;
            commands::write_csv(&eval_dir.join("monotonicity.csv"), &report.to_csv())?;
            let base = ev.base_p.clone().unwrap_or_else(|| vec![0.0; plan.p_dim()]);
            (EvalSummary::Monotonicity { report }, src.records[0].path.clone(), base)
        }
    };
    let json = serde_json::to_string_pretty(&summary).expect("serializable summary");
    let path = eval_dir.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((summary, first, base))
}
