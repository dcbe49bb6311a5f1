use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{checkpoint_dir, load_state, save_checkpoint};
use super::step::{stream, DATA_STREAM};
use super::{Batch, LossReport, RunConfig, StepInput, TrainConfig, TrainSetup, TrainState};
use crate::data::{sample_training_tuple, validate_manifest, Axis, Manifest};
use crate::error::{Error, Result};
use crate::imageio::{load_image, Image};
use crate::model::{p_batch, Translator};
use crate::tensor::Tensor;

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
const LOSS_LOG_HEADER: &str = "iteration,gan_xy,gan_yx,cyc,total";

/// Source and target manifests with every image decoded up front.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Manifest,
    pub target: Manifest,
    images: HashMap<PathBuf, Image>,
    image_size: usize,
}

impl TrainData {
    pub fn load(source: Manifest, target: Manifest) -> Result<Self> {
        for (role, m) in [("source", &source), ("target", &target)] {
            let violations = validate_manifest(m);
            if !violations.is_empty() {
                let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
                return Err(Error::Manifest(format!("{role} manifest: {}", list.join("; "))));
            }
        }
        let mut images = HashMap::new();
        let mut size = None;
        for rec in source.records.iter().chain(&target.records) {
            if images.contains_key(&rec.path) {
                continue;
            }
            let img = load_image(&rec.path)?;
            let side = img.shape()[2];
            if *size.get_or_insert(side) != side {
                return Err(Error::Image {
                    path: rec.path.clone(),
                    message: format!("{side}px image among {}px images", size.unwrap_or(side)),
                });
            }
            images.insert(rec.path.clone(), img);
        }
        Ok(Self { source, target, images, image_size: size.unwrap_or(0) })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.target.axes
    }

    pub fn p_dim(&self) -> usize {
        self.target.p_dim()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn image(&self, path: &Path) -> &Image {
        &self.images[path]
    }

    /// `n` independent (x, y, p) draws stacked into a batch.
    pub fn sample_batch<R: Rng>(&self, n: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Batch<f32>> {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut ps = Vec::with_capacity(n);
        for _ in 0..n {
            let t = sample_training_tuple(&self.source, &self.target, rng)?;
            xs.push(augment(self.image(&t.x.path), cfg, rng));
            ys.push(augment(self.image(&t.y.path), cfg, rng));
            ps.push(p_batch::<f32>(t.p.values(), 1));
        }
        Ok(Batch { x: Tensor::stack(&xs)?, y: Tensor::stack(&ys)?, p: Tensor::stack(&ps)? })
    }

    pub fn sample_input<R: Rng>(&self, cfg: &TrainConfig, rng: &mut R) -> Result<StepInput<f32>> {
        let a = self.sample_batch(cfg.batch_size, cfg, rng)?;
        let b = self.sample_batch(cfg.batch_size, cfg, rng)?;
        Ok(StepInput { a, b })
    }
}

fn augment<R: Rng>(img: &Image, cfg: &TrainConfig, rng: &mut R) -> Image {
    if !cfg.random_crop && !cfg.random_flip {
        return img.clone();
    }
    let (_, c, h, w) = img.dims4().expect("4-d image");
    let pad = if cfg.random_crop { (h / 8).max(1) } else { 0 };
    let (oy, ox) = if pad > 0 { (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad)) } else { (pad, pad) };
    let flip = cfg.random_flip && rng.random_bool(0.5);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i } else { i };
        (if i >= n { 2 * (n - 1) - i } else { i }) as usize
    };
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let yy = reflect(y as isize + oy as isize - pad as isize, h);
                let xx = reflect(sx as isize + ox as isize - pad as isize, w);
                out.push(src[(ch * h + yy) * w + xx]);
            }
        }
    }
    Tensor::from_vec(img.shape(), out).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Reports of the iterations run by this call.
    pub reports: Vec<LossReport>,
}

fn format_row(r: &LossReport) -> String {
    format!("{},{},{},{},{}", r.iteration, r.gan_xy, r.gan_yx, r.cyc, r.total)
}

/// Parse a loss log written by [`fit`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::parse(&origin, "missing loss log header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse(&origin, format!("expected 5 columns in `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(&origin, format!("`{s}`: {e}")));
            let iteration = f[0].parse::<u64>().map_err(|e| Error::parse(&origin, format!("`{}`: {e}", f[0])))?;
            Ok(LossReport {
                iteration,
                gan_xy: num(f[1])?,
                gan_yx: num(f[2])?,
                cyc: num(f[3])?,
                total: num(f[4])?,
                gen_xy: f64::NAN,
                gen_yx: f64::NAN,
            })
        })
        .collect()
}

fn open_log(path: &Path, keep_through: Option<u64>) -> Result<BufWriter<fs::File>> {
    let kept: Vec<String> = match keep_through {
        Some(k) if path.exists() => {
            read_loss_log(path)?.iter().filter(|r| r.iteration <= k).map(format_row).collect()
        }
        _ => Vec::new(),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    for row in kept {
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Train for `setup.train.total_iters` iterations, writing checkpoints under
/// `out_dir/checkpoints/iter_NNNNNNN` and the loss log to `out_dir/loss_log.csv`.
///
/// With `resume_from`, networks, optimizer moments and random streams come from
/// that checkpoint and the run continues where it stopped.
pub fn fit(setup: &TrainSetup, data: &TrainData, out_dir: &Path, resume_from: Option<&Path>) -> Result<FitOutcome> {
    setup.validate()?;
    if setup.model.generator.p_dim != data.p_dim() {
        return Err(Error::Config(format!(
            "model p_dim {} but the target manifest has {} axes",
            setup.model.generator.p_dim,
            data.p_dim()
        )));
    }
    if setup.model.generator.image_size != data.image_size() {
        return Err(Error::Config(format!(
            "model image_size {} but the data is {}px",
            setup.model.generator.image_size,
            data.image_size()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (mut state, run, mut data_rng): (_, RunConfig, ChaCha8Rng) = match resume_from {
        Some(dir) => {
            let (state, run, rng) = load_state(dir)?;
            if run.setup.model != setup.model {
                return Err(Error::Config(format!("{} was trained with a different model config", dir.display())));
            }
            (state, run, rng)
        }
        None => {
            let state = TrainState::build(setup)?;
            let run = RunConfig { setup: setup.clone(), axes: data.axes().to_vec() };
            (state, run, stream(setup.train.seed, DATA_STREAM))
        }
    };
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut log = open_log(&log_path, resume_from.map(|_| state.iteration))?;
    if resume_from.is_none() {
        save_checkpoint(&checkpoint_dir(out_dir, 0), &state, &run, &data_rng)?;
    }
    let total = setup.train.total_iters;
    let mut reports = Vec::new();
    while state.iteration < total {
        let input = data.sample_input(&run.setup.train, &mut data_rng)?;
        let report = match state.step(&input) {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(|err| Error::io(&log_path, err))?;
                let snapshot = out_dir.join("failure.txt");
                let _ = fs::write(&snapshot, format!("iteration {}\n{e}\n", state.iteration + 1));
                return Err(e);
            }
        };
        writeln!(log, "{}", format_row(&report)).map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);
        if state.iteration % setup.train.checkpoint_every == 0 || state.iteration == total {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(&checkpoint_dir(out_dir, state.iteration), &state, &run, &data_rng)?;
            log::info!(
                "iteration {}/{}: gan_xy={:.4} gan_yx={:.4} cyc={:.4}",
                state.iteration,
                total,
                report.gan_xy,
                report.gan_yx,
                report.cyc
            );
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = checkpoint_dir(out_dir, state.iteration);
    if !final_checkpoint.exists() {
        save_checkpoint(&final_checkpoint, &state, &run, &data_rng)?;
    }
    debug_assert_eq!(state.g.p_dim(), data.p_dim());
    Ok(FitOutcome { final_checkpoint, loss_log: log_path, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleRecord;
    use crate::imageio::save_image;
    use crate::model::image_batch;
    use crate::train::list_checkpoints;
    use crate::train::step::tests::tiny_setup;

    fn write_data(dir: &Path) -> TrainData {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for i in 0..4 {
            let a: Tensor<f32> = image_batch(1, 3, 8, |k| ((k * 7 + i) % 11) as f64 / 11.0 - 0.5);
            let b: Tensor<f32> = image_batch(1, 3, 8, |k| ((k * 3 + i) % 5) as f64 / 5.0 - 0.2);
            let (pa, pb) = (dir.join(format!("s{i}.png")), dir.join(format!("t{i}.png")));
            save_image(&pa, &a).unwrap();
            save_image(&pb, &b).unwrap();
            src.push(SampleRecord { path: pa, domain: "s".into(), p: None });
            tgt.push(SampleRecord { path: pb, domain: "t".into(), p: Some(vec![i as f64 / 3.0]) });
        }
        TrainData::load(Manifest::new(vec![], src), Manifest::new(vec![Axis::unit("t")], tgt)).unwrap()
    }

    #[test]
    fn zero_iterations_write_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data(dir.path());
        let mut setup = tiny_setup(1);
        setup.train.total_iters = 0;
        let out = fit(&setup, &data, &dir.path().join("run"), None).unwrap();
        let cks = list_checkpoints(&dir.path().join("run")).unwrap();
        assert_eq!(cks.len(), 1);
        assert_eq!(cks[0].iteration, 0);
        assert_eq!(out.final_checkpoint, cks[0].dir);
        assert!(read_loss_log(&out.loss_log).unwrap().is_empty());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data(dir.path());
        let mut setup = tiny_setup(1);
        setup.train.total_iters = 6;
        setup.train.checkpoint_every = 3;
        let full = fit(&setup, &data, &dir.path().join("full"), None).unwrap();
        let part_dir = dir.path().join("part");
        fit(&TrainSetup { train: TrainConfig { total_iters: 3, ..setup.train.clone() }, ..setup.clone() }, &data, &part_dir, None)
            .unwrap();
        let resumed = fit(&setup, &data, &part_dir, Some(&checkpoint_dir(&part_dir, 3))).unwrap();
        assert_eq!(resumed.reports.len(), 3);
        let a = read_loss_log(&full.loss_log).unwrap();
        let b = read_loss_log(&resumed.loss_log).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(
            a.iter().map(format_row).collect::<Vec<_>>(),
            b.iter().map(format_row).collect::<Vec<_>>()
        );
    }

    #[test]
    fn augmentation_keeps_shape_and_values() {
        let img: Image = image_batch(1, 3, 8, |k| k as f64 / 192.0);
        let cfg = TrainConfig { random_crop: true, random_flip: true, ..TrainConfig::default() };
        let mut rng = stream(0, 0);
        for _ in 0..5 {
            let out = augment(&img, &cfg, &mut rng);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| img.data().contains(v)));
        }
        assert_eq!(augment(&img, &TrainConfig::default(), &mut rng), img);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data(dir.path());
        assert!(fit(&tiny_setup(2), &data, dir.path(), None).is_err());
    }
}
