use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, ImagePool, RunConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{
    read_archive, write_archive, ArchiveEntry, CheckpointMeta, Critic, Discriminator, Generator, Translator,
    CHECKPOINT_SCHEMA_VERSION,
};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";

type State = TrainState<f32, Generator<f32>, Discriminator<f32>>;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    data_rng: ChaCha8Rng,
    pool_rng: ChaCha8Rng,
    opt_steps: [u64; 3],
    pool_sizes: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub dir: PathBuf,
    pub iteration: u64,
}

fn store_entries(prefix: &str, store: &ParamStore<f32>, out: &mut Vec<ArchiveEntry>) {
    out.extend(store.iter().map(|(_, name, t)| ArchiveEntry { name: format!("{prefix}.{name}"), tensor: t.clone() }));
}

fn adam_entries(prefix: &str, opt: &Adam<f32>, out: &mut Vec<ArchiveEntry>) {
    let (m, v) = opt.moments();
    for (kind, list) in [("m", m), ("v", v)] {
        out.extend(list.iter().enumerate().map(|(i, t)| ArchiveEntry { name: format!("opt.{prefix}.{kind}.{i}"), tensor: t.clone() }));
    }
}

fn pool_entries(prefix: &str, pool: &ImagePool<f32>, out: &mut Vec<ArchiveEntry>) {
    for (i, (x, p)) in pool.items().iter().enumerate() {
        out.push(ArchiveEntry { name: format!("pool.{prefix}.{i}.x"), tensor: x.clone() });
        out.push(ArchiveEntry { name: format!("pool.{prefix}.{i}.p"), tensor: p.clone() });
    }
}

/// Write a checkpoint into `dir` atomically: a sibling temp directory is filled
/// first and renamed over `dir` only once complete.
pub fn save_checkpoint(dir: &Path, state: &State, run: &RunConfig, data_rng: &ChaCha8Rng) -> Result<()> {
    let mut entries = Vec::new();
    store_entries("g", state.g.params(), &mut entries);
    store_entries("f", state.f.params(), &mut entries);
    store_entries("dx", state.dx.params(), &mut entries);
    store_entries("dy", state.dy.params(), &mut entries);
    adam_entries("gf", &state.opt_gf, &mut entries);
    adam_entries("dx", &state.opt_dx, &mut entries);
    adam_entries("dy", &state.opt_dy, &mut entries);
    if let Some((py, px)) = &state.pools {
        pool_entries("y", py, &mut entries);
        pool_entries("x", px, &mut entries);
    }
    let resume = ResumeState {
        data_rng: data_rng.clone(),
        pool_rng: state.pool_rng.clone(),
        opt_steps: [state.opt_gf.steps(), state.opt_dx.steps(), state.opt_dy.steps()],
        pool_sizes: state.pools.as_ref().map(|(py, px)| [py.items().len(), px.items().len()]),
    };
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        iteration: state.iteration,
        config: serde_json::to_value(run).map_err(|e| Error::Checkpoint(e.to_string()))?,
        state: serde_json::to_value(&resume).map_err(|e| Error::Checkpoint(e.to_string()))?,
    };
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_archive(&tmp.join(PARAMS_FILE), &entries)?;
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta_path = tmp.join(META_FILE);
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            path.display(),
            meta.schema_version
        )));
    }
    Ok(meta)
}

fn run_config(meta: &CheckpointMeta) -> Result<RunConfig> {
    serde_json::from_value(meta.config.clone()).map_err(|e| Error::Checkpoint(format!("bad config in checkpoint: {e}")))
}

fn read_entries(dir: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    Ok(read_archive(&dir.join(PARAMS_FILE))?.into_iter().map(|e| (e.name, e.tensor)).collect())
}

fn take(entries: &mut HashMap<String, Tensor<f32>>, name: &str) -> Result<Tensor<f32>> {
    entries.remove(name).ok_or_else(|| Error::Checkpoint(format!("archive is missing tensor `{name}`")))
}

fn fill_store(prefix: &str, store: &mut ParamStore<f32>, entries: &mut HashMap<String, Tensor<f32>>) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let t = take(entries, &format!("{prefix}.{name}"))?;
        store.set(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

fn fill_adam(prefix: &str, opt: &mut Adam<f32>, steps: u64, entries: &mut HashMap<String, Tensor<f32>>) -> Result<()> {
    let n = opt.moments().0.len();
    let m = (0..n).map(|i| take(entries, &format!("opt.{prefix}.m.{i}"))).collect::<Result<Vec<_>>>()?;
    let v = (0..n).map(|i| take(entries, &format!("opt.{prefix}.v.{i}"))).collect::<Result<Vec<_>>>()?;
    opt.restore(steps, m, v)
}

fn fill_pool(prefix: &str, capacity: usize, len: usize, entries: &mut HashMap<String, Tensor<f32>>) -> Result<ImagePool<f32>> {
    let items = (0..len)
        .map(|i| Ok((take(entries, &format!("pool.{prefix}.{i}.x"))?, take(entries, &format!("pool.{prefix}.{i}.p"))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImagePool::restore(capacity, items))
}

/// Restore the full training state written by [`save_checkpoint`], along with
/// the run configuration and the data-sampling generator.
pub fn load_state(dir: &Path) -> Result<(State, RunConfig, ChaCha8Rng)> {
    let meta = read_meta(dir)?;
    let run = run_config(&meta)?;
    let resume: ResumeState = serde_json::from_value(meta.state.clone())
        .map_err(|e| Error::Checkpoint(format!("bad resume state in checkpoint: {e}")))?;
    let mut entries = read_entries(dir)?;
    let mut state = TrainState::build(&run.setup)?;
    fill_store("g", state.g.params_mut(), &mut entries)?;
    fill_store("f", state.f.params_mut(), &mut entries)?;
    fill_store("dx", state.dx.params_mut(), &mut entries)?;
    fill_store("dy", state.dy.params_mut(), &mut entries)?;
    let [sgf, sdx, sdy] = resume.opt_steps;
    fill_adam("gf", &mut state.opt_gf, sgf, &mut entries)?;
    fill_adam("dx", &mut state.opt_dx, sdx, &mut entries)?;
    fill_adam("dy", &mut state.opt_dy, sdy, &mut entries)?;
    state.pools = match resume.pool_sizes {
        Some([ny, nx]) => {
            let cap = run.setup.train.history_size;
            Some((fill_pool("y", cap, ny, &mut entries)?, fill_pool("x", cap, nx, &mut entries)?))
        }
        None => None,
    };
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}` in archive")));
    }
    state.iteration = meta.iteration;
    state.pool_rng = resume.pool_rng;
    Ok((state, run, resume.data_rng))
}

/// Only the two translators, for inference.
pub fn load_generators(dir: &Path) -> Result<(Generator<f32>, Generator<f32>, RunConfig)> {
    let meta = read_meta(dir)?;
    let run = run_config(&meta)?;
    let mut entries = read_entries(dir)?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut g = Generator::<f32>::build(&run.setup.model.generator, &mut rng)?;
    let mut f = Generator::<f32>::build(&run.setup.model.generator, &mut rng)?;
    fill_store("g", g.params_mut(), &mut entries)?;
    fill_store("f", f.params_mut(), &mut entries)?;
    Ok((g, f, run))
}

/// Checkpoint directories under `out_dir/checkpoints`, oldest first.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<CheckpointInfo>> {
    let root = out_dir.join("checkpoints");
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let dir = entry.map_err(|e| Error::io(&root, e))?.path();
        let Some(iter) = dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("iter_")) else { continue };
        if let (Ok(iteration), true) = (iter.parse::<u64>(), dir.join(META_FILE).exists()) {
            found.push(CheckpointInfo { dir, iteration });
        }
    }
    found.sort_by_key(|c| c.iteration);
    Ok(found)
}

pub(crate) fn checkpoint_dir(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iteration:07}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::run_translator;
    use crate::train::step::tests::{random_input, tiny_setup};

    #[test]
    fn save_load_round_trip_is_exact() {
        let mut setup = tiny_setup(1);
        setup.train.use_history_buffer = true;
        let mut state = TrainState::build(&setup).unwrap();
        for i in 0..2 {
            state.step(&random_input(1, 8, 1, i)).unwrap();
        }
        let run = RunConfig { setup: setup.clone(), axes: vec![crate::data::Axis::unit("t")] };
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint_dir(dir.path(), state.iteration);
        let rng = crate::train::step::stream(1, 1);
        save_checkpoint(&ck, &state, &run, &rng).unwrap();
        let (mut back, run2, rng2) = load_state(&ck).unwrap();
        assert_eq!(run2, run);
        assert_eq!(rng2, rng);
        assert_eq!(back.iteration, 2);
        assert_eq!(back.g.params().digest(), state.g.params().digest());
        assert_eq!(back.dy.params().digest(), state.dy.params().digest());
        assert_eq!(back.opt_gf, state.opt_gf);
        let input = random_input::<f32>(1, 8, 1, 7);
        let p = input.a.p.clone();
        assert_eq!(run_translator(&back.g, &input.a.x, &p).unwrap(), run_translator(&state.g, &input.a.x, &p).unwrap());
        assert_eq!(back.step(&input).unwrap(), state.step(&input).unwrap());
        assert_eq!(list_checkpoints(dir.path()).unwrap(), vec![CheckpointInfo { dir: ck, iteration: 2 }]);
    }

    #[test]
    fn missing_meta_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_state(dir.path()).is_err());
        assert!(load_generators(dir.path()).is_err());
    }
}
