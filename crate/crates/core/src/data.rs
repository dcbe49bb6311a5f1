//! Dataset manifests, parametrization validation, soft-label construction and
//! training-tuple sampling.
//!
//! A manifest file is UTF-8 JSON lines: a header object carrying
//! `schema_version` and `axes`, then one record object per line with `path`,
//! `domain` and an optional `p` array. Relative paths resolve against the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One named axis of a parametrization with its admissible range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl Axis {
    pub fn unit(name: impl Into<String>) -> Self {
        Self { name: name.into(), min: 0.0, max: 1.0 }
    }

    fn contains(&self, v: f64) -> bool {
        v.is_finite() && v >= self.min && v <= self.max
    }
}

/// A conditioning vector checked against its axis descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Parametrization {
    values: Vec<f64>,
    axes: Vec<Axis>,
}

impl Parametrization {
    /// Out-of-range values are rejected, never clamped.
    pub fn new(values: Vec<f64>, axes: Vec<Axis>) -> Result<Self> {
        if values.len() != axes.len() {
            return Err(Error::Param(format!("{} values for {} axes", values.len(), axes.len())));
        }
        for (v, a) in values.iter().zip(&axes) {
            if !a.contains(*v) {
                return Err(Error::Param(format!("value {v} outside axis `{}` [{}, {}]", a.name, a.min, a.max)));
            }
        }
        Ok(Self { values, axes })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    axes: Vec<Axis>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub axes: Vec<Axis>,
    pub records: Vec<SampleRecord>,
}

/// A broken manifest invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Offending record index, `None` for manifest-level rules.
    pub record: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(i) => write!(f, "record {i}: {} ({})", self.rule, self.detail),
            None => write!(f, "manifest: {} ({})", self.rule, self.detail),
        }
    }
}

/// `path` expressed relative to `base` (with `..` steps), when both are
/// absolute or both relative and `base` is non-empty.
fn relative_to(path: &Path, base: &Path) -> Option<PathBuf> {
    use std::path::Component;
    if base.as_os_str().is_empty() || path.is_absolute() != base.is_absolute() {
        return None;
    }
    let p: Vec<Component> = path.components().filter(|c| *c != Component::CurDir).collect();
    let b: Vec<Component> = base.components().filter(|c| *c != Component::CurDir).collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if b[common..].iter().any(|c| matches!(c, Component::ParentDir)) {
        return None;
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    out.extend(&p[common..]);
    Some(out)
}

impl Manifest {
    pub fn new(axes: Vec<Axis>, records: Vec<SampleRecord>) -> Self {
        Self { schema_version: MANIFEST_SCHEMA_VERSION, axes, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn p_dim(&self) -> usize {
        self.axes.len()
    }

    /// Domain tag of the first record.
    pub fn domain(&self) -> Option<&str> {
        self.records.first().map(|r| r.domain.as_str())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: Header = loop {
            let Some((_, line)) = lines.next() else {
                return Err(Error::parse(origin, "missing header line"));
            };
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                break serde_json::from_str(&line).map_err(|e| Error::parse(&origin, format!("header: {e}")))?;
            }
        };
        let mut records = Vec::new();
        for (no, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(&origin, format!("line {}: {e}", no + 1)))?;
            if rec.path.is_relative() {
                rec.path = root.join(&rec.path);
            }
            records.push(rec);
        }
        Ok(Self { schema_version: header.schema_version, axes: header.axes, records })
    }

    /// Write the manifest; paths under the manifest's directory are stored relative.
    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = Vec::new();
        let header = Header { schema_version: self.schema_version, axes: self.axes.clone() };
        serde_json::to_writer(&mut out, &header).expect("serializable header");
        out.push(b'\n');
        for rec in &self.records {
            let mut rec = rec.clone();
            if let Some(rel) = relative_to(&rec.path, &root) {
                rec.path = rel;
            }
            serde_json::to_writer(&mut out, &rec).expect("serializable record");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Record `i`'s parametrization, validated against the manifest axes.
    pub fn parametrization(&self, i: usize) -> Result<Parametrization> {
        let rec = &self.records[i];
        if self.axes.is_empty() && rec.p.is_none() {
            return Parametrization::new(Vec::new(), Vec::new());
        }
        let p = rec
            .p
            .clone()
            .ok_or_else(|| Error::Manifest(format!("record {} ({}) has no p", i, rec.path.display())))?;
        Parametrization::new(p, self.axes.clone())
    }
}

/// All invariant violations of `m`; empty iff the manifest is well formed.
pub fn validate_manifest(m: &Manifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        out.push(Violation {
            record: None,
            rule: "schema_version",
            detail: format!("expected {MANIFEST_SCHEMA_VERSION}, found {}", m.schema_version),
        });
    }
    if m.records.is_empty() {
        out.push(Violation { record: None, rule: "non_empty", detail: "manifest has no records".into() });
    }
    for (i, a) in m.axes.iter().enumerate() {
        if !(a.min.is_finite() && a.max.is_finite() && a.min <= a.max) {
            out.push(Violation { record: None, rule: "axis_range", detail: format!("axis {i} `{}` has an invalid range", a.name) });
        }
    }
    let parametrized = !m.axes.is_empty();
    let mut seen: BTreeMap<&Path, usize> = BTreeMap::new();
    for (i, rec) in m.records.iter().enumerate() {
        if let Some(first) = seen.insert(rec.path.as_path(), i) {
            out.push(Violation {
                record: Some(i),
                rule: "duplicate_path",
                detail: format!("{} already listed as record {first}", rec.path.display()),
            });
        }
        match &rec.p {
            None if parametrized => out.push(Violation {
                record: Some(i),
                rule: "missing_p",
                detail: format!("{} has no p in a parametrized manifest", rec.path.display()),
            }),
            None => {}
            Some(p) if p.len() != m.axes.len() => out.push(Violation {
                record: Some(i),
                rule: "p_dimension",
                detail: format!("p has {} values, {} axes declared", p.len(), m.axes.len()),
            }),
            Some(p) => {
                for (v, a) in p.iter().zip(&m.axes) {
                    if !a.contains(*v) {
                        out.push(Violation {
                            record: Some(i),
                            rule: "p_range",
                            detail: format!("{v} outside `{}` [{}, {}]", a.name, a.min, a.max),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Soft parametrization: the source domain gets p = 0, the j-th target
/// domain the j-th standard basis vector.
pub fn build_soft_labels(source: &Manifest, targets: &[Manifest]) -> Result<Manifest> {
    if targets.is_empty() {
        return Err(Error::Manifest("at least one target manifest is required".into()));
    }
    if source.is_empty() {
        return Err(Error::Manifest("source manifest is empty".into()));
    }
    if let Some(j) = targets.iter().position(Manifest::is_empty) {
        return Err(Error::Manifest(format!("target manifest {j} is empty")));
    }
    if let Some(r) = source.records.iter().find(|r| r.p.is_some()) {
        return Err(Error::Manifest(format!("source record {} already carries p", r.path.display())));
    }
    let k = targets.len();
    let mut owners: BTreeMap<&Path, Vec<String>> = BTreeMap::new();
    for rec in source.records.iter().chain(targets.iter().flat_map(|t| &t.records)) {
        owners.entry(rec.path.as_path()).or_default().push(rec.domain.clone());
    }
    let duplicates: Vec<String> = owners
        .iter()
        .filter(|(_, d)| d.len() > 1)
        .map(|(p, d)| format!("{} ({})", p.display(), d.join(", ")))
        .collect();
    if !duplicates.is_empty() {
        return Err(Error::Manifest(format!("duplicate image paths across domains: {}", duplicates.join("; "))));
    }

    let axes = targets
        .iter()
        .enumerate()
        .map(|(j, t)| Axis::unit(t.domain().map_or_else(|| format!("target{j}"), str::to_string)))
        .collect();
    let mut records = Vec::with_capacity(source.len() + targets.iter().map(Manifest::len).sum::<usize>());
    records.extend(source.records.iter().map(|r| SampleRecord { p: Some(vec![0.0; k]), ..r.clone() }));
    for (j, t) in targets.iter().enumerate() {
        let mut one_hot = vec![0.0; k];
        one_hot[j] = 1.0;
        records.extend(t.records.iter().map(|r| SampleRecord { p: Some(one_hot.clone()), ..r.clone() }));
    }
    Ok(Manifest::new(axes, records))
}

/// One training sample: a source image, a target image and the target's p.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTuple {
    pub x: SampleRecord,
    pub y: SampleRecord,
    pub p: Parametrization,
}

/// Uniform draw with replacement from each manifest.
pub fn sample_training_tuple<R: Rng + ?Sized>(source: &Manifest, target: &Manifest, rng: &mut R) -> Result<TrainingTuple> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Manifest("cannot sample from an empty manifest".into()));
    }
    let xi = rng.random_range(0..source.len());
    let yi = rng.random_range(0..target.len());
    let p = target.parametrization(yi)?;
    Ok(TrainingTuple { x: source.records[xi].clone(), y: target.records[yi].clone(), p })
}
