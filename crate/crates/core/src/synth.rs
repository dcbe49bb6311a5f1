//! Procedural datasets: light-beam renders with ground-truth `(x, y, intensity)`
//! parametrizations, and color/brightness-transformed toy domains.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Axis, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::tensor::Tensor;

/// Global dimming applied under the beam model.
pub const BEAM_DIM: f32 = 0.55;
/// Peak gain of the Gaussian spot.
pub const BEAM_GAIN: f32 = 0.9;
pub const DEFAULT_SIGMA: f64 = 0.25;
pub const DEFAULT_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    /// Beam center as a fraction of the width.
    pub cx: f64,
    /// Beam center as a fraction of the height.
    pub cy: f64,
    pub intensity: f64,
    /// Spot standard deviation as a fraction of the image diagonal.
    pub sigma: f64,
}

impl BeamSpec {
    pub fn new(cx: f64, cy: f64, intensity: f64) -> Self {
        Self { cx, cy, intensity, sigma: DEFAULT_SIGMA }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("intensity", self.intensity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Param(format!("beam {name} = {v} outside [0, 1]")));
            }
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Param(format!("beam sigma = {} outside (0, 1]", self.sigma)));
        }
        Ok(())
    }

    pub fn p(&self) -> Vec<f64> {
        vec![self.cx, self.cy, self.intensity]
    }
}

/// Unit-peak Gaussian spot of `spec` evaluated at pixel centers, row-major.
pub fn beam_profile(spec: &BeamSpec, width: usize, height: usize) -> Vec<f32> {
    let diag = ((width * width + height * height) as f64).sqrt();
    let s = spec.sigma * diag;
    let (cx, cy) = (spec.cx * width as f64, spec.cy * height as f64);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            out.push((-(dx * dx + dy * dy) / (2.0 * s * s)).exp() as f32);
        }
    }
    out
}

/// Blend between the base image and its beam-lit version:
/// `out = (1 - I)·base + I·clamp(base·(dim + gain·G), -1, 1)`.
pub fn render_beam(base: &Image, spec: &BeamSpec) -> Result<Image> {
    spec.validate()?;
    let (n, c, h, w) = base.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("render_beam takes one image, got {:?}", base.shape())));
    }
    let profile = beam_profile(spec, w, h);
    let i = spec.intensity as f32;
    let mut out = base.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (v, g) in plane.iter_mut().zip(&profile) {
            let lit = (*v * (BEAM_DIM + BEAM_GAIN * g)).clamp(-1.0, 1.0);
            *v = (1.0 - i) * *v + i * lit;
        }
    }
    Ok(out)
}

pub fn sample_beam<R: Rng + ?Sized>(rng: &mut R) -> BeamSpec {
    BeamSpec::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0))
}

/// Per-item generator derived from the run seed and the item index.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
    let (iw, ih) = img.dimensions();
    for y in y0..(y0 + h).min(ih) {
        for x in x0..(x0 + w).min(iw) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn random_color<R: Rng>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

/// Gray level `lo..=hi` with a small per-channel tint.
fn tinted<R: Rng>(rng: &mut R, lo: u8, hi: u8, tint: i16) -> [u8; 3] {
    let level = rng.random_range(lo..=hi) as i16;
    std::array::from_fn(|_| (level + rng.random_range(-tint..=tint)).clamp(0, 255) as u8)
}

/// "Book cover" base images: light paper, a mid-tone title block and dark
/// text-like bars. Each element keeps to its own tone band, so the color of a
/// region can be inferred from its role in the layout.
pub fn procedural_covers(count: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    (0..count)
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let s = size as u32;
            let mut img = RgbImage::from_pixel(s, s, Rgb(tinted(&mut rng, 190, 225, 12)));
            let unit = (s / 16).max(1);
            let block = tinted(&mut rng, 95, 145, 25);
            let top = rng.random_range(unit..=3 * unit);
            fill_rect(&mut img, 2 * unit, top, s - 4 * unit, 3 * unit, block);
            let bars = rng.random_range(3..=6);
            let ink = tinted(&mut rng, 25, 65, 8);
            for b in 0..bars {
                let y = top + 5 * unit + b * 2 * unit;
                if y + unit > s - unit {
                    break;
                }
                let len = rng.random_range(s * 3 / 10..=s * 8 / 10);
                fill_rect(&mut img, 2 * unit, y, len, unit, ink);
            }
            img
        })
        .collect()
}

/// Render `count` beam images from `bases` into `out_dir` and write `manifest.jsonl`.
pub fn generate_dataset(bases: &[Image], count: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    if bases.is_empty() {
        return Err(Error::Config("at least one base image is required".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = item_rng(seed, i as u64);
        let base = &bases[rng.random_range(0..bases.len())];
        let spec = sample_beam(&mut rng);
        let img = render_beam(base, &spec)?;
        let path = out_dir.join(format!("beam_{i:05}.png"));
        imageio::save_image(&path, &img)?;
        records.push(SampleRecord { path, domain: "beam".into(), p: Some(spec.p()) });
    }
    let manifest = Manifest::new(vec![Axis::unit("x"), Axis::unit("y"), Axis::unit("intensity")], records);
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Write `images` as PNGs plus an unparametrized manifest for `domain`.
pub fn write_domain(images: &[RgbImage], domain: &str, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let path = out_dir.join(format!("{domain}_{i:05}.png"));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
        records.push(SampleRecord { path, domain: domain.into(), p: None });
    }
    let manifest = Manifest::new(vec![], records);
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDomainSpec {
    pub name: String,
    /// Additive shift per channel, in units of the full [0, 1] range.
    pub color_shift: [f64; 3],
    pub brightness_scale: f64,
    pub texture_seed: u64,
}

impl ToyDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("domain name must not be empty".into()));
        }
        if self.color_shift.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("domain `{}`: color_shift outside [-1, 1]", self.name)));
        }
        if !(0.0..=2.0).contains(&self.brightness_scale) {
            return Err(Error::Config(format!("domain `{}`: brightness_scale outside [0, 2]", self.name)));
        }
        Ok(())
    }

    /// Map one 8-bit channel value: `clamp(scale·(v + shift), 0, 1)` on [0, 1] levels.
    pub fn transform_channel(&self, v: u8, channel: usize) -> u8 {
        let f = v as f64 / 255.0;
        let out = (self.brightness_scale * (f + self.color_shift[channel])).clamp(0.0, 1.0);
        (out * 255.0).round() as u8
    }

    pub fn apply(&self, scene: &RgbImage) -> RgbImage {
        let mut out = scene.clone();
        for px in out.pixels_mut() {
            for c in 0..3 {
                px[c] = self.transform_channel(px[c], c);
            }
        }
        out
    }
}

/// Top-level layout of a domain spec file (TOML, `[[domain]]` tables).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpecFile {
    #[serde(rename = "domain")]
    pub domains: Vec<ToyDomainSpec>,
}

impl DomainSpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// Random gradients and rectangles shared by every domain with the same texture seed.
pub fn toy_scenes(count: usize, size: usize, seed: u64, texture_seed: u64) -> Vec<RgbImage> {
    let stream_seed = seed ^ texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (0..count)
        .map(|i| {
            let mut rng = item_rng(stream_seed, i as u64);
            let s = size as u32;
            let a = random_color(&mut rng, 40, 215);
            let b = random_color(&mut rng, 40, 215);
            let vertical = rng.random_bool(0.5);
            let mut img = RgbImage::from_fn(s, s, |x, y| {
                let t = if vertical { y } else { x } as f64 / (s.max(2) - 1) as f64;
                Rgb(std::array::from_fn(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t).round() as u8))
            });
            for _ in 0..rng.random_range(2..=5) {
                let w = rng.random_range(s / 8..=s / 2).max(1);
                let h = rng.random_range(s / 8..=s / 2).max(1);
                let x0 = rng.random_range(0..s - w + 1);
                let y0 = rng.random_range(0..s - h + 1);
                fill_rect(&mut img, x0, y0, w, h, random_color(&mut rng, 20, 235));
            }
            img
        })
        .collect()
}

/// Render every domain of `specs` into `out_dir/<name>/` with a manifest each.
pub fn generate_toy_domains(
    specs: &[ToyDomainSpec],
    count_per_domain: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<Manifest>> {
    if specs.is_empty() {
        return Err(Error::Config("at least one domain spec is required".into()));
    }
    let mut names = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate domain name `{}`", s.name)));
        }
    }
    specs
        .iter()
        .map(|spec| {
            let images: Vec<RgbImage> =
                toy_scenes(count_per_domain, size, seed, spec.texture_seed).iter().map(|s| spec.apply(s)).collect();
            write_domain(&images, &spec.name, &out_dir.join(&spec.name))
        })
        .collect()
}

/// Constant-valued `(1, 3, size, size)` image.
pub fn flat_image(size: usize, value: f32) -> Image {
    Tensor::full(&[1, 3, size, size], value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::from_rgb8;

    fn mirror_x(img: &Image) -> Image {
        let (_, c, h, w) = img.dims4().unwrap();
        let mut out = img.clone();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + y) * w + (w - 1 - x)];
                }
            }
        }
        out
    }

    #[test]
    fn zero_intensity_is_identity() {
        let base = from_rgb8(&procedural_covers(1, 32, 3)[0]);
        let out = render_beam(&base, &BeamSpec::new(0.3, 0.8, 0.0)).unwrap();
        assert_eq!(out, base);
    }

    #[test]
    fn centered_beam_preserves_mirror_symmetry() {
        let cover = from_rgb8(&procedural_covers(1, 32, 9)[0]);
        // symmetrize the base
        let mut base = cover.clone();
        let m = mirror_x(&cover);
        base.data_mut().iter_mut().zip(m.data()).for_each(|(a, b)| *a = 0.5 * (*a + b));
        assert_eq!(mirror_x(&base), base);
        let out = render_beam(&base, &BeamSpec::new(0.5, 0.5, 0.8)).unwrap();
        assert_eq!(mirror_x(&out), out);
    }

    #[test]
    fn closed_form_at_beam_center() {
        // 2x2 image with cx = cy = 0.5: the center sits on a pixel corner, so
        // evaluate at a 1x1 image whose only pixel center is the beam center.
        for (base, expected) in [(0.0f32, 0.0f32), (0.5, (0.5 * (0.55 + 0.9f32)).min(1.0)), (0.9, 1.0), (-0.5, -0.725)] {
            let img = flat_image(1, base);
            let out = render_beam(&img, &BeamSpec::new(0.5, 0.5, 1.0)).unwrap();
            assert!((out.data()[0] - expected).abs() < 1e-6, "{base}: {} vs {expected}", out.data()[0]);
        }
        // half intensity blends halfway
        let out = render_beam(&flat_image(1, 0.5), &BeamSpec::new(0.5, 0.5, 0.5)).unwrap();
        assert!((out.data()[0] - (0.5 * 0.5 + 0.5 * 0.725)).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_spec_is_rejected() {
        let img = flat_image(4, 0.2);
        assert!(render_beam(&img, &BeamSpec::new(1.2, 0.5, 0.5)).is_err());
        assert!(render_beam(&img, &BeamSpec::new(0.5, 0.5, -0.1)).is_err());
        assert!(render_beam(&img, &BeamSpec { sigma: 0.0, ..BeamSpec::new(0.5, 0.5, 0.5) }).is_err());
    }

    #[test]
    fn brightened_region_tracks_center() {
        let size = 32;
        let base = flat_image(size, 0.6);
        for (cx, cy) in [(0.2, 0.7), (0.5, 0.5), (0.9, 0.1), (0.37, 0.61)] {
            let out = render_beam(&base, &BeamSpec { sigma: 0.1, ..BeamSpec::new(cx, cy, 1.0) }).unwrap();
            let plane = &out.data()[..size * size];
            let (idx, _) = plane
                .iter()
                .map(|v| v - BEAM_DIM * 0.6)
                .enumerate()
                .fold((0, f32::MIN), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
            let (px, py) = ((idx % size) as f64 + 0.5, (idx / size) as f64 + 0.5);
            assert!((px - cx * size as f64).abs() <= 1.0, "x {px} vs {}", cx * size as f64);
            assert!((py - cy * size as f64).abs() <= 1.0, "y {py} vs {}", cy * size as f64);
        }
    }

    #[test]
    fn intensity_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mean = (0..n).map(|_| sample_beam(&mut rng).intensity).sum::<f64>() / n as f64;
        // std of the mean is sqrt(1/12/1e4) ≈ 0.0029
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }

    #[test]
    fn toy_domain_transforms() {
        let scenes = toy_scenes(3, 16, 5, 11);
        let identity = ToyDomainSpec { name: "id".into(), color_shift: [0.0; 3], brightness_scale: 1.0, texture_seed: 11 };
        for s in &scenes {
            assert_eq!(&identity.apply(s), s);
        }
        let black = ToyDomainSpec { brightness_scale: 0.0, ..identity.clone() };
        assert!(black.apply(&scenes[0]).pixels().all(|p| p.0 == [0, 0, 0]));
        let bad = ToyDomainSpec { brightness_scale: 2.5, ..identity.clone() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn intensity_is_monotone_where_the_beam_brightens() {
        let base = from_rgb8(&procedural_covers(1, 24, 4)[0]);
        let spec = BeamSpec::new(0.4, 0.6, 0.0);
        let profile = beam_profile(&spec, 24, 24);
        let renders: Vec<Image> = (0..=10)
            .map(|k| render_beam(&base, &BeamSpec { intensity: k as f64 / 10.0, ..spec }).unwrap())
            .collect();
        let mut lit = 0;
        for (idx, g) in profile.iter().enumerate() {
            // the lit value is at least the base wherever dim + gain·G >= 1
            if BEAM_DIM + BEAM_GAIN * g < 1.0 {
                continue;
            }
            for ch in 0..3 {
                let i = ch * 24 * 24 + idx;
                if base.data()[i] < 0.0 {
                    continue;
                }
                lit += 1;
                for w in renders.windows(2) {
                    assert!(w[1].data()[i] >= w[0].data()[i] - 1e-6);
                }
            }
        }
        assert!(lit > 50, "only {lit} brightened samples");
    }

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let bases: Vec<Image> = procedural_covers(3, 16, 1).iter().map(from_rgb8).collect();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_dataset(&bases, 10, 42, a.path()).unwrap();
        let mb = generate_dataset(&bases, 10, 42, b.path()).unwrap();
        assert_eq!(ma.len(), 10);
        for (ra, rb) in ma.records.iter().zip(&mb.records) {
            assert_eq!(ra.p, rb.p);
            assert!(ra.p.as_ref().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(fs::read(&ra.path).unwrap(), fs::read(&rb.path).unwrap());
        }
        assert_eq!(fs::read(a.path().join("manifest.jsonl")).unwrap(), fs::read(b.path().join("manifest.jsonl")).unwrap());
    }

    #[test]
    fn shared_texture_seed_differs_only_by_the_color_transform() {
        let dir = tempfile::tempdir().unwrap();
        let warm = ToyDomainSpec { name: "warm".into(), color_shift: [0.2, 0.0, -0.1], brightness_scale: 1.1, texture_seed: 5 };
        let dim = ToyDomainSpec { name: "dim".into(), color_shift: [0.0, 0.0, 0.1], brightness_scale: 0.5, texture_seed: 5 };
        let ms = generate_toy_domains(&[warm.clone(), dim.clone()], 4, 16, 9, dir.path()).unwrap();
        let scenes = toy_scenes(4, 16, 9, 5);
        for (k, scene) in scenes.iter().enumerate() {
            let a = image::open(&ms[0].records[k].path).unwrap().to_rgb8();
            let b = image::open(&ms[1].records[k].path).unwrap().to_rgb8();
            for ((pa, pb), ps) in a.pixels().zip(b.pixels()).zip(scene.pixels()) {
                for c in 0..3 {
                    let f = ps[c] as f64 / 255.0;
                    let expect_a = ((1.1 * (f + warm.color_shift[c])).clamp(0.0, 1.0) * 255.0).round() as u8;
                    let expect_b = ((0.5 * (f + dim.color_shift[c])).clamp(0.0, 1.0) * 255.0).round() as u8;
                    assert_eq!((pa[c], pb[c]), (expect_a, expect_b));
                }
            }
        }
    }

    #[test]
    fn duplicate_domain_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = ToyDomainSpec { name: "a".into(), color_shift: [0.0; 3], brightness_scale: 1.0, texture_seed: 1 };
        let err = generate_toy_domains(&[a.clone(), a], 2, 8, 0, dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
