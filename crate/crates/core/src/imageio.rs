//! PNG loading/saving with [-1, 1] normalization.
//!
//! Images live in memory as `(1, 3, H, W)` tensors.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Load an 8-bit PNG as a normalized `(1, 3, H, W)` tensor. Images must be square.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::Image { path: path.to_path_buf(), message: format!("image is {w}x{h}, expected square") });
    }
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = u8_to_unit(px[c]);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("consistent image")
}

pub fn to_rgb8(img: &Image) -> Result<RgbImage> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected a single RGB image, got {:?}", img.shape())));
    }
    let d = img.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([unit_to_u8(d[i]), unit_to_u8(d[w * h + i]), unit_to_u8(d[2 * w * h + i])])
    }))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    save_rgb(path, &to_rgb8(img)?)
}

/// Write an 8-bit RGB PNG, creating parent directories.
pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Snap every value to the nearest representable 8-bit level.
pub fn quantize(img: &Image) -> Image {
    img.map(|v| u8_to_unit(unit_to_u8(v)))
}
