//! Sweep/mixing grids and PNG montages.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CELLS: usize = 100;
pub const GUTTER: u32 = 2;

/// Which axes to vary and over which values; cells enumerate the cartesian
/// product of the value lists, first axis slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub labels: bool,
}

impl GridSpec {
    /// A single-axis strip, one row.
    pub fn strip(axis: usize, values: Vec<f64>) -> Self {
        let cols = values.len();
        Self { axes: vec![axis], values: vec![values], rows: 1, cols, labels: false }
    }

    pub fn cells(&self) -> usize {
        self.values.iter().map(Vec::len).product()
    }

    pub fn validate(&self, p_dim: usize) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() != self.values.len() {
            return Err(Error::Config("grid needs one value list per varied axis".into()));
        }
        if let Some(a) = self.axes.iter().find(|&&a| a >= p_dim) {
            return Err(Error::Param(format!("grid axis {a} out of range for p_dim {p_dim}")));
        }
        let cells = self.cells();
        if cells != self.rows * self.cols {
            return Err(Error::Config(format!(
                "grid has {cells} parametrizations but the layout is {}x{}",
                self.rows, self.cols
            )));
        }
        if cells == 0 {
            return Err(Error::Config("grid is empty".into()));
        }
        if cells > MAX_CELLS {
            return Err(Error::Config(format!("grid of {cells} cells exceeds the {MAX_CELLS}-cell limit")));
        }
        Ok(())
    }

    /// Row-major parametrizations: `base` with the varied axes overwritten.
    pub fn parametrizations(&self, base: &[f64]) -> Vec<Vec<f64>> {
        let mut out = vec![base.to_vec()];
        for (axis, values) in self.axes.iter().zip(&self.values) {
            out = out
                .iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q[*axis] = *v;
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Label of a cell: its varied values joined by `,`.
    pub fn label(&self, p: &[f64]) -> String {
        self.axes.iter().map(|&a| format!("{:.2}", p[a])).collect::<Vec<_>>().join(",")
    }
}

/// Tile equally sized images row-major with a white gutter between cells.
pub fn montage(cells: &[RgbImage], rows: usize, cols: usize) -> Result<RgbImage> {
    if cells.len() != rows * cols || cells.is_empty() {
        return Err(Error::Config(format!("montage of {rows}x{cols} needs {} cells, got {}", rows * cols, cells.len())));
    }
    let (w, h) = cells[0].dimensions();
    if cells.iter().any(|c| c.dimensions() != (w, h)) {
        return Err(Error::Shape("montage cells differ in size".into()));
    }
    let (rows, cols) = (rows as u32, cols as u32);
    let mut out = RgbImage::from_pixel(cols * w + (cols - 1) * GUTTER, rows * h + (rows - 1) * GUTTER, Rgb([255, 255, 255]));
    for (i, cell) in cells.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        image::imageops::replace(&mut out, cell, (c * (w + GUTTER)) as i64, (r * (h + GUTTER)) as i64);
    }
    Ok(out)
}

/// 3×5 bitmap glyphs, one row per `u8`, high bits left.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b011, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        ',' => [0b000, 0b000, 0b000, 0b010, 0b100],
        _ => return None,
    })
}

/// Burn `text` into the top-left corner, white on a black box.
pub fn draw_label(img: &mut RgbImage, text: &str) {
    let glyphs: Vec<[u8; 5]> = text.chars().filter_map(glyph).collect();
    let (w, h) = img.dimensions();
    let box_w = (glyphs.len() as u32 * 4 + 1).min(w);
    for y in 0..7.min(h) {
        for x in 0..box_w {
            img.put_pixel(x, y, Rgb([0, 0, 0]));
        }
    }
    for (k, g) in glyphs.iter().enumerate() {
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3u32 {
                let (x, y) = (1 + k as u32 * 4 + col, 1 + row as u32);
                if bits & (0b100 >> col) != 0 && x < w && y < h {
                    img.put_pixel(x, y, Rgb([255, 255, 255]));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parametrizations_are_row_major() {
        let g = GridSpec { axes: vec![0, 2], values: vec![vec![0.0, 1.0], vec![0.1, 0.2, 0.3]], rows: 2, cols: 3, labels: false };
        g.validate(3).unwrap();
        let ps = g.parametrizations(&[9.0, 5.0, 9.0]);
        assert_eq!(ps.len(), 6);
        assert_eq!(ps[0], vec![0.0, 5.0, 0.1]);
        assert_eq!(ps[2], vec![0.0, 5.0, 0.3]);
        assert_eq!(ps[3], vec![1.0, 5.0, 0.1]);
        assert!(g.validate(2).is_err());
    }

    #[test]
    fn layout_and_size_limits() {
        let strip = GridSpec::strip(0, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        strip.validate(1).unwrap();
        assert!(GridSpec { rows: 2, ..strip.clone() }.validate(1).is_err());
        let big = GridSpec { axes: vec![0, 1], values: vec![vec![0.0; 11], vec![0.0; 10]], rows: 11, cols: 10, labels: false };
        assert!(big.validate(2).unwrap_err().to_string().contains("100-cell"));
    }

    #[test]
    fn montage_gutters_are_white() {
        let cells: Vec<RgbImage> = (0..6).map(|i| RgbImage::from_pixel(4, 3, Rgb([i * 10, 0, 0]))).collect();
        let m = montage(&cells, 2, 3).unwrap();
        assert_eq!(m.dimensions(), (3 * 4 + 2 * GUTTER, 2 * 3 + GUTTER));
        assert_eq!(m.get_pixel(4, 0), &Rgb([255, 255, 255]));
        assert_eq!(m.get_pixel(5, 0), &Rgb([255, 255, 255]));
        assert_eq!(m.get_pixel(6, 0), &Rgb([10, 0, 0]));
        assert_eq!(m.get_pixel(6, 5), &Rgb([40, 0, 0]));
        let one = montage(&cells[..1], 1, 1).unwrap();
        assert_eq!(one, cells[0]);
        assert!(montage(&cells, 2, 2).is_err());
    }

    #[test]
    fn labels_draw_inside_the_cell() {
        let mut img = RgbImage::from_pixel(32, 32, Rgb([100, 100, 100]));
        draw_label(&mut img, "0.25");
        assert_eq!(img.get_pixel(0, 0), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(1, 1), &Rgb([255, 255, 255]));
        assert_eq!(img.get_pixel(31, 31), &Rgb([100, 100, 100]));
    }
}
