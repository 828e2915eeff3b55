//! Minimal PNG emitters for 2D scatters, density heatmaps, image grids,
//! and score histograms. Output is figures, not an interactive UI.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::evaluation::{Bounds, HistogramSet};

fn to_err(e: image::ImageError) -> Error {
    Error::Persistence(format!("png write: {e}"))
}

/// Dark-on-white scatter of 2D points.
pub fn scatter_png(path: &Path, points: &Array2<f64>, bounds: Bounds, size: u32) -> Result<()> {
    if points.ncols() != 2 {
        return Err(Error::invalid("scatter_png requires 2D points"));
    }
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let span = bounds.hi - bounds.lo;
    for row in points.rows() {
        let fx = (row[0] - bounds.lo) / span;
        let fy = (row[1] - bounds.lo) / span;
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            continue;
        }
        let px = (fx * (size - 1) as f64).round() as i64;
        // Image rows grow downward; data y grows upward.
        let py = ((1.0 - fy) * (size - 1) as f64).round() as i64;
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && x < size as i64 && y < size as i64 {
                    let p = img.get_pixel_mut(x as u32, y as u32);
                    // Darken on repeat hits so dense regions read darker.
                    let v = p.0[0].saturating_sub(90);
                    *p = Rgb([v, v, (v as u16 + 40).min(255) as u8]);
                }
            }
        }
    }
    img.save(path).map_err(to_err)
}

fn colormap(v: f64) -> Rgb<u8> {
    // Simple dark-blue -> teal -> yellow ramp on [0, 1].
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * v - 0.5).clamp(0.0, 1.0)) as u8;
    let g = (255.0 * (1.25 * v).clamp(0.0, 1.0).powf(1.2)) as u8;
    let b = (255.0 * (0.4 + 0.6 * (1.0 - v) - 0.3 * v).clamp(0.0, 1.0)) as u8;
    Rgb([r, g, b])
}

/// Heatmap of a value grid (row 0 at the bottom), min-max normalized.
pub fn heatmap_png(path: &Path, grid: &Array2<f64>, scale: u32) -> Result<()> {
    let (rows, cols) = grid.dim();
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(cols as u32 * scale, rows as u32 * scale);
    for iy in 0..rows {
        for ix in 0..cols {
            let c = colormap((grid[(iy, ix)] - lo) / span);
            for sy in 0..scale {
                for sx in 0..scale {
                    // Flip vertically so increasing y points up.
                    let py = (rows - 1 - iy) as u32 * scale + sy;
                    img.put_pixel(ix as u32 * scale + sx, py, c);
                }
            }
        }
    }
    img.save(path).map_err(to_err)
}

/// Overlaid bar histograms, one color per series.
pub fn histogram_png(path: &Path, hist: &HistogramSet, width: u32, height: u32) -> Result<()> {
    const COLORS: [[u8; 3]; 5] =
        [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189]];
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let bins = hist.edges.len().saturating_sub(1);
    if bins == 0 {
        return Err(Error::invalid("histogram_png requires at least one bin"));
    }
    let peak = hist
        .series
        .iter()
        .flat_map(|s| s.counts.iter())
        .cloned()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let bar_w = width as f64 / bins as f64;
    for (si, series) in hist.series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        for (b, &count) in series.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let h = ((count as f64 / peak) * (height as f64 - 2.0)).round() as u32;
            let x0 = (b as f64 * bar_w) as u32;
            let x1 = (((b + 1) as f64 * bar_w) as u32).min(width).max(x0 + 1);
            for x in x0..x1 {
                for y in (height - h)..height {
                    let p = img.get_pixel_mut(x, y);
                    // Blend half-transparently so overlaps stay visible.
                    let mixed = [
                        ((p.0[0] as u16 + color[0] as u16) / 2) as u8,
                        ((p.0[1] as u16 + color[1] as u16) / 2) as u8,
                        ((p.0[2] as u16 + color[2] as u16) / 2) as u8,
                    ];
                    *p = Rgb(mixed);
                }
            }
        }
    }
    img.save(path).map_err(to_err)
}

/// Tile [-1,1]-scaled image rows into a square grid PNG.
pub fn image_grid_png(
    path: &Path,
    batch: &Array2<f64>,
    shape: (usize, usize, usize),
    pad: u32,
) -> Result<()> {
    let (c, h, w) = shape;
    if c != 1 && c != 3 {
        return Err(Error::invalid("image_grid_png supports 1- or 3-channel data"));
    }
    if batch.ncols() != c * h * w {
        return Err(Error::shape("image_grid_png: row width vs shape"));
    }
    let n = batch.nrows();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell_w = w as u32 + pad;
    let cell_h = h as u32 + pad;
    let mut img = RgbImage::from_pixel(
        cols as u32 * cell_w + pad,
        rows as u32 * cell_h + pad,
        Rgb([30, 30, 30]),
    );
    for (idx, row) in batch.rows().into_iter().enumerate() {
        let gx = (idx % cols) as u32 * cell_w + pad;
        let gy = (idx / cols) as u32 * cell_h + pad;
        for y in 0..h {
            for x in 0..w {
                let pixel = |ch: usize| {
                    let v = row[ch * h * w + y * w + x];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                let rgb = if c == 1 {
                    let g = pixel(0);
                    [g, g, g]
                } else {
                    [pixel(0), pixel(1), pixel(2)]
                };
                img.put_pixel(gx + x as u32, gy + y as u32, Rgb(rgb));
            }
        }
    }
    img.save(path).map_err(to_err)
}
