//! Toy 2D dataset generators and image ingestion.
//!
//! Toy generators are pure functions of `(n, seed)`. The 25-Gaussians grid
//! uses means on `{-4,-2,0,2,4}^2` with component std 0.05 — widely
//! separated modes on a [-6,6]^2 canvas. The pinwheel is the usual
//! five-blade construction (radial Gaussian blades, rotation growing with
//! radius), and the swiss roll is the standard 2D spiral rescaled into
//! [-4,4]^2.
//!
//! Images load from a folder of PNG/JPEG files or an MNIST-style IDX file
//! and are affinely scaled to [-1,1] (0 -> -1, 255 -> +1). Streams shuffle
//! with an order derived from the seed and nothing else.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Gaussians25,
    Pinwheel,
    Swissroll,
    Mnist,
    ImageFolder,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussians25" => Ok(DatasetName::Gaussians25),
            "pinwheel" => Ok(DatasetName::Pinwheel),
            "swissroll" => Ok(DatasetName::Swissroll),
            "mnist" => Ok(DatasetName::Mnist),
            "image_folder" => Ok(DatasetName::ImageFolder),
            other => Err(Error::invalid(format!("unknown dataset name: {other}"))),
        }
    }

    pub fn is_toy(&self) -> bool {
        matches!(self, DatasetName::Gaussians25 | DatasetName::Pinwheel | DatasetName::Swissroll)
    }
}

/// Tunable constants of the toy generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyParams {
    /// Component standard deviation of the 25-Gaussians mixture.
    pub gaussians25_std: f64,
    pub pinwheel_blades: usize,
    pub pinwheel_radial_std: f64,
    pub pinwheel_tangential_std: f64,
    pub pinwheel_rate: f64,
    pub pinwheel_scale: f64,
    /// Noise std of the swiss roll, in pre-scaling units.
    pub swissroll_noise: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            gaussians25_std: 0.05,
            pinwheel_blades: 5,
            pinwheel_radial_std: 0.3,
            pinwheel_tangential_std: 0.1,
            pinwheel_rate: 0.25,
            pinwheel_scale: 2.0,
            swissroll_noise: 0.5,
        }
    }
}

/// The 5x5 grid of mixture means, row-major over {-4,-2,0,2,4}^2.
pub fn gaussians25_modes() -> Array2<f64> {
    let mut modes = Array2::zeros((25, 2));
    for (k, (i, j)) in (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).enumerate() {
        modes[(k, 0)] = -4.0 + 2.0 * i as f64;
        modes[(k, 1)] = -4.0 + 2.0 * j as f64;
    }
    modes
}

/// Draw `n` points from a named toy dataset; pure in `(n, seed)`.
pub fn toy_sample(
    name: DatasetName,
    params: &ToyParams,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if n < 1 {
        return Err(Error::invalid("toy_sample requires n >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    toy_batch(name, params, n, &mut rng)
}

/// Like [`toy_sample`] but advancing a caller-owned stream.
pub fn toy_batch(
    name: DatasetName,
    params: &ToyParams,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    match name {
        DatasetName::Gaussians25 => Ok(gaussians25(params, n, rng)),
        DatasetName::Pinwheel => Ok(pinwheel(params, n, rng)),
        DatasetName::Swissroll => Ok(swissroll(params, n, rng)),
        _ => Err(Error::invalid("toy_sample requires a toy dataset name")),
    }
}

fn gaussians25(params: &ToyParams, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let modes = gaussians25_modes();
    let std = params.gaussians25_std;
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let k = rng.random_range(0..25);
        out[(i, 0)] = modes[(k, 0)] + std * rng.sample::<f64, _>(StandardNormal);
        out[(i, 1)] = modes[(k, 1)] + std * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

fn pinwheel(params: &ToyParams, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let blades = params.pinwheel_blades.max(1);
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let blade = i % blades;
        let base = 2.0 * std::f64::consts::PI * blade as f64 / blades as f64;
        let radial = 1.0 + params.pinwheel_radial_std * rng.sample::<f64, _>(StandardNormal);
        let tangential = params.pinwheel_tangential_std * rng.sample::<f64, _>(StandardNormal);
        let angle = base + params.pinwheel_rate * radial.exp();
        let (sin, cos) = angle.sin_cos();
        out[(i, 0)] = params.pinwheel_scale * (radial * cos - tangential * sin);
        out[(i, 1)] = params.pinwheel_scale * (radial * sin + tangential * cos);
    }
    out
}

fn swissroll(params: &ToyParams, n: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    // Spiral parameter in [1.5 pi, 4.5 pi]; the 4.5 pi outer radius maps
    // onto 4, keeping the roll inside [-4,4]^2.
    let scale = 4.0 / (4.5 * std::f64::consts::PI);
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let u: f64 = rng.random();
        let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * u);
        let nx = params.swissroll_noise * rng.sample::<f64, _>(StandardNormal);
        let ny = params.swissroll_noise * rng.sample::<f64, _>(StandardNormal);
        out[(i, 0)] = (t * t.cos() + nx) * scale;
        out[(i, 1)] = (t * t.sin() + ny) * scale;
    }
    out
}

// ── image ingestion ───────────────────────────────────────────────────

/// Decoded image set held as raw bytes; converts to [-1,1] floats per
/// batch.
pub struct ImageSet {
    /// One row per image, channel-major pixels.
    pixels: Vec<Vec<u8>>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Logical array shape of one example, `(channels, height, width)`.
    pub fn example_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Rows `indices` as a [-1,1]-scaled batch.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((indices.len(), d));
        for (row, &idx) in indices.iter().enumerate() {
            for (col, &p) in self.pixels[idx].iter().enumerate() {
                out[(row, col)] = p as f64 / 127.5 - 1.0;
            }
        }
        out
    }

    /// Deterministic shuffled stream of batches; order depends only on the
    /// seed. The last partial batch is dropped.
    pub fn stream(&self, seed: u64, batch_size: usize) -> ImageStream<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        ImageStream { set: self, order, pos: 0, batch_size }
    }
}

pub struct ImageStream<'a> {
    set: &'a ImageSet,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for ImageStream<'_> {
    type Item = Array2<f64>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        Some(self.set.gather(idx))
    }
}

/// Load every decodable PNG/JPEG under `dir` (sorted by file name).
/// All images must share one geometry; grayscale and RGB are kept as-is.
pub fn load_image_folder(dir: &Path) -> Result<ImageSet> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("image folder not found: {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG/JPEG files in {}", dir.display())));
    }

    let mut pixels = Vec::with_capacity(paths.len());
    let mut shape: Option<(usize, usize, usize)> = None;
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| Error::Persistence(format!("cannot decode {}: {e}", p.display())))?;
        let (c, raw, w, h) = match &img {
            image::DynamicImage::ImageLuma8(g) => (1, g.as_raw().clone(), g.width(), g.height()),
            _ => {
                let rgb = img.to_rgb8();
                (3, rgb.as_raw().clone(), rgb.width(), rgb.height())
            }
        };
        let this = (c, h as usize, w as usize);
        match shape {
            None => shape = Some(this),
            Some(s) if s == this => {}
            Some(s) => {
                return Err(Error::invalid(format!(
                    "image geometry mismatch: {} is {this:?}, expected {s:?}",
                    p.display()
                )))
            }
        }
        // Re-pack interleaved channels as channel-major planes.
        let (c, hh, ww) = this;
        let mut planar = vec![0u8; c * hh * ww];
        for y in 0..hh {
            for x in 0..ww {
                for ch in 0..c {
                    planar[ch * hh * ww + y * ww + x] = raw[(y * ww + x) * c + ch];
                }
            }
        }
        pixels.push(planar);
    }
    let (channels, height, width) = shape.unwrap();
    Ok(ImageSet { pixels, channels, height, width })
}

/// Load an MNIST-style IDX image file (magic 0x00000803).
pub fn load_idx_images(path: &Path) -> Result<ImageSet> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    let magic = u32::from_be_bytes([header[0], header[1], header[2], header[3]]);
    if magic != 0x0000_0803 {
        return Err(Error::Persistence(format!(
            "not an IDX image file (magic {magic:#010x}): {}",
            path.display()
        )));
    }
    let count = u32::from_be_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let height = u32::from_be_bytes([header[8], header[9], header[10], header[11]]) as usize;
    let width = u32::from_be_bytes([header[12], header[13], header[14], header[15]]) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;
    if body.len() != count * height * width {
        return Err(Error::Persistence(format!(
            "IDX payload size {} does not match header {count}x{height}x{width}",
            body.len()
        )));
    }
    let pixels = body.chunks(height * width).map(|c| c.to_vec()).collect();
    Ok(ImageSet { pixels, channels: 1, height, width })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussians25_occupancy_is_uniform() {
        let n = 100_000;
        let params = ToyParams::default();
        let pts = toy_sample(DatasetName::Gaussians25, &params, n, 7).unwrap();
        let modes = gaussians25_modes();
        let mut counts = [0usize; 25];
        for row in pts.rows() {
            let mut best = (f64::INFINITY, 0);
            for (k, m) in modes.rows().into_iter().enumerate() {
                let d = (row[0] - m[0]).powi(2) + (row[1] - m[1]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            counts[best.1] += 1;
        }
        // Binomial standard error for p = 1/25.
        let expect = n as f64 / 25.0;
        let se = (n as f64 * (1.0 / 25.0) * (24.0 / 25.0)).sqrt();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 4.0 * se,
                "cell {k}: {c} vs {expect} (se {se})"
            );
        }
    }

    #[test]
    fn gaussians25_points_hug_their_modes() {
        let n = 100_000usize;
        let params = ToyParams::default();
        let pts = toy_sample(DatasetName::Gaussians25, &params, n, 3).unwrap();
        let modes = gaussians25_modes();
        // Gaussian tail bound at std 0.05.
        let hard_radius = 3.9 * params.gaussians25_std * (2.0 * (n as f64).ln()).sqrt();
        let mut within_half = 0usize;
        for row in pts.rows() {
            let mut best = f64::INFINITY;
            for m in modes.rows() {
                let d = ((row[0] - m[0]).powi(2) + (row[1] - m[1]).powi(2)).sqrt();
                best = best.min(d);
            }
            assert!(best <= hard_radius, "stray point at distance {best}");
            if best <= 0.5 {
                within_half += 1;
            }
        }
        assert!(within_half as f64 >= 0.999 * n as f64);
    }

    #[test]
    fn toy_generators_are_pure_and_bounded() {
        let params = ToyParams::default();
        for name in [DatasetName::Gaussians25, DatasetName::Pinwheel, DatasetName::Swissroll] {
            let a = toy_sample(name, &params, 1000, 11).unwrap();
            let b = toy_sample(name, &params, 1000, 11).unwrap();
            let c = toy_sample(name, &params, 1000, 12).unwrap();
            assert_eq!(a, b, "{name:?} must be pure in (n, seed)");
            assert_ne!(a, c, "{name:?} must vary with the seed");
            assert_eq!(a.dim(), (1000, 2));
            assert!(a.iter().all(|v| v.abs() <= 6.0), "{name:?} escaped [-6,6]^2");
        }
    }

    #[test]
    fn toy_sample_rejects_bad_arguments() {
        let params = ToyParams::default();
        assert!(toy_sample(DatasetName::Gaussians25, &params, 0, 1).is_err());
        assert!(toy_sample(DatasetName::Mnist, &params, 10, 1).is_err());
        assert!(DatasetName::parse("gaussians26").is_err());
        assert_eq!(DatasetName::parse("pinwheel").unwrap(), DatasetName::Pinwheel);
    }

    #[test]
    fn pixel_scaling_is_affine() {
        let set = ImageSet {
            pixels: vec![vec![0u8, 255, 128, 64]],
            channels: 1,
            height: 2,
            width: 2,
        };
        let batch = set.gather(&[0]);
        assert_eq!(batch[(0, 0)], -1.0);
        assert_eq!(batch[(0, 1)], 1.0);
        assert!((batch[(0, 2)] - (128.0 / 127.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn stream_order_is_seed_deterministic() {
        let set = ImageSet {
            pixels: (0..10u8).map(|i| vec![i]).collect(),
            channels: 1,
            height: 1,
            width: 1,
        };
        let collect = |seed: u64| -> Vec<f64> {
            set.stream(seed, 2).flat_map(|b| b.into_iter().collect::<Vec<_>>()).collect()
        };
        assert_eq!(collect(5), collect(5));
        assert_ne!(collect(5), collect(6));
        // 10 images, batch 2: exactly 5 batches.
        assert_eq!(set.stream(5, 2).count(), 5);
    }

    #[test]
    fn image_folder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3u8 {
            let img = image::GrayImage::from_fn(4, 4, |x, y| {
                image::Luma([(x as u8 * 16 + y as u8 + i) * 4])
            });
            img.save(dir.path().join(format!("im{i}.png"))).unwrap();
        }
        let set = load_image_folder(dir.path()).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.example_shape(), (1, 4, 4));
        let batch = set.gather(&[0, 1, 2]);
        assert_eq!(batch.dim(), (3, 16));
        assert!(batch.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(load_image_folder(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn idx_reader_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.idx3-ubyte");
        let mut payload = Vec::new();
        payload.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        payload.extend_from_slice(&2u32.to_be_bytes());
        payload.extend_from_slice(&2u32.to_be_bytes());
        payload.extend_from_slice(&3u32.to_be_bytes());
        payload.extend_from_slice(&[0, 255, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        std::fs::write(&path, &payload).unwrap();
        let set = load_idx_images(&path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.example_shape(), (1, 2, 3));
        let b = set.gather(&[0]);
        assert_eq!(b[(0, 0)], -1.0);
        assert_eq!(b[(0, 1)], 1.0);

        std::fs::write(&path, &payload[..20]).unwrap();
        assert!(load_idx_images(&path).is_err());
    }
}
