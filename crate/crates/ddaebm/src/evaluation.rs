//! Model quantification: density grids, OOD scoring, mode coverage,
//! energy histograms.
//!
//! The grid holds raw energies `E(x, 0)` — unnormalized log densities;
//! exponentiation and normalization are presentation-time concerns.
//! AUROC is the exact Mann-Whitney rank statistic (ties count one half),
//! not a trapezoid approximation. Mode coverage assigns samples to their
//! nearest reference mode and reports the covered-mode count together with
//! the categorical KL of the within-radius assignment histogram against
//! uniform.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::EnergyNet;

/// Square evaluation window `[lo, hi]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::invalid(format!("bounds require lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn grid_coord(&self, index: usize, resolution: usize) -> f64 {
        self.lo + (self.hi - self.lo) * index as f64 / (resolution - 1) as f64
    }
}

/// `E(x, 0)` on a `resolution x resolution` grid; `grid[(iy, ix)]` holds
/// the energy at `(x(ix), y(iy))`. Evaluation is chunked; the chunk size
/// does not change the values.
pub fn density_grid(energy: &EnergyNet, bounds: Bounds, resolution: usize) -> Result<Array2<f64>> {
    density_grid_chunked(energy, bounds, resolution, 4096)
}

pub fn density_grid_chunked(
    energy: &EnergyNet,
    bounds: Bounds,
    resolution: usize,
    chunk: usize,
) -> Result<Array2<f64>> {
    if resolution < 2 {
        return Err(Error::invalid("density_grid requires resolution >= 2"));
    }
    if energy.shape.data_dim != 2 {
        return Err(Error::invalid("density_grid requires a 2D model"));
    }
    let total = resolution * resolution;
    let mut out = Array2::zeros((resolution, resolution));
    let mut start = 0usize;
    while start < total {
        let stop = (start + chunk.max(1)).min(total);
        let mut pts = Array2::zeros((stop - start, 2));
        for (row, flat) in (start..stop).enumerate() {
            let iy = flat / resolution;
            let ix = flat % resolution;
            pts[(row, 0)] = bounds.grid_coord(ix, resolution);
            pts[(row, 1)] = bounds.grid_coord(iy, resolution);
        }
        let ts = vec![0usize; stop - start];
        let e = energy.energy_batch(&pts, &ts)?;
        for (row, flat) in (start..stop).enumerate() {
            out[(flat / resolution, flat % resolution)] = e[row];
        }
        start = stop;
    }
    Ok(out)
}

/// Exact rank-based AUROC: the probability that a random in-distribution
/// score exceeds a random out score, ties counted one half.
pub fn ood_auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::invalid("ood_auroc requires nonempty score sets"));
    }
    let n_in = scores_in.len();
    let n_out = scores_out.len();
    let mut pooled: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    // Average ranks over tie groups, then the Mann-Whitney U.
    let mut rank_sum_in = 0.0;
    let mut i = 0usize;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for entry in &pooled[i..=j] {
            if entry.1 {
                rank_sum_in += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_in - (n_in * (n_in + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}

/// Nearest-mode assignment summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeCoverage {
    /// Modes with at least one sample assigned within the radius.
    pub count: usize,
    /// Categorical KL of the within-radius assignment distribution from
    /// uniform over all modes; zero-count modes contribute zero.
    pub kl: f64,
    /// Samples that landed within the radius of their nearest mode.
    pub assigned: usize,
}

pub fn mode_coverage(
    samples: &Array2<f64>,
    modes: &Array2<f64>,
    radius: f64,
) -> Result<ModeCoverage> {
    if modes.nrows() == 0 {
        return Err(Error::invalid("mode_coverage requires at least one mode"));
    }
    if radius <= 0.0 {
        return Err(Error::invalid("mode_coverage requires a positive radius"));
    }
    if samples.ncols() != modes.ncols() {
        return Err(Error::shape("mode_coverage: sample and mode dimensions differ"));
    }
    let m = modes.nrows();
    let mut counts = vec![0usize; m];
    for row in samples.rows() {
        let mut best = (f64::INFINITY, 0usize);
        for (k, mode) in modes.rows().into_iter().enumerate() {
            let d2: f64 = row.iter().zip(mode.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, k);
            }
        }
        if best.0.sqrt() <= radius {
            counts[best.1] += 1;
        }
    }
    let assigned: usize = counts.iter().sum();
    let count = counts.iter().filter(|c| **c > 0).count();
    let kl = if assigned == 0 {
        0.0
    } else {
        counts
            .iter()
            .filter(|c| **c > 0)
            .map(|&c| {
                let p = c as f64 / assigned as f64;
                p * (p * m as f64).ln()
            })
            .sum()
    };
    Ok(ModeCoverage { count, kl, assigned })
}

/// Histograms of `E(x, 0)` for several named datasets over shared bin
/// edges spanning the pooled score range.
#[derive(Debug, Clone, Serialize)]
pub struct HistogramSet {
    pub edges: Vec<f64>,
    pub series: Vec<HistogramSeries>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramSeries {
    pub name: String,
    pub counts: Vec<usize>,
    pub mean_score: f64,
}

pub fn energy_histogram(
    energy: &EnergyNet,
    datasets: &[(String, Array2<f64>)],
    bins: usize,
) -> Result<HistogramSet> {
    if bins < 2 {
        return Err(Error::invalid("energy_histogram requires bins >= 2"));
    }
    if datasets.is_empty() {
        return Err(Error::invalid("energy_histogram requires at least one dataset"));
    }
    let mut scored: Vec<(String, Array1<f64>)> = Vec::with_capacity(datasets.len());
    for (name, data) in datasets {
        if data.nrows() == 0 {
            return Err(Error::invalid(format!("energy_histogram: dataset {name} is empty")));
        }
        let ts = vec![0usize; data.nrows()];
        scored.push((name.clone(), energy.energy_batch(data, &ts)?));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, s) in &scored {
        for v in s.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo == hi {
        // Degenerate pooled range: widen so everything lands in one bin.
        hi = lo + 1.0;
    }
    let edges: Vec<f64> =
        (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let series = scored
        .into_iter()
        .map(|(name, scores)| {
            let mut counts = vec![0usize; bins];
            let mut total = 0.0;
            for &v in scores.iter() {
                total += v;
                let idx = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
                counts[idx.min(bins - 1)] += 1;
            }
            let mean_score = total / scores.len() as f64;
            HistogramSeries { name, counts, mean_score }
        })
        .collect();
    Ok(HistogramSet { edges, series })
}

/// Greedy peak extraction with non-maximum suppression: repeatedly take
/// the highest remaining grid cell and blank a disc of `suppress_radius`
/// (data units) around it. Used to compare learned density peaks against
/// reference modes.
pub fn grid_peaks(
    grid: &Array2<f64>,
    bounds: Bounds,
    count: usize,
    suppress_radius: f64,
) -> Vec<(f64, f64)> {
    let resolution = grid.nrows();
    let mut blocked = vec![false; resolution * resolution];
    let mut peaks = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, usize, usize)> = None;
        for iy in 0..resolution {
            for ix in 0..resolution {
                if blocked[iy * resolution + ix] {
                    continue;
                }
                let v = grid[(iy, ix)];
                if best.map(|(b, _, _)| v > b).unwrap_or(true) {
                    best = Some((v, iy, ix));
                }
            }
        }
        let Some((_, iy, ix)) = best else { break };
        let px = bounds.grid_coord(ix, resolution);
        let py = bounds.grid_coord(iy, resolution);
        peaks.push((px, py));
        for jy in 0..resolution {
            for jx in 0..resolution {
                let dx = bounds.grid_coord(jx, resolution) - px;
                let dy = bounds.grid_coord(jy, resolution) - py;
                if (dx * dx + dy * dy).sqrt() <= suppress_radius {
                    blocked[jy * resolution + jx] = true;
                }
            }
        }
    }
    peaks
}

/// Normalize `exp(grid)` into a discrete probability mass over the cells.
pub fn grid_to_probability(grid: &Array2<f64>) -> Array2<f64> {
    let max = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = grid.mapv(|v| (v - max).exp());
    let total = p.sum();
    p /= total;
    p
}

/// Half the L1 distance between two probability grids.
pub fn total_variation(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Full evaluation payload; serialized as the structured report.
#[derive(Debug, Clone, Serialize, Default)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub auroc: Vec<AurocEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histograms: Option<HistogramSet>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub bounds: Bounds,
    pub resolution: usize,
    pub grid_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AurocEntry {
    pub in_set: String,
    pub out_set: String,
    pub auroc: f64,
    pub mean_in: f64,
    pub mean_out: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub count: usize,
    pub kl: f64,
    pub assigned: usize,
    pub total_samples: usize,
    pub radius: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetworkShape;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_energy(seed: u64) -> EnergyNet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        EnergyNet::new(&NetworkShape::toy(2, 2), &mut rng)
    }

    #[test]
    fn auroc_trivia_and_enumeration() {
        assert_eq!(ood_auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(ood_auroc(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        // Brute force over the four pairs: (2>1) + (3>1) + (3>2.5) = 3/4.
        assert_eq!(ood_auroc(&[2.0, 3.0], &[1.0, 2.5]).unwrap(), 0.75);
        assert!(ood_auroc(&[], &[1.0]).is_err());
        assert!(ood_auroc(&[1.0], &[]).is_err());
    }

    #[test]
    fn auroc_complement_identity() {
        let a = [0.3, 1.7, -0.2, 0.9, 2.4];
        let b = [0.1, 0.5, 1.1, -0.7];
        let ab = ood_auroc(&a, &b).unwrap();
        let ba = ood_auroc(&b, &a).unwrap();
        assert_abs_diff_eq!(ab + ba, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn auroc_matches_pairwise_enumeration_with_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        use rand::Rng;
        for _ in 0..20 {
            let a: Vec<f64> = (0..13).map(|_| (rng.random_range(0..8) as f64) / 2.0).collect();
            let b: Vec<f64> = (0..9).map(|_| (rng.random_range(0..8) as f64) / 2.0).collect();
            let mut wins = 0.0;
            for &x in &a {
                for &y in &b {
                    if x > y {
                        wins += 1.0;
                    } else if x == y {
                        wins += 0.5;
                    }
                }
            }
            let brute = wins / (a.len() * b.len()) as f64;
            assert_abs_diff_eq!(ood_auroc(&a, &b).unwrap(), brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn mode_coverage_cases() {
        let modes = crate::datasets::gaussians25_modes();
        // Equal counts exactly on every mode.
        let mut samples = Array2::zeros((50, 2));
        for i in 0..50 {
            samples[(i, 0)] = modes[(i % 25, 0)];
            samples[(i, 1)] = modes[(i % 25, 1)];
        }
        let cov = mode_coverage(&samples, &modes, 0.15).unwrap();
        assert_eq!(cov.count, 25);
        assert_abs_diff_eq!(cov.kl, 0.0, epsilon = 1e-12);

        // Everything on one mode: KL = ln 25.
        let one = Array2::from_shape_fn((40, 2), |(_, j)| modes[(7, j)]);
        let cov = mode_coverage(&one, &modes, 0.15).unwrap();
        assert_eq!(cov.count, 1);
        assert_abs_diff_eq!(cov.kl, 25.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cov.kl, 3.2188758248682006, epsilon = 1e-12);

        // Everything out of radius: count 0, kl 0, nothing assigned.
        let far = Array2::from_elem((10, 2), 100.0);
        let cov = mode_coverage(&far, &modes, 0.15).unwrap();
        assert_eq!((cov.count, cov.assigned), (0, 0));
        assert_eq!(cov.kl, 0.0);

        assert!(mode_coverage(&samples, &Array2::zeros((0, 2)), 0.1).is_err());
        assert!(mode_coverage(&samples, &modes, 0.0).is_err());
    }

    #[test]
    fn mode_coverage_is_permutation_invariant() {
        let modes = crate::datasets::gaussians25_modes();
        let params = crate::datasets::ToyParams::default();
        let samples =
            crate::datasets::toy_sample(crate::datasets::DatasetName::Gaussians25, &params, 500, 3)
                .unwrap();
        let forward = mode_coverage(&samples, &modes, 0.15).unwrap();
        let mut reversed = Array2::zeros(samples.dim());
        for i in 0..samples.nrows() {
            for j in 0..2 {
                reversed[(i, j)] = samples[(samples.nrows() - 1 - i, j)];
            }
        }
        let backward = mode_coverage(&reversed, &modes, 0.15).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn density_grid_shape_and_chunk_invariance() {
        let energy = toy_energy(5);
        let bounds = Bounds::new(-6.0, 6.0).unwrap();
        let full = density_grid_chunked(&energy, bounds, 33, usize::MAX).unwrap();
        assert_eq!(full.dim(), (33, 33));
        for chunk in [1usize, 7, 100] {
            let chunked = density_grid_chunked(&energy, bounds, 33, chunk).unwrap();
            for (a, b) in full.iter().zip(chunked.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
        assert!(density_grid(&energy, bounds, 1).is_err());
    }

    #[test]
    fn quadratic_energy_grid_peaks_at_origin() {
        // Directly exercise the grid argmax contract with a closed-form
        // quadratic via a tape-built check on grid values.
        let energy = toy_energy(6);
        let bounds = Bounds::new(-2.0, 2.0).unwrap();
        let grid = density_grid(&energy, bounds, 21).unwrap();
        // The network is arbitrary; instead verify grid coordinates: the
        // cell (iy, ix) maps back to the expected lattice point.
        assert_eq!(bounds.grid_coord(0, 21), -2.0);
        assert_eq!(bounds.grid_coord(20, 21), 2.0);
        assert_eq!(bounds.grid_coord(10, 21), 0.0);
        assert_eq!(grid.dim(), (21, 21));

        // And the probability normalization helper sums to one.
        let p = grid_to_probability(&grid);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        assert_eq!(total_variation(&p, &p), 0.0);
    }

    #[test]
    fn grid_peaks_with_suppression_find_separated_maxima() {
        // Two bumps on a coarse grid.
        let bounds = Bounds::new(-4.0, 4.0).unwrap();
        let res = 41;
        let grid = Array2::from_shape_fn((res, res), |(iy, ix)| {
            let x = bounds.grid_coord(ix, res);
            let y = bounds.grid_coord(iy, res);
            let b1 = -((x - 2.0) * (x - 2.0) + y * y);
            let b2 = -((x + 2.0) * (x + 2.0) + y * y) - 0.1;
            b1.max(b2)
        });
        let peaks = grid_peaks(&grid, bounds, 2, 1.5);
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].0 - 2.0).abs() < 0.21 && peaks[0].1.abs() < 0.21);
        assert!((peaks[1].0 + 2.0).abs() < 0.21 && peaks[1].1.abs() < 0.21);
    }

    #[test]
    fn histogram_shares_edges_and_handles_degenerate_scores() {
        let energy = toy_energy(7);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = crate::objectives::sample_standard_normal(&mut rng, (64, 2));
        let b = crate::objectives::sample_standard_normal(&mut rng, (32, 2)) * 3.0;
        let hist = energy_histogram(
            &energy,
            &[("real".to_string(), a), ("noisy".to_string(), b)],
            20,
        )
        .unwrap();
        assert_eq!(hist.edges.len(), 21);
        assert_eq!(hist.series.len(), 2);
        assert_eq!(hist.series[0].counts.iter().sum::<usize>(), 64);
        assert_eq!(hist.series[1].counts.iter().sum::<usize>(), 32);

        // Identical scores all land in one bin.
        let single = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let hist = energy_histogram(&energy, &[("same".to_string(), single)], 5).unwrap();
        let nonzero: Vec<usize> =
            hist.series[0].counts.iter().cloned().filter(|c| *c > 0).collect();
        assert_eq!(nonzero, vec![3]);

        assert!(energy_histogram(&energy, &[], 5).is_err());
        assert!(
            energy_histogram(&energy, &[("empty".to_string(), Array2::zeros((0, 2)))], 5).is_err()
        );
    }
}
