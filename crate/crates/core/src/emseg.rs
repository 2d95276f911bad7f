//! Gaussian-mixture tissue classification: quantile-seeded 1D K-means
//! followed by a fixed number of EM rounds under a Potts-style MRF prior.
//!
//! The spatial prior of class `k` at voxel `v` is
//! `weights[k] * exp(-beta * U_k(v))`, where `U_k(v)` counts the 6-neighbours
//! whose hard label from the previous round differs from `k`. Labels are
//! refreshed only between rounds, so the E-step is a Jacobi update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthkid::neighbors6;
use crate::volgrid::{LabelVolume, Volume3};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    /// Per-class `ln w_k + ln N(x; mu_k, var_k)` as `offset[k] - (x - mu_k)^2 * scale[k]`.
    fn weighted_log_terms(&self) -> LogTerms {
        let offset = (0..self.classes())
            .map(|k| {
                let w = self.weights[k];
                let lw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
                lw - 0.5 * (LN_2PI + self.variances[k].ln())
            })
            .collect();
        LogTerms {
            offset,
            scale: self.variances.iter().map(|v| 0.5 / v).collect(),
            means: self.means.clone(),
        }
    }

    /// Reorder classes by ascending mean; returns `order` with
    /// `new class i == old class order[i]`.
    fn sort_by_mean(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.classes()).collect();
        order.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]));
        self.means = order.iter().map(|&i| self.means[i]).collect();
        self.variances = order.iter().map(|&i| self.variances[i]).collect();
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub classes: usize,
    pub em_iterations: usize,
    pub mrf_beta: f64,
    pub kmeans_iterations: usize,
    pub kmeans_seed: u64,
    /// Variance floor as a fraction of the global intensity variance.
    pub variance_floor_ratio: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            em_iterations: 7,
            mrf_beta: 0.05,
            kmeans_iterations: 50,
            kmeans_seed: 0,
            variance_floor_ratio: 1e-6,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 255 {
            return Err(Error::Degenerate(format!(
                "class count {} outside 1..=255",
                self.classes
            )));
        }
        if self.em_iterations == 0 {
            return Err(Error::Degenerate("em_iterations must be at least 1".into()));
        }
        if !(self.mrf_beta >= 0.0 && self.mrf_beta.is_finite()) {
            return Err(Error::Degenerate("mrf_beta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-voxel class responsibilities, `classes` values per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    pub classes: usize,
    pub data: Vec<f64>,
}

impl PosteriorField {
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.data[v * self.classes..(v + 1) * self.classes]
    }

    pub fn voxels(&self) -> usize {
        self.data.len() / self.classes
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    /// Log-likelihood of the K-means start followed by one entry per EM round.
    pub log_likelihood: Vec<f64>,
    /// (round, class) pairs whose total responsibility vanished.
    pub empty_classes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub labels: LabelVolume,
    pub posterior: PosteriorField,
    pub mixture: GaussianMixture,
    pub diagnostics: EmDiagnostics,
}

fn sorted_values(vol: &Volume3) -> Vec<f64> {
    let mut v: Vec<f64> = vol.data().iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn global_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// 1D K-means on voxel intensities.
///
/// Centers start at the `(k + 0.5) / K` intensity quantiles. Lloyd rounds run
/// on the sorted intensities, where each cluster is a contiguous range. A
/// cluster that empties is reseeded (with `seed`) from the cluster holding
/// the largest squared error.
pub fn kmeans_init(vol: &Volume3, classes: usize, seed: u64, iterations: usize) -> Result<GaussianMixture> {
    kmeans_with_floor(vol, classes, seed, iterations, 1e-6)
}

fn kmeans_with_floor(
    vol: &Volume3,
    classes: usize,
    seed: u64,
    iterations: usize,
    floor_ratio: f64,
) -> Result<GaussianMixture> {
    if classes == 0 {
        return Err(Error::Degenerate("need at least one class".into()));
    }
    let values = sorted_values(vol);
    let n = values.len();
    let distinct = 1 + values.windows(2).filter(|w| w[0] != w[1]).count();
    if distinct < classes.max(2) {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct intensities for {classes} classes"
        )));
    }
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let range_stats = |a: usize, b: usize| -> (usize, f64, f64) {
        let m = b - a;
        if m == 0 {
            return (0, 0.0, 0.0);
        }
        let s = prefix[b] - prefix[a];
        let mean = s / m as f64;
        let sse = ((prefix_sq[b] - prefix_sq[a]) - s * mean).max(0.0);
        (m, mean, sse)
    };

    let mut centers: Vec<f64> = (0..classes)
        .map(|k| {
            let q = (k as f64 + 0.5) / classes as f64;
            values[((q * n as f64) as usize).min(n - 1)]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bounds: Vec<usize> = Vec::new();

    let assign = |centers: &[f64]| -> Vec<usize> {
        // bounds[k]..bounds[k+1] is cluster k's range in `values`.
        let mut b = Vec::with_capacity(centers.len() + 1);
        b.push(0);
        for w in centers.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            b.push(values.partition_point(|&v| v <= mid));
        }
        b.push(n);
        b
    };

    for _ in 0..iterations.max(1) {
        centers.sort_by(f64::total_cmp);
        let new_bounds = assign(&centers);
        if new_bounds == bounds {
            break;
        }
        bounds = new_bounds;
        let stats: Vec<(usize, f64, f64)> = (0..classes).map(|k| range_stats(bounds[k], bounds[k + 1])).collect();
        for k in 0..classes {
            if stats[k].0 > 0 {
                centers[k] = stats[k].1;
            }
        }
        for k in 0..classes {
            if stats[k].0 > 0 {
                continue;
            }
            let donor = (0..classes)
                .filter(|&j| stats[j].0 > 1 && values[bounds[j]] != values[bounds[j + 1] - 1])
                .max_by(|&a, &b| stats[a].2.total_cmp(&stats[b].2));
            if let Some(j) = donor {
                let idx = rng.gen_range(bounds[j]..bounds[j + 1]);
                let v = values[idx];
                centers[k] = if v != centers[j] { v } else { values[bounds[j + 1] - 1] };
            }
        }
    }
    centers.sort_by(f64::total_cmp);
    let bounds = assign(&centers);
    let floor = floor_ratio * global_variance(&values);
    let mut mixture = GaussianMixture {
        means: Vec::with_capacity(classes),
        variances: Vec::with_capacity(classes),
        weights: Vec::with_capacity(classes),
    };
    for k in 0..classes {
        let (m, mean, sse) = range_stats(bounds[k], bounds[k + 1]);
        let (mean, var) = if m == 0 {
            (centers[k], floor)
        } else {
            (mean, sse / m as f64)
        };
        mixture.means.push(mean);
        mixture.variances.push(var.max(floor));
        mixture.weights.push(m as f64 / n as f64);
    }
    Ok(mixture)
}

struct LogTerms {
    offset: Vec<f64>,
    scale: Vec<f64>,
    means: Vec<f64>,
}

impl LogTerms {
    #[inline]
    fn fill(&self, x: f64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let d = x - self.means[k];
            *o = self.offset[k] - d * d * self.scale[k];
        }
    }
}

/// Chunk size for deterministic reductions; sums are formed per chunk and
/// then folded in chunk order, independent of the thread count.
const CHUNK: usize = 4096;

/// `Σ_v log Σ_k w_k N(x_v; μ_k, σ²_k)`.
pub fn log_likelihood(vol: &Volume3, mixture: &GaussianMixture) -> f64 {
    let terms = mixture.weighted_log_terms();
    let partial: Vec<f64> = vol
        .data()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut buf = vec![0.0; mixture.classes()];
            chunk
                .iter()
                .map(|&x| {
                    terms.fill(x as f64, &mut buf);
                    log_sum_exp(&buf)
                })
                .sum::<f64>()
        })
        .collect();
    partial.into_iter().sum()
}

/// Terms this far below the maximum contribute less than 1e-22 relative
/// and are skipped.
const NEGLIGIBLE: f64 = -50.0;

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms
        .iter()
        .map(|&t| if t - m > NEGLIGIBLE { (t - m).exp() } else { 0.0 })
        .sum::<f64>()
        .ln()
}

/// In-place softmax of log terms.
fn normalize_exp(terms: &mut [f64]) {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for t in terms.iter_mut() {
        *t = if *t - m > NEGLIGIBLE { (*t - m).exp() } else { 0.0 };
        sum += *t;
    }
    terms.iter_mut().for_each(|t| *t /= sum);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Responsibilities for every voxel given the previous hard labels.
fn e_step(vol: &Volume3, mixture: &GaussianMixture, labels: &[u8], beta: f64, out: &mut [f64]) {
    let k = mixture.classes();
    let dims = vol.dims();
    let (nx, ny) = (dims[0], dims[1]);
    let terms = mixture.weighted_log_terms();
    out.par_chunks_mut(k * CHUNK).enumerate().for_each(|(c, block)| {
        let mut counts = vec![0u32; k];
        for (j, resp) in block.chunks_mut(k).enumerate() {
            let v = c * CHUNK + j;
            let x = vol.data()[v] as f64;
            let mut total = 0u32;
            if beta > 0.0 {
                counts.iter_mut().for_each(|c| *c = 0);
                for nb in neighbors6(dims, v % nx, (v / nx) % ny, v / (nx * ny)) {
                    counts[labels[nb] as usize] += 1;
                    total += 1;
                }
            }
            terms.fill(x, resp);
            if beta > 0.0 {
                for (r, &c) in resp.iter_mut().zip(&counts) {
                    // U_i = neighbours whose label differs from i
                    *r -= beta * (total - c) as f64;
                }
            }
            normalize_exp(resp);
        }
    });
}

struct Moments {
    mass: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

fn m_step_moments(vol: &Volume3, resp: &[f64], k: usize, centers: &[f64]) -> Moments {
    // Second moments are taken about the previous means for stability.
    let partial: Vec<Moments> = resp
        .par_chunks(k * CHUNK)
        .enumerate()
        .map(|(c, block)| {
            let mut m = Moments {
                mass: vec![0.0; k],
                sum: vec![0.0; k],
                sum_sq: vec![0.0; k],
            };
            for (j, r) in block.chunks(k).enumerate() {
                let x = vol.data()[c * CHUNK + j] as f64;
                for i in 0..k {
                    let d = x - centers[i];
                    m.mass[i] += r[i];
                    m.sum[i] += r[i] * d;
                    m.sum_sq[i] += r[i] * d * d;
                }
            }
            m
        })
        .collect();
    let mut total = Moments {
        mass: vec![0.0; k],
        sum: vec![0.0; k],
        sum_sq: vec![0.0; k],
    };
    for m in partial {
        for i in 0..k {
            total.mass[i] += m.mass[i];
            total.sum[i] += m.sum[i];
            total.sum_sq[i] += m.sum_sq[i];
        }
    }
    total
}

/// Run K-means initialisation and `cfg.em_iterations` EM rounds.
pub fn em_segment(vol: &Volume3, cfg: &EmConfig) -> Result<EmResult> {
    cfg.validate()?;
    let k = cfg.classes;
    let mut mixture = kmeans_with_floor(vol, k, cfg.kmeans_seed, cfg.kmeans_iterations, cfg.variance_floor_ratio)?;
    let floor = cfg.variance_floor_ratio * global_variance(&sorted_values(vol));
    let n = vol.len();
    let mut resp = vec![0.0; n * k];
    let mut diagnostics = EmDiagnostics {
        log_likelihood: vec![log_likelihood(vol, &mixture)],
        empty_classes: Vec::new(),
    };

    // Initial hard labels: MAP class without the spatial term.
    e_step(vol, &mixture, &vec![0; n], 0.0, &mut resp);
    let mut labels: Vec<u8> = resp.chunks(k).map(|r| argmax(r) as u8).collect();

    for round in 0..cfg.em_iterations {
        e_step(vol, &mixture, &labels, cfg.mrf_beta, &mut resp);
        let mom = m_step_moments(vol, &resp, k, &mixture.means);
        let mut next = mixture.clone();
        for i in 0..k {
            if mom.mass[i] <= f64::MIN_POSITIVE {
                diagnostics.empty_classes.push((round, i));
                next.weights[i] = 0.0;
                continue;
            }
            let shift = mom.sum[i] / mom.mass[i];
            next.means[i] = mixture.means[i] + shift;
            next.variances[i] = (mom.sum_sq[i] / mom.mass[i] - shift * shift).max(floor);
            next.weights[i] = mom.mass[i] / n as f64;
        }
        let wsum: f64 = next.weights.iter().sum();
        next.weights.iter_mut().for_each(|w| *w /= wsum);
        mixture = next;
        labels = resp.chunks(k).map(|r| argmax(r) as u8).collect();
        diagnostics.log_likelihood.push(log_likelihood(vol, &mixture));
    }

    let order = mixture.sort_by_mean();
    let mut rank = vec![0u8; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new as u8;
    }
    let labels: Vec<u8> = labels.iter().map(|&l| rank[l as usize]).collect();
    let mut sorted = vec![0.0; n * k];
    for (dst, src) in sorted.chunks_mut(k).zip(resp.chunks(k)) {
        for (new, &old) in order.iter().enumerate() {
            dst[new] = src[old];
        }
    }
    diagnostics.empty_classes = diagnostics
        .empty_classes
        .into_iter()
        .map(|(r, c)| (r, rank[c] as usize))
        .collect();
    Ok(EmResult {
        labels: LabelVolume::new(vol.dims(), vol.spacing(), k as u8, labels)?,
        posterior: PosteriorField {
            classes: k,
            data: sorted,
        },
        mixture,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: Vec<f32>) -> Volume3 {
        let n = values.len();
        Volume3::new([n, 1, 1], [1.0; 3], values).unwrap()
    }

    #[test]
    fn two_delta_kmeans() {
        let mut v = vec![0.0f32; 30];
        v.extend(vec![10.0f32; 70]);
        let m = kmeans_init(&vol(v), 2, 0, 10).unwrap();
        assert_eq!(m.means, vec![0.0, 10.0]);
        assert!((m.weights[0] - 0.3).abs() < 1e-12 && (m.weights[1] - 0.7).abs() < 1e-12);

        // 80/20 split: both quantile seeds land on 0, so one cluster must be reseeded.
        let mut v = vec![0.0f32; 80];
        v.extend(vec![10.0f32; 20]);
        let m = kmeans_init(&vol(v), 2, 3, 10).unwrap();
        assert_eq!(m.means, vec![0.0, 10.0]);
        assert!((m.weights[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_global_moments() {
        let v: Vec<f32> = (0..50).map(|i| (i * i % 17) as f32).collect();
        let m = kmeans_init(&vol(v.clone()), 1, 0, 5).unwrap();
        let xs: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let mean = xs.iter().sum::<f64>() / 50.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0;
        assert!((m.means[0] - mean).abs() < 1e-12);
        assert!((m.variances[0] - var).abs() < 1e-9);
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn constant_image_is_degenerate() {
        assert!(matches!(
            kmeans_init(&vol(vec![4.0; 20]), 2, 0, 5),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            kmeans_init(&vol(vec![4.0; 20]), 1, 0, 5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn unit_density_at_mean_gives_zero_log_likelihood() {
        let m = GaussianMixture {
            means: vec![3.0],
            variances: vec![1.0 / (2.0 * std::f64::consts::PI)],
            weights: vec![1.0],
        };
        assert!(log_likelihood(&vol(vec![3.0]), &m).abs() < 1e-12);
    }

    #[test]
    fn responsibilities_are_distributions() {
        let v: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let volume = Volume3::new([4, 4, 4], [1.0; 3], v).unwrap();
        let cfg = EmConfig {
            classes: 2,
            mrf_beta: 0.3,
            ..EmConfig::default()
        };
        let r = em_segment(&volume, &cfg).unwrap();
        for i in 0..r.posterior.voxels() {
            let p = r.posterior.voxel(i);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(r.diagnostics.log_likelihood.len(), cfg.em_iterations + 1);
    }
}
