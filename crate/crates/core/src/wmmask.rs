//! White-matter mask estimation: tissue clustering, atlas-guided cluster
//! choice, outlier-driven expansion over the hyperintensity map, and the
//! union/difference masks used for evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_dims, masked_stats, neighborhood_means, BinaryMask, Dims, Volume3D};

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_RESTARTS: usize = 10;

/// Per-voxel cluster labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
    k: u8,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Dims(format!(
                "label length {} does not match {:?}",
                labels.len(),
                dims
            )));
        }
        let k = labels.iter().copied().max().unwrap_or(0);
        Ok(LabelVolume { dims, labels, k })
    }

    /// Labels from a volume of small non-negative integers (e.g. a NIfTI
    /// label file); values are rounded.
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        let labels = vol
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = v.round();
                if (0.0..=255.0).contains(&r) {
                    Ok(r as u8)
                } else {
                    Err(Error::domain(format!("label {v} at voxel {i} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vol.dims(), labels)
    }

    /// Zeroes every label outside `mask`.
    pub fn restrict(mut self, mask: &BinaryMask) -> Result<Self> {
        check_dims(self.dims, mask.dims())?;
        for (l, &m) in self.labels.iter_mut().zip(mask.data()) {
            if !m {
                *l = 0;
            }
        }
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    pub fn mask_of(&self, label: u8) -> BinaryMask {
        BinaryMask::new(self.dims, self.labels.iter().map(|&l| l == label).collect())
            .expect("label dims")
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(
            self.dims,
            [1.0; 3],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
        .expect("label dims")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WmEstimationConfig {
    /// Multiplier on the HI-map standard deviation in the expansion threshold.
    pub k_sigma: f64,
    pub neighborhood_radius: usize,
    pub iterate_to_fixpoint: bool,
}

impl Default for WmEstimationConfig {
    fn default() -> Self {
        WmEstimationConfig {
            k_sigma: 3.0,
            neighborhood_radius: 1,
            iterate_to_fixpoint: false,
        }
    }
}

impl WmEstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_sigma >= 0.0) {
            return Err(Error::param(format!("k_sigma {} must be >= 0", self.k_sigma)));
        }
        Ok(())
    }
}

/// Seeded k-means (k-means++ start) over the channel vectors of masked
/// voxels. Channels are z-scored inside the mask first. Labels run 1..=k in
/// order of increasing first-channel centroid.
pub fn initial_segmentation(
    channels: &[&Volume3D],
    mask: &BinaryMask,
    k: usize,
    seed: u64,
) -> Result<LabelVolume> {
    if !(2..=255).contains(&k) {
        return Err(Error::param(format!("k = {k} must be in 2..=255")));
    }
    let Some(first) = channels.first() else {
        return Err(Error::param("no channels for clustering"));
    };
    for c in channels {
        check_dims(first.dims(), c.dims())?;
    }
    check_dims(first.dims(), mask.dims())?;
    let idx: Vec<usize> = mask.indices().collect();
    if idx.len() < k {
        return Err(Error::domain(format!(
            "{} masked voxels cannot form {k} clusters",
            idx.len()
        )));
    }
    let dim = channels.len();
    let mut points = vec![0.0; idx.len() * dim];
    for (c, ch) in channels.iter().enumerate() {
        let s = masked_stats(ch, mask)?;
        let scale = if s.std > 0.0 { 1.0 / s.std } else { 1.0 };
        for (p, &i) in idx.iter().enumerate() {
            points[p * dim + c] = (ch.data()[i] - s.mean) * scale;
        }
    }

    // Independent k-means++ starts from one seeded stream; the partition
    // with the lowest within-cluster sum of squares wins (earliest on ties).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = kmeans_pp(&points, dim, k, &mut rng);
        let (centers, assign) = lloyd(&points, dim, k, init);
        let inertia: f64 = points
            .chunks(dim)
            .zip(&assign)
            .map(|(p, &a)| {
                p.iter()
                    .zip(&centers[a * dim..(a + 1) * dim])
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
            })
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centers, assign));
        }
    }
    let (_, centers, assign) = best.expect("at least one k-means start");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a * dim].total_cmp(&centers[b * dim]).then(a.cmp(&b)));
    let mut rank = vec![0u8; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r as u8 + 1;
    }
    let mut labels = vec![0u8; first.dims().len()];
    for (&i, &a) in idx.iter().zip(&assign) {
        labels[i] = rank[a];
    }
    LabelVolume::new(first.dims(), labels)
}

#[inline]
fn nearest(p: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks(dim).enumerate() {
        let d2: f64 = p.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 {
            best = (c, d2);
        }
    }
    best
}

/// Lloyd iterations until assignments stabilize or the iteration cap.
fn lloyd(points: &[f64], dim: usize, k: usize, mut centers: Vec<f64>) -> (Vec<f64>, Vec<usize>) {
    let mut assign = vec![usize::MAX; points.len() / dim];
    for _ in 0..KMEANS_MAX_ITER {
        let next: Vec<usize> = points
            .par_chunks(dim)
            .map(|p| nearest(p, &centers, dim).0)
            .collect();
        let changed = next != assign;
        assign = next;
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.chunks(dim).zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous center
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    (centers, assign)
}

fn kmeans_pp(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks(dim)
        .map(|p| nearest(p, &centers, dim).1)
        .collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut run = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                run += w;
                if run > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
        let newest = &centers[start..];
        for (p, d) in points.chunks(dim).zip(d2.iter_mut()) {
            let nd: f64 = p.iter().zip(newest).map(|(a, b)| (a - b) * (a - b)).sum();
            if nd < *d {
                *d = nd;
            }
        }
    }
    centers
}

/// Mask of the label whose mean atlas value is highest; ties go to the lower
/// label.
pub fn select_cluster_by_atlas(labels: &LabelVolume, atlas: &Volume3D) -> Result<BinaryMask> {
    check_dims(labels.dims(), atlas.dims())?;
    let k = labels.k() as usize;
    let mut sum = vec![0.0; k + 1];
    let mut n = vec![0usize; k + 1];
    for (&l, &a) in labels.labels().iter().zip(atlas.data()) {
        if l > 0 {
            sum[l as usize] += a;
            n[l as usize] += 1;
        }
    }
    let mut best: Option<(u8, f64)> = None;
    for l in 1..=k {
        if n[l] == 0 {
            continue;
        }
        let mean = sum[l] / n[l] as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((l as u8, mean));
        }
    }
    let (label, _) = best.ok_or_else(|| Error::domain("label volume has no labelled voxels"))?;
    Ok(labels.mask_of(label))
}

/// Thresholds frozen from the initial mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmThresholds {
    pub mean_hi: f64,
    pub std_hi: f64,
    pub t_hi: f64,
    pub t_prob: f64,
}

pub fn wm_thresholds(
    wm_initial: &BinaryMask,
    hi_map: &Volume3D,
    wm_atlas: &Volume3D,
    k_sigma: f64,
) -> Result<WmThresholds> {
    let hi = masked_stats(hi_map, wm_initial)?;
    let prob = masked_stats(wm_atlas, wm_initial)?;
    Ok(WmThresholds {
        mean_hi: hi.mean,
        std_hi: hi.std,
        t_hi: hi.mean + k_sigma * hi.std,
        t_prob: prob.mean,
    })
}

/// Adds to `wm_initial` every brain voxel whose neighborhood means exceed
/// both the HI-map threshold `μ_HI + k·σ_HI` and the atlas threshold `μ_prob`,
/// all statistics taken over `wm_initial`.
pub fn estimate_wm(
    wm_initial: &BinaryMask,
    hi_map: &Volume3D,
    wm_atlas: &Volume3D,
    cfg: &WmEstimationConfig,
    mask: &BinaryMask,
) -> Result<BinaryMask> {
    let d = wm_initial.dims();
    check_dims(d, hi_map.dims())?;
    check_dims(d, wm_atlas.dims())?;
    check_dims(d, mask.dims())?;
    cfg.validate()?;
    if wm_initial.is_empty() {
        return Err(Error::domain("initial white-matter mask is empty"));
    }
    let t = wm_thresholds(wm_initial, hi_map, wm_atlas, cfg.k_sigma)?;
    log::info!(
        "wm expansion thresholds: t_hi = {:.6} (mean {:.6} + {} x std {:.6}), t_prob = {:.6}",
        t.t_hi,
        t.mean_hi,
        cfg.k_sigma,
        t.std_hi,
        t.t_prob
    );
    let candidates = mask.difference(wm_initial)?;
    let r = cfg.neighborhood_radius;
    let hi_means = neighborhood_means(hi_map, mask, &candidates, r);
    let prob_means = neighborhood_means(wm_atlas, mask, &candidates, r);

    let mut current = wm_initial.clone();
    loop {
        let remaining = candidates.difference(&current)?;
        let accept: Vec<bool> = remaining
            .data()
            .par_iter()
            .enumerate()
            .map(|(i, &c)| c && hi_means[i] > t.t_hi && prob_means[i] > t.t_prob)
            .collect();
        let added = accept.iter().filter(|&&a| a).count();
        current = current.union(&BinaryMask::new(d, accept)?)?;
        log::debug!("wm expansion pass added {added} voxels");
        // neighborhood means do not depend on the growing mask, so a second
        // pass can only confirm the first
        if !cfg.iterate_to_fixpoint || added == 0 {
            break;
        }
    }
    Ok(current)
}

/// Whole white-matter region: clustered WM united with the lesion ground truth.
pub fn merge_wm_ground_truth(wm_initial: &BinaryMask, lesion_gt: &BinaryMask) -> Result<BinaryMask> {
    wm_initial.union(lesion_gt)
}

/// `cluster` with every ground-truth lesion voxel removed.
pub fn pure_cluster(cluster: &BinaryMask, lesion_gt: &BinaryMask) -> Result<BinaryMask> {
    cluster.difference(lesion_gt)
}
