//! Per-slice hexagonal point nets and the hyperintensity score map.
//!
//! A voxel's score is the fraction of patches on its slice whose mean is at
//! least one standard deviation (of the masked intermediate image) below the
//! voxel's own neighborhood mean.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_dims, cube_mean, masked_stats, BinaryMask, Dims, Volume3D};

/// Below this masked standard deviation the map is all zeros.
pub const SIGMA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointNet {
    /// Patch centers `(x, y)` for each slice z.
    slices: Vec<Vec<(usize, usize)>>,
    pub radius: usize,
    pub theta_step_deg: u32,
}

impl PointNet {
    /// Builds a net from explicit per-slice points, checking that every point
    /// is masked and unique on its slice.
    pub fn from_points(
        mask: &BinaryMask,
        slices: Vec<Vec<(usize, usize)>>,
        radius: usize,
        theta_step_deg: u32,
    ) -> Result<Self> {
        let d = mask.dims();
        if slices.len() != d.nz {
            return Err(Error::domain(format!(
                "net has {} slices, mask has {}",
                slices.len(),
                d.nz
            )));
        }
        for (z, pts) in slices.iter().enumerate() {
            let mut seen = HashSet::new();
            for &(x, y) in pts {
                if x >= d.nx || y >= d.ny || !mask.get(x, y, z) {
                    return Err(Error::domain(format!("net point ({x}, {y}, {z}) outside mask")));
                }
                if !seen.insert((x, y)) {
                    return Err(Error::domain(format!("duplicate net point ({x}, {y}, {z})")));
                }
            }
        }
        Ok(PointNet {
            slices,
            radius,
            theta_step_deg,
        })
    }

    /// Nets for every slice of `mask`.
    pub fn build(mask: &BinaryMask, radius: usize, theta_step_deg: u32) -> Result<Self> {
        let slices = (0..mask.dims().nz)
            .map(|z| build_point_net(mask, z, radius, theta_step_deg))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointNet {
            slices,
            radius,
            theta_step_deg,
        })
    }

    pub fn slice(&self, z: usize) -> &[(usize, usize)] {
        &self.slices[z]
    }

    pub fn slices(&self) -> &[Vec<(usize, usize)>] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Integer lattice steps `(round(r cos θ), round(r sin θ))` for θ = 0, step, ….
pub fn spawn_offsets(radius: usize, theta_step_deg: u32) -> Vec<(i64, i64)> {
    let r = radius as f64;
    (0..360 / theta_step_deg)
        .map(|k| {
            let t = ((k * theta_step_deg) as f64).to_radians();
            ((r * t.cos()).round() as i64, (r * t.sin()).round() as i64)
        })
        .collect()
}

fn slice_seed(mask: &BinaryMask, z: usize) -> Option<(usize, usize)> {
    let d = mask.dims();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..d.ny {
        for x in 0..d.nx {
            if mask.get(x, y, z) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    // nearest masked voxel to the centroid; first in scan order on ties
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for y in 0..d.ny {
        for x in 0..d.nx {
            if mask.get(x, y, z) {
                let dd = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if dd < best_d {
                    best_d = dd;
                    best = Some((x, y));
                }
            }
        }
    }
    best
}

/// Breadth-first hexagonal expansion over slice `z` from the voxel nearest
/// the masked centroid, keeping in-bounds points until no new point appears,
/// then dropping points outside the mask. Points are in discovery order.
pub fn build_point_net(
    mask: &BinaryMask,
    z: usize,
    radius: usize,
    theta_step_deg: u32,
) -> Result<Vec<(usize, usize)>> {
    let d = mask.dims();
    if radius < 1 {
        return Err(Error::param("net radius must be >= 1"));
    }
    if theta_step_deg == 0 || 360 % theta_step_deg != 0 {
        return Err(Error::param(format!(
            "theta step {theta_step_deg} must divide 360"
        )));
    }
    if z >= d.nz {
        return Err(Error::domain(format!("slice {z} outside {} slices", d.nz)));
    }
    let Some(seed) = slice_seed(mask, z) else {
        return Ok(Vec::new());
    };
    let steps = spawn_offsets(radius, theta_step_deg);
    let mut visited = vec![false; d.slice_len()];
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    visited[seed.0 + d.nx * seed.1] = true;
    queue.push_back(seed);
    while let Some((x, y)) = queue.pop_front() {
        order.push((x, y));
        for &(ox, oy) in &steps {
            let (nx, ny) = (x as i64 + ox, y as i64 + oy);
            if nx < 0 || ny < 0 || nx >= d.nx as i64 || ny >= d.ny as i64 {
                continue;
            }
            let i = nx as usize + d.nx * ny as usize;
            if !visited[i] {
                visited[i] = true;
                queue.push_back((nx as usize, ny as usize));
            }
        }
    }
    order.retain(|&(x, y)| mask.get(x, y, z));
    Ok(order)
}

#[derive(Debug, Clone)]
pub struct HyperintensityMap {
    pub map: Volume3D,
    /// Set when the masked intermediate image had no contrast and the map
    /// was zeroed.
    pub degenerate: bool,
}

/// Scores every masked voxel against the patches of its slice's net.
pub fn score_map(
    intermediate: &Volume3D,
    mask: &BinaryMask,
    net: &PointNet,
    neighborhood_radius: usize,
) -> Result<HyperintensityMap> {
    let d = intermediate.dims();
    check_dims(d, mask.dims())?;
    if net.slices().len() != d.nz {
        return Err(Error::domain(format!(
            "net has {} slices, volume has {}",
            net.slices().len(),
            d.nz
        )));
    }
    let stats = masked_stats(intermediate, mask)?;
    if stats.std < SIGMA_TOLERANCE {
        log::warn!(
            "intermediate image std {} below {SIGMA_TOLERANCE}; hyperintensity map is empty",
            stats.std
        );
        return Ok(HyperintensityMap {
            map: intermediate.with_data_unchecked(vec![0.0; d.len()]),
            degenerate: true,
        });
    }
    let sigma = stats.std;
    let started = Instant::now();
    let src = intermediate.data();
    let mbits = mask.data();

    let mut out = vec![0.0; d.len()];
    out.par_chunks_mut(d.slice_len())
        .enumerate()
        .for_each(|(z, plane)| {
            let mut patch_means: Vec<f64> = net
                .slice(z)
                .iter()
                .filter_map(|&(x, y)| cube_mean(src, mbits, d, (x, y, z), neighborhood_radius))
                .collect();
            if patch_means.is_empty() {
                return;
            }
            patch_means.sort_by(f64::total_cmp);
            let size = patch_means.len() as f64;
            score_slice(src, mbits, d, z, neighborhood_radius, sigma, &patch_means, size, plane);
        });

    let secs = started.elapsed().as_secs_f64();
    log::info!(
        "hyperintensity map: {} masked voxels in {:.2}s ({:.0} voxels/s)",
        stats.count,
        secs,
        stats.count as f64 / secs.max(1e-9)
    );
    Ok(HyperintensityMap {
        map: intermediate.with_data_unchecked(out),
        degenerate: false,
    })
}

#[allow(clippy::too_many_arguments)]
fn score_slice(
    src: &[f64],
    mask: &[bool],
    d: Dims,
    z: usize,
    radius: usize,
    sigma: f64,
    sorted_patches: &[f64],
    size: f64,
    plane: &mut [f64],
) {
    for y in 0..d.ny {
        for x in 0..d.nx {
            if !mask[d.index(x, y, z)] {
                continue;
            }
            let Some(mu_v) = cube_mean(src, mask, d, (x, y, z), radius) else {
                continue;
            };
            // fl(mu_v - p) is nonincreasing in p, so hits form a prefix
            let hits = sorted_patches.partition_point(|&p| mu_v - p >= sigma);
            plane[x + d.nx * y] = hits as f64 / size;
        }
    }
}
