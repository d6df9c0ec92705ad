//! Non-local means over 3D volumes.
//!
//! Patch distances for one search offset are computed for a whole slab at
//! once: squared differences between the volume and its shifted copy are
//! box-summed in x, then y, then across planes. Every output voxel
//! accumulates its offsets in the same fixed order, so results do not depend
//! on how slabs are spread over threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_dims, BinaryMask, Dims, Volume3D};

const SLAB: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlmParams {
    /// Noise level in input intensity units.
    pub sigma: f64,
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Filtering strength; `None` means `sigma`.
    pub filter_h: Option<f64>,
}

impl Default for NlmParams {
    fn default() -> Self {
        NlmParams {
            sigma: 15.0,
            patch_radius: 1,
            search_radius: 5,
            filter_h: None,
        }
    }
}

impl NlmParams {
    pub fn h(&self) -> f64 {
        self.filter_h.unwrap_or(self.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("NLM sigma {} must be > 0", self.sigma)));
        }
        if self.patch_radius < 1 || self.search_radius < 1 {
            return Err(Error::param("NLM radii must be >= 1"));
        }
        let h = self.h();
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::param(format!("NLM filter h {h} must be > 0")));
        }
        Ok(())
    }
}

/// Edge-replicated copy of the volume with `pad` voxels on every side.
struct Padded {
    data: Vec<f64>,
    px: usize,
    py: usize,
    pad: usize,
}

impl Padded {
    fn new(vol: &Volume3D, pad: usize) -> Self {
        let d = vol.dims();
        let (px, py, pz) = (d.nx + 2 * pad, d.ny + 2 * pad, d.nz + 2 * pad);
        let mut data = Vec::with_capacity(px * py * pz);
        let clamp = |v: usize, n: usize| v.saturating_sub(pad).min(n - 1);
        for z in 0..pz {
            let sz = clamp(z, d.nz);
            for y in 0..py {
                let sy = clamp(y, d.ny);
                for x in 0..px {
                    data.push(vol.get(clamp(x, d.nx), sy, sz));
                }
            }
        }
        Padded { data, px, py, pad }
    }

    /// Value at volume coordinates, which may lie up to `pad` outside.
    #[inline]
    fn at(&self, x: isize, y: isize, z: isize) -> f64 {
        let p = self.pad as isize;
        let i = (x + p) as usize + self.px * ((y + p) as usize + self.py * (z + p) as usize);
        self.data[i]
    }
}

/// Replaces each masked voxel by the weighted mean of masked voxels in its
/// search window, with weights `exp(-max(d² - 2σ², 0) / h²)` on the mean
/// squared patch distance `d²`. Unmasked voxels pass through.
pub fn nlm_denoise(vol: &Volume3D, mask: &BinaryMask, params: &NlmParams) -> Result<Volume3D> {
    check_dims(vol.dims(), mask.dims())?;
    params.validate()?;
    let d = vol.dims();
    let pr = params.patch_radius;
    let sr = params.search_radius as isize;
    let padded = Padded::new(vol, pr + params.search_radius);
    let two_sigma2 = 2.0 * params.sigma * params.sigma;
    let inv_h2 = 1.0 / (params.h() * params.h());
    let patch_n = ((2 * pr + 1).pow(3)) as f64;

    let mut offsets = Vec::new();
    for dz in -sr..=sr {
        for dy in -sr..=sr {
            for dx in -sr..=sr {
                if (dx, dy, dz) != (0, 0, 0) {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }

    let mut out = vol.data().to_vec();
    out.par_chunks_mut(SLAB * d.slice_len())
        .enumerate()
        .for_each(|(slab, chunk)| {
            let z0 = slab * SLAB;
            let nz = chunk.len() / d.slice_len();
            let ctx = SlabCtx {
                vol,
                mask,
                padded: &padded,
                dims: d,
                pr,
                z0,
                nz,
            };
            ctx.run(&offsets, two_sigma2, inv_h2, patch_n, chunk);
        });
    Ok(vol.with_data_unchecked(out))
}

struct SlabCtx<'a> {
    vol: &'a Volume3D,
    mask: &'a BinaryMask,
    padded: &'a Padded,
    dims: Dims,
    pr: usize,
    z0: usize,
    nz: usize,
}

impl SlabCtx<'_> {
    fn run(
        &self,
        offsets: &[(isize, isize, isize)],
        two_sigma2: f64,
        inv_h2: f64,
        patch_n: f64,
        out: &mut [f64],
    ) {
        let d = self.dims;
        let pr = self.pr as isize;
        let plane = d.slice_len();
        let n = plane * self.nz;
        let planes = self.nz + 2 * self.pr;
        let ex = d.nx + 2 * self.pr;
        let ey = d.ny + 2 * self.pr;

        let mut wsum = vec![1.0; n];
        let mut acc = vec![0.0; n];
        if !(0..n).any(|i| self.mask.data()[self.z0 * plane + i]) {
            return;
        }

        let mut diff = vec![0.0; ex * ey];
        let mut rows = vec![0.0; d.nx * ey];
        let mut sums = vec![0.0; planes * plane];

        for &(dx, dy, dz) in offsets {
            // 2D box sums of squared differences for each plane of the slab
            for p in 0..planes {
                let z = (self.z0 + p) as isize - pr;
                for ey_i in 0..ey {
                    let y = ey_i as isize - pr;
                    for ex_i in 0..ex {
                        let x = ex_i as isize - pr;
                        let a = self.padded.at(x, y, z);
                        let b = self.padded.at(x + dx, y + dy, z + dz);
                        diff[ex_i + ex * ey_i] = (a - b) * (a - b);
                    }
                }
                for yi in 0..ey {
                    let src = &diff[yi * ex..(yi + 1) * ex];
                    let dst = &mut rows[yi * d.nx..(yi + 1) * d.nx];
                    for (x, o) in dst.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for t in &src[x..=x + 2 * self.pr] {
                            s += t;
                        }
                        *o = s;
                    }
                }
                let dst = &mut sums[p * plane..(p + 1) * plane];
                for y in 0..d.ny {
                    for x in 0..d.nx {
                        let mut s = 0.0;
                        for k in 0..=2 * self.pr {
                            s += rows[x + d.nx * (y + k)];
                        }
                        dst[x + d.nx * y] = s;
                    }
                }
            }

            for lz in 0..self.nz {
                let z = self.z0 + lz;
                let wz = z as isize + dz;
                if wz < 0 || wz >= d.nz as isize {
                    continue;
                }
                for y in 0..d.ny {
                    let wy = y as isize + dy;
                    if wy < 0 || wy >= d.ny as isize {
                        continue;
                    }
                    for x in 0..d.nx {
                        let wx = x as isize + dx;
                        if wx < 0 || wx >= d.nx as isize {
                            continue;
                        }
                        let vi = d.index(x, y, z);
                        let wi = d.index(wx as usize, wy as usize, wz as usize);
                        let (mdata, src) = (self.mask.data(), self.vol.data());
                        if !mdata[vi] || !mdata[wi] {
                            continue;
                        }
                        let pi = x + d.nx * y;
                        let mut dist = 0.0;
                        for k in 0..=2 * self.pr {
                            dist += sums[(lz + k) * plane + pi];
                        }
                        let excess = dist / patch_n - two_sigma2;
                        let w = if excess > 0.0 { (-excess * inv_h2).exp() } else { 1.0 };
                        let li = lz * plane + pi;
                        wsum[li] += w;
                        acc[li] += w * (src[wi] - src[vi]);
                    }
                }
            }
        }

        let src = self.vol.data();
        for li in 0..n {
            let vi = self.z0 * plane + li;
            if self.mask.data()[vi] {
                out[li] = src[vi] + acc[li] / wsum[li];
            }
        }
    }
}
