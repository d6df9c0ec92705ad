//! Grid types shared by every stage: scalar volumes, binary masks and the
//! masked statistics and neighborhood arithmetic computed over them.
//!
//! Voxels are stored x fastest, then y, then z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::Orientation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Dims(format!("{nx}x{ny}x{nz} has a zero extent")));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / self.slice_len();
        (x, y, z)
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }
}

pub(crate) fn check_dims(expected: Dims, got: Dims) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            expected: expected.as_tuple(),
            got: got.as_tuple(),
        });
    }
    Ok(())
}

/// Scalar 3D image with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
    orientation: Option<Orientation>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Dims(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                dims.nx,
                dims.ny,
                dims.nz
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value at voxel {i}")));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data,
            orientation: None,
        })
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(value.is_finite());
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
            orientation: None,
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    /// A volume on the same grid (spacing and orientation) holding `data`.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut out = Volume3D::new(self.dims, self.spacing, data)?;
        out.orientation = self.orientation.clone();
        Ok(out)
    }

    pub(crate) fn with_data_unchecked(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.dims.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            data,
            orientation: self.orientation.clone(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f64; 3]) {
        self.spacing = spacing;
    }

    pub fn orientation(&self) -> Option<&Orientation> {
        self.orientation.as_ref()
    }

    pub fn set_orientation(&mut self, orientation: Option<Orientation>) {
        self.orientation = orientation;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.dims.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Boolean grid aligned to a [`Volume3D`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Dims(format!(
                "mask length {} does not match {}x{}x{}",
                data.len(),
                dims.nx,
                dims.ny,
                dims.nz
            )));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn full(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        BinaryMask { dims, data }
    }

    /// Voxels strictly above `threshold`.
    pub fn threshold(vol: &Volume3D, threshold: f64) -> Self {
        BinaryMask {
            dims: vol.dims(),
            data: vol.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.dims.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        check_dims(self.dims, other.dims)?;
        Ok(BinaryMask {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing: [1.0; 3],
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            orientation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

pub fn masked_stats(vol: &Volume3D, mask: &BinaryMask) -> Result<MaskedStats> {
    check_dims(vol.dims(), mask.dims())?;
    let mut count = 0usize;
    let mut sum = 0.0;
    for (&v, &m) in vol.data().iter().zip(mask.data()) {
        if m {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("statistics over an empty mask"));
    }
    let mean = sum / count as f64;
    let mut ss = 0.0;
    for (&v, &m) in vol.data().iter().zip(mask.data()) {
        if m {
            let d = v - mean;
            ss += d * d;
        }
    }
    Ok(MaskedStats {
        mean,
        std: (ss / count as f64).sqrt(),
        count,
    })
}

/// Mean over the (2r+1)³ cube around `center`, clipped to the volume and to
/// `mask`. `None` when nothing contributes.
#[inline]
pub(crate) fn cube_mean(
    data: &[f64],
    mask: &[bool],
    dims: Dims,
    (cx, cy, cz): (usize, usize, usize),
    radius: usize,
) -> Option<f64> {
    let x0 = cx.saturating_sub(radius);
    let y0 = cy.saturating_sub(radius);
    let z0 = cz.saturating_sub(radius);
    let x1 = (cx + radius).min(dims.nx - 1);
    let y1 = (cy + radius).min(dims.ny - 1);
    let z1 = (cz + radius).min(dims.nz - 1);
    let mut sum = 0.0;
    let mut n = 0usize;
    for z in z0..=z1 {
        for y in y0..=y1 {
            let row = dims.index(0, y, z);
            for x in x0..=x1 {
                if mask[row + x] {
                    sum += data[row + x];
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn neighborhood_mean(
    vol: &Volume3D,
    center: (usize, usize, usize),
    radius: usize,
    mask: &BinaryMask,
) -> Result<f64> {
    check_dims(vol.dims(), mask.dims())?;
    let d = vol.dims();
    if center.0 >= d.nx || center.1 >= d.ny || center.2 >= d.nz {
        return Err(Error::domain(format!("center {center:?} outside {d:?}")));
    }
    cube_mean(vol.data(), mask.data(), d, center, radius)
        .ok_or_else(|| Error::domain(format!("no masked voxels around {center:?}")))
}

/// Neighborhood means for every voxel selected by `centers`; other voxels
/// (and centers without contributors) get 0.
pub(crate) fn neighborhood_means(
    vol: &Volume3D,
    mask: &BinaryMask,
    centers: &BinaryMask,
    radius: usize,
) -> Vec<f64> {
    use rayon::prelude::*;
    let dims = vol.dims();
    let mut out = vec![0.0; dims.len()];
    out.par_chunks_mut(dims.slice_len())
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    if centers.get(x, y, z) {
                        plane[x + dims.nx * y] =
                            cube_mean(vol.data(), mask.data(), dims, (x, y, z), radius)
                                .unwrap_or(0.0);
                    }
                }
            }
        });
    out
}

/// Affine map sending the masked minimum to 0 and maximum to 1; voxels
/// outside the mask become 0.
pub fn rescale_unit(vol: &Volume3D, mask: &BinaryMask) -> Result<Volume3D> {
    check_dims(vol.dims(), mask.dims())?;
    let (lo, hi) = masked_min_max(vol, mask)?;
    if hi <= lo {
        return Err(Error::DegenerateRange { min: lo, max: hi });
    }
    let span = hi - lo;
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { (v - lo) / span } else { 0.0 })
        .collect();
    Ok(vol.with_data_unchecked(data))
}

pub fn masked_min_max(vol: &Volume3D, mask: &BinaryMask) -> Result<(f64, f64)> {
    check_dims(vol.dims(), mask.dims())?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&v, &m) in vol.data().iter().zip(mask.data()) {
        if m {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return Err(Error::domain("empty mask"));
    }
    Ok((lo, hi))
}
