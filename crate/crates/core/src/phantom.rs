//! Seeded synthetic FLAIR phantoms with exact tissue and lesion truth.
//!
//! The brain is an ellipsoid split by normalized radius into a white-matter
//! core, a gray-matter shell and a CSF rim. Spherical lesions are carved
//! inside it at their own intensity and Gaussian noise is added to brain
//! voxels. A companion T1-weighted volume uses its own tiers, with lesions
//! hypointense at `t1_lesion`, so the two channels can drive tissue
//! clustering. Atlases are linear ramps of the normalized radius around the
//! tissue boundaries.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueTiers {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Voxel coordinates.
    pub center: [f64; 3],
    /// Radius in voxels.
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Brain ellipsoid semi-axes in voxels, centered in the grid.
    pub brain_semi_axes: [f64; 3],
    /// Normalized radius where white matter ends.
    pub wm_extent: f64,
    /// Normalized radius where gray matter ends and the CSF rim begins.
    pub gm_extent: f64,
    /// Width of the atlas ramps in normalized-radius units.
    pub atlas_blur: f64,
    /// FLAIR tissue intensities.
    pub tiers: TissueTiers,
    /// T1-weighted tissue intensities.
    pub t1_tiers: TissueTiers,
    /// T1-weighted intensity of every lesion.
    pub t1_lesion: f64,
    pub lesions: Vec<Lesion>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        // lesions 25% brighter than white matter and ~19% brighter than gray
        // matter on FLAIR
        let wm = 440.0;
        let lesion = wm * 1.25;
        let gm = (lesion / 1.19_f64).round();
        let l = |c: [f64; 3], r: f64| Lesion {
            center: c,
            radius: r,
            intensity: lesion,
        };
        PhantomSpec {
            dims: [64, 64, 48],
            spacing: [1.0; 3],
            brain_semi_axes: [29.0, 29.0, 22.0],
            wm_extent: 0.62,
            gm_extent: 0.86,
            atlas_blur: 0.2,
            tiers: TissueTiers {
                csf: 120.0,
                gm,
                wm,
            },
            t1_tiers: TissueTiers {
                csf: 250.0,
                gm: 600.0,
                wm: 850.0,
            },
            t1_lesion: 600.0,
            lesions: vec![
                // 9–12 voxel diameters, all inside the white-matter core
                l([26.0, 28.0, 22.0], 5.5),
                l([38.0, 30.0, 25.0], 6.0),
                l([31.0, 39.0, 20.0], 5.0),
                l([30.0, 22.0, 27.0], 5.0),
                l([36.0, 36.0, 18.0], 4.5),
            ],
            noise_sigma: 15.0,
            seed: 42,
        }
    }
}

impl PhantomSpec {
    /// 181×217×181 grid with geometry scaled from the default.
    pub fn full_size() -> Self {
        let base = PhantomSpec::default();
        let dims = [181usize, 217, 181];
        let s = [
            dims[0] as f64 / base.dims[0] as f64,
            dims[1] as f64 / base.dims[1] as f64,
            dims[2] as f64 / base.dims[2] as f64,
        ];
        let bc = base.center();
        let c = [
            (dims[0] as f64 - 1.0) / 2.0,
            (dims[1] as f64 - 1.0) / 2.0,
            (dims[2] as f64 - 1.0) / 2.0,
        ];
        let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
        PhantomSpec {
            dims,
            brain_semi_axes: [
                base.brain_semi_axes[0] * s[0],
                base.brain_semi_axes[1] * s[1],
                base.brain_semi_axes[2] * s[2],
            ],
            lesions: base
                .lesions
                .iter()
                .map(|l| Lesion {
                    center: [
                        c[0] + (l.center[0] - bc[0]) * s[0],
                        c[1] + (l.center[1] - bc[1]) * s[1],
                        c[2] + (l.center[2] - bc[2]) * s[2],
                    ],
                    radius: l.radius * smin,
                    intensity: l.intensity,
                })
                .collect(),
            ..base
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }

    /// Normalized ellipsoidal radius of a voxel.
    fn rho(&self, x: usize, y: usize, z: usize) -> f64 {
        let c = self.center();
        let a = self.brain_semi_axes;
        let u = (x as f64 - c[0]) / a[0];
        let v = (y as f64 - c[1]) / a[1];
        let w = (z as f64 - c[2]) / a[2];
        (u * u + v * v + w * w).sqrt()
    }

    pub fn validate(&self) -> Result<Dims> {
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2])?;
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Spec("brain semi-axes must be positive".into()));
        }
        if !(0.0 < self.wm_extent && self.wm_extent < self.gm_extent && self.gm_extent < 1.0) {
            return Err(Error::Spec("need 0 < wm_extent < gm_extent < 1".into()));
        }
        if !(self.atlas_blur > 0.0) {
            return Err(Error::Spec("atlas_blur must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("noise_sigma must be >= 0".into()));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if l.intensity <= self.tiers.wm || l.intensity <= self.tiers.gm {
                return Err(Error::Spec(format!(
                    "lesion {i} intensity {} is not above the WM and GM tiers",
                    l.intensity
                )));
            }
            if !(l.radius > 0.0) {
                return Err(Error::Spec(format!("lesion {i} radius must be positive")));
            }
            let mut voxels = 0usize;
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        if in_sphere(l, x, y, z) {
                            if self.rho(x, y, z) > 1.0 {
                                return Err(Error::Spec(format!("lesion {i} extends outside the brain")));
                            }
                            voxels += 1;
                        }
                    }
                }
            }
            if voxels == 0 {
                return Err(Error::Spec(format!("lesion {i} covers no voxel")));
            }
            let c = l.center;
            let outside_grid = c.iter().zip(self.dims).any(|(&p, n)| p - l.radius < 0.0 || p + l.radius > n as f64 - 1.0);
            if outside_grid {
                return Err(Error::Spec(format!("lesion {i} extends outside the grid")));
            }
        }
        Ok(dims)
    }
}

fn in_sphere(l: &Lesion, x: usize, y: usize, z: usize) -> bool {
    let dx = x as f64 - l.center[0];
    let dy = y as f64 - l.center[1];
    let dz = z as f64 - l.center[2];
    dx * dx + dy * dy + dz * dz <= l.radius * l.radius
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub flair: Volume3D,
    pub t1: Volume3D,
    pub brain: BinaryMask,
    pub wm: BinaryMask,
    pub gm: BinaryMask,
    pub csf: BinaryMask,
    pub lesion: BinaryMask,
    pub wm_atlas: Volume3D,
    pub gm_atlas: Volume3D,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let dims = spec.validate()?;
    let n = dims.len();
    let mut brain = vec![false; n];
    let mut wm = vec![false; n];
    let mut gm = vec![false; n];
    let mut csf = vec![false; n];
    let mut lesion = vec![false; n];
    let mut flair = vec![0.0; n];
    let mut t1 = vec![0.0; n];
    let mut wm_atlas = vec![0.0; n];
    let mut gm_atlas = vec![0.0; n];
    let ramp = |t: f64| (0.5 + t / spec.atlas_blur).clamp(0.0, 1.0);

    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.index(x, y, z);
                let rho = spec.rho(x, y, z);
                if rho > 1.0 {
                    continue;
                }
                brain[i] = true;
                wm_atlas[i] = ramp(spec.wm_extent - rho);
                gm_atlas[i] = ramp(rho - spec.wm_extent).min(ramp(spec.gm_extent - rho));
                // last listed lesion wins where spheres overlap
                if let Some(l) = spec.lesions.iter().rev().find(|l| in_sphere(l, x, y, z)) {
                    lesion[i] = true;
                    flair[i] = l.intensity;
                    t1[i] = spec.t1_lesion;
                } else if rho < spec.wm_extent {
                    wm[i] = true;
                    flair[i] = spec.tiers.wm;
                    t1[i] = spec.t1_tiers.wm;
                } else if rho < spec.gm_extent {
                    gm[i] = true;
                    flair[i] = spec.tiers.gm;
                    t1[i] = spec.t1_tiers.gm;
                } else {
                    csf[i] = true;
                    flair[i] = spec.tiers.csf;
                    t1[i] = spec.t1_tiers.csf;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Spec(format!("noise distribution: {e}")))?;
        // FLAIR draws first, then T1 continues the same stream
        for img in [&mut flair, &mut t1] {
            for (v, &b) in img.iter_mut().zip(&brain) {
                if b {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }

    let mk = |data: Vec<bool>| BinaryMask::new(dims, data);
    let vol = |data: Vec<f64>| Volume3D::new(dims, spec.spacing, data);
    Ok(Phantom {
        flair: vol(flair)?,
        t1: vol(t1)?,
        brain: mk(brain)?,
        wm: mk(wm)?,
        gm: mk(gm)?,
        csf: mk(csf)?,
        lesion: mk(lesion)?,
        wm_atlas: vol(wm_atlas)?,
        gm_atlas: vol(gm_atlas)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn quiet() -> PhantomSpec {
        PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn noiseless_values_are_tiers() {
        let spec = quiet();
        let p = generate_phantom(&spec).unwrap();
        for i in 0..p.flair.data().len() {
            let v = p.flair.data()[i];
            if p.wm.data()[i] {
                assert_eq!(v, spec.tiers.wm);
            } else if p.gm.data()[i] {
                assert_eq!(v, spec.tiers.gm);
            } else if p.csf.data()[i] {
                assert_eq!(v, spec.tiers.csf);
            } else if p.lesion.data()[i] {
                assert_eq!(v, 550.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        let distinct: BTreeSet<u64> = p.brain.indices().map(|i| p.flair.data()[i].to_bits()).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn masks_partition_brain() {
        let p = generate_phantom(&PhantomSpec::default()).unwrap();
        for i in 0..p.brain.data().len() {
            let parts = [&p.wm, &p.gm, &p.csf, &p.lesion]
                .iter()
                .filter(|m| m.data()[i])
                .count();
            assert_eq!(parts, usize::from(p.brain.data()[i]));
        }
        assert!(p.lesion.count() > 100);
        assert!(p.wm_atlas.data().iter().chain(p.gm_atlas.data()).all(|v| (0.0..=1.0).contains(v)));
        // lesions sit in white-matter territory of the atlas
        let lesion_atlas: f64 = p.lesion.indices().map(|i| p.wm_atlas.data()[i]).sum::<f64>()
            / p.lesion.count() as f64;
        assert!(lesion_atlas > 0.9);
    }

    #[test]
    fn seeds_control_noise_only() {
        let a = generate_phantom(&PhantomSpec::default()).unwrap();
        let b = generate_phantom(&PhantomSpec::default()).unwrap();
        assert_eq!(a.flair, b.flair);
        let c = generate_phantom(&PhantomSpec {
            seed: 7,
            ..PhantomSpec::default()
        })
        .unwrap();
        assert_ne!(a.flair, c.flair);
        assert_eq!(a.lesion, c.lesion);
        assert_eq!(a.wm, c.wm);
        assert_eq!(a.wm_atlas, c.wm_atlas);
    }

    #[test]
    fn invalid_specs() {
        let mut s = quiet();
        s.lesions[0].center = [3.0, 3.0, 3.0];
        assert!(matches!(generate_phantom(&s), Err(Error::Spec(_))));
        let mut s = quiet();
        s.lesions[0].intensity = 450.0;
        assert!(matches!(generate_phantom(&s), Err(Error::Spec(_))));
        let mut s = quiet();
        s.gm_extent = 0.5;
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn full_size_preset_is_valid() {
        let s = PhantomSpec::full_size();
        assert_eq!(s.dims, [181, 217, 181]);
        assert_eq!(s.lesions.len(), PhantomSpec::default().lesions.len());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = PhantomSpec::default();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<PhantomSpec>(&text).unwrap(), s);
        let partial: PhantomSpec = serde_json::from_str(r#"{"seed": 3, "noise_sigma": 0}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.dims, [64, 64, 48]);
    }
}
