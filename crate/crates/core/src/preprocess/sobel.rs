use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];

/// Euclidean magnitude of the three 3×3×3 Sobel responses. Out-of-bounds
/// taps replicate the nearest edge voxel.
pub fn sobel_magnitude(vol: &Volume3D) -> Result<Volume3D> {
    let d = vol.dims();
    if d.nx < 3 || d.ny < 3 || d.nz < 3 {
        return Err(Error::Dims(format!(
            "Sobel needs at least 3 voxels per axis, got {}x{}x{}",
            d.nx, d.ny, d.nz
        )));
    }
    let src = vol.data();
    let mut out = vec![0.0; d.len()];
    out.par_chunks_mut(d.slice_len())
        .enumerate()
        .for_each(|(z, plane)| {
            let zs = [z.saturating_sub(1), z, (z + 1).min(d.nz - 1)];
            for y in 0..d.ny {
                let ys = [y.saturating_sub(1), y, (y + 1).min(d.ny - 1)];
                for x in 0..d.nx {
                    let xs = [x.saturating_sub(1), x, (x + 1).min(d.nx - 1)];
                    let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
                    for (k, &zz) in zs.iter().enumerate() {
                        for (j, &yy) in ys.iter().enumerate() {
                            let row = d.index(0, yy, zz);
                            for (i, &xx) in xs.iter().enumerate() {
                                let v = src[row + xx];
                                gx += DERIV[i] * SMOOTH[j] * SMOOTH[k] * v;
                                gy += SMOOTH[i] * DERIV[j] * SMOOTH[k] * v;
                                gz += SMOOTH[i] * SMOOTH[j] * DERIV[k] * v;
                            }
                        }
                    }
                    plane[x + d.nx * y] = (gx * gx + gy * gy + gz * gz).sqrt();
                }
            }
        });
    Ok(vol.with_data_unchecked(out))
}
