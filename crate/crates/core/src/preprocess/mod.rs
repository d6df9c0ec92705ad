//! Noise reduction, intensity normalization, Sobel edges and the
//! gradient-weighted histogram remapping that produces the intermediate image.

mod intermediate;
mod nlm;
mod sobel;

pub use intermediate::{
    build_intermediate, quantize, IntensityHistogram, DEFAULT_BIN_COUNT, GRADIENT_BINS,
};
pub use nlm::{nlm_denoise, NlmParams};
pub use sobel::sobel_magnitude;

use crate::error::{Error, Result};
use crate::volume::{check_dims, masked_stats, BinaryMask, Volume3D};

/// Divides every voxel by μ+3σ of the masked intensities, then zeroes the
/// voxels outside the mask.
pub fn normalize_intensity(vol: &Volume3D, mask: &BinaryMask) -> Result<Volume3D> {
    check_dims(vol.dims(), mask.dims())?;
    let stats = masked_stats(vol, mask)?;
    let divisor = stats.mean + 3.0 * stats.std;
    if !(divisor > 0.0) {
        return Err(Error::DegenerateStats(format!(
            "mean + 3 std = {divisor} is not positive"
        )));
    }
    let data = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { v / divisor } else { 0.0 })
        .collect();
    Ok(vol.with_data_unchecked(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_normalizes_to_one() {
        let d = Dims::new(4, 4, 4).unwrap();
        let mask = BinaryMask::from_fn(d, |x, _, _| x < 3);
        let out = normalize_intensity(&Volume3D::filled(d, 37.0), &mask).unwrap();
        for (i, &m) in mask.data().iter().enumerate() {
            assert_eq!(out.data()[i], if m { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn divisor_from_formula() {
        // values 80 and 120: mean 100, population std 20
        let d = Dims::new(3, 1, 1).unwrap();
        let v = Volume3D::new(d, [1.0; 3], vec![80.0, 120.0, 5.0]).unwrap();
        let mask = BinaryMask::new(d, vec![true, true, false]).unwrap();
        let out = normalize_intensity(&v, &mask).unwrap();
        assert_eq!(out.data(), &[0.5, 0.75, 0.0]);
    }

    #[test]
    fn random_matches_recomputed_stats() {
        let d = Dims::new(7, 6, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = Volume3D::new(d, [1.0; 3], (0..d.len()).map(|_| rng.random_range(0.0..500.0)).collect())
            .unwrap();
        let mask = BinaryMask::from_fn(d, |x, y, _| x + y > 2);
        let out = normalize_intensity(&v, &mask).unwrap();
        let vals: Vec<f64> = mask.indices().map(|i| v.data()[i]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let div = mean + 3.0 * std;
        for i in mask.indices() {
            let want = v.data()[i] / div;
            assert!((out.data()[i] - want).abs() <= 1e-12 * want.abs());
        }
    }

    #[test]
    fn non_positive_divisor_is_error() {
        let d = Dims::new(2, 1, 1).unwrap();
        let v = Volume3D::new(d, [1.0; 3], vec![-4.0, -4.0]).unwrap();
        assert!(matches!(
            normalize_intensity(&v, &BinaryMask::full(d)),
            Err(Error::DegenerateStats(_))
        ));
    }
}
