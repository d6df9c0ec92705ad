use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_dims, masked_min_max, BinaryMask, Volume3D};

pub const DEFAULT_BIN_COUNT: usize = 1024;

/// Bins of the masked Sobel histogram used to evaluate the gradient CDF.
pub const GRADIENT_BINS: usize = 1024;

/// Equal-width bin of `v` over `[lo, hi]`; the top edge falls in the last bin.
#[inline]
pub fn quantize(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// Per-bin gradient-weighted histogram `h` and its running sum `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityHistogram {
    pub bin_count: usize,
    /// Masked intensity range the bins span.
    pub range: (f64, f64),
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    pub q_rescaled: Vec<f64>,
}

impl IntensityHistogram {
    pub fn bin_edges(&self) -> Vec<f64> {
        let (lo, hi) = self.range;
        (0..=self.bin_count)
            .map(|k| lo + (hi - lo) * k as f64 / self.bin_count as f64)
            .collect()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        quantize(v, self.range.0, self.range.1, self.bin_count)
    }
}

/// Remaps normalized FLAIR intensities through the cumulative sum of the
/// per-bin mean gradient CDF, rescaled to end at 1. Voxels outside the mask
/// become 0.
pub fn build_intermediate(
    flair_norm: &Volume3D,
    sobel: &Volume3D,
    mask: &BinaryMask,
    bin_count: usize,
) -> Result<(Volume3D, IntensityHistogram)> {
    check_dims(flair_norm.dims(), sobel.dims())?;
    check_dims(flair_norm.dims(), mask.dims())?;
    if bin_count < 2 {
        return Err(Error::param(format!("bin_count {bin_count} < 2")));
    }
    let (lo, hi) = masked_min_max(flair_norm, mask)?;
    if hi <= lo {
        return Err(Error::DegenerateRange { min: lo, max: hi });
    }

    // gradient CDF: Prob(g <= g_s) looked up by Sobel bin
    let (glo, ghi) = masked_min_max(sobel, mask)?;
    let mut gcount = vec![0usize; GRADIENT_BINS];
    let mut total = 0usize;
    for (&g, &m) in sobel.data().iter().zip(mask.data()) {
        if m {
            gcount[quantize(g, glo, ghi, GRADIENT_BINS)] += 1;
            total += 1;
        }
    }
    let mut gcdf = Vec::with_capacity(GRADIENT_BINS);
    let mut run = 0usize;
    for c in gcount {
        run += c;
        gcdf.push(run as f64 / total as f64);
    }

    let mut sum = vec![0.0; bin_count];
    let mut n = vec![0usize; bin_count];
    for ((&v, &g), &m) in flair_norm.data().iter().zip(sobel.data()).zip(mask.data()) {
        if m {
            let b = quantize(v, lo, hi, bin_count);
            sum[b] += gcdf[quantize(g, glo, ghi, GRADIENT_BINS)];
            n[b] += 1;
        }
    }
    let h: Vec<f64> = sum
        .iter()
        .zip(&n)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let q: Vec<f64> = h
        .iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    let last = q[bin_count - 1];
    let q_rescaled: Vec<f64> = q.iter().map(|&x| x / last).collect();

    let data = flair_norm
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m { q_rescaled[quantize(v, lo, hi, bin_count)] } else { 0.0 })
        .collect();
    let hist = IntensityHistogram {
        bin_count,
        range: (lo, hi),
        h,
        q,
        q_rescaled,
    };
    Ok((flair_norm.with_data_unchecked(data), hist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    #[test]
    fn quantize_edges() {
        assert_eq!(quantize(0.0, 0.0, 1.0, 4), 0);
        assert_eq!(quantize(0.25, 0.0, 1.0, 4), 1);
        assert_eq!(quantize(1.0, 0.0, 1.0, 4), 3);
        assert_eq!(quantize(5.0, 5.0, 5.0, 4), 0);
    }

    #[test]
    fn two_tier_image() {
        // dim voxels with low gradient, bright voxels with high gradient
        let d = Dims::new(4, 4, 4).unwrap();
        let flair = Volume3D::from_fn(d, |x, _, _| if x < 2 { 0.2 } else { 0.9 }).unwrap();
        let sobel = Volume3D::from_fn(d, |x, _, _| if x < 2 { 0.1 } else { 5.0 }).unwrap();
        let (out, hist) =
            build_intermediate(&flair, &sobel, &BinaryMask::full(d), 16).unwrap();
        assert_eq!(out.get(3, 0, 0), 1.0);
        assert!(out.get(0, 0, 0) < 1.0);
        assert_eq!(*hist.q_rescaled.last().unwrap(), 1.0);
        assert_eq!(hist.bin_edges().len(), 17);
        // dim bin: half of voxels have g <= 0.1, bright bin: all
        assert_eq!(hist.h[0], 0.5);
        assert_eq!(hist.h[15], 1.0);
        assert_eq!(out.get(0, 0, 0), 0.5 / 1.5);
    }

    #[test]
    fn degenerate_inputs() {
        let d = Dims::new(3, 3, 3).unwrap();
        let flat = Volume3D::filled(d, 0.5);
        let full = BinaryMask::full(d);
        assert!(matches!(
            build_intermediate(&flat, &flat, &full, 16),
            Err(Error::DegenerateRange { .. })
        ));
        let ramp = Volume3D::from_fn(d, |x, _, _| x as f64).unwrap();
        assert!(build_intermediate(&ramp, &flat, &full, 1).is_err());
        assert!(build_intermediate(&ramp, &flat, &BinaryMask::empty(d), 4).is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(vals in prop::collection::vec((0.0f64..2.0, 0.0f64..10.0), 27..=27), bins in 2usize..40) {
            let d = Dims::new(3, 3, 3).unwrap();
            let flair = Volume3D::new(d, [1.0; 3], vals.iter().map(|p| p.0).collect()).unwrap();
            let sobel = Volume3D::new(d, [1.0; 3], vals.iter().map(|p| p.1).collect()).unwrap();
            let full = BinaryMask::full(d);
            if let Ok((out, hist)) = build_intermediate(&flair, &sobel, &full, bins) {
                prop_assert!(hist.h.iter().all(|&h| (0.0..=1.0).contains(&h)));
                prop_assert!(hist.q.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*hist.q_rescaled.last().unwrap(), 1.0);
                for a in 0..27 {
                    for b in 0..27 {
                        if flair.data()[a] <= flair.data()[b] {
                            prop_assert!(out.data()[a] <= out.data()[b]);
                        }
                    }
                }
            }
        }
    }
}
