//! Lesion brightness (IPD) and mask agreement (Dice, lesion intersection).

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{check_dims, masked_stats, BinaryMask, Volume3D};

/// Percentage by which the mean over `lesion` exceeds the mean over `tissue`.
pub fn ipd(image: &Volume3D, lesion: &BinaryMask, tissue: &BinaryMask) -> Result<f64> {
    let l = masked_stats(image, lesion)?;
    let t = masked_stats(image, tissue)?;
    if t.mean == 0.0 {
        return Err(Error::domain("tissue mean is zero"));
    }
    Ok((l.mean / t.mean - 1.0) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Counts with `a` as reference: FP are voxels only in `b`, FN only in `a`.
pub fn confusion(a: &BinaryMask, b: &BinaryMask) -> Result<Confusion> {
    check_dims(a.dims(), b.dims())?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0 };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        match (x, y) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

pub fn dsc_from_counts(c: Confusion) -> f64 {
    let denom = c.fp + c.fn_ + 2 * c.tp;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Dice coefficient; two empty masks agree perfectly.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(dsc_from_counts(confusion(a, b)?))
}

/// Percentage of ground-truth lesion voxels inside `estimated`.
pub fn lesion_intersection(lesion_gt: &BinaryMask, estimated: &BinaryMask) -> Result<f64> {
    check_dims(lesion_gt.dims(), estimated.dims())?;
    let total = lesion_gt.count();
    if total == 0 {
        return Err(Error::domain("lesion ground truth is empty"));
    }
    let kept = lesion_gt
        .data()
        .iter()
        .zip(estimated.data())
        .filter(|(&g, &e)| g && e)
        .count();
    Ok(kept as f64 / total as f64 * 100.0)
}

/// Rounds to 6 significant digits on serialization.
pub fn sig6<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig(*v, 6))
}

pub fn round_sig(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", digits - 1, v).parse().unwrap_or(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Wm,
    Gm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrightnessEntry {
    pub image: String,
    /// Which lesion ground truth the entry was measured with.
    pub lesion: String,
    pub tissue: Tissue,
    #[serde(serialize_with = "sig6")]
    pub tissue_mean: f64,
    #[serde(serialize_with = "sig6")]
    pub tissue_std: f64,
    #[serde(serialize_with = "sig6")]
    pub lesion_mean: f64,
    #[serde(serialize_with = "sig6")]
    pub ipd_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    /// Name of the estimated mask and of the reference it was compared with.
    pub mask: String,
    pub reference: String,
    #[serde(serialize_with = "sig6")]
    pub dsc: f64,
    #[serde(serialize_with = "sig6")]
    pub li_percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub brightness: Vec<BrightnessEntry>,
    pub masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<String>,
    pub metrics: Metrics,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn ipd_of(&self, image: &str, tissue: Tissue) -> Option<f64> {
        self.metrics
            .brightness
            .iter()
            .find(|e| e.image == image && e.tissue == tissue)
            .map(|e| e.ipd_percent)
    }
}

/// IPD and tissue statistics for every image against the pure WM and GM
/// clusters. Images are expected to be rescaled to [0, 1] already.
pub fn brightness_report(
    images: &[(&str, &Volume3D)],
    lesion: &BinaryMask,
    wm_pure: &BinaryMask,
    gm_pure: &BinaryMask,
) -> Result<MetricsReport> {
    let mut entries = Vec::new();
    for &(name, img) in images {
        check_dims(img.dims(), lesion.dims())?;
        let l = masked_stats(img, lesion)?;
        for (tissue, mask) in [(Tissue::Wm, wm_pure), (Tissue::Gm, gm_pure)] {
            let t = masked_stats(img, mask)?;
            entries.push(BrightnessEntry {
                image: name.to_string(),
                lesion: "lesion".to_string(),
                tissue,
                tissue_mean: t.mean,
                tissue_std: t.std,
                lesion_mean: l.mean,
                ipd_percent: ipd(img, lesion, mask)?,
            });
        }
    }
    Ok(MetricsReport {
        images: images.iter().map(|(n, _)| n.to_string()).collect(),
        metrics: Metrics {
            brightness: entries,
            masks: Vec::new(),
        },
        config_hash: String::new(),
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub image: String,
    pub tissue: Tissue,
    pub n: usize,
    #[serde(serialize_with = "sig6")]
    pub ipd_mean: f64,
    #[serde(serialize_with = "sig6")]
    pub ipd_std: f64,
}

/// Mean ± population std of IPD per (image, tissue) across reports, e.g. the
/// time-points of one patient.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<AggregateEntry> {
    let mut keys: Vec<(String, Tissue)> = Vec::new();
    for r in reports {
        for e in &r.metrics.brightness {
            if !keys.iter().any(|(i, t)| *i == e.image && *t == e.tissue) {
                keys.push((e.image.clone(), e.tissue));
            }
        }
    }
    keys.into_iter()
        .map(|(image, tissue)| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.ipd_of(&image, tissue)).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            AggregateEntry {
                image,
                tissue,
                n: vals.len(),
                ipd_mean: mean,
                ipd_std: std,
            }
        })
        .collect()
}
