//! End-to-end orchestration with resumable stages.
//!
//! Each stage has a key: a SHA-256 over its name, the parameters it uses, the
//! keys of the stages it reads and the digests of its input files. Keys and
//! output file names are recorded in `pipeline_state.json`; a stage whose key
//! is unchanged and whose outputs exist is loaded from disk instead of
//! recomputed. Outputs are written with a `.partial` suffix and renamed once
//! the whole stage succeeded.
//!
//! Image outputs are rounded to float32 as soon as they are computed so that
//! a resumed run sees exactly the values a fresh run does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::himap::{score_map, PointNet};
use crate::metrics::{brightness_report, dsc, lesion_intersection, MaskEntry, MetricsReport};
use crate::nifti::{self, AtlasPair, DataType};
use crate::overlay::render_overlay_png;
use crate::preprocess::{
    build_intermediate, nlm_denoise, normalize_intensity, sobel_magnitude, IntensityHistogram,
    NlmParams, DEFAULT_BIN_COUNT,
};
use crate::volume::{check_dims, rescale_unit, BinaryMask, Volume3D};
use crate::wmmask::{
    estimate_wm, initial_segmentation, merge_wm_ground_truth, pure_cluster,
    select_cluster_by_atlas, LabelVolume, WmEstimationConfig,
};

pub const STATE_FILE: &str = "pipeline_state.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineInputs {
    pub flair: PathBuf,
    pub t1: Option<PathBuf>,
    /// When absent, voxels with positive FLAIR intensity form the brain.
    pub brain_mask: Option<PathBuf>,
    pub wm_atlas: Option<PathBuf>,
    pub gm_atlas: Option<PathBuf>,
    /// One ground truth per expert.
    pub lesion_gt: Vec<PathBuf>,
    /// Precomputed tissue labels used instead of k-means.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageParams {
    pub nlm: NlmParams,
    pub bins: usize,
    pub net_radius: usize,
    pub theta_step: u32,
    pub neighborhood_radius: usize,
    pub wm: WmEstimationConfig,
    pub kmeans_k: usize,
    pub seed: u64,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            nlm: NlmParams::default(),
            bins: DEFAULT_BIN_COUNT,
            net_radius: 10,
            theta_step: 60,
            neighborhood_radius: 1,
            wm: WmEstimationConfig::default(),
            kmeans_k: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub inputs: PipelineInputs,
    pub out_dir: PathBuf,
    pub params: StageParams,
    /// Slice for PNG overlays; `None` picks the middle slice.
    pub overlay_slice: Option<usize>,
    pub overlays: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            inputs: PipelineInputs::default(),
            out_dir: PathBuf::from("out"),
            params: StageParams::default(),
            overlay_slice: None,
            overlays: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks parameters and that every named input exists.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        p.nlm.validate()?;
        p.wm.validate()?;
        if p.bins < 2 {
            return Err(Error::param(format!("bins {} < 2", p.bins)));
        }
        if p.net_radius < 1 {
            return Err(Error::param("net radius must be >= 1"));
        }
        if p.theta_step == 0 || 360 % p.theta_step != 0 {
            return Err(Error::param(format!("theta step {} must divide 360", p.theta_step)));
        }
        if p.kmeans_k < 2 {
            return Err(Error::param("k-means needs k >= 2"));
        }
        let i = &self.inputs;
        if i.flair.as_os_str().is_empty() {
            return Err(Error::MissingInput {
                what: "flair".into(),
                path: PathBuf::new(),
            });
        }
        let named = [
            ("flair", Some(&i.flair)),
            ("t1", i.t1.as_ref()),
            ("brain-mask", i.brain_mask.as_ref()),
            ("wm-atlas", i.wm_atlas.as_ref()),
            ("gm-atlas", i.gm_atlas.as_ref()),
            ("labels", i.labels.as_ref()),
        ];
        let gts = i.lesion_gt.iter().map(|p| ("lesion-gt", Some(p)));
        for (what, path) in named.into_iter().chain(gts) {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(Error::MissingInput {
                        what: what.into(),
                        path: path.clone(),
                    });
                }
            }
        }
        if i.wm_atlas.is_some() != i.gm_atlas.is_some() {
            return Err(Error::param("wm-atlas and gm-atlas must be given together"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub status: StageStatus,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<StageRecord>,
    pub report: Option<MetricsReport>,
}

impl PipelineOutcome {
    pub fn status_of(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|s| s.name == stage).map(|s| s.status)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StateFile {
    stages: BTreeMap<String, StateEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateEntry {
    key: String,
    outputs: Vec<String>,
}

enum Artifact {
    Image(Volume3D),
    Mask(BinaryMask),
    Labels(Volume3D),
    Json(String),
    Png(Vec<u8>),
}

impl Artifact {
    fn write(&self, path: &Path, like: &Volume3D) -> Result<()> {
        match self {
            Artifact::Image(v) => nifti::write_volume(v, path, DataType::F32),
            Artifact::Mask(m) => nifti::write_mask(m, path, Some(like)),
            Artifact::Labels(v) => nifti::write_volume(v, path, DataType::U8),
            Artifact::Json(s) => Ok(fs::write(path, s)?),
            Artifact::Png(b) => Ok(fs::write(path, b)?),
        }
    }
}

fn to_f32_grid(v: Volume3D) -> Volume3D {
    let data = v.data().iter().map(|&x| x as f32 as f64).collect();
    v.with_data_unchecked(data)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable parameters")
}

struct Runner<'a> {
    out: &'a Path,
    like: Volume3D,
    state: StateFile,
    records: Vec<StageRecord>,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Runs or reuses one stage. `compute` returns the value and the files to
    /// write; `load` rebuilds the value from those files.
    fn stage<T>(
        &mut self,
        name: &str,
        key: String,
        compute: impl FnOnce() -> Result<(T, Vec<(String, Artifact)>)>,
        load: impl FnOnce(&Self) -> Result<T>,
    ) -> Result<T> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        if let Some(prev) = self.state.stages.get(name) {
            if prev.key == key && prev.outputs.iter().all(|o| self.path(o).is_file()) {
                let outputs = prev.outputs.clone();
                let value = load(self).map_err(wrap)?;
                log::info!("stage {name}: reused");
                self.records.push(StageRecord {
                    name: name.into(),
                    key,
                    status: StageStatus::Reused,
                    outputs,
                });
                return Ok(value);
            }
        }
        let started = Instant::now();
        let (value, artifacts) = compute().map_err(wrap)?;
        let mut outputs = Vec::new();
        for (file, art) in &artifacts {
            let partial = self.path(&format!("{file}.partial"));
            art.write(&partial, &self.like).map_err(wrap)?;
            outputs.push(file.clone());
        }
        for file in &outputs {
            fs::rename(self.path(&format!("{file}.partial")), self.path(file)).map_err(|e| wrap(e.into()))?;
        }
        log::info!("stage {name}: ran in {:.2}s", started.elapsed().as_secs_f64());
        self.state.stages.insert(
            name.into(),
            StateEntry {
                key: key.clone(),
                outputs: outputs.clone(),
            },
        );
        self.save_state().map_err(wrap)?;
        self.records.push(StageRecord {
            name: name.into(),
            key,
            status: StageStatus::Ran,
            outputs,
        });
        Ok(value)
    }

    fn save_state(&self) -> Result<()> {
        let tmp = self.path(&format!("{STATE_FILE}.partial"));
        fs::write(&tmp, serde_json::to_string_pretty(&self.state)?)?;
        fs::rename(tmp, self.path(STATE_FILE))?;
        Ok(())
    }

    fn read_image(&self, file: &str) -> Result<Volume3D> {
        nifti::read_volume(self.path(file))
    }

    fn read_mask(&self, file: &str) -> Result<BinaryMask> {
        nifti::read_mask(self.path(file))
    }
}

fn load_input(what: &str, path: &Path) -> Result<Volume3D> {
    nifti::read_volume(path).map_err(|e| Error::Stage {
        stage: format!("load {what}"),
        source: Box::new(e),
    })
}

fn load_mask_input(what: &str, path: &Path, like: &Volume3D) -> Result<BinaryMask> {
    let m = nifti::read_mask(path).map_err(|e| Error::Stage {
        stage: format!("load {what}"),
        source: Box::new(e),
    })?;
    check_dims(like.dims(), m.dims())?;
    Ok(m)
}

/// Runs every stage the inputs allow: preprocessing and the hyperintensity
/// map always; WM estimation when atlases are given; metrics when lesion
/// ground truths are given as well.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let p = &cfg.params;
    let inputs = &cfg.inputs;

    let flair = load_input("flair", &inputs.flair)?;
    let flair_digest = file_digest(&inputs.flair)?;
    let (brain, brain_digest) = match &inputs.brain_mask {
        Some(path) => (load_mask_input("brain-mask", path, &flair)?, file_digest(path)?),
        None => (BinaryMask::threshold(&flair, 0.0), "flair>0".to_string()),
    };
    if brain.is_empty() {
        return Err(Error::domain("brain mask is empty"));
    }

    let state: StateFile = fs::read_to_string(cfg.out_dir.join(STATE_FILE))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    let mut run = Runner {
        out: &cfg.out_dir,
        like: flair.clone(),
        state,
        records: Vec::new(),
    };

    let k_denoise = key_of(&["denoise", &flair_digest, &brain_digest, &json(&p.nlm)]);
    let denoised = run.stage(
        "denoise",
        k_denoise.clone(),
        || {
            let v = to_f32_grid(nlm_denoise(&flair, &brain, &p.nlm)?);
            Ok((v.clone(), vec![("denoised.nii".into(), Artifact::Image(v))]))
        },
        |r| r.read_image("denoised.nii"),
    )?;

    let k_norm = key_of(&["normalize", &k_denoise]);
    let normalized = run.stage(
        "normalize",
        k_norm.clone(),
        || {
            let v = to_f32_grid(normalize_intensity(&denoised, &brain)?);
            Ok((v.clone(), vec![("normalized.nii".into(), Artifact::Image(v))]))
        },
        |r| r.read_image("normalized.nii"),
    )?;

    let k_sobel = key_of(&["sobel", &k_norm]);
    let sobel = run.stage(
        "sobel",
        k_sobel.clone(),
        || {
            let v = to_f32_grid(sobel_magnitude(&normalized)?);
            Ok((v.clone(), vec![("sobel.nii".into(), Artifact::Image(v))]))
        },
        |r| r.read_image("sobel.nii"),
    )?;

    let k_inter = key_of(&["intermediate", &k_norm, &k_sobel, &p.bins.to_string()]);
    let intermediate = run.stage(
        "intermediate",
        k_inter.clone(),
        || {
            let (v, hist): (Volume3D, IntensityHistogram) =
                build_intermediate(&normalized, &sobel, &brain, p.bins)?;
            let v = to_f32_grid(v);
            Ok((
                v.clone(),
                vec![
                    ("intermediate.nii".into(), Artifact::Image(v)),
                    ("histogram.json".into(), Artifact::Json(serde_json::to_string_pretty(&hist)?)),
                ],
            ))
        },
        |r| r.read_image("intermediate.nii"),
    )?;

    let k_hi = key_of(&[
        "himap",
        &k_inter,
        &p.net_radius.to_string(),
        &p.theta_step.to_string(),
        &p.neighborhood_radius.to_string(),
    ]);
    let hi_map = run.stage(
        "himap",
        k_hi.clone(),
        || {
            let net = PointNet::build(&brain, p.net_radius, p.theta_step)?;
            log::info!("point net: {} patches over {} slices", net.len(), net.slices().len());
            let hi = score_map(&intermediate, &brain, &net, p.neighborhood_radius)?;
            let v = to_f32_grid(hi.map);
            Ok((
                v.clone(),
                vec![
                    ("hi_map.nii".into(), Artifact::Image(v)),
                    ("point_net.json".into(), Artifact::Json(serde_json::to_string(&net)?)),
                ],
            ))
        },
        |r| r.read_image("hi_map.nii"),
    )?;

    let mut report = None;
    let mut wm_estimated = None;
    if let (Some(wm_path), Some(gm_path)) = (&inputs.wm_atlas, &inputs.gm_atlas) {
        let atlases = AtlasPair::load(wm_path, gm_path, flair.dims()).map_err(|e| Error::Stage {
            stage: "load atlases".into(),
            source: Box::new(e),
        })?;
        let atlas_digest = format!("{}:{}", file_digest(wm_path)?, file_digest(gm_path)?);

        let k_labels = match &inputs.labels {
            Some(path) => key_of(&["labels-file", &file_digest(path)?, &brain_digest]),
            None => {
                let t1_digest = match &inputs.t1 {
                    Some(t) => file_digest(t)?,
                    None => "-".into(),
                };
                key_of(&[
                    "kmeans",
                    &k_norm,
                    &t1_digest,
                    &p.kmeans_k.to_string(),
                    &p.seed.to_string(),
                ])
            }
        };
        let labels = run.stage(
            "segment",
            k_labels.clone(),
            || {
                let labels = match &inputs.labels {
                    Some(path) => {
                        let v = load_input("labels", path)?;
                        check_dims(flair.dims(), v.dims())?;
                        LabelVolume::from_volume(&v)?.restrict(&brain)?
                    }
                    None => {
                        let t1 = match &inputs.t1 {
                            Some(t) => {
                                let v = load_input("t1", t)?;
                                check_dims(flair.dims(), v.dims())?;
                                Some(v)
                            }
                            None => None,
                        };
                        let mut channels = vec![&normalized];
                        if let Some(t1) = &t1 {
                            channels.push(t1);
                        }
                        initial_segmentation(&channels, &brain, p.kmeans_k, p.seed)?
                    }
                };
                let vol = labels.to_volume();
                Ok((labels, vec![("labels.nii".into(), Artifact::Labels(vol))]))
            },
            |r| LabelVolume::from_volume(&r.read_image("labels.nii")?),
        )?;

        let k_select = key_of(&["select", &k_labels, &atlas_digest]);
        let (wm_initial, gm_initial) = run.stage(
            "select-clusters",
            k_select.clone(),
            || {
                let wm = select_cluster_by_atlas(&labels, &atlases.wm)?;
                let gm = select_cluster_by_atlas(&labels, &atlases.gm)?;
                Ok((
                    (wm.clone(), gm.clone()),
                    vec![
                        ("wm_initial.nii".into(), Artifact::Mask(wm)),
                        ("gm_initial.nii".into(), Artifact::Mask(gm)),
                    ],
                ))
            },
            |r| Ok((r.read_mask("wm_initial.nii")?, r.read_mask("gm_initial.nii")?)),
        )?;

        let k_wm = key_of(&["wm-estimate", &k_select, &k_hi, &atlas_digest, &json(&p.wm)]);
        let estimated = run.stage(
            "wm-estimate",
            k_wm.clone(),
            || {
                let m = estimate_wm(&wm_initial, &hi_map, &atlases.wm, &p.wm, &brain)?;
                log::info!(
                    "wm estimate: {} initial voxels, {} after expansion",
                    wm_initial.count(),
                    m.count()
                );
                Ok((m.clone(), vec![("wm_estimated.nii".into(), Artifact::Mask(m))]))
            },
            |r| r.read_mask("wm_estimated.nii"),
        )?;

        if !inputs.lesion_gt.is_empty() {
            let mut gts = Vec::new();
            let mut gt_digests = Vec::new();
            for (n, path) in inputs.lesion_gt.iter().enumerate() {
                gts.push(load_mask_input(&format!("lesion-gt {}", n + 1), path, &flair)?);
                gt_digests.push(file_digest(path)?);
            }
            let config_json = serde_json::to_value(&cfg.params)?;
            let mut parts = vec!["metrics".to_string(), k_wm.clone(), flair_digest.clone(), k_inter.clone()];
            parts.extend(gt_digests);
            let k_metrics = key_of(&parts.iter().map(String::as_str).collect::<Vec<_>>());
            let metrics = run.stage(
                "metrics",
                k_metrics.clone(),
                || {
                    let r = metrics_for(
                        &flair,
                        &intermediate,
                        &hi_map,
                        &brain,
                        &wm_initial,
                        &gm_initial,
                        &estimated,
                        &gts,
                        &k_metrics,
                        config_json,
                    )?;
                    let text = r.to_json()?;
                    Ok((r, vec![("metrics.json".into(), Artifact::Json(text))]))
                },
                |r| Ok(serde_json::from_str(&fs::read_to_string(r.path("metrics.json"))?)?),
            )?;
            report = Some(metrics);
        }
        wm_estimated = Some(estimated);
    } else {
        log::info!("no atlases given; skipping white-matter estimation and metrics");
    }

    if cfg.overlays {
        let z = cfg.overlay_slice.unwrap_or(flair.dims().nz / 2);
        let mut parts = vec!["overlays".to_string(), k_hi.clone(), flair_digest.clone(), z.to_string()];
        if let Some(m) = &wm_estimated {
            parts.push(hex::encode(Sha256::digest(
                m.data().iter().map(|&b| b as u8).collect::<Vec<_>>(),
            )));
        }
        let k_overlay = key_of(&parts.iter().map(String::as_str).collect::<Vec<_>>());
        run.stage(
            "overlays",
            k_overlay,
            || {
                let mut files = vec![(
                    format!("overlay_flair_z{z}.png"),
                    Artifact::Png(render_overlay_png(&flair, &brain, z)?),
                )];
                let outline = wm_estimated.as_ref().unwrap_or(&brain);
                files.push((
                    format!("overlay_hi_map_z{z}.png"),
                    Artifact::Png(render_overlay_png(&hi_map, outline, z)?),
                ));
                Ok(((), files))
            },
            |_| Ok(()),
        )?;
    }

    Ok(PipelineOutcome {
        stages: run.records,
        report,
    })
}

#[allow(clippy::too_many_arguments)]
fn metrics_for(
    flair: &Volume3D,
    intermediate: &Volume3D,
    hi_map: &Volume3D,
    brain: &BinaryMask,
    wm_initial: &BinaryMask,
    gm_initial: &BinaryMask,
    wm_estimated: &BinaryMask,
    gts: &[BinaryMask],
    config_hash: &str,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let images = [
        ("flair", rescale_unit(flair, brain)?),
        ("intermediate", rescale_unit(intermediate, brain)?),
        ("hi_map", rescale_unit(hi_map, brain)?),
    ];
    let refs: Vec<(&str, &Volume3D)> = images.iter().map(|(n, v)| (*n, v)).collect();
    let mut report: Option<MetricsReport> = None;
    for (e, gt) in gts.iter().enumerate() {
        let expert = format!("expert{}", e + 1);
        let wm_pure = pure_cluster(wm_initial, gt)?;
        let gm_pure = pure_cluster(gm_initial, gt)?;
        let mut r = brightness_report(&refs, gt, &wm_pure, &gm_pure)?;
        for entry in &mut r.metrics.brightness {
            entry.lesion = expert.clone();
        }
        let wm_whole = merge_wm_ground_truth(wm_initial, gt)?;
        for (name, m) in [("wm_initial", wm_initial), ("wm_estimated", wm_estimated)] {
            r.metrics.masks.push(MaskEntry {
                mask: name.into(),
                reference: format!("wm_whole_{expert}"),
                dsc: dsc(&wm_whole, m)?,
                li_percent: lesion_intersection(gt, m)?,
            });
        }
        match &mut report {
            None => report = Some(r),
            Some(acc) => {
                acc.metrics.brightness.extend(r.metrics.brightness);
                acc.metrics.masks.extend(r.metrics.masks);
            }
        }
    }
    let mut report = report.ok_or_else(|| Error::domain("no lesion ground truth"))?;
    report.config_hash = config_hash.to_string();
    report.config = config;
    Ok(report)
}
