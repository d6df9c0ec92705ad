#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lesionmap::nifti::{self, DataType};
use lesionmap::phantom::{generate_phantom, Phantom, PhantomSpec};
use lesionmap::pipeline::{PipelineConfig, PipelineInputs};

/// Writes a phantom's inputs and truths under `dir` and returns a pipeline
/// configuration that reads them and writes to `dir/out`.
pub fn phantom_config(dir: &Path, spec: &PhantomSpec) -> (PipelineConfig, Phantom) {
    let ph = generate_phantom(spec).expect("phantom");
    std::fs::create_dir_all(dir).unwrap();
    let p = |name: &str| dir.join(name);
    nifti::write_volume(&ph.flair, p("flair.nii"), DataType::F32).unwrap();
    nifti::write_volume(&ph.t1, p("t1.nii"), DataType::F32).unwrap();
    nifti::write_volume(&ph.wm_atlas, p("wm_atlas.nii"), DataType::F32).unwrap();
    nifti::write_volume(&ph.gm_atlas, p("gm_atlas.nii"), DataType::F32).unwrap();
    nifti::write_mask(&ph.brain, p("brain_mask.nii"), Some(&ph.flair)).unwrap();
    nifti::write_mask(&ph.lesion, p("lesion_truth.nii"), Some(&ph.flair)).unwrap();
    let cfg = PipelineConfig {
        inputs: PipelineInputs {
            flair: p("flair.nii"),
            t1: Some(p("t1.nii")),
            brain_mask: Some(p("brain_mask.nii")),
            wm_atlas: Some(p("wm_atlas.nii")),
            gm_atlas: Some(p("gm_atlas.nii")),
            lesion_gt: vec![p("lesion_truth.nii")],
            labels: None,
        },
        out_dir: p("out"),
        ..PipelineConfig::default()
    };
    (cfg, ph)
}

/// Sorted regular files of a directory.
pub fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    v
}
