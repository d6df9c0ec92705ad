mod common;

use std::process::Command;

use lesionmap::nifti::{self, DataType};
use lesionmap::phantom::PhantomSpec;
use lesionmap::pipeline::{run_pipeline, PipelineConfig, StageStatus};
use lesionmap::{Error, Volume3D};

const STAGES: [&str; 10] = [
    "denoise",
    "normalize",
    "sobel",
    "intermediate",
    "himap",
    "segment",
    "select-clusters",
    "wm-estimate",
    "metrics",
    "overlays",
];

const ARTIFACTS: [&str; 15] = [
    "denoised.nii",
    "normalized.nii",
    "sobel.nii",
    "intermediate.nii",
    "histogram.json",
    "hi_map.nii",
    "point_net.json",
    "labels.nii",
    "wm_initial.nii",
    "gm_initial.nii",
    "wm_estimated.nii",
    "metrics.json",
    "overlay_flair_z24.png",
    "overlay_hi_map_z24.png",
    "pipeline_state.json",
];

fn snapshot(cfg: &PipelineConfig) -> Vec<(String, Vec<u8>)> {
    common::files_in(&cfg.out_dir)
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
        .collect()
}

#[test]
fn full_run_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ph) = common::phantom_config(dir.path(), &PhantomSpec::default());

    let first = run_pipeline(&cfg).unwrap();
    for s in STAGES {
        assert_eq!(first.status_of(s), Some(StageStatus::Ran), "{s}");
    }
    for a in ARTIFACTS {
        assert!(cfg.out_dir.join(a).is_file(), "missing {a}");
    }
    assert!(!common::files_in(&cfg.out_dir)
        .iter()
        .any(|p| p.extension().is_some_and(|e| e == "partial")));
    let before = snapshot(&cfg);

    // everything up to date: nothing recomputed, nothing rewritten
    let second = run_pipeline(&cfg).unwrap();
    for s in STAGES {
        assert_eq!(second.status_of(s), Some(StageStatus::Reused), "{s}");
    }
    assert_eq!(snapshot(&cfg), before);
    assert_eq!(first.report.unwrap().to_json().unwrap(), second.report.unwrap().to_json().unwrap());

    // a changed threshold only invalidates the stages downstream of it
    let mut loose = cfg.clone();
    loose.params.wm.k_sigma = 1.0;
    let third = run_pipeline(&loose).unwrap();
    for s in ["denoise", "normalize", "sobel", "intermediate", "himap", "segment", "select-clusters"] {
        assert_eq!(third.status_of(s), Some(StageStatus::Reused), "{s}");
    }
    assert_eq!(third.status_of("wm-estimate"), Some(StageStatus::Ran));
    let loose_mask = nifti::read_mask(cfg.out_dir.join("wm_estimated.nii")).unwrap();
    let strict_mask = {
        let (name, bytes) = before.iter().find(|(n, _)| n == "wm_estimated.nii").unwrap();
        let p = dir.path().join(format!("strict_{name}"));
        std::fs::write(&p, bytes).unwrap();
        nifti::read_mask(p).unwrap()
    };
    assert!(strict_mask.is_subset_of(&loose_mask));
    assert!(strict_mask.count() < loose_mask.count());

    // a resumed run after losing one output recomputes just that stage
    std::fs::remove_file(cfg.out_dir.join("hi_map.nii")).unwrap();
    let fourth = run_pipeline(&cfg).unwrap();
    assert_eq!(fourth.status_of("intermediate"), Some(StageStatus::Reused));
    assert_eq!(fourth.status_of("himap"), Some(StageStatus::Ran));
    assert_eq!(fourth.status_of("wm-estimate"), Some(StageStatus::Ran));
    assert_eq!(snapshot(&cfg), before);

    // metrics document layout
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out_dir.join("metrics.json")).unwrap()).unwrap();
    for key in ["images", "metrics", "config_hash", "config"] {
        assert!(json.get(key).is_some(), "metrics.json lacks {key}");
    }
    assert_eq!(json["images"], serde_json::json!(["flair", "intermediate", "hi_map"]));
    assert_eq!(json["metrics"]["brightness"].as_array().unwrap().len(), 6);
    assert_eq!(json["config_hash"].as_str().unwrap().len(), 64);

    // WM_initial is the white-matter tier of the phantom
    let wm_initial = nifti::read_mask(cfg.out_dir.join("wm_initial.nii")).unwrap();
    assert_eq!(wm_initial, ph.wm);
}

#[test]
fn overlays_are_reproducible_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _) = common::phantom_config(dir.path(), &PhantomSpec::default());
    cfg.overlay_slice = Some(20);
    run_pipeline(&cfg).unwrap();
    let name = "overlay_hi_map_z20.png";
    let golden = std::fs::read(cfg.out_dir.join(name)).unwrap();

    let mut again = cfg.clone();
    again.out_dir = dir.path().join("again");
    run_pipeline(&again).unwrap();
    assert_eq!(std::fs::read(again.out_dir.join(name)).unwrap(), golden);

    let decoder = png::Decoder::new(std::io::Cursor::new(&golden));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (64, 64));
    assert_eq!(info.color_type, png::ColorType::Rgb);
    let red = buf[..info.buffer_size()]
        .chunks(3)
        .filter(|p| *p == lesionmap::overlay::OUTLINE)
        .count();
    assert!(red > 0, "no mask outline drawn");
}

#[test]
fn missing_input_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _) = common::phantom_config(dir.path(), &PhantomSpec::default());
    cfg.inputs.flair = dir.path().join("absent.nii");
    match run_pipeline(&cfg) {
        Err(Error::MissingInput { what, path }) => {
            assert_eq!(what, "flair");
            assert!(path.ends_with("absent.nii"));
        }
        other => panic!("expected missing input, got {other:?}"),
    }
    assert!(!cfg.out_dir.join("denoised.nii").exists());
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lesionmap"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(["pipeline", "--flair"])
        .arg(dir.path().join("nope.nii"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("flair") && err.contains("nope.nii"), "{err}");

    // a flat image has no intensity range to remap: the intermediate stage fails
    let flat = Volume3D::filled(lesionmap::Dims::new(12, 12, 12).unwrap(), 100.0);
    let flat_path = dir.path().join("flat.nii");
    nifti::write_volume(&flat, &flat_path, DataType::F32).unwrap();
    let out = cli()
        .args(["pipeline", "--no-overlays", "--flair"])
        .arg(&flat_path)
        .arg("--out")
        .arg(dir.path().join("flat_out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `intermediate`"), "{err}");

    let out = cli().args(["pipeline", "--theta-step", "7", "--flair"]).arg(&flat_path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_phantom_then_stagewise_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let run = |args: &[&std::ffi::OsStr]| {
        let out = cli().args(args).output().unwrap();
        assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    };
    let os = |s: &str| std::ffi::OsString::from(s);
    let ph = d("ph");
    run(&[&os("phantom"), &os("--noise-sigma"), &os("5"), &os("--out"), ph.as_os_str()]);
    for f in ["flair.nii", "t1.nii", "brain_mask.nii", "wm_atlas.nii", "gm_atlas.nii", "lesion_truth.nii", "phantom_spec.json"] {
        assert!(ph.join(f).is_file(), "{f}");
    }
    let brain = ph.join("brain_mask.nii");
    let norm = d("norm.nii");
    run(&[&os("normalize"), &os("--flair"), ph.join("flair.nii").as_os_str(), &os("--brain-mask"), brain.as_os_str(), &os("--out"), norm.as_os_str()]);
    let inter = d("inter.nii");
    run(&[&os("intermediate"), &os("--bins"), &os("256"), &os("--flair"), norm.as_os_str(), &os("--brain-mask"), brain.as_os_str(), &os("--out"), inter.as_os_str()]);
    let hi = d("hi.nii");
    run(&[&os("himap"), &os("--flair"), inter.as_os_str(), &os("--brain-mask"), brain.as_os_str(), &os("--out"), hi.as_os_str()]);
    let v = nifti::read_volume(&hi).unwrap();
    let (lo, hi_max) = v.min_max();
    assert!(lo >= 0.0 && hi_max <= 1.0 && hi_max > 0.0);
}
