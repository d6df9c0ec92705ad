use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lesionmap::himap::{score_map, PointNet};
use lesionmap::metrics::{brightness_report, dsc, lesion_intersection, MaskEntry};
use lesionmap::nifti::{self, AtlasPair, DataType};
use lesionmap::phantom::{generate_phantom, PhantomSpec};
use lesionmap::pipeline::{run_pipeline, PipelineConfig};
use lesionmap::preprocess::{build_intermediate, nlm_denoise, normalize_intensity, sobel_magnitude};
use lesionmap::volume::rescale_unit;
use lesionmap::wmmask::{
    estimate_wm, initial_segmentation, pure_cluster, select_cluster_by_atlas, LabelVolume,
};
use lesionmap::{BinaryMask, Error, Result, Volume3D};

#[derive(Parser)]
#[command(name = "lesionmap", version, about = "FLAIR hyperintensity enhancement and white-matter mask estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k_sigma: Option<f64>,
    #[arg(long, global = true)]
    bins: Option<usize>,
    #[arg(long, global = true)]
    net_radius: Option<usize>,
    #[arg(long, global = true)]
    theta_step: Option<u32>,
    /// NLM noise level.
    #[arg(long, global = true)]
    sigma: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct Inputs {
    #[arg(long)]
    flair: Option<PathBuf>,
    #[arg(long)]
    t1: Option<PathBuf>,
    #[arg(long)]
    brain_mask: Option<PathBuf>,
    #[arg(long)]
    wm_atlas: Option<PathBuf>,
    #[arg(long)]
    gm_atlas: Option<PathBuf>,
    /// Repeat once per expert.
    #[arg(long)]
    lesion_gt: Vec<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Non-local means noise reduction.
    Denoise {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Divide by mean + 3 std of the brain.
    Normalize {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sobel edges and the histogram-remapped intermediate image of a
    /// normalized FLAIR.
    Intermediate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sobel_out: Option<PathBuf>,
    },
    /// Hyperintensity map from an intermediate image (passed as --flair).
    Himap {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// White-matter mask estimation from a hyperintensity map.
    WmEstimate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        hi_map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wm_initial_out: Option<PathBuf>,
    },
    /// IPD, Dice and lesion intersection as JSON.
    Metrics {
        #[command(flatten)]
        inputs: Inputs,
        /// NAME=PATH images to compare; rescaled to [0,1] in the brain.
        #[arg(long = "image", value_parser = parse_named)]
        images: Vec<(String, PathBuf)>,
        #[arg(long)]
        wm_initial: PathBuf,
        #[arg(long)]
        gm_initial: PathBuf,
        #[arg(long)]
        wm_estimated: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic phantom and its ground truth.
    Phantom {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        /// JSON phantom spec; overrides --preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage, reusing up-to-date outputs.
    Pipeline {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_overlays: bool,
        #[arg(long)]
        overlay_slice: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Full,
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.common.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingInput { .. } | Error::Param(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn base_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    let p = &mut cfg.params;
    if let Some(v) = common.seed {
        p.seed = v;
    }
    if let Some(v) = common.k_sigma {
        p.wm.k_sigma = v;
    }
    if let Some(v) = common.bins {
        p.bins = v;
    }
    if let Some(v) = common.net_radius {
        p.net_radius = v;
    }
    if let Some(v) = common.theta_step {
        p.theta_step = v;
    }
    if let Some(v) = common.sigma {
        p.nlm.sigma = v;
    }
    Ok(cfg)
}

fn apply_inputs(cfg: &mut PipelineConfig, inputs: Inputs) {
    let i = &mut cfg.inputs;
    if let Some(v) = inputs.flair {
        i.flair = v;
    }
    if inputs.t1.is_some() {
        i.t1 = inputs.t1;
    }
    if inputs.brain_mask.is_some() {
        i.brain_mask = inputs.brain_mask;
    }
    if inputs.wm_atlas.is_some() {
        i.wm_atlas = inputs.wm_atlas;
    }
    if inputs.gm_atlas.is_some() {
        i.gm_atlas = inputs.gm_atlas;
    }
    if !inputs.lesion_gt.is_empty() {
        i.lesion_gt = inputs.lesion_gt;
    }
    if inputs.labels.is_some() {
        i.labels = inputs.labels;
    }
}

fn required(what: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
    match path {
        Some(p) if p.is_file() => Ok(p.clone()),
        Some(p) => Err(Error::MissingInput {
            what: what.into(),
            path: p.clone(),
        }),
        None => Err(Error::MissingInput {
            what: what.into(),
            path: PathBuf::new(),
        }),
    }
}

/// FLAIR-like input plus the brain mask (positive voxels when not given).
fn image_and_brain(cfg: &PipelineConfig) -> Result<(Volume3D, BinaryMask)> {
    let flair_path = cfg.inputs.flair.clone();
    let flair = nifti::read_volume(required("flair", &Some(flair_path))?)?;
    let brain = match &cfg.inputs.brain_mask {
        Some(_) => nifti::read_mask(required("brain-mask", &cfg.inputs.brain_mask)?)?,
        None => BinaryMask::threshold(&flair, 0.0),
    };
    Ok((flair, brain))
}

fn write_image(v: &Volume3D, path: &Path) -> Result<()> {
    nifti::write_volume(v, path, DataType::F32)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli.common)?;
    match cli.command {
        Command::Denoise { inputs, out } => {
            apply_inputs(&mut cfg, inputs);
            cfg.params.nlm.validate()?;
            let (flair, brain) = image_and_brain(&cfg)?;
            write_image(&nlm_denoise(&flair, &brain, &cfg.params.nlm)?, &out)
        }
        Command::Normalize { inputs, out } => {
            apply_inputs(&mut cfg, inputs);
            let (flair, brain) = image_and_brain(&cfg)?;
            write_image(&normalize_intensity(&flair, &brain)?, &out)
        }
        Command::Intermediate {
            inputs,
            out,
            sobel_out,
        } => {
            apply_inputs(&mut cfg, inputs);
            let (flair, brain) = image_and_brain(&cfg)?;
            let sobel = sobel_magnitude(&flair)?;
            if let Some(p) = sobel_out {
                write_image(&sobel, &p)?;
            }
            let (img, _) = build_intermediate(&flair, &sobel, &brain, cfg.params.bins)?;
            write_image(&img, &out)
        }
        Command::Himap { inputs, out } => {
            apply_inputs(&mut cfg, inputs);
            let (inter, brain) = image_and_brain(&cfg)?;
            let p = &cfg.params;
            let net = PointNet::build(&brain, p.net_radius, p.theta_step)?;
            let hi = score_map(&inter, &brain, &net, p.neighborhood_radius)?;
            write_image(&hi.map, &out)
        }
        Command::WmEstimate {
            inputs,
            hi_map,
            out,
            wm_initial_out,
        } => {
            apply_inputs(&mut cfg, inputs);
            let (flair, brain) = image_and_brain(&cfg)?;
            let hi = nifti::read_volume(required("hi-map", &Some(hi_map))?)?;
            let atlas = nifti::read_volume(required("wm-atlas", &cfg.inputs.wm_atlas)?)?;
            let atlas = AtlasPair::new(atlas.clone(), atlas)?.wm;
            let labels = match &cfg.inputs.labels {
                Some(p) => LabelVolume::from_volume(&nifti::read_volume(p)?)?.restrict(&brain)?,
                None => {
                    let t1 = match &cfg.inputs.t1 {
                        Some(p) => Some(nifti::read_volume(p)?),
                        None => None,
                    };
                    let mut ch = vec![&flair];
                    if let Some(t) = &t1 {
                        ch.push(t);
                    }
                    initial_segmentation(&ch, &brain, cfg.params.kmeans_k, cfg.params.seed)?
                }
            };
            let wm_initial = select_cluster_by_atlas(&labels, &atlas)?;
            if let Some(p) = wm_initial_out {
                nifti::write_mask(&wm_initial, p, Some(&flair))?;
            }
            let est = estimate_wm(&wm_initial, &hi, &atlas, &cfg.params.wm, &brain)?;
            nifti::write_mask(&est, &out, Some(&flair))?;
            log::info!("wrote {} ({} voxels)", out.display(), est.count());
            Ok(())
        }
        Command::Metrics {
            inputs,
            images,
            wm_initial,
            gm_initial,
            wm_estimated,
            out,
        } => {
            apply_inputs(&mut cfg, inputs);
            let brain = nifti::read_mask(required("brain-mask", &cfg.inputs.brain_mask)?)?;
            let wm_initial = nifti::read_mask(required("wm-initial", &Some(wm_initial))?)?;
            let gm_initial = nifti::read_mask(required("gm-initial", &Some(gm_initial))?)?;
            let estimated = match wm_estimated {
                Some(p) => Some(nifti::read_mask(required("wm-estimated", &Some(p))?)?),
                None => None,
            };
            let mut loaded = Vec::new();
            for (name, path) in images {
                let v = nifti::read_volume(required(&format!("image {name}"), &Some(path))?)?;
                loaded.push((name, rescale_unit(&v, &brain)?));
            }
            let refs: Vec<(&str, &Volume3D)> = loaded.iter().map(|(n, v)| (n.as_str(), v)).collect();
            if cfg.inputs.lesion_gt.is_empty() {
                return Err(Error::MissingInput {
                    what: "lesion-gt".into(),
                    path: PathBuf::new(),
                });
            }
            let mut report = None::<lesionmap::metrics::MetricsReport>;
            for (e, path) in cfg.inputs.lesion_gt.iter().enumerate() {
                let gt = nifti::read_mask(required("lesion-gt", &Some(path.clone()))?)?;
                let expert = format!("expert{}", e + 1);
                let mut r = brightness_report(
                    &refs,
                    &gt,
                    &pure_cluster(&wm_initial, &gt)?,
                    &pure_cluster(&gm_initial, &gt)?,
                )?;
                r.metrics.brightness.iter_mut().for_each(|b| b.lesion = expert.clone());
                let whole = wm_initial.union(&gt)?;
                let mut masks = vec![("wm_initial", &wm_initial)];
                if let Some(est) = &estimated {
                    masks.push(("wm_estimated", est));
                }
                for (name, m) in masks {
                    r.metrics.masks.push(MaskEntry {
                        mask: name.into(),
                        reference: format!("wm_whole_{expert}"),
                        dsc: dsc(&whole, m)?,
                        li_percent: lesion_intersection(&gt, m)?,
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
            let mut report = report.expect("at least one lesion ground truth");
            report.config = serde_json::to_value(&cfg.params)?;
            report.config_hash = {
                use sha2::{Digest, Sha256};
                hex::encode(Sha256::digest(report.config.to_string().as_bytes()))
            };
            std::fs::write(&out, report.to_json()?)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Phantom {
            preset,
            spec,
            noise_sigma,
            out,
        } => {
            let mut spec = match (spec, preset) {
                (Some(p), _) => PhantomSpec::from_json_file(p)?,
                (None, Preset::Default) => PhantomSpec::default(),
                (None, Preset::Full) => PhantomSpec::full_size(),
            };
            if let Some(s) = cli.common.seed {
                spec.seed = s;
            }
            if let Some(n) = noise_sigma {
                spec.noise_sigma = n;
            }
            let ph = generate_phantom(&spec)?;
            std::fs::create_dir_all(&out)?;
            write_image(&ph.flair, &out.join("flair.nii"))?;
            write_image(&ph.t1, &out.join("t1.nii"))?;
            write_image(&ph.wm_atlas, &out.join("wm_atlas.nii"))?;
            write_image(&ph.gm_atlas, &out.join("gm_atlas.nii"))?;
            for (name, m) in [
                ("brain_mask", &ph.brain),
                ("wm_truth", &ph.wm),
                ("gm_truth", &ph.gm),
                ("csf_truth", &ph.csf),
                ("lesion_truth", &ph.lesion),
            ] {
                nifti::write_mask(m, out.join(format!("{name}.nii")), Some(&ph.flair))?;
            }
            std::fs::write(out.join("phantom_spec.json"), serde_json::to_string_pretty(&spec)?)?;
            log::info!("phantom written to {}", out.display());
            Ok(())
        }
        Command::Pipeline {
            inputs,
            out,
            no_overlays,
            overlay_slice,
        } => {
            apply_inputs(&mut cfg, inputs);
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if no_overlays {
                cfg.overlays = false;
            }
            if overlay_slice.is_some() {
                cfg.overlay_slice = overlay_slice;
            }
            let outcome = run_pipeline(&cfg)?;
            for s in &outcome.stages {
                log::info!("{:>16}: {:?}", s.name, s.status);
            }
            if let Some(r) = &outcome.report {
                for m in &r.metrics.masks {
                    log::info!("{} vs {}: DSC {:.4}, LI {:.2}%", m.mask, m.reference, m.dsc, m.li_percent);
                }
                for b in &r.metrics.brightness {
                    log::info!("IPD {} ({}, {:?}): {:.2}%", b.image, b.lesion, b.tissue, b.ipd_percent);
                }
            }
            Ok(())
        }
    }
}
