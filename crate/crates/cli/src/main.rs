use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use neffbio::bionet::{extract_surface_features, SurfacePointCloud};
use neffbio::dataio::{
    crop_plot_points, extract_plot_views, load_plots, read_ply, synth_scene, write_ply, Rgb8Image, SceneBundle,
    SynthSpec,
};
use neffbio::eval::{feature_pca_rgb, image_metrics, regression_metrics, ImageView};
use neffbio::fields::FieldConfig;
use neffbio::parallel::run_single_threaded;
use neffbio::render::{render_image, RenderSettings};
use neffbio::train::{load_bionet, load_fields, train_bionet, train_neff, LabeledCloud, RunConfig};
use neffbio::{Error, Result};

#[derive(Parser)]
#[command(name = "neffbio", version, about = "Neural feature fields and biomass regression")]
struct Cli {
    /// Single-threaded execution for bit-exact reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sphere-on-ground scene bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 96)]
        resolution: usize,
        #[arg(long, default_value_t = 64)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra views between the training views, written to `<out>/holdout`.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// JSON scene description replacing the default primitives.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the field networks. Extra `--key=value` arguments override the config.
    TrainNeff {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(hide = true)]
        overrides: Vec<String>,
    },
    /// Render color, feature and depth images of every camera of a scene.
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Export zero-level-set points and features of a trained field as PLY.
    ExtractSurface {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        grid_res: usize,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
    },
    /// Train the biomass network on labeled clouds listed in a plot manifest.
    TrainBionet {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        plots: PathBuf,
        #[arg(hide = true)]
        overrides: Vec<String>,
    },
    /// Predict biomass for PLY clouds.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        cloud: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select the views and crop the sparse points of each plot of a scene.
    ExtractPlots {
        #[arg(long)]
        scene: PathBuf,
        /// Plot file; defaults to the scene's own `plots.json`.
        #[arg(long)]
        plots: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regression metrics of predictions, or image metrics of rendered views.
    Eval {
        /// Predictions written by `predict`.
        #[arg(long, requires = "labels")]
        pred: Option<PathBuf>,
        /// Plot manifest with ground-truth biomass.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, requires = "scene", conflicts_with = "pred")]
        run: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

/// Plot manifest entry for `train-bionet`.
#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    cloud: PathBuf,
    biomass_grams: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    plots: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    plot_id: String,
    biomass_grams: f64,
    checkpoint: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data { .. } | Error::Io { .. } | Error::InvalidArgument(_) => 3,
        Error::NumericalFailure { .. } | Error::NonFiniteGradient { .. } => 4,
        Error::Shape { .. } | Error::NonScalarLoss(_) => 1,
    }
}

/// Moves `--key=value` arguments of the training subcommands into their
/// positional override list, leaving the subcommand's own flags to clap.
fn split_overrides(args: Vec<String>) -> Vec<String> {
    let train = args.iter().any(|a| a == "train-neff" || a == "train-bionet");
    if !train {
        return args;
    }
    let own = ["--config=", "--plots="];
    let (mut keep, mut extra) = (Vec::new(), Vec::new());
    for a in args {
        if a.starts_with("--") && a.contains('=') && !own.iter().any(|o| a.starts_with(o)) {
            extra.push(a[2..].to_string());
        } else {
            keep.push(a);
        }
    }
    if !extra.is_empty() {
        keep.push("--".into());
        keep.extend(extra);
    }
    keep
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(split_overrides(std::env::args().collect()));
    let deterministic = cli.deterministic;
    let result = if deterministic {
        run_single_threaded(|| run(cli.command, deterministic))
    } else {
        run(cli.command, deterministic)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.into(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn load_config(path: Option<&Path>, overrides: &[String], deterministic: bool) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    cfg.deterministic |= deterministic;
    Ok(cfg)
}

fn run(command: Command, deterministic: bool) -> Result<()> {
    match command {
        Command::Synth {
            out,
            views,
            resolution,
            feature_dim,
            seed,
            holdout,
            spec,
        } => {
            let spec = match spec {
                Some(p) => SynthSpec {
                    feature_dim,
                    ..read_json(&p)?
                },
                None => SynthSpec::sphere_on_plane(feature_dim),
            };
            let (bundle, scene) = synth_scene(&spec, views, resolution, seed)?;
            bundle.save(&out)?;
            if holdout > 0 {
                let cams = scene.view_circle(holdout, resolution, std::f64::consts::PI / views as f64);
                let held = scene.bundle_for(cams, bundle.sparse_points.clone())?;
                held.save(&out.join("holdout"))?;
            }
            log::info!("wrote {} views to {}", views, out.display());
            Ok(())
        }
        Command::TrainNeff { config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides, deterministic)?;
            let scene = cfg
                .scene
                .clone()
                .ok_or_else(|| Error::Config("`scene` is required for train-neff".into()))?;
            let bundle = SceneBundle::load(&scene)?;
            let run = train_neff(&bundle, &cfg, Some(&cfg.output))?;
            if let Some(last) = run.history.last() {
                log::info!("final loss {:.5} (color {:.5})", last.total, last.color);
            }
            Ok(())
        }
        Command::Render {
            run,
            scene,
            out,
            samples,
        } => {
            let fields = load_fields(read_json::<FieldConfig>(&run.join("fields.json"))?, &run.join("neff.nfbk"))?;
            let bundle = SceneBundle::load(&scene)?;
            mkdir(&out)?;
            let settings = RenderSettings {
                samples_per_ray: samples,
                ..RenderSettings::default()
            };
            for (k, cam) in bundle.cameras.iter().enumerate() {
                let img = render_image(&fields, cam, &settings, k as u64)?;
                save_render(&out, &cam.name, &img)?;
            }
            Ok(())
        }
        Command::ExtractSurface {
            run,
            out,
            grid_res,
            tau,
        } => {
            let fields = load_fields(read_json::<FieldConfig>(&run.join("fields.json"))?, &run.join("neff.nfbk"))?;
            let cloud = extract_surface_features(&fields, grid_res, tau)?;
            write_ply(&out, &cloud.points, &cloud.features, cloud.channels)?;
            log::info!("wrote {} surface points to {}", cloud.len(), out.display());
            Ok(())
        }
        Command::TrainBionet {
            config,
            plots,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides, deterministic)?;
            let manifest: Manifest = read_json(&plots)?;
            let base = plots.parent().unwrap_or(Path::new("."));
            let labeled = manifest
                .plots
                .into_iter()
                .map(|e| {
                    let (points, features, c) = read_ply(&base.join(&e.cloud))?;
                    Ok(LabeledCloud {
                        id: e.id,
                        cloud: SurfacePointCloud::new(points, features, c)?,
                        biomass: e.biomass_grams,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let run = train_bionet(&labeled, &cfg, Some(&cfg.output))?;
            log::info!(
                "training MAE {:.3} g, MARE {:.4}, RMSE {:.3} g",
                run.metrics.mae,
                run.metrics.mare,
                run.metrics.rmse
            );
            Ok(())
        }
        Command::Predict { run, cloud, out } => {
            let ckpt = run.join("bionet.nfbk");
            let net = load_bionet(read_json(&run.join("bionet.json"))?, &ckpt)?;
            let mut preds = Vec::with_capacity(cloud.len());
            for path in &cloud {
                let (points, features, c) = read_ply(path)?;
                let m = net.predict_cloud(&SurfacePointCloud::new(points, features, c)?)?;
                preds.push(Prediction {
                    plot_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    biomass_grams: m,
                    checkpoint: ckpt.display().to_string(),
                });
            }
            match out {
                Some(p) => write_json(&p, &preds),
                None => {
                    println!("{}", serde_json::to_string_pretty(&preds).expect("serializable"));
                    Ok(())
                }
            }
        }
        Command::ExtractPlots { scene, plots, out } => {
            let bundle = SceneBundle::load(&scene)?;
            let records = match plots {
                Some(p) => load_plots(&p)?,
                None => bundle
                    .plots
                    .clone()
                    .ok_or_else(|| Error::Config("scene has no plots.json; pass --plots".into()))?,
            };
            mkdir(&out)?;
            let mut summary = Vec::with_capacity(records.len());
            for r in &records {
                let views = extract_plot_views(&bundle.cameras, &r.spec)?;
                let hl = r.half_length.unwrap_or(r.spec.along_threshold);
                let hw = r.half_width.unwrap_or(r.spec.lateral_threshold);
                let pts = crop_plot_points(&bundle.sparse_points, &r.spec, hl, hw)?;
                write_ply(&out.join(format!("{}_points.ply", r.id)), &pts, &[], 0)?;
                summary.push(serde_json::json!({
                    "id": r.id,
                    "views": views.iter().map(|&i| bundle.cameras[i].name.clone()).collect::<Vec<_>>(),
                    "points": pts.len(),
                }));
            }
            write_json(&out.join("plots_extracted.json"), &summary)
        }
        Command::Eval {
            pred,
            labels,
            run,
            scene,
            out,
            samples,
        } => match (pred, labels, run, scene) {
            (Some(pred), Some(labels), _, _) => {
                let preds: Vec<Prediction> = read_json(&pred)?;
                let manifest: Manifest = read_json(&labels)?;
                let (mut p, mut g) = (Vec::new(), Vec::new());
                for e in &manifest.plots {
                    let hit = preds
                        .iter()
                        .find(|q| q.plot_id == e.id)
                        .ok_or_else(|| Error::Data {
                            path: pred.clone(),
                            message: format!("no prediction for plot {}", e.id),
                        })?;
                    p.push(hit.biomass_grams);
                    g.push(e.biomass_grams);
                }
                write_json(&out, &regression_metrics(&p, &g)?)
            }
            (_, _, Some(run), Some(scene)) => {
                let fields = load_fields(read_json::<FieldConfig>(&run.join("fields.json"))?, &run.join("neff.nfbk"))?;
                let bundle = SceneBundle::load(&scene)?;
                mkdir(&out)?;
                let settings = RenderSettings {
                    samples_per_ray: samples,
                    ..RenderSettings::default()
                };
                let mut rows = Vec::new();
                for (k, cam) in bundle.cameras.iter().enumerate() {
                    let img = render_image(&fields, cam, &settings, k as u64)?;
                    let gt = bundle.images[k].to_unit();
                    let a = ImageView::new(img.width, img.height, 3, &img.color)?;
                    let b = ImageView::new(img.width, img.height, 3, &gt)?;
                    let (psnr, ssim) = image_metrics(&a, &b)?;
                    save_render(&out, &cam.name, &img)?;
                    rows.push(serde_json::json!({ "view": cam.name, "psnr": psnr, "ssim": ssim }));
                }
                let n = rows.len().max(1) as f64;
                let mean = |k: &str| rows.iter().map(|r| r[k].as_f64().unwrap_or(0.0)).sum::<f64>() / n;
                let report = serde_json::json!({ "mean_psnr": mean("psnr"), "mean_ssim": mean("ssim"), "views": rows });
                write_json(&out.join("metrics.json"), &report)
            }
            _ => Err(Error::Config("eval needs --pred with --labels, or --run with --scene".into())),
        },
    }
}

fn save_render(dir: &Path, name: &str, img: &neffbio::render::RenderedImage) -> Result<()> {
    let (w, h) = (img.width, img.height);
    Rgb8Image::from_unit(w, h, &img.color).save_png(&dir.join(format!("{name}_color.png")))?;
    if img.feature_dim >= 3 {
        let pca = feature_pca_rgb(&img.feature, h, w, img.feature_dim)?;
        Rgb8Image::from_unit(w, h, &pca).save_png(&dir.join(format!("{name}_feature.png")))?;
    }
    let span = (img.t_far - img.t_near).max(1e-12);
    let depth: Vec<f64> = img
        .depth
        .iter()
        .flat_map(|d| {
            let v = ((d - img.t_near) / span).clamp(0.0, 1.0);
            [v, v, v]
        })
        .collect();
    Rgb8Image::from_unit(w, h, &depth).save_png(&dir.join(format!("{name}_depth.png")))
}
