//! Command-line front end: dataset synthesis, training, rendering, evaluation
//! and rig calibration.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rgbt::calibration::{calibrate_rig, metric_scale, TargetSpec, ViewDetections};
use rgbt::dataset::{CameraRecord, Dataset};
use rgbt::eval::evaluate;
use rgbt::field::{Coupling, MultispectralField};
use rgbt::geometry::{Camera, Spectrum};
use rgbt::image::Image;
use rgbt::renderer::{render_image, render_revealed, ImageChannels, RenderSettings};
use rgbt::synth::{generate_dataset, DatasetSpec, SceneRegistry};
use rgbt::trainer::{TrainConfig, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Mirrors `rgbt::renderer::DEFAULT_REVEAL_EPSILON`; clap needs a string.
const DEFAULT_REVEAL_EPSILON_STR: &str = "5";

#[derive(Parser)]
#[command(name = "rgbt", version, about = "RGB + thermal voxel radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    Separate,
    Shared,
    Independent,
}

impl From<CouplingArg> for Coupling {
    fn from(c: CouplingArg) -> Self {
        match c {
            CouplingArg::Separate => Coupling::Separate,
            CouplingArg::Shared => Coupling::Shared,
            CouplingArg::Independent => Coupling::Independent,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Cc,
    Sigma,
    Tv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpectrumArg {
    Rgb,
    Thermal,
    Rgbt,
}

#[derive(Subcommand)]
enum Command {
    /// Render a built-in analytic scene into a dataset directory.
    Synth {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        thermal_downscale: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// RGB frame width and height.
        #[arg(long)]
        size: Option<u32>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Fit a field to a dataset; writes field.msrf, losses.csv and metrics.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        coupling: Option<CouplingArg>,
        /// Flat `key = value` file with TrainConfig fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Zero one regularizer weight.
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Train on only the first N thermal training views.
        #[arg(long)]
        thermal_views: Option<usize>,
    },
    /// Render one view of a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Frame id from --data, or a camera JSON file.
        #[arg(long)]
        camera: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "rgbt")]
        spectrum: SpectrumArg,
        /// Also write expected depth.
        #[arg(long)]
        depth: bool,
        /// Mask densities to where the spectra agree within EPS (1/m); a bare
        /// `--reveal` uses the library default.
        #[arg(long, value_name = "EPS", num_args = 0..=1, default_missing_value = DEFAULT_REVEAL_EPSILON_STR)]
        reveal: Option<f64>,
        /// Output stem; writes `<stem>.rgb.png`, `<stem>.thermal.pfm`, `<stem>.<spectrum>.depth.pfm`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 192)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR/SSIM of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 192)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Intrinsics, distortion and thermal-from-RGB transform from target detections.
    Calibrate {
        #[arg(long)]
        detections: PathBuf,
        /// TargetSpec JSON; the 11×4, 38 mm grid when omitted.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// RGB image size as WxH.
        #[arg(long, value_parser = parse_size)]
        rgb_size: (u32, u32),
        /// Thermal image size as WxH.
        #[arg(long, value_parser = parse_size)]
        thermal_size: (u32, u32),
        /// Two frame ids of --data whose camera distance was measured.
        #[arg(long, value_delimiter = ',', num_args = 2, requires_all = ["measured_m", "data"])]
        scale_pair: Option<Vec<String>>,
        #[arg(long)]
        measured_m: Option<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(w)?, p(h)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(scene: String, out: PathBuf, downscale: Option<u32>, seed: u64, size: Option<u32>, n_train: Option<usize>, n_test: Option<usize>) -> Result<()> {
    let mut spec = DatasetSpec::new(&scene);
    spec.seed = seed;
    if let Some(d) = downscale {
        spec.thermal_downscale = d;
    }
    if let Some(s) = size {
        spec.rgb_width = s;
        spec.rgb_height = s;
    }
    spec.n_train = n_train.unwrap_or(spec.n_train);
    spec.n_test = n_test.unwrap_or(spec.n_test);
    let ds = generate_dataset(&spec, &out)?;
    println!("wrote {} frames of `{scene}` to {}", ds.frames.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: PathBuf,
    out: PathBuf,
    coupling: Option<CouplingArg>,
    config: Option<PathBuf>,
    ablate: Option<Ablation>,
    iterations: Option<usize>,
    seed: Option<u64>,
    resolution: Option<usize>,
    workers: Option<usize>,
    thermal_views: Option<usize>,
) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(c) = coupling {
        cfg.coupling = c.into();
    }
    match ablate {
        Some(Ablation::Cc) => cfg.lambda_cc = 0.0,
        Some(Ablation::Sigma) => {
            cfg.lambda_sigma_rgb = 0.0;
            cfg.lambda_sigma_therm = 0.0;
        }
        Some(Ablation::Tv) => cfg.lambda_tv = 0.0,
        None => {}
    }
    cfg.iterations = iterations.unwrap_or(cfg.iterations);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.resolution = resolution.unwrap_or(cfg.resolution);
    cfg.workers = workers.unwrap_or(cfg.workers);
    cfg.validate()?;
    let mut dataset = Dataset::load(&data)?;
    if let Some(n) = thermal_views {
        dataset = dataset.with_thermal_train_limit(n);
    }
    std::fs::create_dir_all(&out)?;
    let registry = rgbt::coupling::CouplingRegistry::with_builtins();
    let mut trainer = Trainer::new(&dataset, cfg.clone(), &registry)?;
    let mut report = trainer.run(&dataset)?;
    let ckpt = out.join("field.msrf");
    trainer.field.save(&ckpt)?;
    report.checkpoint = Some(ckpt.display().to_string());
    write_text(&out.join("config.toml"), &cfg.to_toml_string())?;
    write_text(&out.join("losses.csv"), &report.losses_csv())?;
    write_text(&out.join("metrics.json"), &(serde_json::to_string_pretty(&report.metrics)? + "\n"))?;
    match &report.metrics {
        Some(m) => println!(
            "trained {} steps in {:.1}s: rgb PSNR {:.2} dB, thermal PSNR {:.2} dB",
            cfg.iterations, report.wall_time_s, m.rgb.mean_psnr, m.thermal.mean_psnr
        ),
        None => println!("trained {} steps in {:.1}s", cfg.iterations, report.wall_time_s),
    }
    Ok(())
}

fn resolve_camera(camera: &str, data: Option<&Path>) -> Result<Camera> {
    let path = Path::new(camera);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return Ok(CameraRecord::parse(&text)?.to_camera()?);
    }
    let data = data.ok_or_else(|| anyhow!("camera `{camera}` is not a file; pass --data to look it up as a frame id"))?;
    let ds = Dataset::load(data)?;
    let frame = ds.frame(camera).ok_or_else(|| anyhow!("no frame `{camera}` in {}", data.display()))?;
    Ok(frame.camera)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[allow(clippy::too_many_arguments)]
fn render(
    ckpt: PathBuf,
    camera: String,
    data: Option<PathBuf>,
    spectrum: SpectrumArg,
    depth: bool,
    reveal: Option<f64>,
    out: PathBuf,
    samples: usize,
    seed: u64,
) -> Result<()> {
    let field = MultispectralField::load(&ckpt)?;
    let cam = resolve_camera(&camera, data.as_deref())?;
    if samples < 2 {
        bail!("--samples must be at least 2");
    }
    let spectra: Vec<Spectrum> = match spectrum {
        SpectrumArg::Rgb => vec![Spectrum::Rgb],
        SpectrumArg::Thermal => vec![Spectrum::Thermal],
        SpectrumArg::Rgbt => Spectrum::ALL.to_vec(),
    };
    let settings = RenderSettings {
        n_samples: samples,
        seed,
        ..Default::default()
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    for s in spectra {
        let view = match reveal {
            Some(eps) if eps > 0.0 => render_revealed(&field, &cam, s, eps, &settings),
            Some(eps) => bail!("--reveal must be positive, got {eps}"),
            None => render_image(
                &field,
                &cam,
                &RenderSettings {
                    channels: ImageChannels::Only(s),
                    ..settings
                },
            ),
        };
        match s {
            Spectrum::Rgb => {
                let p = with_suffix(&out, ".rgb.png");
                view.image.rgb().write_png(&p)?;
                println!("{}", p.display());
            }
            Spectrum::Thermal => {
                let p = with_suffix(&out, ".thermal.pfm");
                view.image.thermal().write_pfm(&p)?;
                println!("{}", p.display());
            }
        }
        if depth {
            let d: &Image = view.depth(s).ok_or_else(|| anyhow!("depth not rendered"))?;
            let p = with_suffix(&out, &format!(".{}.depth.pfm", s.as_str()));
            d.write_pfm(&p)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn eval(ckpt: PathBuf, data: PathBuf, out: PathBuf, samples: usize, seed: u64) -> Result<()> {
    let field = MultispectralField::load(&ckpt)?;
    let ds = Dataset::load(&data)?;
    let settings = RenderSettings {
        n_samples: samples,
        seed,
        ..Default::default()
    };
    let report = evaluate(&field, &ds, &settings)?;
    write_text(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!(
        "rgb PSNR {:.2} dB SSIM {:.4}, thermal PSNR {:.2} dB SSIM {:.4}",
        report.rgb.mean_psnr, report.rgb.mean_ssim, report.thermal.mean_psnr, report.thermal.mean_ssim
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn calibrate(
    detections: PathBuf,
    target: Option<PathBuf>,
    out: PathBuf,
    rgb_size: (u32, u32),
    thermal_size: (u32, u32),
    scale_pair: Option<Vec<String>>,
    measured_m: Option<f64>,
    data: Option<PathBuf>,
) -> Result<()> {
    let target: TargetSpec = match &target {
        Some(p) => read_json(p)?,
        None => TargetSpec::default(),
    };
    let views: Vec<ViewDetections> = read_json(&detections)?;
    let mut rig = calibrate_rig(&views, &target, rgb_size, thermal_size)?;
    if let (Some(pair), Some(d), Some(data)) = (scale_pair, measured_m, data) {
        let ds = Dataset::load(&data)?;
        let center = |id: &str| {
            ds.frame(id)
                .map(|f| f.camera.pose.center())
                .ok_or_else(|| anyhow!("no frame `{id}` in {}", data.display()))
        };
        rig.scale = metric_scale(&center(&pair[0])?, &center(&pair[1])?, d)?;
    }
    write_text(&out, &(serde_json::to_string_pretty(&rig)? + "\n"))?;
    let worst = rig.rgb_view_rmse.iter().chain(&rig.thermal_view_rmse).cloned().fold(0.0, f64::max);
    println!(
        "rgb fx {:.2} fy {:.2}, thermal fx {:.2} fy {:.2}, worst view RMSE {:.4} px",
        rig.rgb.fx, rig.rgb.fy, rig.thermal.fx, rig.thermal.fy, worst
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            scene,
            out,
            thermal_downscale,
            seed,
            size,
            n_train,
            n_test,
        } => {
            SceneRegistry::with_builtins().build(&scene)?;
            synth(scene, out, thermal_downscale, seed, size, n_train, n_test)
        }
        Command::Train {
            data,
            out,
            coupling,
            config,
            ablate,
            iterations,
            seed,
            resolution,
            workers,
            thermal_views,
        } => train(data, out, coupling, config, ablate, iterations, seed, resolution, workers, thermal_views),
        Command::Render {
            ckpt,
            camera,
            data,
            spectrum,
            depth,
            reveal,
            out,
            samples,
            seed,
        } => render(ckpt, camera, data, spectrum, depth, reveal, out, samples, seed),
        Command::Eval {
            ckpt,
            data,
            out,
            samples,
            seed,
        } => eval(ckpt, data, out, samples, seed),
        Command::Calibrate {
            detections,
            target,
            out,
            rgb_size,
            thermal_size,
            scale_pair,
            measured_m,
            data,
        } => calibrate(detections, target, out, rgb_size, thermal_size, scale_pair, measured_m, data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn reveal_default_matches_library() {
        let eps: f64 = super::DEFAULT_REVEAL_EPSILON_STR.parse().unwrap();
        assert_eq!(eps, rgbt::renderer::DEFAULT_REVEAL_EPSILON);
    }
}
