mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use microflake_core::camera::{load_cameras, save_cameras};
use microflake_core::field::{decoder_sidecar, save_grid};
use microflake_core::image::{mse, psnr_from_mse, write_pfm, write_png};
use microflake_core::inverse::{format_history_csv, optimize, RunOptions};
use microflake_core::lighting::{load_env_sg, save_env_sg, VisibilityFitSettings};
use microflake_core::renderer::light_directions;
use microflake_core::synthetic::{held_out_cameras, make_preset, novel_env, ring_cameras, Preset};
use microflake_core::{
    AlbedoRemap, AppearanceDecoder, Camera, EnvLight, Error, HdrImage, OptimizeConfig, PhaseWeights, RenderSettings,
    Renderer, Rgb, TrainView, VisibilityField, VisibilityMode, VolumeGrid,
};

use manifest::{load_config, save_manifest, LoadedManifest, Manifest, MANIFEST_VERSION};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Camera distance from the origin for synthetic scenes.
const RING_RADIUS: f64 = 3.0;

#[derive(Parser)]
#[command(name = "microflake", version, about = "Microflake volume rendering and inverse rendering")]
struct Cli {
    /// Seed for every random choice (optimizer init, batches, jitter).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force midpoint sampling so outputs are bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Optimizer config JSON; its `render` and `visibility_fit` sections apply to rendering.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a ground-truth scene and render its training views.
    MakeSynthetic {
        /// sphere, two-material-blob or occluder-slab
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        views: usize,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 16)]
        grid_resolution: usize,
        #[arg(long, default_value_t = 4)]
        held_out: usize,
    },
    /// Render a manifest's scene.
    Render {
        #[command(flatten)]
        target: RenderTarget,
    },
    /// Fit a scene to a manifest's cameras and images.
    Optimize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the manifest's light fixed instead of fitting it.
        #[arg(long)]
        known_light: bool,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop and checkpoint after this many iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Render under a different environment light.
    Relight {
        #[command(flatten)]
        target: RenderTarget,
        /// SG environment file.
        #[arg(long)]
        env: PathBuf,
    },
    /// Render with remapped albedo and/or different phase weights.
    Edit {
        #[command(flatten)]
        target: RenderTarget,
        /// Per-channel albedo scale: one value or r,g,b.
        #[arg(long, value_delimiter = ',')]
        albedo_scale: Option<Vec<f64>>,
        /// Per-channel albedo offset: one value or r,g,b.
        #[arg(long, value_delimiter = ',')]
        albedo_offset: Option<Vec<f64>>,
        /// Diffuse and specular weights, e.g. 1,0.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct RenderTarget {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Camera index or `all`.
    #[arg(long, default_value = "all")]
    camera: String,
    /// Camera file to use instead of the manifest's.
    #[arg(long)]
    cameras: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Numeric { checkpoint, .. } => {
                let saved = match checkpoint {
                    Some(p) => format!("; state saved to {}", p.display()),
                    None => "; no checkpoint could be written".into(),
                };
                Failure {
                    code: EXIT_NUMERIC,
                    message: format!("{e}{saved}"),
                }
            }
            _ => Failure {
                code: EXIT_INPUT,
                message: e.to_string(),
            },
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Config from `--config`, else the manifest's, else defaults, with the global flags applied.
fn effective_config(cli: &Cli, manifest: Option<&LoadedManifest>) -> CliResult<OptimizeConfig> {
    let mut config = match (&cli.config, manifest) {
        (Some(p), _) => load_config(p)?,
        (None, Some(m)) => m.config()?.unwrap_or_default(),
        (None, None) => OptimizeConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.render.seed = seed;
    }
    if cli.deterministic {
        config.render.deterministic = true;
    }
    config.validate()?;
    Ok(config)
}

fn visibility_for(
    grid: &VolumeGrid,
    env: &EnvLight,
    settings: &RenderSettings,
    fit: &VisibilityFitSettings,
) -> Option<VisibilityField> {
    match settings.visibility {
        VisibilityMode::Off => None,
        _ => Some(VisibilityField::compute(grid, light_directions(env, settings), fit)),
    }
}

fn render_views(
    grid: &VolumeGrid,
    decoder: &AppearanceDecoder,
    env: &EnvLight,
    settings: &RenderSettings,
    fit: &VisibilityFitSettings,
    cameras: &[(usize, Camera)],
) -> CliResult<Vec<HdrImage>> {
    let visibility = visibility_for(grid, env, settings, fit);
    let renderer = Renderer::new(grid, decoder, env, visibility.as_ref(), settings)?;
    Ok(cameras.iter().map(|(_, c)| renderer.render(c)).collect())
}

fn write_views(out: &Path, cameras: &[(usize, Camera)], images: &[HdrImage]) -> CliResult<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::new();
    for ((id, _), img) in cameras.iter().zip(images) {
        let pfm = out.join(format!("view_{id:03}.pfm"));
        write_pfm(img, &pfm)?;
        write_png(img, &out.join(format!("view_{id:03}.png")))?;
        written.push(pfm);
    }
    Ok(written)
}

fn select_cameras(cameras: Vec<Camera>, which: &str) -> CliResult<Vec<(usize, Camera)>> {
    if which == "all" {
        return Ok(cameras.into_iter().enumerate().collect());
    }
    let n = cameras.len();
    match which.parse::<usize>() {
        Ok(id) if id < n => Ok(vec![(id, cameras[id].clone())]),
        Ok(id) => Err(input_error(format!("camera id {id} out of range: the camera file has {n} cameras"))),
        Err(_) => Err(input_error(format!("invalid camera id '{which}': expected an index or 'all'"))),
    }
}

fn rgb_arg(values: &[f64], name: &str) -> CliResult<Rgb> {
    match *values {
        [v] => Ok(Rgb::splat(v)),
        [r, g, b] => Ok(Rgb::new(r, g, b)),
        _ => Err(input_error(format!("--{name} takes one value or three (r,g,b), got {}", values.len()))),
    }
}

struct Loaded {
    manifest: LoadedManifest,
    config: OptimizeConfig,
    grid: VolumeGrid,
    decoder: AppearanceDecoder,
    cameras: Vec<(usize, Camera)>,
}

fn load_target(cli: &Cli, target: &RenderTarget) -> CliResult<Loaded> {
    let manifest = LoadedManifest::load(&target.manifest)?;
    let config = effective_config(cli, Some(&manifest))?;
    let (grid, decoder) = manifest.scene()?;
    let cameras = match &target.cameras {
        Some(p) => load_cameras(p)?,
        None => manifest.cameras()?,
    };
    let cameras = select_cameras(cameras, &target.camera)?;
    Ok(Loaded {
        manifest,
        config,
        grid,
        decoder,
        cameras,
    })
}

fn cmd_make_synthetic(
    cli: &Cli,
    preset: &str,
    out: &Path,
    views: usize,
    resolution: usize,
    grid_resolution: usize,
    held_out: usize,
) -> CliResult<()> {
    let preset: Preset = preset.parse()?;
    let mut config = effective_config(cli, None)?;
    config.resolution = [grid_resolution; 3];
    let scene = make_preset(preset, grid_resolution)?;
    let cameras = ring_cameras(views, resolution, RING_RADIUS)?;
    let held = held_out_cameras(held_out, resolution, RING_RADIUS)?;

    create_dir(out)?;
    save_grid(&scene.grid, &scene.decoder, &out.join("truth.grid"))?;
    save_env_sg(&scene.env, &out.join("env.sg"))?;
    save_env_sg(&novel_env(), &out.join("novel.sg"))?;
    save_cameras(&cameras, &out.join("cameras.json"))?;
    save_cameras(&held, &out.join("held_out.json"))?;
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(&config).expect("config serializes") + "\n"))?;

    let selected: Vec<(usize, Camera)> = cameras.into_iter().enumerate().collect();
    let images = render_views(&scene.grid, &scene.decoder, &scene.env, &config.render, &config.visibility_fit, &selected)?;
    let written = write_views(&out.join("images"), &selected, &images)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        grid: "truth.grid".into(),
        decoder: decoder_sidecar(Path::new("truth.grid")),
        env: "env.sg".into(),
        cameras: "cameras.json".into(),
        images: written.iter().map(|p| p.strip_prefix(out).expect("written under out").to_path_buf()).collect(),
        held_out_cameras: Some("held_out.json".into()),
        novel_env: Some("novel.sg".into()),
        settings: Some("config.json".into()),
    };
    save_manifest(&manifest, &out.join("manifest.json"))?;
    println!("wrote {} views of preset {preset:?} to {}", images.len(), out.display());
    Ok(())
}

fn cmd_render(cli: &Cli, target: &RenderTarget) -> CliResult<()> {
    let l = load_target(cli, target)?;
    let env = l.manifest.env()?;
    let images = render_views(&l.grid, &l.decoder, &env, &l.config.render, &l.config.visibility_fit, &l.cameras)?;
    write_views(&target.out, &l.cameras, &images)?;
    println!("rendered {} views to {}", images.len(), target.out.display());

    // Compare against the manifest's images when they belong to these cameras.
    let references = &l.manifest.manifest.images;
    if target.cameras.is_none() && !references.is_empty() {
        let mut total = 0.0;
        let mut count = 0usize;
        for ((id, _), img) in l.cameras.iter().zip(&images) {
            let Some(p) = references.get(*id) else { continue };
            let reference = microflake_core::image::read_pfm(&l.manifest.resolve(p))?;
            if (reference.width, reference.height) != (img.width, img.height) {
                return Err(input_error(format!("reference image {} does not match camera {id}", p.display())));
            }
            total += mse(img, &reference) * img.pixels.len() as f64;
            count += img.pixels.len();
        }
        if count > 0 {
            println!("PSNR vs reference images: {:.4} dB", psnr_from_mse(total / count as f64));
        }
    }
    Ok(())
}

fn cmd_optimize(
    cli: &Cli,
    manifest_path: &Path,
    out: &Path,
    known_light: bool,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> CliResult<()> {
    let manifest = LoadedManifest::load(manifest_path)?;
    let config = effective_config(cli, Some(&manifest))?;
    let cameras = manifest.cameras()?;
    let images = manifest.images()?;
    if images.len() != cameras.len() {
        return Err(input_error(format!(
            "manifest has {} cameras but {} images",
            cameras.len(),
            images.len()
        )));
    }
    let views = cameras
        .into_iter()
        .zip(images)
        .map(|(c, i)| TrainView::new(c, i))
        .collect::<Result<Vec<_>, _>>()?;
    let light = if known_light { Some(manifest.env()?) } else { None };

    create_dir(out)?;
    let checkpoints = out.join("checkpoints");
    create_dir(&checkpoints)?;
    let run = RunOptions {
        checkpoint_dir: Some(checkpoints.clone()),
        resume: resume.map(Path::to_path_buf),
        stop_after,
    };
    let start = Instant::now();
    info!("optimizing {} views for {} iterations", views.len(), config.iterations);
    let result = optimize(&views, &config, light.as_ref(), &run)?;
    let elapsed = start.elapsed().as_secs_f64();

    save_grid(&result.grid, &result.decoder, &out.join("scene.grid"))?;
    save_env_sg(&result.env, &out.join("env.sg"))?;
    write_text(&out.join("history.csv"), &format_history_csv(&result.history))?;
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(&config).expect("config serializes") + "\n"))?;
    fs::copy(manifest.resolve(&manifest.manifest.cameras), out.join("cameras.json"))
        .map_err(io_err(&manifest.resolve(&manifest.manifest.cameras)))?;

    let m = &manifest.manifest;
    let fitted = Manifest {
        version: MANIFEST_VERSION,
        grid: "scene.grid".into(),
        decoder: decoder_sidecar(Path::new("scene.grid")),
        env: "env.sg".into(),
        cameras: "cameras.json".into(),
        images: m.images.iter().map(|p| manifest.absolute(p)).collect::<Result<_, _>>()?,
        held_out_cameras: m.held_out_cameras.as_deref().map(|p| manifest.absolute(p)).transpose()?,
        novel_env: m.novel_env.as_deref().map(|p| manifest.absolute(p)).transpose()?,
        settings: Some("config.json".into()),
    };
    save_manifest(&fitted, &out.join("manifest.json"))?;

    let summary = serde_json::json!({
        "iterations": config.iterations,
        "completed": result.completed,
        "known_light": known_light,
        "seed": config.seed,
        "train_psnr": result.train_psnr,
        "final_loss": result.history.last().map(|r| r.total),
        "elapsed_seconds": elapsed,
    });
    write_text(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;

    if result.completed < config.iterations {
        println!(
            "stopped after {} of {} iterations; resume from {}",
            result.completed,
            config.iterations,
            checkpoints.join(format!("iter-{:06}", result.completed)).display()
        );
    }
    println!("training PSNR {:.4} dB after {} iterations ({elapsed:.1} s)", result.train_psnr, result.completed);
    Ok(())
}

fn cmd_relight(cli: &Cli, target: &RenderTarget, env_path: &Path) -> CliResult<()> {
    let l = load_target(cli, target)?;
    let env = load_env_sg(env_path)?;
    let images = render_views(&l.grid, &l.decoder, &env, &l.config.render, &l.config.visibility_fit, &l.cameras)?;
    write_views(&target.out, &l.cameras, &images)?;
    println!("relit {} views to {}", images.len(), target.out.display());
    Ok(())
}

fn cmd_edit(
    cli: &Cli,
    target: &RenderTarget,
    scale: Option<&[f64]>,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
) -> CliResult<()> {
    let mut l = load_target(cli, target)?;
    let settings = &mut l.config.render;
    if scale.is_some() || offset.is_some() {
        let remap = AlbedoRemap {
            scale: scale.map(|v| rgb_arg(v, "albedo-scale")).transpose()?.unwrap_or(Rgb::ONE),
            offset: offset.map(|v| rgb_arg(v, "albedo-offset")).transpose()?.unwrap_or(Rgb::ZERO),
        };
        if !remap.scale.is_finite() || !remap.offset.is_finite() {
            return Err(input_error("albedo remap must be finite"));
        }
        if remap.clamps() {
            warn!("albedo remap leaves [0, 1] for some inputs; results are clamped");
        }
        settings.albedo_remap = Some(remap);
    }
    if let Some(w) = weights {
        if w.len() != 2 {
            return Err(input_error(format!("--weights takes two values, got {}", w.len())));
        }
        settings.phase_weights = PhaseWeights::new(w[0], w[1])?;
    }
    let env = l.manifest.env()?;
    let images = render_views(&l.grid, &l.decoder, &env, &l.config.render, &l.config.visibility_fit, &l.cameras)?;
    write_views(&target.out, &l.cameras, &images)?;
    println!("rendered {} edited views to {}", images.len(), target.out.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(input_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| input_error(format!("cannot start {n} threads: {e}")))?;
    }
    match &cli.command {
        Command::MakeSynthetic {
            preset,
            out,
            views,
            resolution,
            grid_resolution,
            held_out,
        } => cmd_make_synthetic(cli, preset, out, *views, *resolution, *grid_resolution, *held_out),
        Command::Render { target } => cmd_render(cli, target),
        Command::Optimize {
            manifest,
            out,
            known_light,
            resume,
            stop_after,
        } => cmd_optimize(cli, manifest, out, *known_light, resume.as_deref(), *stop_after),
        Command::Relight { target, env } => cmd_relight(cli, target, env),
        Command::Edit {
            target,
            albedo_scale,
            albedo_offset,
            weights,
        } => cmd_edit(cli, target, albedo_scale.as_deref(), albedo_offset.as_deref(), weights.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
