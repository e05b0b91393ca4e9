//! Command line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use tunegs::align::{align_manifest, AlignConfig};
use tunegs::fixture;
use tunegs::guidance::{fit, save_trace_csv, TrainConfig};
use tunegs::importance::{compute_importance, filter_scene};
use tunegs::loss::Perceptual;
use tunegs::metrics::{consistency, ConsistencyConfig};
use tunegs::ply::{export_ply, import_ply};
use tunegs::render::{render_color, render_color_depth, HitWeighting};
use tunegs::scene::{find_camera, load_cameras, load_scene_json, save_cameras, save_scene_json};
use tunegs::style::{compose_multi, FieldFile, Mask, StyleLayer, StyleTuner, StyledScene, DEFAULT_LEVELS};
use tunegs::stylizer::{build_manifest, load_manifest, External, Procedural, StyleReference, Stylizer};
use tunegs::{Error, GaussianScene, RenderConfig};

use crate::service::{self, AppState, ServeState, Sources};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "tunegs", version, about = "Intensity-tunable style transfer for 3D Gaussian scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a binary 3DGS PLY into scene JSON.
    ImportPly {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop low-importance primitives.
    Filter {
        #[command(flatten)]
        inputs: SceneArgs,
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
        #[arg(long, value_enum, default_value_t = Weighting::Blend)]
        weighting: Weighting,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        index_map: PathBuf,
    },
    /// Render every camera and write stylized targets with a manifest.
    StylizeViews {
        #[command(flatten)]
        inputs: SceneArgs,
        /// Reference image for the procedural stylizer.
        #[arg(long, required_unless_present = "external_dir")]
        style: Option<PathBuf>,
        /// Directory of `<view_id>.png` targets made by another tool.
        #[arg(long, conflicts_with = "style")]
        external_dir: Option<PathBuf>,
        #[arg(long)]
        style_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pull every target toward the anchor view.
    Align {
        #[command(flatten)]
        inputs: SceneArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 4)]
        feature_scale: u32,
        #[arg(long)]
        z_tol: Option<f64>,
    },
    /// Train a style field against a manifest.
    Fit {
        #[command(flatten)]
        inputs: SceneArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        stage1_steps: usize,
        #[arg(long, default_value_t = 2000)]
        stage2_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PerceptualArg::Msssim)]
        perceptual: PerceptualArg,
        /// `view_id,distance` table used with `--perceptual external`.
        #[arg(long)]
        perceptual_table: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        perceptual_weight: f64,
        /// Filter the scene to this fraction before fitting; needs `--scene-out`.
        #[arg(long, default_value_t = 1.0)]
        keep: f64,
        #[arg(long)]
        scene_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LEVELS)]
        levels: usize,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render one view, optionally stylized.
    Render {
        #[command(flatten)]
        inputs: SceneArgs,
        #[command(flatten)]
        style: StyleArgs,
        #[arg(long)]
        view: String,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-view consistency of (stylized) renders.
    Eval {
        #[command(flatten)]
        inputs: SceneArgs,
        #[command(flatten)]
        style: StyleArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 10])]
        intervals: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        z_tol: Option<f64>,
        /// Fail instead of dropping intervals longer than the trajectory.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value = "consistency_report.json")]
        out: PathBuf,
    },
    /// Serve renders over HTTP.
    Serve {
        #[command(flatten)]
        inputs: SceneArgs,
        #[arg(long, num_args = 1..)]
        fields: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        masks: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 64)]
        cache_size: usize,
    },
    /// Write the toy and plane fixtures.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
}

#[derive(Debug, Args)]
pub struct StyleArgs {
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, requires = "field")]
    pub beta: Option<f64>,
    #[arg(long, requires = "field")]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Weighting {
    Blend,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PerceptualArg {
    Msssim,
    None,
    External,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_VALIDATION
    }
}

fn load_inputs(a: &SceneArgs) -> tunegs::Result<(GaussianScene, Vec<tunegs::Camera>)> {
    Ok((load_scene_json(&a.scene)?, load_cameras(&a.cameras)?))
}

/// Applies the optional field, beta and mask to the base scene.
fn styled_scene(scene: &GaussianScene, style: &StyleArgs) -> tunegs::Result<GaussianScene> {
    let Some(path) = &style.field else {
        return Ok(scene.clone());
    };
    let file = FieldFile::load(path)?;
    file.check_scene(scene)?;
    let mask = style.mask.as_ref().map(Mask::load).transpose()?;
    let beta = style.beta.unwrap_or(file.tuner.b as f64);
    compose_multi(&StyledScene {
        base: scene,
        active: vec![StyleLayer {
            field: &file.field,
            tuner: &file.tuner,
            beta,
            mask: mask.as_ref().map(|m| m.indices.as_slice()),
        }],
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> tunegs::Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> tunegs::Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn run(command: Command) -> tunegs::Result<()> {
    let render = RenderConfig::default();
    match command {
        Command::ImportPly { input, out } => {
            let scene = import_ply(&input)?;
            save_scene_json(&scene, &out)?;
            log::info!("imported {} primitives", scene.len());
        }
        Command::Filter {
            inputs,
            keep,
            weighting,
            out,
            index_map,
        } => {
            let (scene, cams) = load_inputs(&inputs)?;
            let weighting = match weighting {
                Weighting::Blend => HitWeighting::Blend,
                Weighting::Raw => HitWeighting::RawOpacity,
            };
            let report = compute_importance(&scene, &cams, &render, weighting)?;
            let (kept, map) = filter_scene(&scene, &report, keep)?;
            save_scene_json(&kept, &out)?;
            write_file(&index_map, map.to_json_string())?;
            log::info!("kept {} of {} primitives", kept.len(), scene.len());
        }
        Command::StylizeViews {
            inputs,
            style,
            external_dir,
            style_id,
            out,
            seed,
        } => {
            let (scene, cams) = load_inputs(&inputs)?;
            let stylizer: Box<dyn Stylizer> = match (style, external_dir) {
                (Some(path), _) => Box::new(Procedural(StyleReference::load(path, style_id.as_deref())?)),
                (None, Some(dir)) => Box::new(External {
                    style_id: style_id.unwrap_or_else(|| "external".into()),
                    dir,
                }),
                (None, None) => unreachable!("clap requires one of them"),
            };
            build_manifest(&scene, &cams, stylizer.as_ref(), &out, seed, &render)?;
        }
        Command::Align {
            inputs,
            manifest,
            out,
            lambda,
            feature_scale,
            z_tol,
        } => {
            let (scene, cams) = load_inputs(&inputs)?;
            let loaded = load_manifest(&manifest, &cams)?;
            let cfg = AlignConfig {
                feature_scale,
                lambda,
                z_tolerance: z_tol,
                render,
            };
            align_manifest(&loaded, &scene, &cams, &cfg, &out)?;
        }
        Command::Fit {
            inputs,
            manifest,
            out,
            stage1_steps,
            stage2_steps,
            seed,
            perceptual,
            perceptual_table,
            perceptual_weight,
            keep,
            scene_out,
            levels,
            trace,
        } => {
            let (mut scene, cams) = load_inputs(&inputs)?;
            if keep < 1.0 {
                let target = scene_out.ok_or_else(|| {
                    Error::Argument("--keep below 1 needs --scene-out for the filtered scene".into())
                })?;
                let report = compute_importance(&scene, &cams, &render, HitWeighting::Blend)?;
                scene = filter_scene(&scene, &report, keep)?.0;
                save_scene_json(&scene, &target)?;
            }
            let loaded = load_manifest(&manifest, &cams)?;
            let perceptual = match (perceptual, perceptual_table) {
                (PerceptualArg::Msssim, _) => Perceptual::MsSsim,
                (PerceptualArg::None, _) => Perceptual::None,
                (PerceptualArg::External, Some(p)) => {
                    let text = std::fs::read_to_string(&p).map_err(|source| Error::Io { path: p, source })?;
                    Perceptual::external_from_csv(&text)?
                }
                (PerceptualArg::External, None) => {
                    return Err(Error::Argument("--perceptual external needs --perceptual-table".into()))
                }
            };
            let cfg = TrainConfig {
                stage1_steps,
                stage2_steps,
                perceptual,
                perceptual_weight,
                seed,
                render,
                ..TrainConfig::default()
            };
            let tuner = StyleTuner::new(0.0, 1.0, levels)?;
            let (field, tuner, rows) = fit(&scene, &cams, &loaded, tuner, &cfg)?;
            FieldFile {
                field,
                tuner,
                fingerprint: scene.fingerprint(),
            }
            .save(&out)?;
            if let Some(t) = trace {
                save_trace_csv(&rows, t)?;
            }
        }
        Command::Render {
            inputs,
            style,
            view,
            width,
            height,
            out,
        } => {
            let (scene, cams) = load_inputs(&inputs)?;
            let cam = find_camera(&cams, &view)
                .ok_or_else(|| Error::Validation(format!("unknown view {view}")))?;
            let cam = match (width, height) {
                (None, None) => cam.clone(),
                (w, h) => cam.resized(w.unwrap_or(cam.width), h.unwrap_or(cam.height)),
            };
            let styled = styled_scene(&scene, &style)?;
            write_file(&out, render_color(&styled, &cam, &render).encode_png()?)?;
        }
        Command::Eval {
            inputs,
            style,
            intervals,
            pairs,
            seed,
            z_tol,
            strict,
            out,
        } => {
            let (scene, cams) = load_inputs(&inputs)?;
            let mut kept = Vec::new();
            for k in intervals {
                if k < cams.len() {
                    kept.push(k);
                } else if strict {
                    return Err(Error::Argument(format!(
                        "interval {k} needs {} cameras, have {}",
                        k + 1,
                        cams.len()
                    )));
                } else {
                    log::warn!("dropping interval {k}: only {} cameras", cams.len());
                }
            }
            if kept.is_empty() {
                return Err(Error::Argument("no interval fits the camera trajectory".into()));
            }
            let styled = styled_scene(&scene, &style)?;
            let (images, depths): (Vec<_>, Vec<_>) =
                cams.iter().map(|c| render_color_depth(&styled, c, &render)).unzip();
            let cfg = ConsistencyConfig {
                intervals: kept,
                pairs_per_interval: pairs,
                seed,
                z_tolerance: z_tol,
            };
            let report = consistency(&cams, &images, &depths, &cfg)?;
            write_file(&out, report.to_json_string())?;
        }
        Command::Serve {
            inputs,
            fields,
            masks,
            bind,
            cache_size,
        } => {
            let sources = Sources {
                scene: inputs.scene,
                cameras: inputs.cameras,
                fields,
                masks,
            };
            let state = ServeState::load(&sources, render)?;
            let app = AppState::new(state, cache_size, Some(sources));
            let rt = tokio::runtime::Runtime::new().map_err(|source| Error::Io {
                path: PathBuf::from(&bind),
                source,
            })?;
            rt.block_on(service::serve(app, &bind)).map_err(|source| Error::Io {
                path: PathBuf::from(&bind),
                source,
            })?;
        }
        Command::MakeFixture { out } => {
            create_dir(&out)?;
            let scene = fixture::toy_scene();
            save_scene_json(&scene, out.join("scene.json"))?;
            export_ply(&scene, out.join("scene.ply"))?;
            save_cameras(&fixture::toy_cameras(), out.join("cameras.json"))?;
            fixture::toy_style_image().save_png(out.join("style.png"))?;
            save_scene_json(&fixture::plane_scene(), out.join("plane_scene.json"))?;
            save_cameras(
                &fixture::plane_cameras(fixture::PLANE_VIEWS),
                out.join("plane_cameras.json"),
            )?;
        }
    }
    Ok(())
}
