//! `stsplat`: scene generation, training, rendering, evaluation,
//! diagnostics and multi-seed ablation sweeps.

mod ablate;
mod layered;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stsplat::checkpoint::Checkpoint;
use stsplat::diagnostics::{diagnose, velocity_reference};
use stsplat::raster::attribute::{render_attribute, Attribute};
use stsplat::scene::{Scene, SceneConfig};
use stsplat::trainer::{cameras_for, checkpoint_velocities, evaluate, TrainConfig, TrainLog};
use stsplat::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "stsplat", version, about = "Dynamic Gaussian splatting on synthetic multi-view scenes")]
struct Cli {
    /// Overrides the seed of the scene or training configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for a single run; concurrent cells for `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene description (`scene.toml`).
    Scene {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Train on a scene and write a run directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Evaluate every n-th frame after training.
        #[arg(long, default_value_t = 1)]
        eval_step: usize,
    },
    /// Render frames from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        #[arg(long, default_value_t = 1.0)]
        t1: f64,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = View::Color)]
        view: View,
    },
    /// Compute PSNR, DSSIM and actor flow error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 1)]
        frame_step: usize,
    },
    /// Write the diagnostics report for a run directory or a checkpoint.
    Diagnose {
        #[arg(long, conflicts_with_all = ["checkpoint", "scene"])]
        run: Option<PathBuf>,
        #[arg(long, requires = "scene")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        scene: Option<PathBuf>,
        /// Opacity threshold for the dead ratio (read from the run config with --run).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run a configuration matrix over seeds, one process per cell.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum View {
    Color,
    Velocity,
    Duration,
    Gate,
    Depth,
}

/// Exit status for an error: 2 configuration, 3 numerical failure, 1 other.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::InvalidInput(_) => "input",
        Error::NonFinite { .. } => "numerical",
        Error::Format(_) => "format",
        _ => "io",
    }
}

/// Single-line JSON error record on stderr.
pub fn report_error(kind: &str, code: u8, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "code": code, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let code = exit_code(&e);
            report_error(error_kind(&e), code, &e.to_string());
            ExitCode::from(code)
        }
    }
}

fn out_dir(cli: &Cli, default: &Path) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| default.to_path_buf());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Scene { config, set } => {
            let mut cfg: SceneConfig = layered::load(config.as_deref(), set)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let scene = Scene::generate(&cfg)?;
            let dir = out_dir(cli, Path::new("."))?;
            let path = dir.join("scene.toml");
            scene.save(&path)?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Train {
            scene,
            config,
            set,
            eval_step,
        } => {
            let scene_text = std::fs::read_to_string(scene)?;
            let scene = Scene::new(toml::from_str(&scene_text)?)?;
            let mut cfg: TrainConfig = layered::load(config.as_deref(), set)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let dir = out_dir(cli, Path::new("run"))?;
            let summary = run::train_run(&scene, &scene_text, &cfg, &dir, *eval_step)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(0)
        }
        Command::Render {
            checkpoint,
            scene,
            camera,
            t0,
            t1,
            frames,
            view,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let scene = Scene::load(scene)?;
            let cams = cameras_for(&ckpt, &scene)?;
            let cam = cams
                .get(*camera)
                .ok_or_else(|| Error::InvalidInput(format!("camera {camera} out of range (scene has {})", cams.len())))?;
            if *frames == 0 {
                return Err(Error::InvalidInput("frames must be positive".into()));
            }
            let dir = out_dir(cli, Path::new("frames"))?;
            for k in 0..*frames {
                let t = if *frames == 1 { *t0 } else { t0 + (t1 - t0) * k as f64 / (*frames - 1) as f64 };
                let vel = checkpoint_velocities(&ckpt, t);
                let img = match view {
                    View::Color => stsplat::raster::render_with(&ckpt.cloud, cam, t, &ckpt.render, vel.as_deref()).image,
                    other => {
                        let attr = match other {
                            View::Velocity => Attribute::Velocity {
                                v_ref: velocity_reference(&scene, *camera),
                            },
                            View::Duration => Attribute::Duration,
                            View::Gate => Attribute::Gate,
                            _ => Attribute::Depth,
                        };
                        render_attribute(&ckpt.cloud, cam, t, &ckpt.render, vel.as_deref(), attr).image
                    }
                };
                img.clamped().save_png(dir.join(format!("frame_{k:04}.png")))?;
            }
            println!("{}", dir.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            scene,
            frame_step,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let scene = Scene::load(scene)?;
            let report = evaluate(&ckpt, &scene, *frame_step)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("eval.json"), &json)?;
                let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
                w.serialize(report)?;
                w.flush()?;
            }
            println!("{json}");
            Ok(0)
        }
        Command::Diagnose {
            run,
            checkpoint,
            scene,
            tau,
        } => {
            let (ckpt_path, scene_path, log, default_out, cfg_tau) = match (run, checkpoint, scene) {
                (Some(r), _, _) => {
                    let cfg: TrainConfig = layered::load(Some(&r.join(run::CONFIG)), &[])?;
                    (
                        r.join(run::CHECKPOINT),
                        r.join(run::SCENE),
                        Some(TrainLog::read_csv(r)?),
                        r.join("diagnostics"),
                        cfg.density.tau_opacity,
                    )
                }
                (None, Some(c), Some(s)) => (c.clone(), s.clone(), None, PathBuf::from("diagnostics"), TrainConfig::default().density.tau_opacity),
                _ => return Err(Error::Config("diagnose needs --run or both --checkpoint and --scene".into())),
            };
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let scene = Scene::load(&scene_path)?;
            let dir = out_dir(cli, &default_out)?;
            let d = diagnose(&ckpt, &scene, tau.unwrap_or(cfg_tau), Some(&dir))?;
            let report = d.to_markdown(log.as_ref(), None);
            std::fs::write(dir.join("report.md"), &report)?;
            std::fs::write(dir.join("diagnosis.json"), serde_json::to_string_pretty(&d)?)?;
            println!("{}", dir.join("report.md").display());
            Ok(0)
        }
        Command::Ablate { matrix } => {
            let dir = out_dir(cli, Path::new("ablation"))?;
            ablate::run(matrix, &dir, cli.jobs.max(1))
        }
    }
}
