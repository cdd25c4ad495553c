//! Configuration sweeps: the cartesian product of the matrix axes, trained
//! once per seed in a child process each.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use stsplat::checkpoint::Checkpoint;
use stsplat::diagnostics::{mean_std, summarize, variance_table, xt_slice_checkpoint, xt_slice_gt, VarianceRow};
use stsplat::image::Image;
use stsplat::scene::Scene;
use stsplat::trainer::{EvalReport, TrainConfig};
use stsplat::{Error, Result};

use crate::{layered, run};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted config key, e.g. `density.policy`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    /// Paths are relative to the matrix file.
    pub scene: PathBuf,
    #[serde(default)]
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Overrides shared by every cell.
    #[serde(default)]
    pub set: Vec<String>,
    #[serde(default = "default_eval_step")]
    pub eval_step: usize,
    #[serde(default)]
    pub axes: Vec<Axis>,
}

fn default_eval_step() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect()
    }
}

/// Cartesian product of the axes, first axis slowest.
pub fn cells(axes: &[Axis]) -> Vec<Cell> {
    let mut out = vec![Cell {
        name: String::new(),
        overrides: Vec::new(),
    }];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let shown = match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    let sep = if cell.name.is_empty() { "" } else { "," };
                    let mut overrides = cell.overrides.clone();
                    overrides.push(format!("{}={}", axis.key, v));
                    Cell {
                        name: format!("{}{sep}{}={shown}", cell.name, axis.key),
                        overrides,
                    }
                })
            })
            .collect();
    }
    if out.len() == 1 && out[0].name.is_empty() {
        out[0].name = "base".into();
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct RunResult {
    cell: String,
    seed: u64,
    status: String,
    psnr: f64,
    dssim: f64,
    epe: f64,
    final_dead_ratio: f64,
}

fn load_matrix(path: &Path) -> Result<(Matrix, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let m: Matrix = toml::from_str(&text)?;
    if m.seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one seed".into()));
    }
    if m.axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::Config("every matrix axis needs at least one value".into()));
    }
    if m.eval_step == 0 {
        return Err(Error::Config("eval_step must be positive".into()));
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((m, base))
}

fn read_metrics(dir: &Path) -> Result<(EvalReport, f64)> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(run::METRICS))?)?;
    let f = |k: &str| v.get(k).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
    let report = EvalReport {
        views: v.get("views").and_then(|x| x.as_u64()).unwrap_or(0) as usize,
        psnr: f("psnr"),
        dssim: f("dssim"),
        epe: f("epe"),
    };
    Ok((report, f("final_dead_ratio")))
}

/// Side-by-side slices separated by white columns.
fn concat_horizontal(images: &[Image]) -> Image {
    let h = images.iter().map(|i| i.height).max().unwrap_or(0);
    let gap = 2;
    let w: usize = images.iter().map(|i| i.width).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = Image::filled(w, h, &[1.0, 1.0, 1.0]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            for x in 0..img.width {
                out.pixel_mut(x0 + x, y).copy_from_slice(img.pixel(x, y));
            }
        }
        x0 += img.width + gap;
    }
    out
}

pub fn run(matrix_path: &Path, out: &Path, jobs: usize) -> Result<u8> {
    let (m, base) = load_matrix(matrix_path)?;
    let scene_path = base.join(&m.scene);
    let config_path = m.config.as_ref().map(|c| base.join(c));
    let scene = Scene::load(&scene_path)?;
    let cells = cells(&m.axes);
    for cell in &cells {
        let overrides: Vec<String> = m.set.iter().chain(&cell.overrides).cloned().collect();
        let cfg: TrainConfig = layered::load(config_path.as_deref(), &overrides)?;
        cfg.validate()?;
    }

    let tasks: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| m.seeds.iter().map(move |&s| (c, s))).collect();
    let exe = std::env::current_exe()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunResult>>> = Mutex::new(vec![None; tasks.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(c, seed)) = tasks.get(i) else { break };
                let cell = &cells[c];
                let dir = out.join(cell.dir_name()).join(format!("seed_{seed}"));
                let outcome = launch(&exe, &scene_path, config_path.as_deref(), &m, cell, seed, &dir);
                let r = match outcome.and_then(|_| read_metrics(&dir)) {
                    Ok((e, dead)) => RunResult {
                        cell: cell.name.clone(),
                        seed,
                        status: "ok".into(),
                        psnr: e.psnr,
                        dssim: e.dssim,
                        epe: e.epe,
                        final_dead_ratio: dead,
                    },
                    Err(e) => {
                        log::error!("cell {} seed {seed} failed: {e}", cell.name);
                        RunResult {
                            cell: cell.name.clone(),
                            seed,
                            status: format!("failed: {e}"),
                            psnr: f64::NAN,
                            dssim: f64::NAN,
                            epe: f64::NAN,
                            final_dead_ratio: f64::NAN,
                        }
                    }
                };
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<RunResult> = results.into_inner().expect("results lock").into_iter().flatten().collect();

    let mut w = csv::Writer::from_path(out.join("runs.csv"))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut rows: Vec<VarianceRow> = Vec::new();
    let mut dead: Vec<(f64, f64)> = Vec::new();
    for cell in &cells {
        let ok: Vec<&RunResult> = results.iter().filter(|r| r.cell == cell.name && r.status == "ok").collect();
        let reports: Vec<EvalReport> = ok
            .iter()
            .map(|r| EvalReport {
                views: 0,
                psnr: r.psnr,
                dssim: r.dssim,
                epe: r.epe,
            })
            .collect();
        rows.push(summarize(&cell.name, &reports));
        dead.push(mean_std(&ok.iter().map(|r| r.final_dead_ratio).collect::<Vec<_>>()));
    }
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut md = String::from("# Ablation summary\n\n");
    md.push_str(&variance_table(&rows));
    md.push_str("\n| config | final dead ratio |\n|---|---|\n");
    for (r, (mean, std)) in rows.iter().zip(&dead) {
        let _ = writeln!(md, "| {} | {mean:.4} ± {std:.4} |", r.name);
    }

    let mut slices = vec![xt_slice_gt(&scene, 0, scene.desc.height / 2)?.image];
    let mut order = vec!["ground truth".to_string()];
    for cell in &cells {
        if let Some(r) = results.iter().find(|r| r.cell == cell.name && r.status == "ok") {
            let path = out.join(cell.dir_name()).join(format!("seed_{}", r.seed)).join(run::CHECKPOINT);
            let ckpt = Checkpoint::load(path)?;
            slices.push(xt_slice_checkpoint(&ckpt, &scene, 0, scene.desc.height / 2)?.image);
            order.push(format!("{} (seed {})", cell.name, r.seed));
        }
    }
    concat_horizontal(&slices).save_png(out.join("xt_slices.png"))?;
    let _ = writeln!(md, "\n`xt_slices.png`, left to right: {}.", order.join("; "));

    let failed: Vec<&RunResult> = results.iter().filter(|r| r.status != "ok").collect();
    if !failed.is_empty() {
        md.push_str("\n## Failed runs\n\n");
        for r in &failed {
            let _ = writeln!(md, "- {} seed {}: {}", r.cell, r.seed, r.status);
        }
    }
    std::fs::write(out.join("summary.md"), &md)?;
    println!("{md}");
    if failed.is_empty() {
        Ok(0)
    } else {
        crate::report_error("partial_sweep", 4, &format!("{} of {} runs failed", failed.len(), results.len()));
        Ok(4)
    }
}

fn launch(exe: &Path, scene: &Path, config: Option<&Path>, m: &Matrix, cell: &Cell, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cmd = Command::new(exe);
    cmd.arg("--seed")
        .arg(seed.to_string())
        .arg("--jobs")
        .arg("1")
        .arg("--out")
        .arg(dir)
        .arg("train")
        .arg("--scene")
        .arg(scene)
        .arg("--eval-step")
        .arg(m.eval_step.to_string());
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    for o in m.set.iter().chain(&cell.overrides) {
        cmd.arg("--set").arg(o);
    }
    let stderr = std::fs::File::create(dir.join("stderr.log"))?;
    let status = cmd.stdout(Stdio::null()).stderr(stderr).status()?;
    if status.success() {
        Ok(())
    } else {
        Err(Error::Format(format!("train exited with {status}")))
    }
}
