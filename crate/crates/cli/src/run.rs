//! Run directory layout and the training command.

use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use stsplat::scene::Scene;
use stsplat::trainer::{evaluate, Trainer, TrainConfig};
use stsplat::Result;

pub const CONFIG: &str = "config.toml";
pub const SCENE: &str = "scene.toml";
pub const CHECKPOINT: &str = "checkpoint.ftgs";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash identifying a run: the materialized config followed by the scene.
pub fn snapshot_hash(config: &str, scene: &str) -> String {
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    h.update(scene.as_bytes());
    format!("{:x}", h.finalize())
}

fn write_manifest(dir: &Path, hash: &str, status: &str, files: &[&str]) -> Result<()> {
    let mut digests = serde_json::Map::new();
    for f in files {
        let bytes = std::fs::read(dir.join(f))?;
        digests.insert(f.to_string(), Value::String(sha256_hex(&bytes)));
    }
    let manifest = json!({ "config_sha256": hash, "status": status, "files": digests });
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Writes the config snapshot, trains, then writes the checkpoint, logs and
/// metrics. Returns the metrics record.
pub fn train_run(scene: &Scene, scene_text: &str, cfg: &TrainConfig, dir: &Path, eval_step: usize) -> Result<Value> {
    let config_text = cfg.to_toml()?;
    std::fs::write(dir.join(CONFIG), &config_text)?;
    std::fs::write(dir.join(SCENE), scene_text)?;
    let hash = snapshot_hash(&config_text, scene_text);
    write_manifest(dir, &hash, "running", &[CONFIG, SCENE])?;

    let result = (|| {
        let (trainer, init) = Trainer::new(scene, *cfg)?;
        log::info!("initialized {} primitives from {} keyframes", trainer.cloud().len(), init.keyframes);
        let (checkpoint, log) = trainer.run()?;
        checkpoint.save(dir.join(CHECKPOINT))?;
        log.write_csv(dir)?;
        std::fs::write(dir.join("init.json"), serde_json::to_string_pretty(&init)?)?;
        let eval = evaluate(&checkpoint, scene, eval_step)?;
        let metrics = json!({
            "config_sha256": hash,
            "psnr": eval.psnr,
            "dssim": eval.dssim,
            "epe": eval.epe,
            "views": eval.views,
            "final_dead_ratio": log.final_dead_ratio,
            "relocations": log.relocations.len(),
            "init_actor_velocity_error": init.actor_velocity_error,
        });
        std::fs::write(dir.join(METRICS), serde_json::to_string_pretty(&metrics)?)?;
        Ok(metrics)
    })();
    match &result {
        Ok(_) => {
            let mut files = vec![CONFIG, SCENE, CHECKPOINT, "losses.csv", "relocations.csv", "durations.csv", "init.json", METRICS];
            if cfg.nvf {
                files.push("warm_start.csv");
            }
            write_manifest(dir, &hash, "complete", &files)?;
        }
        Err(_) => write_manifest(dir, &hash, "failed", &[CONFIG, SCENE])?,
    }
    result
}
