//! Command implementations behind the `imp` binary.

pub mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use imp_core::agd::{read_metrics, TrainMode};
use imp_core::eval::EvalReport;
use imp_core::run::{self, Precision, RunConfig, METRICS_FILE};
use imp_core::CoreError;
use serde::Serialize;
use serde_json::{json, Value};

pub use report::{inspect_cache, plot, CacheSummary, PlotFiles};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = overrides.mode {
        cfg.mode = mode;
    }
    if let Some(steps) = overrides.steps {
        cfg.steps = steps;
    }
    if let Some(out) = &overrides.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct ShardRecord {
    pub dataset: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Writes train and eval shards for every dataset into `dir`.
pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<ShardRecord>> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let mut out = Vec::new();
    for handle in registry.iter() {
        for path in handle.write_shards(dir)? {
            let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
            out.push(ShardRecord {
                dataset: handle.name().to_string(),
                sha256: sha256_hex(&bytes),
                path,
            });
        }
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    imp_core::synth::shard::digest_hex(bytes)
}

/// Default shard directory for a config.
pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| cfg.out.join("data"))
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<Value> {
    cfg.validate()?;
    let registry = cfg.load_registry()?;
    let every = (cfg.steps / 20).max(1);
    let mut log = |m: &imp_core::agd::StepMetrics| {
        if (m.step + 1) % every == 0 {
            progress(&format!("step {} loss {:.4} lr {:.3e} task {}", m.step + 1, m.loss, m.lr, m.task));
        }
    };
    let summary = match cfg.precision {
        Precision::F32 => run::train::<f32>(cfg, &registry, resume, &mut log)?,
        Precision::F64 => run::train::<f64>(cfg, &registry, resume, &mut log)?,
    };
    Ok(json!({
        "steps_run": summary.steps_run,
        "final_step": summary.final_step,
        "final_loss": summary.final_loss,
        "plan_builds": summary.plan_builds,
        "checkpoint": summary.checkpoint,
        "metrics": cfg.out.join(METRICS_FILE),
        "config_hash": cfg.config_hash(),
    }))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, suite: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let registry = cfg.load_registry()?;
    let report = match cfg.precision {
        Precision::F32 => run::evaluate_checkpoint::<f32>(cfg, &registry, checkpoint, suite)?,
        Precision::F64 => run::evaluate_checkpoint::<f64>(cfg, &registry, checkpoint, suite)?,
    };
    Ok(report)
}

fn metrics_in(run_dir: &Path) -> Result<Vec<imp_core::agd::StepMetrics>> {
    let path = run_dir.join(METRICS_FILE);
    if !path.exists() {
        bail!(CoreError::Config(format!("no metrics stream at {}", path.display())));
    }
    Ok(read_metrics(&path)?)
}

pub fn cmd_inspect_cache(run_dir: &Path) -> Result<CacheSummary> {
    Ok(inspect_cache(&metrics_in(run_dir)?))
}

pub const EMA_DECAY: f64 = 0.99;

pub fn cmd_plot(run_dir: &Path) -> Result<PlotFiles> {
    plot(&metrics_in(run_dir)?, &run_dir.join("plots"), EMA_DECAY)
}

/// The single JSON line printed on failure.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<CoreError>())
        .map_or("error", CoreError::kind);
    json!({
        "error": kind,
        "message": format!("{err:#}"),
    })
    .to_string()
}
