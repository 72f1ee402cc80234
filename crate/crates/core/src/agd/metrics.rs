use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::RouterKind;
use crate::error::{CoreError, Result};

/// Expert loads of one MoE layer in one encoder pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub modality: String,
    pub layer: usize,
    pub router: RouterKind,
    /// Flattened tokens routed, `B * S`.
    pub tokens: usize,
    pub capacity: usize,
    pub loads: Vec<usize>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanUse {
    pub signature: String,
    /// Whether this step built the plan.
    pub built: bool,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task: String,
    pub variant: String,
    pub objective: String,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_batch: usize,
    pub plan_builds_total: u64,
    pub wall_ms: f64,
    /// Plans used by this step, in task order.
    pub plans: Vec<PlanUse>,
    /// Objectives that contributed to this step's backward pass.
    pub backward_objectives: usize,
    #[serde(default)]
    pub tokens_by_modality: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routing: Vec<RoutingRecord>,
}

impl StepMetrics {
    /// Copy with timing removed, for trajectory comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path` for appending (creating parent directories).
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CoreError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| CoreError::Serde(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| CoreError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CoreError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line)
            .map_err(|e| CoreError::Serde(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(m);
    }
    Ok(out)
}
