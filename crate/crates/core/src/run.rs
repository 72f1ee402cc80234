//! Declarative run configuration and the end-to-end training driver.

use std::fs;
use std::path::{Path, PathBuf};

use imp_tensor::{ParamTree, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agd::{
    load_checkpoint, make_variants, save_checkpoint, AdamConfig, InputVariant, LrSchedule,
    MetricsWriter, Resolution, StepMetrics, TaskGroup, TaskRegistry, TrainMode, TrainState,
    Trainer, Workload,
};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate, EvalReport, EvalSuite, Provenance};
use crate::heads::ObjectiveKind;
use crate::init::init_params;
use crate::model::ModelConfig;
use crate::synth::{DatasetSpec, Registry, SynthConfig};
use crate::workload::{ImpWorkload, StepPlan};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub dataset: String,
    /// `sce`, `bce`, `nce_pair(a,b)` or `nce_triplet`.
    pub objective: String,
    pub batch: usize,
    pub resolution: Resolution,
    #[serde(default)]
    pub multi_resolution: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub floor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_fraction: 0.05,
            floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    pub steps: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Shards written by `gen-data`; examples are generated on the fly when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Save every this many steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    pub datasets: Vec<DatasetSpec>,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub suites: Vec<EvalSuite>,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_mode() -> TrainMode {
    TrainMode::Alternating
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CoreError::Config(m) => CoreError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form; any field change alters it.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Registry over generated examples, ignoring `data_dir`.
    pub fn registry(&self) -> Result<Registry> {
        Registry::new(&self.synth, &self.datasets)
    }

    /// Registry reading from `data_dir` when set.
    pub fn load_registry(&self) -> Result<Registry> {
        let mut r = self.registry()?;
        if let Some(dir) = &self.data_dir {
            r.load_shards(dir)?;
        }
        Ok(r)
    }

    pub fn schedule(&self) -> LrSchedule {
        let s = &self.schedule;
        LrSchedule {
            peak: s.peak_lr,
            total_steps: self.steps,
            warmup_steps: (self.steps as f64 * s.warmup_fraction).round() as u64,
            floor: s.floor,
        }
    }

    pub fn task_groups(&self, registry: &Registry) -> Result<Vec<TaskGroup>> {
        self.tasks
            .iter()
            .map(|t| {
                let handle = registry.lookup(&t.dataset)?;
                let objective: ObjectiveKind = t.objective.parse()?;
                handle.check_objective(&objective)?;
                let base = InputVariant::base(t.batch, t.resolution.clone());
                Ok(TaskGroup {
                    dataset: t.dataset.clone(),
                    objective,
                    example_count: handle.example_count(crate::synth::Split::Train),
                    variants: make_variants(&base, self.model.patch, t.multi_resolution)?,
                })
            })
            .collect()
    }

    pub fn trainer(&self, registry: &Registry) -> Result<Trainer> {
        Ok(Trainer::new(
            TaskRegistry::new(self.task_groups(registry)?)?,
            self.schedule(),
            self.adam,
            self.mode,
        ))
    }

    /// Checks every cross-reference before any compute: datasets, objectives,
    /// heads, kernels against geometries, and eval suites.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.schedule.warmup_fraction) {
            return Err(CoreError::Config(
                "warmup_fraction must lie in [0, 1]".into(),
            ));
        }
        self.model.validate()?;
        self.schedule().validate()?;
        self.adam.validate()?;
        let registry = self.registry()?;
        let trainer = self.trainer(&registry)?;
        let workload = ImpWorkload::new(&self.model, &registry);
        for task in trainer.registry.all_tasks() {
            if task.variant.batch == 0 {
                return Err(CoreError::Config(format!("task {task} has batch 0")));
            }
            let sig = Workload::<f32>::signature(&workload, &task)?;
            if self.model.encoder.moe_layers().is_empty() {
                continue;
            }
            let tokens: Vec<usize> = sig
                .inputs
                .iter()
                .map(|i| i.tokens * task.variant.batch)
                .collect();
            for n in tokens {
                let k = self.model.encoder.capacity_factor * n as f64
                    / self.model.encoder.num_experts as f64;
                if self.model.encoder.router_kind == crate::encoder::RouterKind::ExpertChoice
                    && k < 1.0
                {
                    return Err(CoreError::ZeroCapacity {
                        capacity: self.model.encoder.capacity_factor,
                        tokens: n,
                        experts: self.model.encoder.num_experts,
                    });
                }
            }
        }
        if self.mode == TrainMode::Accumulated {
            let n = trainer.registry.groups().len();
            for g in trainer.registry.groups() {
                for v in &g.variants {
                    if v.batch % n != 0 {
                        return Err(CoreError::Config(format!(
                            "accumulated mode splits batch {} of {} across {n} tasks unevenly",
                            v.batch,
                            g.id()
                        )));
                    }
                }
            }
        }
        for suite in &self.suites {
            for d in &suite.datasets {
                registry.lookup(d)?;
            }
        }
        Ok(())
    }

    pub fn suite(&self, name: &str) -> Result<&EvalSuite> {
        self.suites.iter().find(|s| s.name == name).ok_or_else(|| {
            CoreError::Config(format!(
                "unknown suite {name:?}; configured: {:?}",
                self.suites.iter().map(|s| &s.name).collect::<Vec<_>>()
            ))
        })
    }
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

/// Most recent checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::agd::checkpoint::MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    dirs.pop()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub final_loss: f64,
    pub plan_builds: u64,
    pub checkpoint: PathBuf,
}

/// Fresh parameters for `config`.
pub fn initial_params<T: Scalar>(config: &RunConfig, registry: &Registry) -> Result<ParamTree<T>> {
    init_params(
        &ImpWorkload::new(&config.model, registry).param_specs(),
        config.seed,
    )
}

/// Trains until `config.steps` updates have been applied, resuming from
/// `resume` when given. Metrics are appended to `out/metrics.jsonl`.
pub fn train<T: Scalar>(
    config: &RunConfig,
    registry: &Registry,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunSummary> {
    config.validate()?;
    let trainer = config.trainer(registry)?;
    let workload = ImpWorkload::new(&config.model, registry);
    let hash = config.config_hash();
    let mut state: TrainState<T, StepPlan> = match resume {
        Some(dir) => {
            let ck = load_checkpoint::<T>(dir)?;
            ck.check_compatible(&initial_params::<T>(config, registry)?, dir)?;
            ck.into_state()
        }
        None => TrainState::new(initial_params(config, registry)?, config.seed),
    };
    fs::create_dir_all(&config.out).map_err(|e| CoreError::io(&config.out, e))?;
    fs::write(config.out.join(CONFIG_FILE), config.to_toml()?)
        .map_err(|e| CoreError::io(&config.out, e))?;
    let mut writer = MetricsWriter::append(&config.out.join(METRICS_FILE))?;
    let start = state.step;
    let mut final_loss = f64::NAN;
    while state.step < config.steps {
        let m = trainer.step(&workload, &mut state)?;
        writer.write(&m)?;
        final_loss = m.loss;
        on_step(&m);
        if config.checkpoint_every > 0
            && state.step % config.checkpoint_every == 0
            && state.step < config.steps
        {
            writer.flush()?;
            save_checkpoint(
                &checkpoint_dir(&config.out, state.step),
                &state,
                Some(&hash),
            )?;
        }
    }
    writer.flush()?;
    let checkpoint = checkpoint_dir(&config.out, state.step);
    save_checkpoint(&checkpoint, &state, Some(&hash))?;
    Ok(RunSummary {
        steps_run: state.step - start,
        final_step: state.step,
        final_loss,
        plan_builds: state.cache.builds(),
        checkpoint,
    })
}

/// Scores a saved checkpoint on one suite.
pub fn evaluate_checkpoint<T: Scalar>(
    config: &RunConfig,
    registry: &Registry,
    checkpoint: &Path,
    suite: &str,
) -> Result<EvalReport> {
    let suite = config.suite(suite)?;
    for d in &suite.datasets {
        registry.lookup(d)?;
    }
    let ck = load_checkpoint::<T>(checkpoint)?;
    ck.check_compatible(&initial_params::<T>(config, registry)?, checkpoint)?;
    let provenance = Provenance {
        checkpoint: checkpoint.display().to_string(),
        step: ck.step,
        config_hash: config.config_hash(),
    };
    evaluate(&config.model, &ck.params, registry, suite, provenance)
}
