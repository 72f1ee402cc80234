//! The alternating training loop and its two reference baselines.

use std::collections::BTreeMap;
use std::time::Instant;

use imp_tensor::{ParamTree, Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{PlanUse, RoutingRecord, StepMetrics};
use super::optim::{adam_update, AdamConfig, LrSchedule, Moments};
use super::plan::{PlanCache, TaskSignature};
use super::task::{TaskRegistry, TaskSpec};
use crate::error::{CoreError, Result};
use crate::init::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One sampled task per step, one objective per backward pass.
    Alternating,
    /// Every task each step; losses summed before a single backward pass.
    Summed,
    /// Every task each step on `B / n_tasks` examples; gradients averaged.
    Accumulated,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Alternating => "alternating",
            TrainMode::Summed => "summed",
            TrainMode::Accumulated => "accumulated",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(TrainMode::Alternating),
            "summed" => Ok(TrainMode::Summed),
            "accumulated" => Ok(TrainMode::Accumulated),
            _ => Err(CoreError::Config(format!(
                "unknown mode {s:?}; expected alternating, summed or accumulated"
            ))),
        }
    }
}

/// What a workload reports for one task's forward pass.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    pub tokens_per_batch: usize,
    pub tokens_by_modality: BTreeMap<String, usize>,
    pub routing: Vec<RoutingRecord>,
}

impl LossOutput {
    pub fn scalar(loss: Var) -> Self {
        Self {
            loss,
            tokens_per_batch: 0,
            tokens_by_modality: BTreeMap::new(),
            routing: Vec::new(),
        }
    }
}

/// The model-specific half of a training step.
pub trait Workload<T: Scalar> {
    type Plan;
    type Batch;

    fn signature(&self, task: &TaskSpec) -> Result<TaskSignature>;

    fn build_plan(&self, task: &TaskSpec, signature: &TaskSignature) -> Result<Self::Plan>;

    fn fetch_batch(
        &self,
        task: &TaskSpec,
        plan: &Self::Plan,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self::Batch>;

    #[allow(clippy::too_many_arguments)]
    fn loss(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        task: &TaskSpec,
        plan: &Self::Plan,
        batch: &Self::Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossOutput>;

    /// Hook run after each optimizer update.
    fn post_update(&self, _params: &mut ParamTree<T>) {}
}

/// Independent random streams, one per purpose.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub sampling: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub drop: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            sampling: keyed_rng(seed, "train/sampling"),
            data: keyed_rng(seed, "train/data"),
            drop: keyed_rng(seed, "train/drop"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T, P> {
    pub params: ParamTree<T>,
    pub moments: Moments<T>,
    /// Completed optimizer updates.
    pub step: u64,
    pub rng: RngStreams,
    pub cache: PlanCache<P>,
}

impl<T: Scalar, P> TrainState<T, P> {
    pub fn new(params: ParamTree<T>, seed: u64) -> Self {
        Self {
            moments: Moments::zeros_like(&params),
            params,
            step: 0,
            rng: RngStreams::new(seed),
            cache: PlanCache::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub registry: TaskRegistry,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub mode: TrainMode,
}

struct TaskRun {
    task: TaskSpec,
    signature: String,
    built: bool,
    loss: f64,
    out: LossOutput,
}

impl Trainer {
    pub fn new(
        registry: TaskRegistry,
        schedule: LrSchedule,
        adam: AdamConfig,
        mode: TrainMode,
    ) -> Self {
        Self {
            registry,
            schedule,
            adam,
            mode,
        }
    }

    fn forward_task<T: Scalar, W: Workload<T>>(
        workload: &W,
        state: &mut TrainState<T, W::Plan>,
        tape: &mut Tape<T>,
        task: &TaskSpec,
    ) -> Result<TaskRun> {
        let signature = workload.signature(task)?;
        let key = signature.key();
        let TrainState {
            params,
            rng,
            cache,
            step,
            ..
        } = state;
        let (plan, built) =
            cache.get_or_build(&key, *step, || workload.build_plan(task, &signature))?;
        let batch = workload.fetch_batch(task, plan, &mut rng.data)?;
        let out = workload.loss(tape, params, task, plan, &batch, &mut rng.drop)?;
        let loss = tape.value(out.loss)?.item()?.as_f64();
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                task: task.to_string(),
                step: *step,
                loss,
            });
        }
        Ok(TaskRun {
            task: task.clone(),
            signature: key,
            built,
            loss,
            out,
        })
    }

    fn apply_update<T: Scalar, W: Workload<T>>(
        &self,
        workload: &W,
        state: &mut TrainState<T, W::Plan>,
        grads: &ParamTree<T>,
    ) -> Result<f64> {
        let lr = self.schedule.rate(state.step);
        adam_update(
            &mut state.params,
            grads,
            &mut state.moments,
            lr,
            state.step + 1,
            &self.adam,
        )?;
        workload.post_update(&mut state.params);
        state.step += 1;
        Ok(lr)
    }

    fn metrics(
        runs: &[TaskRun],
        step: u64,
        loss: f64,
        lr: f64,
        builds: u64,
        started: Instant,
    ) -> StepMetrics {
        let join =
            |f: &dyn Fn(&TaskRun) -> String| runs.iter().map(f).collect::<Vec<_>>().join("+");
        let mut tokens_by_modality = BTreeMap::new();
        for r in runs {
            for (m, n) in &r.out.tokens_by_modality {
                *tokens_by_modality.entry(m.clone()).or_insert(0) += n;
            }
        }
        StepMetrics {
            step,
            task: join(&|r| r.task.id()),
            variant: join(&|r| r.task.variant.name.clone()),
            objective: join(&|r| r.task.objective.to_string()),
            loss,
            lr,
            tokens_per_batch: runs.iter().map(|r| r.out.tokens_per_batch).sum(),
            plan_builds_total: builds,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            plans: runs
                .iter()
                .map(|r| PlanUse {
                    signature: r.signature.clone(),
                    built: r.built,
                })
                .collect(),
            backward_objectives: runs.len(),
            tokens_by_modality,
            routing: runs
                .iter()
                .flat_map(|r| r.out.routing.iter().cloned())
                .collect(),
        }
    }

    /// One forward, one backward and one update on `task` alone.
    pub fn step_on<T: Scalar, W: Workload<T>>(
        &self,
        workload: &W,
        state: &mut TrainState<T, W::Plan>,
        task: &TaskSpec,
    ) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = state.step;
        let mut tape = Tape::new();
        let run = Self::forward_task(workload, state, &mut tape, task)?;
        let grads = tape.backward(run.out.loss)?;
        let lr = self.apply_update(workload, state, &grads)?;
        let loss = run.loss;
        Ok(Self::metrics(
            &[run],
            step,
            loss,
            lr,
            state.cache.builds(),
            started,
        ))
    }

    /// One step under the configured mode.
    pub fn step<T: Scalar, W: Workload<T>>(
        &self,
        workload: &W,
        state: &mut TrainState<T, W::Plan>,
    ) -> Result<StepMetrics> {
        match self.mode {
            TrainMode::Alternating => {
                let task = self.registry.sample(&mut state.rng.sampling);
                self.step_on(workload, state, &task)
            }
            TrainMode::Summed => {
                let started = Instant::now();
                let step = state.step;
                let tasks = self.registry.sample_each(&mut state.rng.sampling);
                let mut tape = Tape::new();
                let mut runs = Vec::with_capacity(tasks.len());
                for task in &tasks {
                    runs.push(Self::forward_task(workload, state, &mut tape, task)?);
                }
                let mut total = runs[0].out.loss;
                for r in &runs[1..] {
                    total = tape.add(total, r.out.loss)?;
                }
                let loss = tape.value(total)?.item()?.as_f64();
                let grads = tape.backward(total)?;
                let lr = self.apply_update(workload, state, &grads)?;
                Ok(Self::metrics(
                    &runs,
                    step,
                    loss,
                    lr,
                    state.cache.builds(),
                    started,
                ))
            }
            TrainMode::Accumulated => {
                let started = Instant::now();
                let step = state.step;
                let mut tasks = self.registry.sample_each(&mut state.rng.sampling);
                let n = tasks.len();
                for t in &mut tasks {
                    t.variant.batch = (t.variant.batch / n).max(1);
                }
                let mut acc: Option<ParamTree<T>> = None;
                let mut runs = Vec::with_capacity(n);
                for task in &tasks {
                    let mut tape = Tape::new();
                    let run = Self::forward_task(workload, state, &mut tape, task)?;
                    let grads = tape.backward(run.out.loss)?;
                    acc = Some(match acc {
                        None => grads,
                        Some(mut a) => {
                            for (path, g) in grads.iter() {
                                match a.get_mut(path) {
                                    Ok(t) => t
                                        .data_mut()
                                        .iter_mut()
                                        .zip(g.data())
                                        .for_each(|(x, &y)| *x += y),
                                    Err(_) => a.set(path, g.clone()),
                                }
                            }
                            a
                        }
                    });
                    runs.push(run);
                }
                let mut grads = acc.expect("at least one task");
                let inv = T::lit(1.0 / n as f64);
                for (_, g) in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= inv);
                }
                let loss = runs.iter().map(|r| r.loss).sum::<f64>() / n as f64;
                let lr = self.apply_update(workload, state, &grads)?;
                Ok(Self::metrics(
                    &runs,
                    step,
                    loss,
                    lr,
                    state.cache.builds(),
                    started,
                ))
            }
        }
    }

    /// Runs `steps` steps, handing each record to `sink`.
    pub fn run<T: Scalar, W: Workload<T>>(
        &self,
        workload: &W,
        state: &mut TrainState<T, W::Plan>,
        steps: u64,
        mut sink: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let m = self.step(workload, state)?;
            sink(&m)?;
        }
        Ok(())
    }
}
