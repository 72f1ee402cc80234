//! Binds the model, the synthetic registry and the objectives to the trainer.

use std::collections::BTreeMap;

use imp_tensor::{ParamTree, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agd::{
    InputShape, LossOutput, Resolution, RoutingRecord, TaskSignature, TaskSpec, Workload,
};
use crate::embed::{keep_count, PositionIndex, TokenGrid};
use crate::encoder::ForwardOptions;
use crate::error::{CoreError, Result};
use crate::heads::{
    bce_loss, clamp_temperature, classifier_prefix, nce_pair_loss, nce_triplet_loss, pool,
    pool_and_project, projection_prefix, sce_loss, ClassifierHead, ObjectiveKind, ProjectionHead,
    TEMPERATURE_PATH,
};
use crate::init::ParamSpec;
use crate::model::ModelConfig;
use crate::sample::{Modality, RawSample};
use crate::synth::{gen_caption, resize, Registry, Split, SynthConfig};

/// Encoder inputs an objective consumes on a dataset.
pub fn objective_inputs(
    objective: &ObjectiveKind,
    primary: Option<Modality>,
) -> Result<Vec<Modality>> {
    match objective {
        ObjectiveKind::Sce | ObjectiveKind::Bce => primary
            .map(|m| vec![m])
            .ok_or_else(|| CoreError::Config(format!("{objective} needs a non-text modality"))),
        _ => Ok(objective.modalities()),
    }
}

/// Geometry a dataset renders `modality` at before any variant resize.
pub fn default_resolution(synth: &SynthConfig, modality: Modality) -> Resolution {
    match modality {
        Modality::Video => Resolution::Video {
            frames: synth.video[0],
            height: synth.video[1],
            width: synth.video[2],
        },
        Modality::Image => Resolution::Image {
            height: synth.image[0],
            width: synth.image[1],
        },
        Modality::Spectrogram => Resolution::Spectrogram {
            bins: synth.spectrogram[0],
            steps: synth.spectrogram[1],
        },
        Modality::Waveform => Resolution::Waveform {
            samples: synth.waveform,
        },
        Modality::Text => Resolution::Text,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedInput {
    pub modality: Modality,
    pub resolution: Resolution,
    pub grid: TokenGrid,
    pub drop_ratio: f64,
    pub positions: PositionIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadSelection {
    Classifier { dataset: String, classes: usize },
    Projections(Vec<Modality>),
}

/// Prepared pipeline for one task signature.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub signature: TaskSignature,
    pub inputs: Vec<PlannedInput>,
    pub head: HeadSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub indices: Vec<u64>,
    pub labels: Vec<usize>,
    /// One sample list per planned input, in plan order.
    pub inputs: Vec<Vec<RawSample>>,
}

pub struct ImpWorkload<'a> {
    pub model: &'a ModelConfig,
    pub registry: &'a Registry,
}

impl<'a> ImpWorkload<'a> {
    pub fn new(model: &'a ModelConfig, registry: &'a Registry) -> Self {
        Self { model, registry }
    }

    /// Every parameter, with one classifier per registered dataset.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let classifiers: Vec<(String, usize)> = self
            .registry
            .iter()
            .map(|h| (h.name().to_string(), h.num_classes()))
            .collect();
        self.model.param_specs(&classifiers)
    }

    fn text_grid(&self, synth: &SynthConfig) -> Result<TokenGrid> {
        let len = gen_caption(0, synth)?.len().min(self.model.text_max_len);
        Ok(TokenGrid {
            frames: 1,
            height: 1,
            width: len,
        })
    }

    fn planned_inputs(&self, task: &TaskSpec) -> Result<Vec<PlannedInput>> {
        let handle = self.registry.lookup(&task.dataset)?;
        handle.check_objective(&task.objective)?;
        let modalities = objective_inputs(&task.objective, handle.spec.primary_modality())?;
        let varied = task.variant.resolution.modality();
        if !modalities.contains(&varied) {
            return Err(CoreError::Config(format!(
                "task {} varies {varied} but its objective reads {modalities:?}",
                task.id()
            )));
        }
        modalities
            .into_iter()
            .map(|m| {
                let (resolution, drop_ratio) = if m == varied {
                    (task.variant.resolution.clone(), task.variant.drop_ratio)
                } else {
                    (default_resolution(&handle.synth, m), 0.0)
                };
                let grid = match m {
                    Modality::Text => self.text_grid(&handle.synth)?,
                    _ => resolution.grid(self.model)?,
                };
                let positions = PositionIndex::for_grid(m, grid, &self.model.buckets)?;
                Ok(PlannedInput {
                    modality: m,
                    resolution,
                    grid,
                    drop_ratio,
                    positions,
                })
            })
            .collect()
    }

    fn heads(&self, task: &TaskSpec, inputs: &[PlannedInput]) -> Result<HeadSelection> {
        Ok(match task.objective {
            ObjectiveKind::Sce | ObjectiveKind::Bce => HeadSelection::Classifier {
                dataset: task.dataset.clone(),
                classes: self.registry.lookup(&task.dataset)?.num_classes(),
            },
            _ => HeadSelection::Projections(inputs.iter().map(|i| i.modality).collect()),
        })
    }

    fn signature_of(
        &self,
        task: &TaskSpec,
        inputs: &[PlannedInput],
        head: &HeadSelection,
    ) -> Result<TaskSignature> {
        let shapes = inputs
            .iter()
            .map(|i| {
                Ok(InputShape {
                    modality: i.modality,
                    grid: i.grid,
                    tokens: keep_count(i.grid.len(), i.drop_ratio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = match head {
            HeadSelection::Classifier { dataset, .. } => vec![classifier_prefix(dataset)],
            HeadSelection::Projections(ms) => {
                let mut h: Vec<String> = ms.iter().map(|m| projection_prefix(*m)).collect();
                h.push(TEMPERATURE_PATH.to_string());
                h
            }
        };
        Ok(TaskSignature {
            inputs: shapes,
            batch: task.variant.batch,
            objective: task.objective.to_string(),
            heads,
        })
    }
}

fn routing_records(modality: Modality, out: &crate::encoder::EncoderOutput) -> Vec<RoutingRecord> {
    out.decisions
        .iter()
        .map(|d| RoutingRecord {
            modality: modality.to_string(),
            layer: d.layer,
            router: d.decision.kind,
            tokens: d.decision.num_tokens,
            capacity: d.decision.capacity,
            loads: d.decision.loads(),
            dropped: d.decision.dropped.len(),
        })
        .collect()
}

impl<T: Scalar> Workload<T> for ImpWorkload<'_> {
    type Plan = StepPlan;
    type Batch = StepBatch;

    fn signature(&self, task: &TaskSpec) -> Result<TaskSignature> {
        let inputs = self.planned_inputs(task)?;
        let head = self.heads(task, &inputs)?;
        self.signature_of(task, &inputs, &head)
    }

    fn build_plan(&self, task: &TaskSpec, signature: &TaskSignature) -> Result<StepPlan> {
        let inputs = self.planned_inputs(task)?;
        let head = self.heads(task, &inputs)?;
        Ok(StepPlan {
            signature: signature.clone(),
            inputs,
            head,
        })
    }

    fn fetch_batch(
        &self,
        task: &TaskSpec,
        plan: &StepPlan,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepBatch> {
        let handle = self.registry.lookup(&task.dataset)?;
        let n = handle.example_count(Split::Train);
        let b = task.variant.batch;
        let indices: Vec<u64> = if n >= b as u64 {
            rand::seq::index::sample(rng, n as usize, b)
                .into_iter()
                .map(|i| i as u64)
                .collect()
        } else {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        };
        let mut labels = Vec::with_capacity(b);
        let mut inputs = vec![Vec::with_capacity(b); plan.inputs.len()];
        for &i in &indices {
            let ex = handle.example(Split::Train, i)?;
            labels.push(ex.class);
            for (slot, p) in inputs.iter_mut().zip(&plan.inputs) {
                let s = ex.get(p.modality).ok_or_else(|| {
                    CoreError::Config(format!(
                        "{} example {i} has no {}",
                        task.dataset, p.modality
                    ))
                })?;
                slot.push(match p.modality {
                    Modality::Text => s.clone(),
                    _ => resize(s, &p.resolution.dims())?,
                });
            }
        }
        Ok(StepBatch {
            indices,
            labels,
            inputs,
        })
    }

    fn loss(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        task: &TaskSpec,
        plan: &StepPlan,
        batch: &StepBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossOutput> {
        let mut encoded = Vec::with_capacity(plan.inputs.len());
        let mut tokens_by_modality = BTreeMap::new();
        let mut routing = Vec::new();
        for (p, samples) in plan.inputs.iter().zip(&batch.inputs) {
            let refs: Vec<&RawSample> = samples.iter().collect();
            let drop = (p.drop_ratio > 0.0).then_some((p.drop_ratio, &mut *rng));
            let tokens =
                self.model
                    .embed(tape, params, p.modality, &refs, Some(&p.positions), drop)?;
            let out = self
                .model
                .encode(tape, params, &tokens, &ForwardOptions::default())?;
            *tokens_by_modality
                .entry(p.modality.to_string())
                .or_insert(0) += tokens.budget.batch * tokens.seq_len;
            routing.extend(routing_records(p.modality, &out));
            encoded.push(out.hidden);
        }
        let loss = match &plan.head {
            HeadSelection::Classifier { dataset, classes } => {
                let head = ClassifierHead::bind(tape, params, dataset)?;
                let pooled = pool(tape, encoded[0])?;
                let logits = head.apply(tape, pooled)?;
                if task.objective == ObjectiveKind::Bce {
                    let targets = one_hot::<T>(&batch.labels, *classes)?;
                    bce_loss(tape, logits, &targets)?
                } else {
                    sce_loss(tape, logits, &batch.labels)?
                }
            }
            HeadSelection::Projections(ms) => {
                let z = ms
                    .iter()
                    .zip(&encoded)
                    .map(|(m, &h)| {
                        let head = ProjectionHead::bind(tape, params, *m)?;
                        pool_and_project(tape, h, &head)
                    })
                    .collect::<Result<Vec<Var>>>()?;
                let t = tape.bind(params, TEMPERATURE_PATH)?;
                match task.objective {
                    ObjectiveKind::NceTriplet => nce_triplet_loss(tape, z[0], z[1], z[2], t)?,
                    _ => nce_pair_loss(tape, z[0], z[1], t)?,
                }
            }
        };
        Ok(LossOutput {
            loss,
            tokens_per_batch: tokens_by_modality.values().sum(),
            tokens_by_modality,
            routing,
        })
    }

    fn post_update(&self, params: &mut ParamTree<T>) {
        clamp_temperature(params);
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::Label { label, classes });
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    })?)
}
