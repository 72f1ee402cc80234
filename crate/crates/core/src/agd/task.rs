use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{keep_count, PatchKernel, TokenGrid};
use crate::error::{CoreError, Result};
use crate::heads::ObjectiveKind;
use crate::model::ModelConfig;
use crate::sample::Modality;

/// Input geometry of the modality a task varies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum Resolution {
    Video {
        frames: usize,
        height: usize,
        width: usize,
    },
    Image {
        height: usize,
        width: usize,
    },
    Spectrogram {
        bins: usize,
        steps: usize,
    },
    Waveform {
        samples: usize,
    },
    Text,
}

impl Resolution {
    pub fn modality(&self) -> Modality {
        match self {
            Resolution::Video { .. } => Modality::Video,
            Resolution::Image { .. } => Modality::Image,
            Resolution::Spectrogram { .. } => Modality::Spectrogram,
            Resolution::Waveform { .. } => Modality::Waveform,
            Resolution::Text => Modality::Text,
        }
    }

    /// Spatial extents as passed to the resizer.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Resolution::Video {
                frames,
                height,
                width,
            } => vec![frames, height, width],
            Resolution::Image { height, width } => vec![height, width],
            Resolution::Spectrogram { bins, steps } => vec![bins, steps],
            Resolution::Waveform { samples } => vec![samples],
            Resolution::Text => Vec::new(),
        }
    }

    /// Token grid the embedder produces for this geometry.
    pub fn grid(&self, model: &ModelConfig) -> Result<TokenGrid> {
        let div = |axis: &'static str, extent: usize, patch: usize| {
            if patch == 0 || extent == 0 || extent % patch != 0 {
                Err(CoreError::Indivisible {
                    axis,
                    extent,
                    patch,
                })
            } else {
                Ok(extent / patch)
            }
        };
        let k: PatchKernel = model.patch;
        Ok(match *self {
            Resolution::Video {
                frames,
                height,
                width,
            } => TokenGrid {
                frames: div("frames", frames, k.frames)?,
                height: div("height", height, k.height)?,
                width: div("width", width, k.width)?,
            },
            Resolution::Image { height, width } => TokenGrid {
                frames: 1,
                height: div("height", height, k.height)?,
                width: div("width", width, k.width)?,
            },
            Resolution::Spectrogram { bins, steps } => TokenGrid {
                frames: 1,
                height: div("height", bins, model.spectrogram_patch[0])?,
                width: div("width", steps, model.spectrogram_patch[1])?,
            },
            Resolution::Waveform { samples } => {
                let used = samples.min(model.waveform_window * model.waveform_max_tokens);
                TokenGrid {
                    frames: 1,
                    height: 1,
                    width: div("samples", used, model.waveform_window)?,
                }
            }
            Resolution::Text => TokenGrid {
                frames: 1,
                height: 1,
                width: model.text_max_len,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputVariant {
    pub name: String,
    pub batch: usize,
    pub resolution: Resolution,
    #[serde(default)]
    pub drop_ratio: f64,
}

impl InputVariant {
    pub fn base(batch: usize, resolution: Resolution) -> Self {
        Self {
            name: "base".into(),
            batch,
            resolution,
            drop_ratio: 0.0,
        }
    }

    /// Tokens per example after DropToken.
    pub fn tokens_per_example(&self, model: &ModelConfig) -> Result<usize> {
        keep_count(self.resolution.grid(model)?.len(), self.drop_ratio)
    }

    /// `B * T_F * T_H * T_W * (1 - d)`, with DropToken rounding.
    pub fn tokens_per_batch(&self, model: &ModelConfig) -> Result<usize> {
        Ok(self.batch * self.tokens_per_example(model)?)
    }
}

fn halve(axis: &'static str, extent: usize) -> Result<usize> {
    if extent % 2 != 0 || extent < 2 {
        return Err(CoreError::Indivisible {
            axis,
            extent,
            patch: 2,
        });
    }
    Ok(extent / 2)
}

fn quarter_batch(batch: usize) -> Result<usize> {
    if batch % 4 != 0 {
        return Err(CoreError::Indivisible {
            axis: "batch",
            extent: batch,
            patch: 4,
        });
    }
    Ok(batch / 4)
}

/// Resolution variants of a base input.
///
/// Video yields half resolution, quarter batch, and DropToken `1 - 1/T_F`,
/// each matching the image budget of the same batch size. Images yield the
/// base, quarter batch at double resolution, and DropToken `0.75` at double
/// resolution. Other modalities, or `multi_resolution = false`, yield the
/// base alone.
pub fn make_variants(
    base: &InputVariant,
    kernel: PatchKernel,
    multi_resolution: bool,
) -> Result<Vec<InputVariant>> {
    if !multi_resolution {
        return Ok(vec![base.clone()]);
    }
    let b = base.batch;
    match base.resolution {
        Resolution::Video {
            frames,
            height,
            width,
        } => {
            let frame_tokens = frames / kernel.frames.max(1);
            if frame_tokens < 2 || frames % kernel.frames != 0 {
                return Err(CoreError::Config(format!(
                    "video variants need at least 2 frame tokens, got {frames} frames with kernel depth {}",
                    kernel.frames
                )));
            }
            Ok(vec![
                InputVariant {
                    name: "half_res".into(),
                    batch: b,
                    resolution: Resolution::Video {
                        frames,
                        height: halve("height", height)?,
                        width: halve("width", width)?,
                    },
                    drop_ratio: 0.0,
                },
                InputVariant {
                    name: "quarter_batch".into(),
                    batch: quarter_batch(b)?,
                    resolution: base.resolution.clone(),
                    drop_ratio: 0.0,
                },
                InputVariant {
                    name: "drop_token".into(),
                    batch: b,
                    resolution: base.resolution.clone(),
                    drop_ratio: 1.0 - 1.0 / frame_tokens as f64,
                },
            ])
        }
        Resolution::Image { height, width } => {
            let double = Resolution::Image {
                height: 2 * height,
                width: 2 * width,
            };
            Ok(vec![
                InputVariant {
                    name: "base".into(),
                    ..base.clone()
                },
                InputVariant {
                    name: "quarter_batch_double_res".into(),
                    batch: quarter_batch(b)?,
                    resolution: double.clone(),
                    drop_ratio: 0.0,
                },
                InputVariant {
                    name: "drop_token_double_res".into(),
                    batch: b,
                    resolution: double,
                    drop_ratio: 0.75,
                },
            ])
        }
        _ => Ok(vec![base.clone()]),
    }
}

/// A dataset-objective pair with its input variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub dataset: String,
    pub objective: ObjectiveKind,
    pub example_count: u64,
    pub variants: Vec<InputVariant>,
}

impl TaskGroup {
    pub fn id(&self) -> String {
        format!("{}/{}", self.dataset, self.objective)
    }
}

/// One sampled unit of alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub group: usize,
    pub dataset: String,
    pub objective: ObjectiveKind,
    pub variant_index: usize,
    pub variant: InputVariant,
    pub example_count: u64,
    /// Probability of the group under size-proportional sampling.
    pub weight: f64,
}

impl TaskSpec {
    pub fn id(&self) -> String {
        format!("{}/{}", self.dataset, self.objective)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.id(), self.variant.name)
    }
}

#[derive(Debug, Clone)]
pub struct TaskRegistry {
    groups: Vec<TaskGroup>,
    weights: Vec<f64>,
    picker: WeightedIndex<f64>,
}

impl TaskRegistry {
    pub fn new(groups: Vec<TaskGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::EmptyRegistry);
        }
        if let Some(g) = groups
            .iter()
            .find(|g| g.variants.is_empty() || g.example_count == 0)
        {
            return Err(CoreError::Config(format!(
                "task {} needs at least one variant and one example",
                g.id()
            )));
        }
        let total: f64 = groups.iter().map(|g| g.example_count as f64).sum();
        let weights: Vec<f64> = groups
            .iter()
            .map(|g| g.example_count as f64 / total)
            .collect();
        let picker = WeightedIndex::new(&weights)
            .map_err(|e| CoreError::Config(format!("task weights: {e}")))?;
        Ok(Self {
            groups,
            weights,
            picker,
        })
    }

    pub fn groups(&self) -> &[TaskGroup] {
        &self.groups
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn task(&self, group: usize, variant: usize) -> Result<TaskSpec> {
        let g = self
            .groups
            .get(group)
            .ok_or_else(|| CoreError::Config(format!("no task group {group}")))?;
        let v = g.variants.get(variant).ok_or_else(|| {
            CoreError::Config(format!("task {} has no variant {variant}", g.id()))
        })?;
        Ok(TaskSpec {
            group,
            dataset: g.dataset.clone(),
            objective: g.objective,
            variant_index: variant,
            variant: v.clone(),
            example_count: g.example_count,
            weight: self.weights[group],
        })
    }

    /// Every `(group, variant)` pair.
    pub fn all_tasks(&self) -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            for v in 0..group.variants.len() {
                out.push(self.task(g, v).expect("indices in range"));
            }
        }
        out
    }

    /// Draws a group in proportion to its example count, then one of its
    /// variants uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        let g = self.picker.sample(rng);
        let v = rng.random_range(0..self.groups[g].variants.len());
        self.task(g, v).expect("sampled indices in range")
    }

    /// One task per group with a uniformly drawn variant, in group order.
    pub fn sample_each<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TaskSpec> {
        (0..self.groups.len())
            .map(|g| {
                let v = rng.random_range(0..self.groups[g].variants.len());
                self.task(g, v).expect("indices in range")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video_base() -> InputVariant {
        InputVariant::base(
            8,
            Resolution::Video {
                frames: 16,
                height: 64,
                width: 64,
            },
        )
    }

    #[test]
    fn video_variants_share_the_image_budget() {
        let model = ModelConfig::default();
        let vs = make_variants(&video_base(), model.patch, true).unwrap();
        let names: Vec<_> = vs.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["half_res", "quarter_batch", "drop_token"]);
        assert_eq!(vs[0].resolution.dims(), vec![16, 32, 32]);
        assert_eq!(vs[1].batch, 2);
        assert_eq!(vs[2].drop_ratio, 0.75);
        let image = InputVariant::base(
            8,
            Resolution::Image {
                height: 64,
                width: 64,
            },
        );
        let budget = image.tokens_per_batch(&model).unwrap();
        assert_eq!(budget, 128);
        for v in &vs {
            assert_eq!(v.tokens_per_batch(&model).unwrap(), budget, "{}", v.name);
        }
    }

    #[test]
    fn image_variants_conserve_budget() {
        let model = ModelConfig::default();
        let base = InputVariant::base(
            8,
            Resolution::Image {
                height: 64,
                width: 64,
            },
        );
        let vs = make_variants(&base, model.patch, true).unwrap();
        assert_eq!(vs.len(), 3);
        for v in &vs {
            assert_eq!(v.tokens_per_batch(&model).unwrap(), 128, "{}", v.name);
        }
    }

    #[test]
    fn single_variant_and_errors() {
        let k = PatchKernel::default();
        assert_eq!(
            make_variants(&video_base(), k, false).unwrap(),
            vec![video_base()]
        );
        let odd = InputVariant::base(
            6,
            Resolution::Image {
                height: 64,
                width: 64,
            },
        );
        assert!(make_variants(&odd, k, true).is_err());
        let odd_res = InputVariant::base(
            8,
            Resolution::Video {
                frames: 16,
                height: 33,
                width: 64,
            },
        );
        assert!(make_variants(&odd_res, k, true).is_err());
        assert!(matches!(
            TaskRegistry::new(vec![]),
            Err(CoreError::EmptyRegistry)
        ));
    }

    #[test]
    fn single_task_always_selected() {
        use rand::SeedableRng;
        let reg = TaskRegistry::new(vec![TaskGroup {
            dataset: "a".into(),
            objective: ObjectiveKind::Sce,
            example_count: 5,
            variants: vec![video_base()],
        }])
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = reg.sample(&mut rng);
            assert_eq!((t.group, t.variant_index), (0, 0));
        }
    }
}
