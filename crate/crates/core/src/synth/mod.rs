//! Deterministic synthetic multimodal datasets.
//!
//! Every example is a pure function of `(master seed, dataset name, index)`.
//! Train examples occupy indices `0..train`, eval examples the following
//! `eval` indices, so the splits never overlap.

mod gen;
pub mod shard;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use gen::*;

use crate::error::{CoreError, Result};
use crate::heads::{label_text_decode, ObjectiveKind};
use crate::init::keyed_rng;
use crate::sample::{Modality, RawSample};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub index: u64,
    pub class: usize,
    /// One sample per modality of the dataset, in modality order.
    pub samples: Vec<RawSample>,
    pub caption: Vec<u32>,
}

impl SynthExample {
    pub fn get(&self, modality: Modality) -> Option<&RawSample> {
        self.samples.iter().find(|s| s.modality == modality)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub modalities: Vec<Modality>,
    pub train_examples: u64,
    pub eval_examples: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(format!("dataset {:?}: {m}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return fail("name must be non-empty [A-Za-z0-9_-]".into());
        }
        if self.modalities.is_empty() {
            return fail("no modalities".into());
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return fail("duplicate modality".into());
        }
        if self.train_examples == 0 {
            return fail("train_examples must be positive".into());
        }
        Ok(())
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// The modality classified by SCE/BCE heads: the first non-text one.
    pub fn primary_modality(&self) -> Option<Modality> {
        Modality::ALL
            .into_iter()
            .find(|m| *m != Modality::Text && self.has(*m))
    }

    pub fn supports(&self, objective: &ObjectiveKind) -> bool {
        match objective {
            ObjectiveKind::Sce | ObjectiveKind::Bce => self.primary_modality().is_some(),
            ObjectiveKind::NcePair { a, b } => a != b && self.has(*a) && self.has(*b),
            ObjectiveKind::NceTriplet => objective.modalities().iter().all(|m| self.has(*m)),
        }
    }

    pub fn count(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train_examples,
            Split::Eval => self.eval_examples,
        }
    }

    fn global_index(&self, split: Split, i: u64) -> Result<u64> {
        if i >= self.count(split) {
            return Err(CoreError::Config(format!(
                "{} example {i} out of range for {:?} ({} examples)",
                split,
                self.name,
                self.count(split)
            )));
        }
        Ok(match split {
            Split::Train => i,
            Split::Eval => self.train_examples + i,
        })
    }
}

/// Generates example `index` (a global index spanning both splits).
pub fn generate(spec: &DatasetSpec, config: &SynthConfig, index: u64) -> Result<SynthExample> {
    let key = format!("synth/{}/{index}", spec.name);
    let mut class_rng = keyed_rng(config.seed, &format!("{key}/class"));
    let class = rand::Rng::random_range(&mut class_rng, 0..config.num_classes);
    let latent = Latent::sample(&mut keyed_rng(config.seed, &format!("{key}/latent")));
    let mut samples = Vec::with_capacity(spec.modalities.len());
    for m in Modality::ALL.into_iter().filter(|m| spec.has(*m)) {
        let mut noise_rng = keyed_rng(config.seed, &format!("{key}/noise/{m}"));
        samples.push(gen_modality(m, class, &latent, config, &mut noise_rng)?);
    }
    Ok(SynthExample {
        index,
        class,
        samples,
        caption: gen_caption(class, config)?,
    })
}

pub fn shard_path(dir: &Path, dataset: &str, split: Split) -> PathBuf {
    dir.join(format!("{dataset}-{split}.shard"))
}

#[derive(Debug, Clone)]
enum Source {
    Generated,
    Loaded {
        train: Vec<SynthExample>,
        eval: Vec<SynthExample>,
    },
}

/// A registered dataset.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub spec: DatasetSpec,
    pub synth: SynthConfig,
    source: Source,
}

impl DatasetHandle {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn num_classes(&self) -> usize {
        self.synth.num_classes
    }

    pub fn example_count(&self, split: Split) -> u64 {
        match &self.source {
            Source::Generated => self.spec.count(split),
            Source::Loaded { train, eval } => match split {
                Split::Train => train.len() as u64,
                Split::Eval => eval.len() as u64,
            },
        }
    }

    pub fn example(&self, split: Split, i: u64) -> Result<SynthExample> {
        match &self.source {
            Source::Generated => {
                generate(&self.spec, &self.synth, self.spec.global_index(split, i)?)
            }
            Source::Loaded { train, eval } => {
                let pool = if split == Split::Train { train } else { eval };
                pool.get(i as usize).cloned().ok_or_else(|| {
                    CoreError::Config(format!(
                        "{split} example {i} out of range for {:?}",
                        self.spec.name
                    ))
                })
            }
        }
    }

    pub fn examples(&self, split: Split) -> Result<Vec<SynthExample>> {
        (0..self.example_count(split))
            .map(|i| self.example(split, i))
            .collect()
    }

    pub fn supported_objectives(&self) -> Vec<ObjectiveKind> {
        let mut out = vec![ObjectiveKind::Sce, ObjectiveKind::Bce];
        for &a in &self.spec.modalities {
            for &b in &self.spec.modalities {
                if a < b {
                    out.push(ObjectiveKind::NcePair { a, b });
                }
            }
        }
        out.push(ObjectiveKind::NceTriplet);
        out.retain(|o| self.spec.supports(o));
        out
    }

    pub fn check_objective(&self, objective: &ObjectiveKind) -> Result<()> {
        if self.spec.supports(objective) {
            return Ok(());
        }
        Err(CoreError::UnsupportedObjective {
            dataset: self.spec.name.clone(),
            objective: objective.to_string(),
            modalities: self.spec.modalities.iter().map(|m| m.to_string()).collect(),
        })
    }

    /// Class id recovered from a caption, via the label vocabulary.
    pub fn decode_caption(&self, ids: &[u32]) -> Option<usize> {
        label_text_decode(ids).filter(|&c| c < self.num_classes())
    }

    /// Writes both splits; returns the paths written.
    pub fn write_shards(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for split in [Split::Train, Split::Eval] {
            let path = shard_path(dir, &self.spec.name, split);
            shard::write_shard(&self.examples(split)?, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Replaces on-the-fly generation with the shards in `dir`.
    pub fn load_shards(&mut self, dir: &Path) -> Result<()> {
        let train = shard::read_shard(&shard_path(dir, &self.spec.name, Split::Train))?;
        let eval = shard::read_shard(&shard_path(dir, &self.spec.name, Split::Eval))?;
        self.source = Source::Loaded { train, eval };
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    datasets: BTreeMap<String, DatasetHandle>,
}

impl Registry {
    pub fn new(synth: &SynthConfig, specs: &[DatasetSpec]) -> Result<Self> {
        synth.validate()?;
        let mut datasets = BTreeMap::new();
        for spec in specs {
            spec.validate()?;
            let handle = DatasetHandle {
                spec: spec.clone(),
                synth: synth.clone(),
                source: Source::Generated,
            };
            if datasets.insert(spec.name.clone(), handle).is_some() {
                return Err(CoreError::Config(format!(
                    "dataset {:?} registered twice",
                    spec.name
                )));
            }
        }
        Ok(Self { datasets })
    }

    pub fn names(&self) -> Vec<String> {
        self.datasets.keys().cloned().collect()
    }

    pub fn lookup(&self, name: &str) -> Result<&DatasetHandle> {
        self.datasets
            .get(name)
            .ok_or_else(|| CoreError::UnknownDataset {
                name: name.to_string(),
                registered: self.names(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetHandle> {
        self.datasets.values()
    }

    pub fn load_shards(&mut self, dir: &Path) -> Result<()> {
        for h in self.datasets.values_mut() {
            h.load_shards(dir)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, modalities: &[Modality]) -> DatasetSpec {
        DatasetSpec {
            name: name.into(),
            modalities: modalities.to_vec(),
            train_examples: 10,
            eval_examples: 4,
        }
    }

    #[test]
    fn objectives_follow_modalities() {
        let reg = Registry::new(
            &SynthConfig::default(),
            &[spec("it", &[Modality::Image, Modality::Text])],
        )
        .unwrap();
        let h = reg.lookup("it").unwrap();
        assert!(h.check_objective(&ObjectiveKind::NceTriplet).is_err());
        assert_eq!(
            h.supported_objectives(),
            vec![
                ObjectiveKind::Sce,
                ObjectiveKind::Bce,
                ObjectiveKind::NcePair {
                    a: Modality::Image,
                    b: Modality::Text
                }
            ]
        );
        match reg.lookup("nope") {
            Err(CoreError::UnknownDataset { registered, .. }) => {
                assert_eq!(registered, vec!["it".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn splits_are_disjoint_and_bounded() {
        let s = spec("d", &[Modality::Waveform]);
        assert_eq!(s.global_index(Split::Eval, 0).unwrap(), 10);
        assert!(s.global_index(Split::Train, 10).is_err());
        assert!(s.global_index(Split::Eval, 4).is_err());
    }

    #[test]
    fn bad_specs() {
        assert!(spec("", &[Modality::Image]).validate().is_err());
        assert!(spec("a", &[]).validate().is_err());
        assert!(spec("a", &[Modality::Image, Modality::Image])
            .validate()
            .is_err());
        let dup = [spec("a", &[Modality::Image]), spec("a", &[Modality::Text])];
        assert!(Registry::new(&SynthConfig::default(), &dup).is_err());
    }
}
