use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embed::TokenGrid;
use crate::sample::Modality;

/// Per-modality input structure of a step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InputShape {
    pub modality: Modality,
    /// Token grid before DropToken.
    pub grid: TokenGrid,
    /// Sequence length fed to the encoder.
    pub tokens: usize,
}

/// Canonical structure of a training step. Equal signatures share a plan.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskSignature {
    pub inputs: Vec<InputShape>,
    pub batch: usize,
    pub objective: String,
    pub heads: Vec<String>,
}

impl TaskSignature {
    pub fn modalities(&self) -> Vec<Modality> {
        self.inputs.iter().map(|i| i.modality).collect()
    }

    /// Stable string form used as the cache key and in metrics.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("signature serializes")
    }
}

/// Signature-keyed store of prepared plans with a global build counter.
///
/// Signatures restored from a checkpoint count as already built: their plans
/// are rebuilt lazily without bumping the counter.
#[derive(Debug, Clone)]
pub struct PlanCache<P> {
    plans: BTreeMap<String, P>,
    known: BTreeSet<String>,
    first_built: BTreeMap<String, u64>,
    builds: u64,
}

impl<P> Default for PlanCache<P> {
    fn default() -> Self {
        Self {
            plans: BTreeMap::new(),
            known: BTreeSet::new(),
            first_built: BTreeMap::new(),
            builds: 0,
        }
    }
}

impl<P> PlanCache<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builds(&self) -> u64 {
        self.builds
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    pub fn signatures(&self) -> impl Iterator<Item = &str> {
        self.known.iter().map(String::as_str)
    }

    pub fn first_built(&self) -> &BTreeMap<String, u64> {
        &self.first_built
    }

    /// Returns the plan for `key`, building it on a miss. The flag reports
    /// whether this call counted as a build.
    pub fn get_or_build<E>(
        &mut self,
        key: &str,
        step: u64,
        build: impl FnOnce() -> Result<P, E>,
    ) -> Result<(&P, bool), E> {
        let mut counted = false;
        if !self.plans.contains_key(key) {
            let plan = build()?;
            self.plans.insert(key.to_string(), plan);
            if self.known.insert(key.to_string()) {
                self.builds += 1;
                self.first_built.insert(key.to_string(), step);
                counted = true;
            }
        }
        Ok((&self.plans[key], counted))
    }

    /// Cache bookkeeping for checkpoints.
    pub fn snapshot(&self) -> PlanCacheSnapshot {
        PlanCacheSnapshot {
            builds: self.builds,
            signatures: self.first_built.clone(),
        }
    }

    pub fn restore(snapshot: &PlanCacheSnapshot) -> Self {
        Self {
            plans: BTreeMap::new(),
            known: snapshot.signatures.keys().cloned().collect(),
            first_built: snapshot.signatures.clone(),
            builds: snapshot.builds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCacheSnapshot {
    pub builds: u64,
    /// Signature key to the step of its first build.
    pub signatures: BTreeMap<String, u64>,
}
