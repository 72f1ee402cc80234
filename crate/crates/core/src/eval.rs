//! Zero-shot classification, cross-modal retrieval and linear probes over a
//! frozen model.

use std::collections::BTreeMap;

use imp_tensor::{ParamTree, Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::encoder::ForwardOptions;
use crate::error::{CoreError, Result};
use crate::heads::{pool, pool_and_project, ProjectionHead};
use crate::model::ModelConfig;
use crate::sample::{Modality, RawSample};
use crate::synth::{gen_caption, DatasetHandle, Registry, Split};

/// Examples per forward pass. Expert-choice routing pools tokens across the
/// chunk, so results depend on it.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSuite {
    pub name: String,
    pub datasets: Vec<String>,
    /// Held-out examples scored per dataset; all of them when absent.
    #[serde(default)]
    pub eval_examples: Option<u64>,
    /// Training examples used to fit the linear probe.
    #[serde(default = "default_probe_train")]
    pub probe_train_examples: u64,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_probe_train() -> u64 {
    512
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_1_to_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_1_from_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_probe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub provenance: Provenance,
    pub datasets: BTreeMap<String, DatasetMetrics>,
}

fn encode_chunks<T: Scalar>(
    model: &ModelConfig,
    params: &ParamTree<T>,
    samples: &[RawSample],
    project: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let modality = chunk[0].modality;
        let refs: Vec<&RawSample> = chunk.iter().collect();
        let mut tape = Tape::<T>::new();
        let tokens = model.embed(
            &mut tape,
            params,
            modality,
            &refs,
            None,
            None::<(f64, &mut rand_chacha::ChaCha8Rng)>,
        )?;
        let enc = model.encode(&mut tape, params, &tokens, &ForwardOptions::default())?;
        let z = if project {
            let head = ProjectionHead::bind(&mut tape, params, modality)?;
            pool_and_project(&mut tape, enc.hidden, &head)?
        } else {
            pool(&mut tape, enc.hidden)?
        };
        let z = tape.value(z)?;
        let d = z.shape()[1];
        out.extend(
            z.data()
                .chunks(d)
                .map(|r| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>()),
        );
    }
    Ok(out)
}

/// Mean-pooled encoder features, one row per sample.
pub fn pooled_features<T: Scalar>(
    model: &ModelConfig,
    params: &ParamTree<T>,
    samples: &[RawSample],
) -> Result<Vec<Vec<f64>>> {
    encode_chunks(model, params, samples, false)
}

/// Unit-norm embeddings in the shared contrastive space.
pub fn contrastive_embeddings<T: Scalar>(
    model: &ModelConfig,
    params: &ParamTree<T>,
    samples: &[RawSample],
) -> Result<Vec<Vec<f64>>> {
    encode_chunks(model, params, samples, true)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the most similar row; ties go to the lowest index.
pub fn nearest(query: &[f64], gallery: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, g) in gallery.iter().enumerate() {
        let s = dot(query, g);
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    best
}

/// Fraction of queries whose nearest gallery item carries the same label.
///
/// Captions are class templates, so any gallery caption of the right class
/// is a correct match.
pub fn recall_at_1(
    queries: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .zip(query_labels)
        .filter(|(q, &l)| gallery_labels[nearest(q, gallery)] == l)
        .count();
    hits as f64 / queries.len() as f64
}

/// Accuracy of nearest-class-prompt classification.
pub fn zero_shot_accuracy(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_prompts: &[Vec<f64>],
) -> f64 {
    let classes: Vec<usize> = (0..class_prompts.len()).collect();
    recall_at_1(embeddings, labels, class_prompts, &classes)
}

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights; returns accuracy on the test set.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(CoreError::Config(
            "linear probe needs matching, non-empty features and labels".into(),
        ));
    }
    if let Some(&label) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(CoreError::Label { label, classes });
    }
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut gw = vec![0.0; d * classes];
    let mut gb = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for _ in 0..config.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in train_x.iter().zip(train_y) {
            logits_into(&w, &b, x, &mut p);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c];
                for (j, &xj) in x.iter().enumerate() {
                    gw[j * classes + c] += xj * p[c];
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= config.lr * g / n;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= config.lr * g / n;
        }
    }
    let correct = test_x
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            logits_into(&w, &b, x, &mut p);
            argmax(&p) == y
        })
        .count();
    Ok(correct as f64 / test_x.len().max(1) as f64)
}

fn logits_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let classes = b.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        for c in 0..classes {
            out[c] += xj * w[j * classes + c];
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Gathered {
    labels: Vec<usize>,
    primary: Vec<RawSample>,
    captions: Vec<RawSample>,
}

fn collect(
    handle: &DatasetHandle,
    split: Split,
    limit: Option<u64>,
    primary: Modality,
) -> Result<Gathered> {
    let n = limit.map_or(handle.example_count(split), |l| {
        l.min(handle.example_count(split))
    });
    let mut out = Gathered {
        labels: Vec::new(),
        primary: Vec::new(),
        captions: Vec::new(),
    };
    for i in 0..n {
        let ex = handle.example(split, i)?;
        let s = ex.get(primary).ok_or_else(|| {
            CoreError::Config(format!("{} example {i} has no {primary}", handle.name()))
        })?;
        out.primary.push(s.clone());
        out.captions.push(RawSample::tokens(ex.caption.clone()));
        out.labels.push(ex.class);
    }
    Ok(out)
}

/// Scores one dataset. Retrieval needs a text modality; zero-shot and the
/// probe read the dataset's first non-text modality.
pub fn evaluate_dataset<T: Scalar>(
    model: &ModelConfig,
    params: &ParamTree<T>,
    handle: &DatasetHandle,
    suite: &EvalSuite,
) -> Result<DatasetMetrics> {
    let primary = handle.spec.primary_modality().ok_or_else(|| {
        CoreError::Config(format!(
            "dataset {:?} has no non-text modality",
            handle.name()
        ))
    })?;
    let held_out = collect(handle, Split::Eval, suite.eval_examples, primary)?;
    let mut m = DatasetMetrics {
        examples: held_out.labels.len(),
        ..DatasetMetrics::default()
    };
    if held_out.labels.is_empty() {
        return Ok(m);
    }
    let classes = handle.num_classes();
    let z = contrastive_embeddings(model, params, &held_out.primary)?;
    let prompts = (0..classes)
        .map(|c| gen_caption(c, &handle.synth).map(RawSample::tokens))
        .collect::<Result<Vec<_>>>()?;
    let prompt_z = contrastive_embeddings(model, params, &prompts)?;
    m.zero_shot_top1 = Some(zero_shot_accuracy(&z, &held_out.labels, &prompt_z));
    if handle.spec.has(Modality::Text) {
        let tz = contrastive_embeddings(model, params, &held_out.captions)?;
        m.recall_at_1_to_text = Some(recall_at_1(&z, &held_out.labels, &tz, &held_out.labels));
        m.recall_at_1_from_text = Some(recall_at_1(&tz, &held_out.labels, &z, &held_out.labels));
    }
    if suite.probe_train_examples > 0 {
        let train = collect(
            handle,
            Split::Train,
            Some(suite.probe_train_examples),
            primary,
        )?;
        let fx = pooled_features(model, params, &train.primary)?;
        let tx = pooled_features(model, params, &held_out.primary)?;
        m.linear_probe = Some(linear_probe(
            &fx,
            &train.labels,
            &tx,
            &held_out.labels,
            classes,
            &suite.probe,
        )?);
    }
    Ok(m)
}

pub fn evaluate<T: Scalar>(
    model: &ModelConfig,
    params: &ParamTree<T>,
    registry: &Registry,
    suite: &EvalSuite,
    provenance: Provenance,
) -> Result<EvalReport> {
    let mut datasets = BTreeMap::new();
    for name in &suite.datasets {
        let handle = registry.lookup(name)?;
        datasets.insert(
            name.clone(),
            evaluate_dataset(model, params, handle, suite)?,
        );
    }
    Ok(EvalReport {
        suite: suite.name.clone(),
        provenance,
        datasets,
    })
}
