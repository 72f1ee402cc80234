//! Output heads and the objective families.

use std::fmt;
use std::str::FromStr;

use imp_tensor::{ParamTree, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::init::{dense, Init, ParamSpec};
use crate::sample::Modality;

pub const TEMPERATURE_PATH: &str = "heads.log_inv_temp";
/// Initial `tau`.
pub const INIT_TEMPERATURE: f64 = 0.07;
pub const MIN_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    Sce,
    Bce,
    NcePair { a: Modality, b: Modality },
    NceTriplet,
}

impl ObjectiveKind {
    pub fn modalities(&self) -> Vec<Modality> {
        match *self {
            ObjectiveKind::Sce | ObjectiveKind::Bce => Vec::new(),
            ObjectiveKind::NcePair { a, b } => vec![a, b],
            ObjectiveKind::NceTriplet => vec![Modality::Video, Modality::Waveform, Modality::Text],
        }
    }

    pub fn is_contrastive(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::NcePair { .. } | ObjectiveKind::NceTriplet
        )
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::Sce => f.write_str("sce"),
            ObjectiveKind::Bce => f.write_str("bce"),
            ObjectiveKind::NcePair { a, b } => write!(f, "nce_pair({a},{b})"),
            ObjectiveKind::NceTriplet => f.write_str("nce_triplet"),
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sce" => return Ok(ObjectiveKind::Sce),
            "bce" => return Ok(ObjectiveKind::Bce),
            "nce_triplet" => return Ok(ObjectiveKind::NceTriplet),
            _ => {}
        }
        let inner = s
            .strip_prefix("nce_pair(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| CoreError::Config(format!("unknown objective {s:?}")))?;
        let (a, b) = inner
            .split_once(',')
            .ok_or_else(|| CoreError::Config(format!("nce_pair needs two modalities: {s:?}")))?;
        Ok(ObjectiveKind::NcePair {
            a: a.trim().parse()?,
            b: b.trim().parse()?,
        })
    }
}

pub fn projection_prefix(modality: Modality) -> String {
    format!("heads.proj.{modality}")
}

pub fn classifier_prefix(dataset: &str) -> String {
    format!("heads.cls.{dataset}")
}

/// Projection head specs: `D -> D -> D` with GeLU between.
pub fn projection_specs(modality: Modality, hidden: usize) -> Vec<ParamSpec> {
    let p = projection_prefix(modality);
    vec![
        dense(format!("{p}.l1.w"), hidden, hidden),
        ParamSpec::new(format!("{p}.l1.b"), &[hidden], Init::Zeros),
        dense(format!("{p}.l2.w"), hidden, hidden),
        ParamSpec::new(format!("{p}.l2.b"), &[hidden], Init::Zeros),
    ]
}

pub fn classifier_specs(dataset: &str, hidden: usize, classes: usize) -> Vec<ParamSpec> {
    let p = classifier_prefix(dataset);
    vec![
        dense(format!("{p}.w"), hidden, classes),
        ParamSpec::new(format!("{p}.b"), &[classes], Init::Zeros),
    ]
}

pub fn temperature_spec() -> ParamSpec {
    ParamSpec::new(
        TEMPERATURE_PATH,
        &[1],
        Init::Constant(INIT_TEMPERATURE.recip().ln()),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectionHead {
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        modality: Modality,
    ) -> Result<Self> {
        let p = projection_prefix(modality);
        Ok(Self {
            w1: tape.bind(params, &format!("{p}.l1.w"))?,
            b1: tape.bind(params, &format!("{p}.l1.b"))?,
            w2: tape.bind(params, &format!("{p}.l2.w"))?,
            b2: tape.bind(params, &format!("{p}.l2.b"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, self.w2)?;
        Ok(tape.add(y, self.b2)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub w: Var,
    pub b: Var,
}

impl ClassifierHead {
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        dataset: &str,
    ) -> Result<Self> {
        let p = classifier_prefix(dataset);
        Ok(Self {
            w: tape.bind(params, &format!("{p}.w"))?,
            b: tape.bind(params, &format!("{p}.b"))?,
        })
    }

    /// Logits `[B, C]` from pooled features `[B, D]`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pooled: Var) -> Result<Var> {
        let y = tape.matmul(pooled, self.w)?;
        Ok(tape.add(y, self.b)?)
    }
}

/// Global average pooling over the sequence axis.
pub fn pool<T: Scalar>(tape: &mut Tape<T>, encoded: Var) -> Result<Var> {
    Ok(tape.mean_pool(encoded, 1)?)
}

/// Mean over `S`, projection, then L2 normalization: `[B, S, D] -> [B, D]`.
pub fn pool_and_project<T: Scalar>(
    tape: &mut Tape<T>,
    encoded: Var,
    head: &ProjectionHead,
) -> Result<Var> {
    let pooled = pool(tape, encoded)?;
    let z = head.apply(tape, pooled)?;
    Ok(tape.l2_normalize(z)?)
}

fn logits_dims<T: Scalar>(tape: &Tape<T>, logits: Var) -> Result<(usize, usize)> {
    match *tape.shape(logits)? {
        [b, c] => Ok((b, c)),
        ref s => Err(CoreError::Config(format!(
            "logits must be [B, C], got {s:?}"
        ))),
    }
}

/// Mean softmax cross-entropy against integer labels.
pub fn sce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = logits_dims(tape, logits)?;
    if labels.len() != b {
        return Err(CoreError::Config(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(CoreError::Label { label, classes: c });
    }
    let logp = tape.log_softmax(logits, 1)?;
    let flat: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let picked = tape.gather_elements(logp, &flat)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Mean sigmoid cross-entropy over every entry, `softplus(x) - y x`.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let (b, c) = logits_dims(tape, logits)?;
    if targets.shape() != [b, c] {
        return Err(CoreError::Config(format!(
            "targets {:?} do not match logits [{b}, {c}]",
            targets.shape()
        )));
    }
    if targets
        .data()
        .iter()
        .any(|&y| y != T::zero() && y != T::one())
    {
        return Err(CoreError::Config("bce targets must be 0 or 1".into()));
    }
    let y = tape.constant(targets.clone());
    let sp = tape.softplus(logits)?;
    let yx = tape.mul(y, logits)?;
    let per = tape.sub(sp, yx)?;
    Ok(tape.mean(per)?)
}

fn diag_sce<T: Scalar>(tape: &mut Tape<T>, logits: Var, b: usize) -> Result<Var> {
    let labels: Vec<usize> = (0..b).collect();
    sce_loss(tape, logits, &labels)
}

/// Symmetric InfoNCE over matched rows, with logits scaled by
/// `exp(log_inv_temp)`.
pub fn nce_pair_loss<T: Scalar>(
    tape: &mut Tape<T>,
    za: Var,
    zb: Var,
    log_inv_temp: Var,
) -> Result<Var> {
    let (sa, sb) = (tape.shape(za)?.to_vec(), tape.shape(zb)?.to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(CoreError::Config(format!(
            "contrastive embeddings must share a [B, D] shape, got {sa:?} and {sb:?}"
        )));
    }
    let b = sa[0];
    let zbt = tape.transpose(zb)?;
    let sim = tape.matmul(za, zbt)?;
    let inv_temp = tape.exp(log_inv_temp)?;
    let logits = tape.mul(sim, inv_temp)?;
    let forward = diag_sce(tape, logits, b)?;
    let lt = tape.transpose(logits)?;
    let backward = diag_sce(tape, lt, b)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5)?)
}

/// Video-pivoted triplet: `pair(v, a) + pair(v, t)`.
pub fn nce_triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    zv: Var,
    za: Var,
    zt: Var,
    log_inv_temp: Var,
) -> Result<Var> {
    let va = nce_pair_loss(tape, zv, za, log_inv_temp)?;
    let vt = nce_pair_loss(tape, zv, zt, log_inv_temp)?;
    Ok(tape.add(va, vt)?)
}

/// Keeps `tau >= 0.01` by capping the log inverse temperature.
pub fn clamp_temperature<T: Scalar>(params: &mut ParamTree<T>) {
    if let Ok(t) = params.get_mut(TEMPERATURE_PATH) {
        let cap = T::lit(MIN_TEMPERATURE.recip().ln());
        for v in t.data_mut() {
            if *v > cap {
                *v = cap;
            }
        }
    }
}

pub const VOCAB_SIZE: usize = 512;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
const TEMPLATE: [u32; 3] = [2, 3, 4];
const CLASS_BASE: u32 = 32;
pub const MAX_CLASSES: usize = VOCAB_SIZE - CLASS_BASE as usize;

/// Deterministic caption `[BOS, "a", "photo", "of", <class>]` for a class id.
pub fn label_text_encode(class_id: usize, num_classes: usize) -> Result<Vec<u32>> {
    if class_id >= num_classes || num_classes > MAX_CLASSES {
        return Err(CoreError::Label {
            label: class_id,
            classes: num_classes.min(MAX_CLASSES),
        });
    }
    let mut ids = vec![BOS];
    ids.extend_from_slice(&TEMPLATE);
    ids.push(CLASS_BASE + class_id as u32);
    Ok(ids)
}

/// Inverse of [`label_text_encode`].
pub fn label_text_decode(ids: &[u32]) -> Option<usize> {
    match ids {
        [BOS, a, b, c, class] if [*a, *b, *c] == TEMPLATE && *class >= CLASS_BASE => {
            Some((class - CLASS_BASE) as usize)
        }
        _ => None,
    }
}
