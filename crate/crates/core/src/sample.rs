use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Image,
    Spectrogram,
    Waveform,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Video,
        Modality::Image,
        Modality::Spectrogram,
        Modality::Waveform,
        Modality::Text,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Image => "image",
            Modality::Spectrogram => "spectrogram",
            Modality::Waveform => "waveform",
            Modality::Text => "text",
        }
    }

    pub fn is_vision(self) -> bool {
        matches!(self, Modality::Video | Modality::Image)
    }

    pub fn is_audio(self) -> bool {
        matches!(self, Modality::Spectrogram | Modality::Waveform)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Modality::Video => 0,
            Modality::Image => 1,
            Modality::Spectrogram => 2,
            Modality::Waveform => 3,
            Modality::Text => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown modality {s:?}")))
    }
}

/// Raw model input before embedding.
///
/// Dense payloads are row-major: video `[F, H, W, 3]`, image `[H, W, 3]`,
/// spectrogram `[M, M']`, waveform `[N]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense { shape: Vec<usize>, values: Vec<f32> },
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub modality: Modality,
    pub payload: Payload,
}

impl RawSample {
    pub fn dense(modality: Modality, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let expected_rank = match modality {
            Modality::Video => 4,
            Modality::Image => 3,
            Modality::Spectrogram => 2,
            Modality::Waveform => 1,
            Modality::Text => {
                return Err(bad(
                    modality,
                    "text samples carry token ids, not dense values",
                ))
            }
        };
        if shape.len() != expected_rank {
            return Err(bad(
                modality,
                format!("expected rank {expected_rank}, got shape {shape:?}"),
            ));
        }
        if modality.is_vision() && shape[shape.len() - 1] != 3 {
            return Err(bad(modality, "vision payloads need 3 channels"));
        }
        if shape.contains(&0) {
            return Err(bad(modality, format!("zero extent in {shape:?}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(bad(
                modality,
                format!("shape {shape:?} does not match {} values", values.len()),
            ));
        }
        Ok(Self {
            modality,
            payload: Payload::Dense { shape, values },
        })
    }

    pub fn tokens(ids: Vec<u32>) -> Self {
        Self {
            modality: Modality::Text,
            payload: Payload::Tokens(ids),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match &self.payload {
            Payload::Dense { shape, .. } => shape.clone(),
            Payload::Tokens(ids) => vec![ids.len()],
        }
    }

    pub fn values(&self) -> Result<(&[usize], &[f32])> {
        match &self.payload {
            Payload::Dense { shape, values } => Ok((shape, values)),
            Payload::Tokens(_) => Err(bad(self.modality, "expected a dense payload")),
        }
    }

    pub fn token_ids(&self) -> Result<&[u32]> {
        match &self.payload {
            Payload::Tokens(ids) => Ok(ids),
            Payload::Dense { .. } => Err(bad(self.modality, "expected token ids")),
        }
    }
}

pub(crate) fn bad(modality: Modality, detail: impl Into<String>) -> CoreError {
    CoreError::BadSample {
        modality: modality.to_string(),
        detail: detail.into(),
    }
}
