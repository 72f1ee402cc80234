use imp_tensor::{ParamTree, Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{
    apply_position_index, drop_token, embed_text, embed_waveform, patchify_image,
    patchify_spectrogram, patchify_video, Linear, PatchKernel, PositionBuckets, PositionIndex,
    PositionalTables, TokenBatch,
};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderOutput, ForwardOptions};
use crate::error::{CoreError, Result};
use crate::heads::{classifier_specs, projection_specs, temperature_spec};
use crate::init::{dense, Init, ParamSpec};
use crate::sample::{Modality, RawSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Towers {
    /// One encoder shared by every modality.
    Single,
    /// Separate vision, audio and text encoders.
    PerModality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub patch: PatchKernel,
    pub spectrogram_patch: [usize; 2],
    pub waveform_window: usize,
    pub waveform_max_tokens: usize,
    pub text_max_len: usize,
    pub vocab_size: usize,
    pub buckets: PositionBuckets,
    pub towers: Towers,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            patch: PatchKernel::default(),
            spectrogram_patch: [16, 16],
            waveform_window: 256,
            waveform_max_tokens: 256,
            text_max_len: 16,
            vocab_size: crate::heads::VOCAB_SIZE,
            buckets: PositionBuckets::default(),
            towers: Towers::Single,
        }
    }
}

const POS_STD: f64 = 0.02;

fn embed_prefix(modality: Modality) -> &'static str {
    match modality {
        Modality::Video | Modality::Image => "embed.vision",
        Modality::Spectrogram => "embed.spectrogram",
        Modality::Waveform => "embed.waveform",
        Modality::Text => "embed.text",
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let p = self.patch;
        if p.frames == 0 || p.height == 0 || p.width == 0 {
            return Err(CoreError::Config(
                "patch kernel extents must be positive".into(),
            ));
        }
        if self.spectrogram_patch.contains(&0)
            || self.waveform_window == 0
            || self.waveform_max_tokens == 0
        {
            return Err(CoreError::Config("audio kernels must be positive".into()));
        }
        if self.text_max_len == 0 || self.text_max_len > self.buckets.text {
            return Err(CoreError::Config(format!(
                "text_max_len {} must be in 1..={} (text position buckets)",
                self.text_max_len, self.buckets.text
            )));
        }
        if self.waveform_max_tokens > self.buckets.waveform {
            return Err(CoreError::Config(format!(
                "waveform_max_tokens {} exceeds {} position buckets",
                self.waveform_max_tokens, self.buckets.waveform
            )));
        }
        Ok(())
    }

    pub fn tower_prefix(&self, modality: Modality) -> &'static str {
        match self.towers {
            Towers::Single => "encoder",
            Towers::PerModality => match modality {
                Modality::Video | Modality::Image => "encoder.vision",
                Modality::Spectrogram | Modality::Waveform => "encoder.audio",
                Modality::Text => "encoder.text",
            },
        }
    }

    fn tower_prefixes(&self) -> Vec<&'static str> {
        match self.towers {
            Towers::Single => vec!["encoder"],
            Towers::PerModality => vec!["encoder.audio", "encoder.text", "encoder.vision"],
        }
    }

    fn embedder_specs(&self) -> Vec<ParamSpec> {
        let d = self.encoder.hidden;
        let b = &self.buckets;
        let pos = |path: &str, rows: usize| {
            ParamSpec::new(path, &[rows, d], Init::Normal { std: POS_STD })
        };
        let [sh, sw] = self.spectrogram_patch;
        vec![
            dense("embed.vision.proj.w".into(), self.patch.voxel_len(), d),
            ParamSpec::new("embed.vision.proj.b", &[d], Init::Zeros),
            pos("embed.vision.pos_t", b.video_frames),
            pos("embed.vision.pos_h", b.video_height),
            pos("embed.vision.pos_w", b.video_width),
            dense("embed.spectrogram.proj.w".into(), sh * sw, d),
            ParamSpec::new("embed.spectrogram.proj.b", &[d], Init::Zeros),
            pos("embed.spectrogram.pos_h", b.spectrogram_height),
            pos("embed.spectrogram.pos_w", b.spectrogram_width),
            dense("embed.waveform.proj.w".into(), self.waveform_window, d),
            ParamSpec::new("embed.waveform.proj.b", &[d], Init::Zeros),
            pos("embed.waveform.pos", b.waveform),
            ParamSpec::new(
                "embed.text.table",
                &[self.vocab_size, d],
                Init::Normal { std: POS_STD },
            ),
            pos("embed.text.pos", b.text),
        ]
    }

    /// Every parameter of the model; `classifiers` lists `(dataset, classes)`.
    pub fn param_specs(&self, classifiers: &[(String, usize)]) -> Vec<ParamSpec> {
        let d = self.encoder.hidden;
        let mut specs = self.embedder_specs();
        for prefix in self.tower_prefixes() {
            specs.extend(self.encoder.param_specs(prefix));
        }
        for m in Modality::ALL {
            specs.extend(projection_specs(m, d));
        }
        for (name, classes) in classifiers {
            specs.extend(classifier_specs(name, d, *classes));
        }
        specs.push(temperature_spec());
        specs
    }

    fn position_tables<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        modality: Modality,
    ) -> Result<PositionalTables> {
        let names: &[&str] = match modality {
            Modality::Video | Modality::Image => &[
                "embed.vision.pos_t",
                "embed.vision.pos_h",
                "embed.vision.pos_w",
            ],
            Modality::Spectrogram => &["embed.spectrogram.pos_h", "embed.spectrogram.pos_w"],
            Modality::Waveform => &["embed.waveform.pos"],
            Modality::Text => &["embed.text.pos"],
        };
        let tables = names
            .iter()
            .map(|n| tape.bind(params, n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(PositionalTables { tables })
    }

    /// Raw tokens before positions.
    pub fn tokenize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        modality: Modality,
        samples: &[&RawSample],
    ) -> Result<TokenBatch> {
        if modality == Modality::Text {
            let table = tape.bind(params, "embed.text.table")?;
            return embed_text(tape, samples, table, self.text_max_len);
        }
        let p = embed_prefix(modality);
        let proj = Linear {
            weight: tape.bind(params, &format!("{p}.proj.w"))?,
            bias: tape.bind(params, &format!("{p}.proj.b"))?,
        };
        match modality {
            Modality::Video => patchify_video(tape, samples, self.patch, &proj),
            Modality::Image => patchify_image(tape, samples, self.patch, &proj),
            Modality::Spectrogram => {
                let [h, w] = self.spectrogram_patch;
                patchify_spectrogram(tape, samples, (h, w), &proj)
            }
            Modality::Waveform => embed_waveform(
                tape,
                samples,
                self.waveform_window,
                self.waveform_max_tokens,
                &proj,
            ),
            Modality::Text => unreachable!(),
        }
    }

    /// Tokens with positions, optionally thinned by DropToken.
    pub fn embed<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        modality: Modality,
        samples: &[&RawSample],
        index: Option<&PositionIndex>,
        drop: Option<(f64, &mut R)>,
    ) -> Result<TokenBatch> {
        let raw = self.tokenize(tape, params, modality, samples)?;
        let computed;
        let index = match index {
            Some(i) => i,
            None => {
                computed = PositionIndex::for_grid(modality, raw.budget.grid(), &self.buckets)?;
                &computed
            }
        };
        let tables = self.position_tables(tape, params, modality)?;
        let batch = apply_position_index(tape, &raw, &tables, index)?;
        match drop {
            Some((ratio, rng)) if ratio > 0.0 => drop_token(tape, &batch, ratio, rng),
            _ => Ok(batch),
        }
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        batch: &TokenBatch,
        options: &ForwardOptions,
    ) -> Result<EncoderOutput> {
        encoder_forward(
            tape,
            batch.tokens,
            params,
            &self.encoder,
            self.tower_prefix(batch.modality),
            options,
        )
    }

    /// Embeds and encodes; returns the token batch and encoder output.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        modality: Modality,
        samples: &[&RawSample],
        drop: Option<(f64, &mut R)>,
    ) -> Result<(TokenBatch, EncoderOutput)> {
        let batch = self.embed(tape, params, modality, samples, None, drop)?;
        let out = self.encode(tape, params, &batch, &ForwardOptions::default())?;
        Ok((batch, out))
    }
}

/// Mean-pooled encoder output, `[B, D]`.
pub fn pooled<T: Scalar>(tape: &mut Tape<T>, out: &EncoderOutput) -> Result<Var> {
    crate::heads::pool(tape, out.hidden)
}
