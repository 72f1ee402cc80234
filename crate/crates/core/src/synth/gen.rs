//! Pure generators with a planted class signal shared across modalities.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::heads::{label_text_encode, MAX_CLASSES};
use crate::sample::{Modality, RawSample};

/// Video frames move by up to this many normalized units per frame.
pub const VELOCITY_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// `[H, W]`.
    pub image: [usize; 2],
    /// `[F, H, W]`.
    pub video: [usize; 3],
    /// `[frequency bins, time steps]`.
    pub spectrogram: [usize; 2],
    pub waveform: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            image: [64, 64],
            video: [16, 64, 64],
            spectrogram: [32, 32],
            waveform: 1024,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(format!("synth: {m}")));
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return fail(format!(
                "num_classes {} outside 2..={MAX_CLASSES}",
                self.num_classes
            ));
        }
        if self.image.contains(&0) || self.video.contains(&0) || self.spectrogram.contains(&0) {
            return fail("geometry extents must be positive".into());
        }
        if self.spectrogram[0] < self.num_classes {
            return fail(format!(
                "{} frequency bins cannot hold {} class bands",
                self.spectrogram[0], self.num_classes
            ));
        }
        if self.waveform < 4 * self.num_classes + 16 {
            return fail(format!(
                "waveform of {} samples too short for {} class frequencies",
                self.waveform, self.num_classes
            ));
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(CoreError::Label {
                label: class,
                classes: self.num_classes,
            });
        }
        Ok(())
    }
}

/// Per-example nuisance variables shared by every modality of one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub dx: f64,
    pub dy: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Latent {
    pub const ZERO: Latent = Latent {
        dx: 0.0,
        dy: 0.0,
        amplitude: 1.0,
        phase: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dx: rng.random_range(-0.04..0.04),
            dy: rng.random_range(-0.04..0.04),
            amplitude: rng.random_range(0.8..1.2),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

fn grid_side(classes: usize) -> usize {
    (classes as f64).sqrt().ceil() as usize
}

/// Normalized bump centre of `class` at frame 0.
pub fn class_center(class: usize, classes: usize, latent: &Latent) -> (f64, f64) {
    let g = grid_side(classes);
    let (row, col) = (class / g, class % g);
    (
        (row as f64 + 0.5) / g as f64 + latent.dy,
        (col as f64 + 0.5) / g as f64 + latent.dx,
    )
}

/// Normalized `(dy, dx)` per frame; classes `c` with `c % 3 == 1` and
/// `(c / 3) % 3 == 1` stand still.
pub fn class_velocity(class: usize) -> (f64, f64) {
    let vx = (class % 3) as f64 - 1.0;
    let vy = ((class / 3) % 3) as f64 - 1.0;
    (vy * VELOCITY_STEP, vx * VELOCITY_STEP)
}

pub fn class_color(class: usize, classes: usize) -> [f64; 3] {
    let base = class as f64 / classes as f64;
    std::array::from_fn(|k| 0.5 + 0.5 * (2.0 * PI * (base + k as f64 / 3.0)).cos())
}

fn noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn render_frame<R: Rng + ?Sized>(
    out: &mut Vec<f32>,
    [h, w]: [usize; 2],
    center: (f64, f64),
    color: [f64; 3],
    width: f64,
    amplitude: f64,
    sigma: f64,
    rng: &mut R,
) {
    let inv = 1.0 / (2.0 * width * width);
    for y in 0..h {
        let dy = (y as f64 + 0.5) / h as f64 - center.0;
        for x in 0..w {
            let dx = (x as f64 + 0.5) / w as f64 - center.1;
            let bump = amplitude * (-(dx * dx + dy * dy) * inv).exp();
            for c in color {
                out.push((bump * c + noise(rng, sigma)) as f32);
            }
        }
    }
}

fn bump_width(classes: usize) -> f64 {
    0.35 / grid_side(classes) as f64
}

/// `[H, W, 3]` image: a coloured bump at the class grid cell.
pub fn gen_image<R: Rng + ?Sized>(
    class: usize,
    latent: &Latent,
    config: &SynthConfig,
    size: [usize; 2],
    rng: &mut R,
) -> Result<RawSample> {
    config.check_class(class)?;
    let c = config.num_classes;
    let mut values = Vec::with_capacity(size[0] * size[1] * 3);
    render_frame(
        &mut values,
        size,
        class_center(class, c, latent),
        class_color(class, c),
        bump_width(c),
        latent.amplitude,
        config.noise,
        rng,
    );
    RawSample::dense(Modality::Image, vec![size[0], size[1], 3], values)
}

/// `[F, H, W, 3]` video of the image bump moving with the class velocity.
pub fn gen_video<R: Rng + ?Sized>(
    class: usize,
    latent: &Latent,
    config: &SynthConfig,
    size: [usize; 3],
    rng: &mut R,
) -> Result<RawSample> {
    config.check_class(class)?;
    let c = config.num_classes;
    let [f, h, w] = size;
    let (cy, cx) = class_center(class, c, latent);
    let (vy, vx) = class_velocity(class);
    let mut values = Vec::with_capacity(f * h * w * 3);
    for t in 0..f {
        let center = (cy + t as f64 * vy, cx + t as f64 * vx);
        render_frame(
            &mut values,
            [h, w],
            center,
            class_color(class, c),
            bump_width(c),
            latent.amplitude,
            config.noise,
            rng,
        );
    }
    RawSample::dense(Modality::Video, vec![f, h, w, 3], values)
}

/// Centre row of the class band in a spectrogram with `bins` rows.
pub fn class_band(class: usize, classes: usize, bins: usize) -> f64 {
    (class as f64 + 0.5) * bins as f64 / classes as f64
}

/// `[M, M']` grid whose energy sits in the class frequency band.
pub fn gen_spectrogram<R: Rng + ?Sized>(
    class: usize,
    latent: &Latent,
    config: &SynthConfig,
    size: [usize; 2],
    rng: &mut R,
) -> Result<RawSample> {
    config.check_class(class)?;
    let [m, n] = size;
    let band = class_band(class, config.num_classes, m);
    let width = 0.5 * (m as f64 / config.num_classes as f64).max(1.0);
    let rate = 1.0 + (class % 4) as f64;
    let mut values = Vec::with_capacity(m * n);
    for r in 0..m {
        let d = r as f64 + 0.5 - band;
        let profile = latent.amplitude * (-(d * d) / (2.0 * width * width)).exp();
        for t in 0..n {
            let envelope = 1.0 + 0.3 * (2.0 * PI * rate * t as f64 / n as f64 + latent.phase).sin();
            values.push((profile * envelope + noise(rng, config.noise)) as f32);
        }
    }
    RawSample::dense(Modality::Spectrogram, vec![m, n], values)
}

/// Fundamental DFT bin of the class tone for an `n`-sample waveform.
pub fn class_frequency(class: usize, classes: usize, n: usize) -> usize {
    let step = ((n / 4).saturating_sub(4) / classes).max(1);
    4 + class * step
}

/// Class tone plus its half-amplitude second harmonic.
pub fn gen_waveform<R: Rng + ?Sized>(
    class: usize,
    latent: &Latent,
    config: &SynthConfig,
    len: usize,
    rng: &mut R,
) -> Result<RawSample> {
    config.check_class(class)?;
    let f = class_frequency(class, config.num_classes, len) as f64;
    let values = (0..len)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / len as f64;
            let tone =
                (f * t + latent.phase).sin() + 0.5 * (2.0 * f * t + 2.0 * latent.phase).sin();
            (latent.amplitude * tone + noise(rng, config.noise)) as f32
        })
        .collect();
    RawSample::dense(Modality::Waveform, vec![len], values)
}

pub fn gen_caption(class: usize, config: &SynthConfig) -> Result<Vec<u32>> {
    config.check_class(class)?;
    label_text_encode(class, config.num_classes)
}

/// Renders `modality` at its default geometry.
pub fn gen_modality<R: Rng + ?Sized>(
    modality: Modality,
    class: usize,
    latent: &Latent,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<RawSample> {
    match modality {
        Modality::Image => gen_image(class, latent, config, config.image, rng),
        Modality::Video => gen_video(class, latent, config, config.video, rng),
        Modality::Spectrogram => gen_spectrogram(class, latent, config, config.spectrogram, rng),
        Modality::Waveform => gen_waveform(class, latent, config, config.waveform, rng),
        Modality::Text => Ok(RawSample::tokens(gen_caption(class, config)?)),
    }
}

fn resize_axis(
    values: &[f32],
    outer: usize,
    from: usize,
    inner: usize,
    to: usize,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(outer * to * inner);
    if to <= from {
        if from % to != 0 {
            return Err(CoreError::Indivisible {
                axis: "resize",
                extent: from,
                patch: to,
            });
        }
        let f = from / to;
        let scale = 1.0 / f as f32;
        for o in 0..outer {
            for i in 0..to {
                let start = out.len();
                out.resize(start + inner, 0.0);
                for j in 0..f {
                    let src = &values[(o * from + i * f + j) * inner..][..inner];
                    for (a, &b) in out[start..].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                out[start..].iter_mut().for_each(|a| *a *= scale);
            }
        }
    } else {
        if to % from != 0 {
            return Err(CoreError::Indivisible {
                axis: "resize",
                extent: to,
                patch: from,
            });
        }
        let f = to / from;
        for o in 0..outer {
            for i in 0..to {
                out.extend_from_slice(&values[(o * from + i / f) * inner..][..inner]);
            }
        }
    }
    Ok(out)
}

/// Integer-factor resize of a dense sample: box averaging when shrinking,
/// replication when growing. Channels are never resized.
pub fn resize(sample: &RawSample, target: &[usize]) -> Result<RawSample> {
    let (shape, values) = sample.values()?;
    let spatial = if sample.modality.is_vision() {
        shape.len() - 1
    } else {
        shape.len()
    };
    if target.len() != spatial {
        return Err(CoreError::Config(format!(
            "resize target {target:?} does not match {} sample of shape {shape:?}",
            sample.modality
        )));
    }
    if shape[..spatial] == *target {
        return Ok(sample.clone());
    }
    let mut dims = shape.to_vec();
    let mut data = values.to_vec();
    for axis in 0..spatial {
        if dims[axis] == target[axis] {
            continue;
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        data = resize_axis(&data, outer, dims[axis], inner, target[axis])?;
        dims[axis] = target[axis];
    }
    RawSample::dense(sample.modality, dims, data)
}
