//! Modality embedders: raw samples to positional-encoded token sequences of
//! width `D`.
//!
//! Token order is row-major everywhere: temporal outermost, then height, then
//! width. Vision positions are the sum of three per-axis tables; spatial axes
//! are indexed with a dilated stride so lower resolutions land on a regular
//! subset of the full-resolution buckets, while the temporal axis is plainly
//! truncated.

use imp_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::sample::{bad, Modality, RawSample};

/// Voxel extent of one vision patch, `f x h x w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchKernel {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchKernel {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    /// Scalars per flattened RGB voxel.
    pub fn voxel_len(&self) -> usize {
        self.frames * self.height * self.width * 3
    }
}

impl Default for PatchKernel {
    fn default() -> Self {
        Self::new(4, 16, 16)
    }
}

/// Token grid of a batch: `(B, T_F, T_H, T_W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Budget {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Budget {
    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    pub fn tokens_per_example(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.batch * self.tokens_per_example()
    }
}

/// Per-example token grid `(T_F, T_H, T_W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embedded tokens `[B, S, D]` on a tape.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub modality: Modality,
    pub budget: Budget,
    /// Sequence length `S`; differs from the grid size after DropToken.
    pub seq_len: usize,
    /// Retained grid positions per example, strictly increasing.
    pub kept_indices: Option<Vec<Vec<usize>>>,
}

/// A linear map bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        Ok(tape.add(y, self.bias)?)
    }
}

fn divide(axis: &'static str, extent: usize, patch: usize) -> Result<usize> {
    if patch == 0 || extent % patch != 0 || extent == 0 {
        return Err(CoreError::Indivisible {
            axis,
            extent,
            patch,
        });
    }
    Ok(extent / patch)
}

/// Splits a `[F, H, W, C]` array into flattened voxels, one row per token.
pub fn voxelize(
    values: &[f32],
    dims: [usize; 4],
    kernel: PatchKernel,
) -> Result<(TokenGrid, Vec<f32>)> {
    let [frames, height, width, channels] = dims;
    let grid = TokenGrid {
        frames: divide("frames", frames, kernel.frames)?,
        height: divide("height", height, kernel.height)?,
        width: divide("width", width, kernel.width)?,
    };
    let row = kernel.frames * kernel.height * kernel.width * channels;
    let mut out = Vec::with_capacity(grid.len() * row);
    for t in 0..grid.frames {
        for i in 0..grid.height {
            for j in 0..grid.width {
                for df in 0..kernel.frames {
                    let f = t * kernel.frames + df;
                    for dh in 0..kernel.height {
                        let y = i * kernel.height + dh;
                        let start = ((f * height + y) * width + j * kernel.width) * channels;
                        out.extend_from_slice(&values[start..start + kernel.width * channels]);
                    }
                }
            }
        }
    }
    Ok((grid, out))
}

/// Repeats an `[H, W, 3]` image `frames` times into an `[frames, H, W, 3]` video.
pub fn tile_image(sample: &RawSample, frames: usize) -> Result<RawSample> {
    if sample.modality != Modality::Image {
        return Err(bad(sample.modality, "tile_image expects an image"));
    }
    let (shape, values) = sample.values()?;
    let mut tiled = Vec::with_capacity(values.len() * frames);
    for _ in 0..frames {
        tiled.extend_from_slice(values);
    }
    RawSample::dense(
        Modality::Video,
        vec![frames, shape[0], shape[1], shape[2]],
        tiled,
    )
}

fn to_tensor<T: Scalar>(shape: &[usize], values: &[f32]) -> Result<Tensor<T>> {
    Ok(Tensor::new(
        shape,
        values.iter().map(|&v| T::lit(v as f64)).collect(),
    )?)
}

/// Projects a stack of per-example token rows to `[B, S, D]`.
fn project_rows<T: Scalar>(
    tape: &mut Tape<T>,
    rows: Vec<f32>,
    batch: usize,
    seq: usize,
    proj: &Linear,
) -> Result<Var> {
    let width = rows.len() / (batch * seq);
    let x = tape.constant(to_tensor(&[batch * seq, width], &rows)?);
    let y = proj.apply(tape, x)?;
    let d = tape.shape(y)?[1];
    Ok(tape.reshape(y, &[batch, seq, d])?)
}

fn require_uniform(modality: Modality, grids: &[TokenGrid]) -> Result<TokenGrid> {
    let first = *grids.first().ok_or_else(|| bad(modality, "empty batch"))?;
    if grids.iter().any(|g| *g != first) {
        return Err(bad(
            modality,
            "all examples in a batch must share one token grid",
        ));
    }
    Ok(first)
}

/// Patchifies `[F, H, W, 3]` videos into `(F/f)(H/h)(W/w)` tokens each.
pub fn patchify_video<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[&RawSample],
    kernel: PatchKernel,
    proj: &Linear,
) -> Result<TokenBatch> {
    let mut grids = Vec::with_capacity(samples.len());
    let mut rows = Vec::new();
    for s in samples {
        if s.modality != Modality::Video {
            return Err(bad(s.modality, "patchify_video expects video samples"));
        }
        let (shape, values) = s.values()?;
        let (grid, voxels) = voxelize(values, [shape[0], shape[1], shape[2], shape[3]], kernel)?;
        grids.push(grid);
        rows.extend(voxels);
    }
    finish_dense(tape, Modality::Video, &grids, rows, samples.len(), proj)
}

/// Treats each image as a `f`-frame video of repeated frames; `T_F = 1`.
pub fn patchify_image<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[&RawSample],
    kernel: PatchKernel,
    proj: &Linear,
) -> Result<TokenBatch> {
    let tiled = samples
        .iter()
        .map(|s| tile_image(s, kernel.frames))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RawSample> = tiled.iter().collect();
    let mut batch = patchify_video(tape, &refs, kernel, proj)?;
    batch.modality = Modality::Image;
    Ok(batch)
}

/// 2-D patchify of `[M, M']` spectrogram grids.
pub fn patchify_spectrogram<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[&RawSample],
    kernel: (usize, usize),
    proj: &Linear,
) -> Result<TokenBatch> {
    let patch = PatchKernel::new(1, kernel.0, kernel.1);
    let mut grids = Vec::with_capacity(samples.len());
    let mut rows = Vec::new();
    for s in samples {
        if s.modality != Modality::Spectrogram {
            return Err(bad(s.modality, "patchify_spectrogram expects spectrograms"));
        }
        let (shape, values) = s.values()?;
        let (grid, voxels) = voxelize(values, [1, shape[0], shape[1], 1], patch)?;
        grids.push(grid);
        rows.extend(voxels);
    }
    finish_dense(
        tape,
        Modality::Spectrogram,
        &grids,
        rows,
        samples.len(),
        proj,
    )
}

/// Non-overlapping windows of `window` samples, after truncating to
/// `window * max_tokens` samples.
pub fn embed_waveform<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[&RawSample],
    window: usize,
    max_tokens: usize,
    proj: &Linear,
) -> Result<TokenBatch> {
    let mut grids = Vec::with_capacity(samples.len());
    let mut rows = Vec::new();
    for s in samples {
        if s.modality != Modality::Waveform {
            return Err(bad(s.modality, "embed_waveform expects waveforms"));
        }
        let (_, values) = s.values()?;
        let used = &values[..values.len().min(window * max_tokens)];
        let windows = divide("samples", used.len(), window)?;
        grids.push(TokenGrid {
            frames: 1,
            height: 1,
            width: windows,
        });
        rows.extend_from_slice(used);
    }
    finish_dense(tape, Modality::Waveform, &grids, rows, samples.len(), proj)
}

fn finish_dense<T: Scalar>(
    tape: &mut Tape<T>,
    modality: Modality,
    grids: &[TokenGrid],
    rows: Vec<f32>,
    batch: usize,
    proj: &Linear,
) -> Result<TokenBatch> {
    let grid = require_uniform(modality, grids)?;
    let tokens = project_rows(tape, rows, batch, grid.len(), proj)?;
    Ok(TokenBatch {
        tokens,
        modality,
        budget: Budget {
            batch,
            frames: grid.frames,
            height: grid.height,
            width: grid.width,
        },
        seq_len: grid.len(),
        kept_indices: None,
    })
}

/// Table lookups for token ids, truncated to `max_len`.
pub fn embed_text<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[&RawSample],
    table: Var,
    max_len: usize,
) -> Result<TokenBatch> {
    let vocab = tape.shape(table)?[0];
    let mut ids = Vec::new();
    let mut lengths = Vec::with_capacity(samples.len());
    for s in samples {
        let seq = s.token_ids()?;
        if seq.is_empty() {
            return Err(bad(Modality::Text, "empty token sequence"));
        }
        let seq = &seq[..seq.len().min(max_len)];
        for &id in seq {
            if id as usize >= vocab {
                return Err(CoreError::TokenOutOfRange { id, vocab });
            }
            ids.push(id as usize);
        }
        lengths.push(TokenGrid {
            frames: 1,
            height: 1,
            width: seq.len(),
        });
    }
    let grid = require_uniform(Modality::Text, &lengths)?;
    let rows = tape.gather_rows(table, &ids)?;
    let d = tape.shape(rows)?[1];
    let tokens = tape.reshape(rows, &[samples.len(), grid.len(), d])?;
    Ok(TokenBatch {
        tokens,
        modality: Modality::Text,
        budget: Budget {
            batch: samples.len(),
            frames: 1,
            height: 1,
            width: grid.width,
        },
        seq_len: grid.len(),
        kept_indices: None,
    })
}

/// Bucket indices `[0, s, 2s, ..., (P-1)s]` with stride `s = buckets / patches`.
pub fn dilated_positions(buckets: usize, patches: usize) -> Result<Vec<usize>> {
    if patches == 0 || patches > buckets || buckets % patches != 0 {
        return Err(CoreError::Positions {
            axis: "dilated",
            buckets,
            patches,
        });
    }
    let stride = buckets / patches;
    Ok((0..patches).map(|p| p * stride).collect())
}

/// Bucket counts of every positional table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionBuckets {
    pub video_frames: usize,
    pub video_height: usize,
    pub video_width: usize,
    pub spectrogram_height: usize,
    pub spectrogram_width: usize,
    pub waveform: usize,
    pub text: usize,
}

impl Default for PositionBuckets {
    fn default() -> Self {
        Self {
            video_frames: 4,
            video_height: 8,
            video_width: 8,
            spectrogram_height: 8,
            spectrogram_width: 8,
            waveform: 256,
            text: 16,
        }
    }
}

/// Per-table row indices for each token of one example, in token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIndex {
    pub per_table: Vec<Vec<usize>>,
}

fn truncated(axis: &'static str, buckets: usize, patches: usize) -> Result<Vec<usize>> {
    if patches == 0 || patches > buckets {
        return Err(CoreError::Positions {
            axis,
            buckets,
            patches,
        });
    }
    Ok((0..patches).collect())
}

fn dilated_axis(axis: &'static str, buckets: usize, patches: usize) -> Result<Vec<usize>> {
    dilated_positions(buckets, patches).map_err(|_| CoreError::Positions {
        axis,
        buckets,
        patches,
    })
}

impl PositionIndex {
    /// Resolves table rows for a token grid of `modality`.
    pub fn for_grid(
        modality: Modality,
        grid: TokenGrid,
        buckets: &PositionBuckets,
    ) -> Result<Self> {
        let per_table = match modality {
            Modality::Video | Modality::Image => {
                let t = truncated("temporal", buckets.video_frames, grid.frames)?;
                let h = dilated_axis("height", buckets.video_height, grid.height)?;
                let w = dilated_axis("width", buckets.video_width, grid.width)?;
                let mut axes = vec![Vec::new(), Vec::new(), Vec::new()];
                for &ti in &t {
                    for &hi in &h {
                        for &wi in &w {
                            axes[0].push(ti);
                            axes[1].push(hi);
                            axes[2].push(wi);
                        }
                    }
                }
                axes
            }
            Modality::Spectrogram => {
                let h = dilated_axis(
                    "spectrogram height",
                    buckets.spectrogram_height,
                    grid.height,
                )?;
                let w = dilated_axis("spectrogram width", buckets.spectrogram_width, grid.width)?;
                let mut axes = vec![Vec::new(), Vec::new()];
                for &hi in &h {
                    for &wi in &w {
                        axes[0].push(hi);
                        axes[1].push(wi);
                    }
                }
                axes
            }
            Modality::Waveform => vec![truncated("waveform", buckets.waveform, grid.len())?],
            Modality::Text => vec![truncated("text", buckets.text, grid.len())?],
        };
        Ok(Self { per_table })
    }
}

/// Positional tables bound to a tape, one per axis of the modality.
#[derive(Debug, Clone)]
pub struct PositionalTables {
    pub tables: Vec<Var>,
}

/// Adds the summed per-axis positional rows to every example.
pub fn apply_positions<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &TokenBatch,
    tables: &PositionalTables,
    buckets: &PositionBuckets,
) -> Result<TokenBatch> {
    let index = PositionIndex::for_grid(batch.modality, batch.budget.grid(), buckets)?;
    apply_position_index(tape, batch, tables, &index)
}

/// As [`apply_positions`] with a precomputed index.
pub fn apply_position_index<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &TokenBatch,
    tables: &PositionalTables,
    index: &PositionIndex,
) -> Result<TokenBatch> {
    if tables.tables.len() != index.per_table.len() {
        return Err(CoreError::Config(format!(
            "{} positional tables supplied for {} axes",
            tables.tables.len(),
            index.per_table.len()
        )));
    }
    if batch.kept_indices.is_some() {
        return Err(CoreError::Config(
            "positions must be applied before DropToken".into(),
        ));
    }
    let mut sum: Option<Var> = None;
    for (&table, rows) in tables.tables.iter().zip(&index.per_table) {
        let buckets = tape.shape(table)?[0];
        if let Some(&bad_row) = rows.iter().find(|&&r| r >= buckets) {
            return Err(CoreError::Positions {
                axis: "table",
                buckets,
                patches: bad_row + 1,
            });
        }
        let picked = tape.gather_rows(table, rows)?;
        sum = Some(match sum {
            None => picked,
            Some(acc) => tape.add(acc, picked)?,
        });
    }
    let pos = sum.ok_or_else(|| CoreError::Config("no positional tables".into()))?;
    let tokens = tape.add(batch.tokens, pos)?;
    Ok(TokenBatch {
        tokens,
        ..batch.clone()
    })
}

/// Tokens retained per example: `ceil((1 - d) * S)`.
pub fn keep_count(seq_len: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CoreError::DropRatio(ratio));
    }
    let exact = (1.0 - ratio) * seq_len as f64;
    // guard against 0.25 * 64 landing at 16.000000000000004
    let keep = (exact - 1e-9).ceil().max(1.0) as usize;
    Ok(keep.min(seq_len))
}

/// Keeps a uniformly random, order-preserving subset of exactly
/// `ceil((1 - d) * S)` tokens per example.
pub fn drop_token<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    batch: &TokenBatch,
    ratio: f64,
    rng: &mut R,
) -> Result<TokenBatch> {
    let keep = keep_count(batch.seq_len, ratio)?;
    if keep == batch.seq_len {
        return Ok(TokenBatch {
            kept_indices: Some(vec![(0..batch.seq_len).collect(); batch.budget.batch]),
            ..batch.clone()
        });
    }
    let b = batch.budget.batch;
    let s = batch.seq_len;
    let mut kept = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b * keep);
    for e in 0..b {
        let mut idx = rand::seq::index::sample(rng, s, keep).into_vec();
        idx.sort_unstable();
        rows.extend(idx.iter().map(|&i| e * s + i));
        kept.push(idx);
    }
    let d = tape.shape(batch.tokens)?[2];
    let flat = tape.reshape(batch.tokens, &[b * s, d])?;
    let picked = tape.gather_rows(flat, &rows)?;
    let tokens = tape.reshape(picked, &[b, keep, d])?;
    Ok(TokenBatch {
        tokens,
        seq_len: keep,
        kept_indices: Some(kept),
        ..batch.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use imp_tensor::Tape64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_proj(tape: &mut Tape64, width: usize) -> Linear {
        let weight = tape.constant(
            Tensor::from_fn(&[width, width], |i| {
                if i / width == i % width {
                    1.0
                } else {
                    0.0
                }
            })
            .unwrap(),
        );
        let bias = tape.constant(Tensor::zeros(&[width]).unwrap());
        Linear { weight, bias }
    }

    #[test]
    fn dilation_examples() {
        assert_eq!(
            dilated_positions(16, 16).unwrap(),
            (0..16).collect::<Vec<_>>()
        );
        assert_eq!(dilated_positions(16, 4).unwrap(), vec![0, 4, 8, 12]);
        let full = dilated_positions(32, 32).unwrap();
        let sub: Vec<usize> = full.iter().step_by(4).copied().collect();
        assert_eq!(dilated_positions(32, 8).unwrap(), sub);
        assert!(dilated_positions(16, 5).is_err());
        assert!(dilated_positions(4, 8).is_err());
    }

    #[test]
    fn keep_count_is_exact() {
        assert_eq!(keep_count(1024, 0.75).unwrap(), 256);
        assert_eq!(keep_count(64, 0.75).unwrap(), 16);
        assert_eq!(keep_count(10, 0.5).unwrap(), 5);
        assert_eq!(keep_count(10, 0.0).unwrap(), 10);
        assert_eq!(keep_count(10, 0.33).unwrap(), 7);
        assert!(keep_count(10, 1.0).is_err());
        assert!(keep_count(10, -0.1).is_err());
    }

    #[test]
    fn drop_token_zero_ratio_is_identity() {
        let mut tape = Tape64::new();
        let tokens = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64).unwrap());
        let batch = TokenBatch {
            tokens,
            modality: Modality::Image,
            budget: Budget {
                batch: 2,
                frames: 1,
                height: 1,
                width: 3,
            },
            seq_len: 3,
            kept_indices: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = drop_token(&mut tape, &batch, 0.0, &mut rng).unwrap();
        assert_eq!(out.kept_indices.unwrap(), vec![vec![0, 1, 2]; 2]);
        assert_eq!(tape.value(out.tokens).unwrap(), tape.value(tokens).unwrap());
    }

    #[test]
    fn spectrogram_examples() {
        let mut tape = Tape64::new();
        let proj = identity_proj(&mut tape, 256);
        let grid = RawSample::dense(Modality::Spectrogram, vec![16, 16], vec![0.5; 256]).unwrap();
        let b = patchify_spectrogram(&mut tape, &[&grid], (16, 16), &proj).unwrap();
        assert_eq!(b.seq_len, 1);
        let bad = RawSample::dense(Modality::Spectrogram, vec![20, 16], vec![0.0; 320]).unwrap();
        assert!(matches!(
            patchify_spectrogram(&mut tape, &[&bad], (16, 16), &proj),
            Err(CoreError::Indivisible { axis: "height", .. })
        ));
    }

    #[test]
    fn text_examples() {
        let mut tape = Tape64::new();
        let table = tape.constant(Tensor::from_fn(&[10, 2], |i| i as f64).unwrap());
        let s = RawSample::tokens(vec![3, 7]);
        let b = embed_text(&mut tape, &[&s], table, 16).unwrap();
        assert_eq!(
            tape.value(b.tokens).unwrap().data(),
            &[6.0, 7.0, 14.0, 15.0]
        );
        let long = RawSample::tokens((0..40).map(|i| i % 10).collect());
        assert_eq!(
            embed_text(&mut tape, &[&long], table, 16).unwrap().seq_len,
            16
        );
        assert!(embed_text(&mut tape, &[&RawSample::tokens(vec![])], table, 16).is_err());
        assert!(matches!(
            embed_text(&mut tape, &[&RawSample::tokens(vec![10])], table, 16),
            Err(CoreError::TokenOutOfRange { id: 10, vocab: 10 })
        ));
    }

    #[test]
    fn waveform_examples() {
        let mut tape = Tape64::new();
        let proj = identity_proj(&mut tape, 256);
        let long = RawSample::dense(Modality::Waveform, vec![65536], vec![0.0; 65536]).unwrap();
        assert_eq!(
            embed_waveform(&mut tape, &[&long], 256, 256, &proj)
                .unwrap()
                .seq_len,
            256
        );
        let longer = RawSample::dense(Modality::Waveform, vec![70000], vec![0.0; 70000]).unwrap();
        assert_eq!(
            embed_waveform(&mut tape, &[&longer], 256, 256, &proj)
                .unwrap()
                .seq_len,
            256
        );
        let one = RawSample::dense(Modality::Waveform, vec![256], vec![1.0; 256]).unwrap();
        assert_eq!(
            embed_waveform(&mut tape, &[&one], 256, 256, &proj)
                .unwrap()
                .seq_len,
            1
        );
        let odd = RawSample::dense(Modality::Waveform, vec![300], vec![0.0; 300]).unwrap();
        assert!(embed_waveform(&mut tape, &[&odd], 256, 256, &proj).is_err());
    }

    #[test]
    fn mixed_grids_in_one_batch_are_rejected() {
        let mut tape = Tape64::new();
        let proj = identity_proj(&mut tape, 256);
        let a = RawSample::dense(Modality::Spectrogram, vec![16, 16], vec![0.0; 256]).unwrap();
        let b = RawSample::dense(Modality::Spectrogram, vec![32, 16], vec![0.0; 512]).unwrap();
        assert!(patchify_spectrogram(&mut tape, &[&a, &b], (16, 16), &proj).is_err());
    }
}
