use imp_core::embed::{
    apply_positions, drop_token, embed_text, embed_waveform, keep_count, patchify_image,
    patchify_spectrogram, patchify_video, tile_image, voxelize, Linear, PatchKernel,
    PositionBuckets, PositionalTables, TokenBatch,
};
use imp_core::sample::{Modality, RawSample};
use imp_core::CoreError;
use imp_tensor::{Tape64, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| (i % 9973) as f32 * 1e-3).collect()
}

fn random_linear(
    tape: &mut Tape64,
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    d: usize,
) -> (Linear, Vec<f64>, Vec<f64>) {
    let w: Vec<f64> = (0..fan_in * d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lin = Linear {
        weight: tape.constant(Tensor::from_f64(&[fan_in, d], &w).unwrap()),
        bias: tape.constant(Tensor::from_f64(&[d], &b).unwrap()),
    };
    (lin, w, b)
}

/// Row `r` of `rows` times `w` plus `b`, in plain f64.
fn project(rows: &[f64], width: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut out = Vec::new();
    for row in rows.chunks(width) {
        for k in 0..d {
            out.push(
                b[k] + row
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x * w[j * d + k])
                    .sum::<f64>(),
            );
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Voxel values by direct index arithmetic over `[F, H, W, C]`.
fn voxel_oracle(values: &[f32], dims: [usize; 4], k: PatchKernel) -> Vec<f32> {
    let [f, h, w, c] = dims;
    let mut out = Vec::new();
    for t in 0..f / k.frames {
        for i in 0..h / k.height {
            for j in 0..w / k.width {
                for e in 0..k.frames * k.height * k.width * c {
                    let ch = e % c;
                    let dw = (e / c) % k.width;
                    let dh = (e / (c * k.width)) % k.height;
                    let df = e / (c * k.width * k.height);
                    let (ff, yy, xx) = (t * k.frames + df, i * k.height + dh, j * k.width + dw);
                    out.push(values[((ff * h + yy) * w + xx) * c + ch]);
                }
            }
        }
    }
    out
}

#[test]
fn paper_scale_token_counts() {
    let k = PatchKernel::default();
    let (grid, _) = voxelize(&vec![0.0; 16 * 256 * 256 * 3], [16, 256, 256, 3], k).unwrap();
    assert_eq!(grid.len(), 1024);
    let (grid, _) = voxelize(&vec![0.0; 4 * 256 * 256 * 3], [4, 256, 256, 3], k).unwrap();
    assert_eq!(grid.len(), 256);
    let (grid, rows) = voxelize(&vec![1.0; 4 * 16 * 16 * 3], [4, 16, 16, 3], k).unwrap();
    assert_eq!((grid.len(), rows.len()), (1, k.voxel_len()));
}

#[test]
fn voxels_match_enumeration_oracle() {
    let dims = [8, 64, 32, 3];
    let values = ramp(dims.iter().product());
    let k = PatchKernel::default();
    let (grid, rows) = voxelize(&values, dims, k).unwrap();
    assert_eq!((grid.frames, grid.height, grid.width), (2, 4, 2));
    assert_eq!(grid.len(), 16);
    assert_eq!(rows, voxel_oracle(&values, dims, k));
}

#[test]
fn patchify_video_projects_oracle_voxels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [8, 64, 32, 3];
    let values = ramp(dims.iter().product());
    let k = PatchKernel::default();
    let sample = RawSample::dense(Modality::Video, dims.to_vec(), values.clone()).unwrap();
    let mut tape = Tape64::new();
    let (lin, w, b) = random_linear(&mut tape, &mut rng, k.voxel_len(), 5);
    let batch = patchify_video(&mut tape, &[&sample, &sample], k, &lin).unwrap();
    assert_eq!(tape.shape(batch.tokens).unwrap(), &[2, 16, 5]);
    assert_eq!(batch.budget.tokens_per_batch(), 32);
    let rows: Vec<f64> = voxel_oracle(&values, dims, k)
        .iter()
        .map(|&v| v as f64)
        .collect();
    let expected = project(&rows, k.voxel_len(), &w, &b);
    let got = tape.value(batch.tokens).unwrap().data();
    assert_close(&got[..expected.len()], &expected, 1e-9);
    assert_close(&got[expected.len()..], &expected, 1e-9);
}

#[test]
fn indivisible_video_names_axis() {
    let mut tape = Tape64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (lin, _, _) = random_linear(&mut tape, &mut rng, PatchKernel::default().voxel_len(), 2);
    let s = RawSample::dense(
        Modality::Video,
        vec![4, 40, 32, 3],
        vec![0.0; 4 * 40 * 32 * 3],
    )
    .unwrap();
    match patchify_video(&mut tape, &[&s], PatchKernel::default(), &lin) {
        Err(CoreError::Indivisible {
            axis,
            extent,
            patch,
        }) => assert_eq!((axis, extent, patch), ("height", 40, 16)),
        other => panic!("expected indivisible height, got {other:?}"),
    }
}

#[test]
fn image_equals_explicitly_tiled_video() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = RawSample::dense(Modality::Image, vec![32, 48, 3], ramp(32 * 48 * 3)).unwrap();
    let k = PatchKernel::default();
    let mut tape = Tape64::new();
    let (lin, _, _) = random_linear(&mut tape, &mut rng, k.voxel_len(), 6);
    let a = patchify_image(&mut tape, &[&image], k, &lin).unwrap();
    let video = tile_image(&image, 4).unwrap();
    let b = patchify_video(&mut tape, &[&video], k, &lin).unwrap();
    assert_eq!(a.budget.frames, 1);
    assert_eq!(a.budget.grid(), b.budget.grid());
    assert_eq!(tape.value(a.tokens).unwrap(), tape.value(b.tokens).unwrap());
    let single = RawSample::dense(Modality::Image, vec![16, 16, 3], vec![0.5; 768]).unwrap();
    assert_eq!(
        patchify_image(&mut tape, &[&single], k, &lin)
            .unwrap()
            .seq_len,
        1
    );
}

fn identity(tape: &mut Tape64, n: usize) -> Linear {
    Linear {
        weight: tape.constant(
            Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap(),
        ),
        bias: tape.constant(Tensor::zeros(&[n]).unwrap()),
    }
}

#[test]
fn spectrogram_patches_are_row_major() {
    let mut tape = Tape64::new();
    let lin = identity(&mut tape, 256);
    let values = ramp(32 * 48);
    let s = RawSample::dense(Modality::Spectrogram, vec![32, 48], values.clone()).unwrap();
    let batch = patchify_spectrogram(&mut tape, &[&s], (16, 16), &lin).unwrap();
    assert_eq!(
        (batch.seq_len, batch.budget.height, batch.budget.width),
        (6, 2, 3)
    );
    let got = tape.value(batch.tokens).unwrap().data();
    for token in 0..6 {
        let (pi, pj) = (token / 3, token % 3);
        for e in 0..256 {
            let (dy, dx) = (e / 16, e % 16);
            let want = values[(pi * 16 + dy) * 48 + pj * 16 + dx] as f64;
            assert_eq!(got[token * 256 + e], want, "token {token} element {e}");
        }
    }
    let big =
        RawSample::dense(Modality::Spectrogram, vec![128, 128], vec![0.0; 128 * 128]).unwrap();
    assert_eq!(
        patchify_spectrogram(&mut tape, &[&big], (16, 16), &lin)
            .unwrap()
            .seq_len,
        64
    );
    let one = RawSample::dense(Modality::Spectrogram, vec![16, 16], vec![0.0; 256]).unwrap();
    assert_eq!(
        patchify_spectrogram(&mut tape, &[&one], (16, 16), &lin)
            .unwrap()
            .seq_len,
        1
    );
    let odd = RawSample::dense(Modality::Spectrogram, vec![20, 16], vec![0.0; 320]).unwrap();
    assert!(patchify_spectrogram(&mut tape, &[&odd], (16, 16), &lin).is_err());
}

#[test]
fn waveform_windows_match_slicing_oracle() {
    let mut tape = Tape64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (lin, w, b) = random_linear(&mut tape, &mut rng, 256, 3);
    let values = ramp(1024);
    let s = RawSample::dense(Modality::Waveform, vec![1024], values.clone()).unwrap();
    let batch = embed_waveform(&mut tape, &[&s], 256, 256, &lin).unwrap();
    assert_eq!(batch.seq_len, 4);
    let mut expected = Vec::new();
    for window in values.chunks(256) {
        let row: Vec<f64> = window.iter().map(|&v| v as f64).collect();
        expected.extend(project(&row, 256, &w, &b));
    }
    assert_close(tape.value(batch.tokens).unwrap().data(), &expected, 1e-9);

    let long = RawSample::dense(
        Modality::Waveform,
        vec![65536 + 512],
        vec![0.0; 65536 + 512],
    )
    .unwrap();
    assert_eq!(
        embed_waveform(&mut tape, &[&long], 256, 256, &lin)
            .unwrap()
            .seq_len,
        256
    );
    let one = RawSample::dense(Modality::Waveform, vec![256], vec![0.0; 256]).unwrap();
    assert_eq!(
        embed_waveform(&mut tape, &[&one], 256, 256, &lin)
            .unwrap()
            .seq_len,
        1
    );
    assert!(RawSample::dense(Modality::Waveform, vec![0], vec![]).is_err());
}

#[test]
fn text_lookup_and_truncation() {
    let mut tape = Tape64::new();
    let table_values = Tensor::from_fn(&[512, 4], |i| i as f64).unwrap();
    let table = tape.constant(table_values);
    let s = RawSample::tokens(vec![3, 7]);
    let batch = embed_text(&mut tape, &[&s], table, 16).unwrap();
    let got = tape.value(batch.tokens).unwrap().data().to_vec();
    assert_eq!(got, vec![12.0, 13.0, 14.0, 15.0, 28.0, 29.0, 30.0, 31.0]);
    let long = RawSample::tokens((0..40).collect());
    assert_eq!(
        embed_text(&mut tape, &[&long], table, 16).unwrap().seq_len,
        16
    );
    let empty = RawSample::tokens(vec![]);
    assert!(embed_text(&mut tape, &[&empty], table, 16).is_err());
    let oov = RawSample::tokens(vec![512]);
    assert!(matches!(
        embed_text(&mut tape, &[&oov], table, 16),
        Err(CoreError::TokenOutOfRange {
            id: 512,
            vocab: 512
        })
    ));
}

fn zero_tokens(
    tape: &mut Tape64,
    modality: Modality,
    frames: usize,
    height: usize,
    width: usize,
    d: usize,
) -> TokenBatch {
    let s = frames * height * width;
    TokenBatch {
        tokens: tape.constant(Tensor::zeros(&[1, s, d]).unwrap()),
        modality,
        budget: imp_core::embed::Budget {
            batch: 1,
            frames,
            height,
            width,
        },
        seq_len: s,
        kept_indices: None,
    }
}

fn random_table(tape: &mut Tape64, rng: &mut ChaCha8Rng, rows: usize, d: usize) -> (Var, Vec<f64>) {
    let v: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (tape.constant(Tensor::from_f64(&[rows, d], &v).unwrap()), v)
}

#[test]
fn single_token_gets_first_bucket_of_each_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape64::new();
    let buckets = PositionBuckets::default();
    let (t, tv) = random_table(&mut tape, &mut rng, 4, 3);
    let (h, hv) = random_table(&mut tape, &mut rng, 8, 3);
    let (w, wv) = random_table(&mut tape, &mut rng, 8, 3);
    let tables = PositionalTables {
        tables: vec![t, h, w],
    };
    let batch = zero_tokens(&mut tape, Modality::Video, 1, 1, 1, 3);
    let out = apply_positions(&mut tape, &batch, &tables, &buckets).unwrap();
    let want: Vec<f64> = (0..3).map(|k| tv[k] + hv[k] + wv[k]).collect();
    assert_close(tape.value(out.tokens).unwrap().data(), &want, 1e-15);
}

#[test]
fn half_resolution_positions_subsample_full_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape64::new();
    let buckets = PositionBuckets::default();
    let d = 4;
    let (t, _) = random_table(&mut tape, &mut rng, 4, d);
    let (h, _) = random_table(&mut tape, &mut rng, 8, d);
    let (w, _) = random_table(&mut tape, &mut rng, 8, d);
    let tables = PositionalTables {
        tables: vec![t, h, w],
    };
    let full = zero_tokens(&mut tape, Modality::Image, 1, 8, 8, d);
    let half = zero_tokens(&mut tape, Modality::Image, 1, 4, 4, d);
    let full = apply_positions(&mut tape, &full, &tables, &buckets).unwrap();
    let half = apply_positions(&mut tape, &half, &tables, &buckets).unwrap();
    let f = tape.value(full.tokens).unwrap().data().to_vec();
    let hf = tape.value(half.tokens).unwrap().data().to_vec();
    for i in 0..4 {
        for j in 0..4 {
            let src = (2 * i) * 8 + 2 * j;
            assert_eq!(&hf[(i * 4 + j) * d..][..d], &f[src * d..][..d], "({i},{j})");
        }
    }
}

#[test]
fn temporal_axis_is_truncated_not_dilated() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape64::new();
    let buckets = PositionBuckets::default();
    let (t, tv) = random_table(&mut tape, &mut rng, 4, 2);
    let (h, hv) = random_table(&mut tape, &mut rng, 8, 2);
    let (w, wv) = random_table(&mut tape, &mut rng, 8, 2);
    let tables = PositionalTables {
        tables: vec![t, h, w],
    };
    let batch = zero_tokens(&mut tape, Modality::Video, 2, 2, 2, 2);
    let out = apply_positions(&mut tape, &batch, &tables, &buckets).unwrap();
    let got = tape.value(out.tokens).unwrap().data().to_vec();
    for ti in 0..2 {
        for hi in 0..2 {
            for wi in 0..2 {
                let token = (ti * 2 + hi) * 2 + wi;
                for k in 0..2 {
                    let want = tv[ti * 2 + k] + hv[hi * 4 * 2 + k] + wv[wi * 4 * 2 + k];
                    assert!((got[token * 2 + k] - want).abs() < 1e-15);
                }
            }
        }
    }
    let too_many = zero_tokens(&mut tape, Modality::Video, 5, 1, 1, 2);
    assert!(apply_positions(&mut tape, &too_many, &tables, &buckets).is_err());
}

#[test]
fn drop_token_matches_image_budget() {
    let mut tape = Tape64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = zero_tokens(&mut tape, Modality::Video, 4, 16, 16, 1);
    let out = drop_token(&mut tape, &batch, 0.75, &mut rng).unwrap();
    assert_eq!(out.seq_len, 256);
    assert_eq!(tape.shape(out.tokens).unwrap(), &[1, 256, 1]);
    assert!(matches!(
        drop_token(&mut tape, &batch, 1.0, &mut rng),
        Err(CoreError::DropRatio(_))
    ));
    assert!(keep_count(10, -0.1).is_err());
}

#[test]
fn drop_token_keeps_each_position_uniformly() {
    let mut tape = Tape64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 10_000;
    let mut kept = [0usize; 10];
    for _ in 0..trials {
        let batch = zero_tokens(&mut tape, Modality::Waveform, 1, 1, 10, 1);
        let out = drop_token(&mut tape, &batch, 0.5, &mut rng).unwrap();
        let idx = &out.kept_indices.unwrap()[0];
        assert_eq!(idx.len(), 5);
        for &i in idx {
            kept[i] += 1;
        }
        tape.reset();
    }
    for (i, &n) in kept.iter().enumerate() {
        let freq = n as f64 / trials as f64;
        assert!(
            (freq - 0.5).abs() < 0.02,
            "position {i} kept with frequency {freq}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_count_law(
        kf in 1usize..4, kh in 1usize..5, kw in 1usize..5,
        nf in 1usize..4, nh in 1usize..5, nw in 1usize..5, c in 1usize..4,
    ) {
        let k = PatchKernel::new(kf, kh, kw);
        let dims = [kf * nf, kh * nh, kw * nw, c];
        let values = ramp(dims.iter().product());
        let (grid, rows) = voxelize(&values, dims, k).unwrap();
        prop_assert_eq!(grid.len(), nf * nh * nw);
        prop_assert_eq!(rows.len(), grid.len() * kf * kh * kw * c);
        prop_assert_eq!(rows, voxel_oracle(&values, dims, k));
    }

    #[test]
    fn drop_token_preserves_order_and_count(b in 1usize..5, s in 1usize..40, d in 0.0f64..0.95, seed in any::<u64>()) {
        let mut tape = Tape64::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = TokenBatch {
            tokens: tape.constant(Tensor::from_fn(&[b, s, 1], |i| i as f64).unwrap()),
            modality: Modality::Text,
            budget: imp_core::embed::Budget { batch: b, frames: 1, height: 1, width: s },
            seq_len: s,
            kept_indices: None,
        };
        let out = drop_token(&mut tape, &batch, d, &mut rng).unwrap();
        let keep = keep_count(s, d).unwrap();
        prop_assert_eq!(keep, (((1.0 - d) * s as f64) - 1e-9).ceil().max(1.0) as usize);
        let kept = out.kept_indices.clone().unwrap();
        prop_assert_eq!(kept.len(), b);
        let values = tape.value(out.tokens).unwrap().data().to_vec();
        for (e, idx) in kept.iter().enumerate() {
            prop_assert_eq!(idx.len(), keep);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (slot, &i) in idx.iter().enumerate() {
                prop_assert_eq!(values[e * keep + slot], (e * s + i) as f64);
            }
        }
    }
}
