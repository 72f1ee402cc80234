use imp_core::encoder::{
    attention, encoder_forward, mlp_input, moe_ffn, route_expert_choice, route_tokens_choose,
    router_probs, EncoderConfig, ForwardOptions, LayerVars, RouterKind,
};
use imp_core::init::init_params;
use imp_tensor::gradcheck::check_gradients;
use imp_tensor::{ParamTree64, Tape64, Tensor64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;

const PREFIX: &str = "enc";

fn toy(num_experts: usize, qk_layernorm: bool) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 8,
        ffn: 16,
        heads: Some(2),
        num_experts,
        qk_layernorm,
        ..EncoderConfig::tiny()
    }
}

/// Initialized parameters with every tensor (norm gains included) jittered.
fn jittered(config: &EncoderConfig, seed: u64) -> ParamTree64 {
    let mut p = init_params::<f64>(&config.param_specs(PREFIX), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn random_tokens(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn get(p: &ParamTree64, path: &str) -> Vec<f64> {
    p.get(path).unwrap().data().to_vec()
}

fn matmul(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..inner).map(|k| a[i * inner + k] * b[k * cols + j]).sum();
        }
    }
    out
}

fn layer_norm(x: &[f64], width: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = (var + 1e-6).sqrt().recip();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i]),
        );
    }
    out
}

struct AttnOracle {
    out: Vec<f64>,
    /// `[H, S, S]`
    probs: Vec<f64>,
}

/// Loop-level attention for a single sequence `[S, D]`.
fn attention_oracle(
    x: &[f64],
    s: usize,
    p: &ParamTree64,
    cfg: &EncoderConfig,
    layer: usize,
) -> AttnOracle {
    let d = cfg.hidden;
    let nh = cfg.num_heads();
    let dh = d / nh;
    let lp = format!("{PREFIX}.layers.{layer:02}");
    let h = layer_norm(
        x,
        d,
        &get(p, &format!("{lp}.ln_attn.g")),
        &get(p, &format!("{lp}.ln_attn.b")),
    );
    let q = matmul(&h, s, d, &get(p, &format!("{lp}.attn.wq")), d);
    let k = matmul(&h, s, d, &get(p, &format!("{lp}.attn.wk")), d);
    let v = matmul(&h, s, d, &get(p, &format!("{lp}.attn.wv")), d);
    let mut ctx = vec![0.0; s * d];
    let mut probs = vec![0.0; nh * s * s];
    for head in 0..nh {
        let slice = |m: &[f64], t: usize| m[t * d + head * dh..t * d + (head + 1) * dh].to_vec();
        let mut qs: Vec<Vec<f64>> = (0..s).map(|t| slice(&q, t)).collect();
        let mut ks: Vec<Vec<f64>> = (0..s).map(|t| slice(&k, t)).collect();
        if cfg.qk_layernorm {
            let norm = |rows: &mut Vec<Vec<f64>>, name: &str| {
                let g = get(p, &format!("{lp}.attn.{name}.g"));
                let b = get(p, &format!("{lp}.attn.{name}.b"));
                for r in rows.iter_mut() {
                    *r = layer_norm(r, dh, &g, &b);
                }
            };
            norm(&mut qs, "q_norm");
            norm(&mut ks, "k_norm");
        }
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
            for j in 0..s {
                let pij = (scores[j] - m).exp() / z;
                probs[(head * s + i) * s + j] = pij;
                for c in 0..dh {
                    ctx[i * d + head * dh + c] += pij * v[j * d + head * dh + c];
                }
            }
        }
    }
    let o = matmul(&ctx, s, d, &get(p, &format!("{lp}.attn.wo")), d);
    let bo = get(p, &format!("{lp}.attn.bo"));
    let out = (0..s * d).map(|i| x[i] + o[i] + bo[i % d]).collect();
    AttnOracle { out, probs }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn attention_matches_loop_oracle() {
    for qk in [false, true] {
        let cfg = toy(2, qk);
        let p = jittered(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tokens(&mut rng, &[1, 5, 8]);
        let mut tape = Tape64::new();
        let xv = tape.constant(x.clone());
        let layer = LayerVars::bind(&mut tape, &p, &cfg, PREFIX, 0).unwrap();
        let a = attention(&mut tape, xv, &layer, &cfg).unwrap();
        let oracle = attention_oracle(x.data(), 5, &p, &cfg, 0);
        assert!(
            close(tape.value(a.out).unwrap().data(), &oracle.out, 1e-12),
            "qk_layernorm={qk}"
        );
        assert!(
            close(tape.value(a.probs).unwrap().data(), &oracle.probs, 1e-12),
            "qk_layernorm={qk}"
        );
    }
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = toy(2, true);
    let p = jittered(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tokens(&mut rng, &[3, 1, 8]);
    let mut tape = Tape64::new();
    let xv = tape.constant(x.clone());
    let layer = LayerVars::bind(&mut tape, &p, &cfg, PREFIX, 0).unwrap();
    let a = attention(&mut tape, xv, &layer, &cfg).unwrap();
    assert!(tape
        .value(a.probs)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    let lp = format!("{PREFIX}.layers.00");
    let h = layer_norm(
        x.data(),
        8,
        &get(&p, &format!("{lp}.ln_attn.g")),
        &get(&p, &format!("{lp}.ln_attn.b")),
    );
    let v = matmul(&h, 3, 8, &get(&p, &format!("{lp}.attn.wv")), 8);
    let o = matmul(&v, 3, 8, &get(&p, &format!("{lp}.attn.wo")), 8);
    let bo = get(&p, &format!("{lp}.attn.bo"));
    let want: Vec<f64> = (0..24).map(|i| x.data()[i] + o[i] + bo[i % 8]).collect();
    assert!(close(tape.value(a.out).unwrap().data(), &want, 1e-12));
}

fn attention_probs(p: &ParamTree64, cfg: &EncoderConfig, x: &Tensor64) -> Vec<f64> {
    let mut tape = Tape64::new();
    let xv = tape.constant(x.clone());
    let layer = LayerVars::bind(&mut tape, p, cfg, PREFIX, 0).unwrap();
    let a = attention(&mut tape, xv, &layer, cfg).unwrap();
    tape.value(a.probs).unwrap().data().to_vec()
}

#[test]
fn qk_layernorm_probabilities_ignore_query_key_scale() {
    let cfg = toy(2, true);
    let p = jittered(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tokens(&mut rng, &[2, 6, 8]);
    let base = attention_probs(&p, &cfg, &x);
    for (alpha, beta) in [(10.0, 10.0), (100.0, 3.0), (2.0, 40.0)] {
        let mut scaled = p.clone();
        for (w, s) in [("wq", alpha), ("wk", beta)] {
            for v in scaled
                .get_mut(&format!("{PREFIX}.layers.00.attn.{w}"))
                .unwrap()
                .data_mut()
            {
                *v *= s;
            }
        }
        let probs = attention_probs(&scaled, &cfg, &x);
        let worst = base
            .iter()
            .zip(&probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            worst < 1e-5,
            "scale ({alpha}, {beta}) moved probabilities by {worst:.2e}"
        );
    }
}

#[test]
fn without_qk_layernorm_scaling_sharpens_attention() {
    let cfg = toy(2, false);
    let p = jittered(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tokens(&mut rng, &[1, 6, 8]);
    let base = attention_probs(&p, &cfg, &x);
    let mut scaled = p.clone();
    for v in scaled
        .get_mut(&format!("{PREFIX}.layers.00.attn.wq"))
        .unwrap()
        .data_mut()
    {
        *v *= 50.0;
    }
    let probs = attention_probs(&scaled, &cfg, &x);
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    assert!(max(&probs) > max(&base));
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn ffn_oracle(h: &[f64], p: &ParamTree64, expert: &str, d: usize, f: usize) -> Vec<f64> {
    let w_in = get(p, &format!("{expert}.w_in"));
    let b_in = get(p, &format!("{expert}.b_in"));
    let w_out = get(p, &format!("{expert}.w_out"));
    let b_out = get(p, &format!("{expert}.b_out"));
    let hid: Vec<f64> = matmul(h, 1, d, &w_in, f)
        .iter()
        .zip(&b_in)
        .map(|(a, b)| gelu(a + b))
        .collect();
    matmul(&hid, 1, f, &w_out, d)
        .iter()
        .zip(&b_out)
        .map(|(a, b)| a + b)
        .collect()
}

#[test]
fn moe_layer_matches_per_token_oracle() {
    for kind in [RouterKind::ExpertChoice, RouterKind::TokensChoose] {
        let cfg = EncoderConfig {
            num_experts: 3,
            router_kind: kind,
            ..toy(3, true)
        };
        let p = jittered(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tokens(&mut rng, &[2, 6, 8]);
        let mut tape = Tape64::new();
        let xv = tape.constant(x.clone());
        let layer = LayerVars::bind(&mut tape, &p, &cfg, PREFIX, 1).unwrap();
        let h = mlp_input(&mut tape, xv, &layer).unwrap();
        let probs = router_probs(&mut tape, h, &layer).unwrap();
        let pv = tape.value(probs).unwrap().clone();
        let decision = match kind {
            RouterKind::TokensChoose => route_tokens_choose(&pv, 0.5).unwrap(),
            _ => route_expert_choice(&pv, 1.0).unwrap(),
        };
        let out = moe_ffn(&mut tape, xv, h, &layer, &decision, Some(probs)).unwrap();
        let got = tape.value(out).unwrap().data().to_vec();
        let hv = tape.value(h).unwrap().data().to_vec();
        let mut want = x.data().to_vec();
        for (e, a) in decision.experts.iter().enumerate() {
            for &t in &a.tokens {
                let y = ffn_oracle(
                    &hv[t * 8..(t + 1) * 8],
                    &p,
                    &format!("{PREFIX}.layers.01.mlp.{e}"),
                    8,
                    16,
                );
                for c in 0..8 {
                    want[t * 8 + c] += pv.data()[t * 3 + e] * y[c];
                }
            }
        }
        let worst = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "{kind:?}: {worst:.3e}");
        for &t in &decision.dropped {
            assert_eq!(&got[t * 8..(t + 1) * 8], &x.data()[t * 8..(t + 1) * 8]);
        }
    }
}

#[test]
fn single_expert_equals_dense_encoder() {
    let moe = toy(1, true);
    let dense = EncoderConfig {
        router_kind: RouterKind::Dense,
        ..moe.clone()
    };
    let p = jittered(&moe, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tokens(&mut rng, &[2, 5, 8]);
    let run = |cfg: &EncoderConfig| {
        let mut tape = Tape64::new();
        let xv = tape.constant(x.clone());
        let out =
            encoder_forward(&mut tape, xv, &p, cfg, PREFIX, &ForwardOptions::default()).unwrap();
        tape.value(out.hidden).unwrap().data().to_vec()
    };
    assert!(close(&run(&moe), &run(&dense), 1e-12));
}

#[test]
fn full_encoder_gradients_match_finite_differences() {
    let cfg = toy(2, true);
    for seed in 0..20u64 {
        let mut params = jittered(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params
            .insert("tokens", random_tokens(&mut rng, &[1, 6, 8]))
            .unwrap();
        let weights = random_tokens(&mut rng, &[1, 6, 8]);
        let mut tape = Tape64::new();
        let x = tape.bind(&params, "tokens").unwrap();
        let first = encoder_forward(
            &mut tape,
            x,
            &params,
            &cfg,
            PREFIX,
            &ForwardOptions::default(),
        )
        .unwrap();
        let fixed = ForwardOptions {
            fixed_decisions: Some(first.decisions.into_iter().map(|d| d.decision).collect()),
        };
        let report = check_gradients(&params, 1e-6, |tape, p| {
            let x = tape.bind(p, "tokens")?;
            let out = encoder_forward(tape, x, p, &cfg, PREFIX, &fixed).map_err(|e| match e {
                imp_core::CoreError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out.hidden, w)?;
            tape.sum(prod)
        })
        .unwrap();
        for e in &report.entries {
            assert!(
                e.passes(1e-3, 1e-6, 1e-7),
                "seed {seed}: {} rel {:.3e} abs {:.3e}",
                e.path,
                e.rel_error,
                e.abs_error
            );
        }
    }
}

#[test]
fn toy_parameter_counts_are_exact() {
    let cfg = toy(2, true);
    // Per layer: two norms 32, projections 256, out bias 8, QK norms 16, FFN 280.
    let count = cfg.count_params();
    assert_eq!(count.dense, 2 * 592 + 16);
    assert_eq!(count.sparse, 2 * 592 + 16 + 280 + 16);
    let enumerated: usize = cfg.param_specs(PREFIX).iter().map(|s| s.numel()).sum();
    assert_eq!(enumerated as u64, count.sparse);
    let dense = EncoderConfig {
        router_kind: RouterKind::Dense,
        ..cfg
    };
    let enumerated: usize = dense.param_specs(PREFIX).iter().map(|s| s.numel()).sum();
    assert_eq!(enumerated as u64, count.dense);
}

#[test]
fn imp_s_parameter_counts_are_near_reference() {
    let count = EncoderConfig::imp_s().count_params();
    let near = |v: u64, target: f64| (v as f64 / target - 1.0).abs() <= 0.10;
    assert!(near(count.dense, 21e6), "dense {}", count.dense);
    assert!(near(count.sparse, 40e6), "sparse {}", count.sparse);
}

fn probs_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..40, 1usize..6).prop_flat_map(|(n, e)| {
        (
            Just(n),
            Just(e),
            proptest::collection::vec(0.0f64..1.0, n * e),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expert_choice_takes_column_top_k((n, e, raw) in probs_strategy(), c in 0.5f64..2.0) {
        let probs = Tensor64::new(&[n, e], raw.clone()).unwrap();
        let k = (c * n as f64 / e as f64 + 1e-9).floor() as usize;
        match route_expert_choice(&probs, c) {
            Ok(d) => {
                prop_assert!(k >= 1 && k <= n);
                prop_assert_eq!(d.capacity, k);
                prop_assert!(d.check_balance(0).is_ok());
                prop_assert!(d.validate(n, e).is_ok());
                for (j, a) in d.experts.iter().enumerate() {
                    let mut col: Vec<f64> = (0..n).map(|t| raw[t * e + j]).collect();
                    col.sort_by(|x, y| y.total_cmp(x));
                    let kth = col[k - 1];
                    for &t in &a.tokens {
                        prop_assert!(raw[t * e + j] >= kth);
                    }
                }
            }
            Err(_) => prop_assert!(k == 0 || k > n),
        }
    }

    #[test]
    fn tokens_choose_respects_capacity((n, e, raw) in probs_strategy(), c in 0.2f64..2.0) {
        let probs = Tensor64::new(&[n, e], raw.clone()).unwrap();
        let d = route_tokens_choose(&probs, c).unwrap();
        prop_assert!(d.validate(n, e).is_ok());
        let cap = ((c * n as f64 / e as f64) - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(d.capacity, cap);
        let mut seen = vec![false; n];
        for (j, a) in d.experts.iter().enumerate() {
            prop_assert!(a.tokens.len() <= cap);
            for &t in &a.tokens {
                let row = &raw[t * e..(t + 1) * e];
                prop_assert!(row.iter().all(|&v| v <= row[j]));
                seen[t] = true;
            }
        }
        for &t in &d.dropped {
            prop_assert!(!seen[t]);
            seen[t] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}
