//! Shared pre-LayerNorm Transformer encoder whose last layers swap the FFN for
//! a routed mixture of experts.

use imp_tensor::{top_k, ParamTree, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::init::{dense, Init, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    ExpertChoice,
    TokensChoose,
    Dense,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::ExpertChoice => "expert_choice",
            RouterKind::TokensChoose => "tokens_choose",
            RouterKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    /// `None` selects `max(1, hidden / 64)`.
    pub heads: Option<usize>,
    pub num_experts: usize,
    pub capacity_factor: f64,
    pub router_kind: RouterKind,
    pub moe_layer_fraction: f64,
    pub tokens_choose_capacity: f64,
    pub qk_layernorm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl EncoderConfig {
    /// 4 layers, width 64, 4 experts: the desk-scale training model.
    pub fn tiny() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            ffn: 256,
            heads: None,
            num_experts: 4,
            capacity_factor: 1.0,
            router_kind: RouterKind::ExpertChoice,
            moe_layer_fraction: 0.5,
            tokens_choose_capacity: 1.05,
            qk_layernorm: true,
        }
    }

    /// 12 layers, width 384, FFN 1536, 4 experts.
    pub fn imp_s() -> Self {
        Self {
            num_layers: 12,
            hidden: 384,
            ffn: 1536,
            ..Self::tiny()
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.unwrap_or((self.hidden / 64).max(1))
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(format!("encoder: {msg}")));
        if self.num_layers == 0 || self.hidden == 0 || self.ffn == 0 {
            return fail("layers, hidden and ffn must be positive".into());
        }
        let heads = self.num_heads();
        if heads == 0 || self.hidden % heads != 0 {
            return fail(format!(
                "hidden {} not divisible by {heads} heads",
                self.hidden
            ));
        }
        if self.num_experts == 0 {
            return fail("num_experts must be at least 1".into());
        }
        if !(self.capacity_factor > 0.0) || !(self.tokens_choose_capacity > 0.0) {
            return fail("capacity factors must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.moe_layer_fraction) {
            return fail(format!(
                "moe_layer_fraction {} outside [0, 1]",
                self.moe_layer_fraction
            ));
        }
        Ok(())
    }

    /// Leading layers with a plain FFN: `ceil((1 - fraction) * L)`.
    pub fn num_dense_layers(&self) -> usize {
        if self.router_kind == RouterKind::Dense {
            return self.num_layers;
        }
        let moe = (self.moe_layer_fraction * self.num_layers as f64 + 1e-9).floor() as usize;
        self.num_layers - moe.min(self.num_layers)
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        layer >= self.num_dense_layers() && layer < self.num_layers
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.num_layers)
            .filter(|&l| self.is_moe_layer(l))
            .collect()
    }

    pub fn experts_in_layer(&self, layer: usize) -> usize {
        if self.is_moe_layer(layer) {
            self.num_experts
        } else {
            1
        }
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.hidden;
        let f = self.ffn;
        let dh = self.head_dim();
        let mut specs = Vec::new();
        let norm = |specs: &mut Vec<ParamSpec>, path: String, width: usize| {
            specs.push(ParamSpec::new(format!("{path}.g"), &[width], Init::Ones));
            specs.push(ParamSpec::new(format!("{path}.b"), &[width], Init::Zeros));
        };
        for l in 0..self.num_layers {
            let p = layer_prefix(prefix, l);
            norm(&mut specs, format!("{p}.ln_attn"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push(dense(format!("{p}.attn.{w}"), d, d));
            }
            specs.push(ParamSpec::new(format!("{p}.attn.bo"), &[d], Init::Zeros));
            if self.qk_layernorm {
                norm(&mut specs, format!("{p}.attn.q_norm"), dh);
                norm(&mut specs, format!("{p}.attn.k_norm"), dh);
            }
            norm(&mut specs, format!("{p}.ln_mlp"), d);
            for e in 0..self.experts_in_layer(l) {
                let q = format!("{p}.mlp.{e}");
                specs.push(dense(format!("{q}.w_in"), d, f));
                specs.push(ParamSpec::new(format!("{q}.b_in"), &[f], Init::Zeros));
                specs.push(dense(format!("{q}.w_out"), f, d));
                specs.push(ParamSpec::new(format!("{q}.b_out"), &[d], Init::Zeros));
            }
            if self.is_moe_layer(l) {
                specs.push(dense(format!("{p}.router.w"), d, self.num_experts));
            }
        }
        norm(&mut specs, format!("{prefix}.final_norm"), d);
        specs
    }

    /// Encoder-only parameter totals, embeddings excluded.
    pub fn count_params(&self) -> ParamCount {
        let d = self.hidden as u64;
        let f = self.ffn as u64;
        let dh = self.head_dim() as u64;
        let ffn = 2 * d * f + f + d;
        let qk = if self.qk_layernorm { 4 * dh } else { 0 };
        let layer = 4 * d + 4 * d * d + d + qk + ffn;
        let dense = self.num_layers as u64 * layer + 2 * d;
        let moe = self.moe_layers().len() as u64;
        let e = self.num_experts as u64;
        ParamCount {
            dense,
            sparse: dense + moe * ((e - 1) * ffn + d * e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub dense: u64,
    pub sparse: u64,
}

pub fn layer_prefix(prefix: &str, layer: usize) -> String {
    format!("{prefix}.layers.{layer:02}")
}

/// Tokens held by one expert, ascending, with their combine weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertAssignment {
    pub tokens: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub kind: RouterKind,
    pub num_tokens: usize,
    /// Per-expert quota: `k` for expert choice, the acceptance cap for
    /// tokens choose.
    pub capacity: usize,
    pub experts: Vec<ExpertAssignment>,
    /// Tokens that no expert processes (tokens choose overflow).
    pub dropped: Vec<usize>,
}

impl RouterDecision {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn loads(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.tokens.len()).collect()
    }

    pub fn selections(&self) -> usize {
        self.experts.iter().map(|e| e.tokens.len()).sum()
    }

    /// Structural consistency against a flattened token count.
    pub fn validate(&self, num_tokens: usize, num_experts: usize) -> Result<()> {
        let fail = |m: String| Err(CoreError::Decision(m));
        if self.num_tokens != num_tokens {
            return fail(format!(
                "decision covers {} tokens, input has {num_tokens}",
                self.num_tokens
            ));
        }
        if self.experts.len() != num_experts {
            return fail(format!(
                "decision names {} experts, layer has {num_experts}",
                self.experts.len()
            ));
        }
        let mut owner = vec![0usize; num_tokens];
        for (e, a) in self.experts.iter().enumerate() {
            if a.tokens.len() != a.weights.len() {
                return fail(format!("expert {e}: token and weight counts differ"));
            }
            if a.tokens.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!(
                    "expert {e}: token indices must be strictly increasing"
                ));
            }
            if let Some(&t) = a.tokens.iter().find(|&&t| t >= num_tokens) {
                return fail(format!("expert {e}: token {t} out of range"));
            }
            for &t in &a.tokens {
                owner[t] += 1;
            }
        }
        if self.kind == RouterKind::TokensChoose {
            if let Some(t) = owner.iter().position(|&n| n > 1) {
                return fail(format!("token {t} assigned to several experts"));
            }
        }
        Ok(())
    }

    /// Hard expert-choice invariant: every expert holds exactly `k` tokens.
    pub fn check_balance(&self, layer: usize) -> Result<()> {
        if self.kind != RouterKind::ExpertChoice {
            return Ok(());
        }
        for (expert, a) in self.experts.iter().enumerate() {
            if a.tokens.len() != self.capacity {
                return Err(CoreError::LoadBalance {
                    layer,
                    expert,
                    held: a.tokens.len(),
                    expected: self.capacity,
                });
            }
        }
        Ok(())
    }
}

fn probs_dims<T: Scalar>(probs: &Tensor<T>) -> Result<(usize, usize)> {
    match probs.shape() {
        &[n, e] => Ok((n, e)),
        s => Err(CoreError::Decision(format!(
            "router probabilities must be [tokens, experts], got {s:?}"
        ))),
    }
}

/// Each expert takes the `k = floor(c * N / E)` tokens with the highest
/// probability in its column.
pub fn route_expert_choice<T: Scalar>(
    probs: &Tensor<T>,
    capacity_factor: f64,
) -> Result<RouterDecision> {
    let (n, e) = probs_dims(probs)?;
    let k = (capacity_factor * n as f64 / e as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(CoreError::ZeroCapacity {
            capacity: capacity_factor,
            tokens: n,
            experts: e,
        });
    }
    if k > n {
        return Err(CoreError::Config(format!(
            "capacity factor {capacity_factor} asks each expert for {k} of {n} tokens"
        )));
    }
    let picked = top_k(probs, k, 0)?;
    let mut experts = Vec::with_capacity(e);
    for j in 0..e {
        let mut chosen: Vec<(usize, f64)> = (0..k)
            .map(|r| {
                let t = picked.indices[r * e + j];
                (t, probs.data()[t * e + j].as_f64())
            })
            .collect();
        chosen.sort_unstable_by_key(|&(t, _)| t);
        experts.push(ExpertAssignment {
            tokens: chosen.iter().map(|c| c.0).collect(),
            weights: chosen.iter().map(|c| c.1).collect(),
        });
    }
    Ok(RouterDecision {
        kind: RouterKind::ExpertChoice,
        num_tokens: n,
        capacity: k,
        experts,
        dropped: Vec::new(),
    })
}

/// Top-1 tokens-choose routing: each token picks its argmax expert, experts
/// accept in descending probability up to `ceil(capacity * N / E)`.
pub fn route_tokens_choose<T: Scalar>(probs: &Tensor<T>, capacity: f64) -> Result<RouterDecision> {
    let (n, e) = probs_dims(probs)?;
    let cap = (capacity * n as f64 / e as f64 - 1e-9).ceil().max(1.0) as usize;
    let best = top_k(probs, 1, 1)?;
    let mut queues: Vec<Vec<(usize, f64)>> = vec![Vec::new(); e];
    for t in 0..n {
        let j = best.indices[t];
        queues[j].push((t, probs.data()[t * e + j].as_f64()));
    }
    let mut experts = Vec::with_capacity(e);
    let mut dropped = Vec::new();
    for mut q in queues {
        q.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        dropped.extend(q.iter().skip(cap).map(|c| c.0));
        q.truncate(cap);
        q.sort_unstable_by_key(|c| c.0);
        experts.push(ExpertAssignment {
            tokens: q.iter().map(|c| c.0).collect(),
            weights: q.iter().map(|c| c.1).collect(),
        });
    }
    dropped.sort_unstable();
    Ok(RouterDecision {
        kind: RouterKind::TokensChoose,
        num_tokens: n,
        capacity: cap,
        experts,
        dropped,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl ExpertVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w_in)?;
        let h = tape.add(h, self.b_in)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, self.w_out)?;
        Ok(tape.add(y, self.b_out)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

impl NormVars {
    fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ParamTree<T>, path: &str) -> Result<Self> {
        Ok(Self {
            gain: tape.bind(params, &format!("{path}.g"))?,
            bias: tape.bind(params, &format!("{path}.b"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
        Ok(tape.layer_norm(x, self.gain, self.bias, axis)?)
    }
}

/// One layer's parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub index: usize,
    pub ln_attn: NormVars,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub q_norm: Option<NormVars>,
    pub k_norm: Option<NormVars>,
    pub ln_mlp: NormVars,
    pub experts: Vec<ExpertVars>,
    pub router: Option<Var>,
}

impl LayerVars {
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        params: &ParamTree<T>,
        config: &EncoderConfig,
        prefix: &str,
        index: usize,
    ) -> Result<Self> {
        let p = layer_prefix(prefix, index);
        let mut w = |name: &str| tape.bind(params, &format!("{p}.{name}"));
        let (wq, wk, wv, wo, bo) = (
            w("attn.wq")?,
            w("attn.wk")?,
            w("attn.wv")?,
            w("attn.wo")?,
            w("attn.bo")?,
        );
        let ln_attn = NormVars::bind(tape, params, &format!("{p}.ln_attn"))?;
        let (q_norm, k_norm) = if config.qk_layernorm {
            (
                Some(NormVars::bind(tape, params, &format!("{p}.attn.q_norm"))?),
                Some(NormVars::bind(tape, params, &format!("{p}.attn.k_norm"))?),
            )
        } else {
            (None, None)
        };
        let ln_mlp = NormVars::bind(tape, params, &format!("{p}.ln_mlp"))?;
        let mut experts = Vec::new();
        for e in 0..config.experts_in_layer(index) {
            let q = format!("{p}.mlp.{e}");
            experts.push(ExpertVars {
                w_in: tape.bind(params, &format!("{q}.w_in"))?,
                b_in: tape.bind(params, &format!("{q}.b_in"))?,
                w_out: tape.bind(params, &format!("{q}.w_out"))?,
                b_out: tape.bind(params, &format!("{q}.b_out"))?,
            });
        }
        let router = if config.is_moe_layer(index) {
            Some(tape.bind(params, &format!("{p}.router.w"))?)
        } else {
            None
        };
        Ok(Self {
            index,
            ln_attn,
            wq,
            wk,
            wv,
            wo,
            bo,
            q_norm,
            k_norm,
            ln_mlp,
            experts,
            router,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Block output including the residual, `[B, S, D]`.
    pub out: Var,
    /// Attention probabilities `[B, H, S, S]`.
    pub probs: Var,
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x)?.to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, n, heads, d / heads])?;
    Ok(tape.permute(x, &[0, 2, 1, 3])?)
}

/// Pre-LayerNorm multi-head self-attention block with optional QK LayerNorm.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &LayerVars,
    config: &EncoderConfig,
) -> Result<AttentionOutput> {
    let shape = tape.shape(x)?.to_vec();
    if shape.len() != 3 || shape[2] != config.hidden {
        return Err(CoreError::Config(format!(
            "attention expects [B, S, {}], got {shape:?}",
            config.hidden
        )));
    }
    let heads = config.num_heads();
    let h = layer.ln_attn.apply(tape, x, 2)?;
    let q = tape.matmul(h, layer.wq)?;
    let k = tape.matmul(h, layer.wk)?;
    let v = tape.matmul(h, layer.wv)?;
    let mut q = split_heads(tape, q, heads)?;
    let mut k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    if let Some(n) = &layer.q_norm {
        q = n.apply(tape, q, 3)?;
    }
    if let Some(n) = &layer.k_norm {
        k = n.apply(tape, k, 3)?;
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, (config.head_dim() as f64).sqrt().recip())?;
    let probs = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &shape)?;
    let o = tape.matmul(ctx, layer.wo)?;
    let o = tape.add(o, layer.bo)?;
    let out = tape.add(x, o)?;
    Ok(AttentionOutput { out, probs })
}

/// FFN input: `ln_mlp(x)` flattened to `[B*S, D]`.
pub fn mlp_input<T: Scalar>(tape: &mut Tape<T>, x: Var, layer: &LayerVars) -> Result<Var> {
    let s = tape.shape(x)?.to_vec();
    let h = layer.ln_mlp.apply(tape, x, 2)?;
    Ok(tape.reshape(h, &[s[0] * s[1], s[2]])?)
}

/// Softmax over experts of `h @ router`, `[N, E]`.
pub fn router_probs<T: Scalar>(tape: &mut Tape<T>, h: Var, layer: &LayerVars) -> Result<Var> {
    let router = layer
        .router
        .ok_or_else(|| CoreError::Config(format!("layer {} has no router", layer.index)))?;
    let logits = tape.matmul(h, router)?;
    Ok(tape.softmax(logits, 1)?)
}

/// Dispatches tokens of `h` to experts, scales each expert's output by its
/// combine weight and scatter-adds into `x`.
///
/// Combine weights are read from `probs` when given (so they carry gradient),
/// otherwise taken from the decision as constants. Accumulation runs in
/// ascending expert id, then ascending token index.
pub fn moe_ffn<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    layer: &LayerVars,
    decision: &RouterDecision,
    probs: Option<Var>,
) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let n = tape.shape(h)?[0];
    let e = layer.experts.len();
    decision.validate(n, e)?;
    let mut out = x;
    let flat_x = tape.reshape(x, &[n, shape[2]])?;
    let mut acc: Option<Var> = None;
    for (j, (expert, assign)) in layer.experts.iter().zip(&decision.experts).enumerate() {
        if assign.tokens.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(h, &assign.tokens)?;
        let ye = expert.apply(tape, xe)?;
        let w = match probs {
            Some(p) => {
                let flat: Vec<usize> = assign.tokens.iter().map(|&t| t * e + j).collect();
                tape.gather_elements(p, &flat)?
            }
            None => {
                let w: Vec<T> = assign.weights.iter().map(|&w| T::lit(w)).collect();
                tape.constant(Tensor::new(&[w.len()], w)?)
            }
        };
        let ye = tape.row_scale(ye, w)?;
        let back = tape.scatter_add_rows(ye, &assign.tokens, n)?;
        acc = Some(match acc {
            None => back,
            Some(a) => tape.add(a, back)?,
        });
    }
    if let Some(a) = acc {
        let sum = tape.add(flat_x, a)?;
        out = tape.reshape(sum, &shape)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Replays these decisions (one per MoE layer, in order) instead of
    /// routing; combine weights still flow from the router.
    pub fixed_decisions: Option<Vec<RouterDecision>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: usize,
    pub decision: RouterDecision,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub decisions: Vec<LayerDecision>,
    pub attention: Vec<Var>,
}

/// Runs the full encoder over `[B, S, D]` tokens.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &ParamTree<T>,
    config: &EncoderConfig,
    prefix: &str,
    options: &ForwardOptions,
) -> Result<EncoderOutput> {
    let shape = tape.shape(tokens)?.to_vec();
    if shape.len() != 3 || shape[2] != config.hidden {
        return Err(CoreError::Config(format!(
            "encoder expects tokens [B, S, {}], got {shape:?}",
            config.hidden
        )));
    }
    let mut fixed = options.fixed_decisions.as_ref().map(|d| d.iter());
    let mut x = tokens;
    let mut decisions = Vec::new();
    let mut attn = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let layer = LayerVars::bind(tape, params, config, prefix, l)?;
        let a = attention(tape, x, &layer, config)?;
        attn.push(a.probs);
        x = a.out;
        let h = mlp_input(tape, x, &layer)?;
        if config.is_moe_layer(l) {
            let probs = router_probs(tape, h, &layer)?;
            let decision = match fixed.as_mut() {
                Some(it) => it.next().cloned().ok_or_else(|| {
                    CoreError::Decision(format!("no fixed decision for layer {l}"))
                })?,
                None => {
                    let p = tape.value(probs)?;
                    match config.router_kind {
                        RouterKind::TokensChoose => {
                            route_tokens_choose(p, config.tokens_choose_capacity)?
                        }
                        _ => route_expert_choice(p, config.capacity_factor)?,
                    }
                }
            };
            decision.check_balance(l)?;
            x = moe_ffn(tape, x, h, &layer, &decision, Some(probs))?;
            decisions.push(LayerDecision { layer: l, decision });
        } else {
            let y = layer.experts[0].apply(tape, h)?;
            let flat_x = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
            let sum = tape.add(flat_x, y)?;
            x = tape.reshape(sum, &shape)?;
        }
    }
    let final_norm = NormVars::bind(tape, params, &format!("{prefix}.final_norm"))?;
    let hidden = final_norm.apply(tape, x, 2)?;
    Ok(EncoderOutput {
        hidden,
        decisions,
        attention: attn,
    })
}
