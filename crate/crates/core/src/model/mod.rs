//! The STAR network.
//!
//! A trainable context encoder produces token representations `H`. Every
//! slot vector from the [`SlotValueBank`] queries `H` (slot-token
//! attention), the resulting `J x d` matrix passes through `L` slot
//! self-attention layers and a projection, and each slot's output is matched
//! against its candidate value vectors by L2 distance.
//!
//! The bank is built once by a frozen snapshot of the encoder and never
//! receives gradients.

mod params;

pub use params::{Bound, Group, Param, ParamStore};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{tokenize, ContextError, TokenSequence, Vocabulary};
use crate::corpus::{DialogueState, Ontology};
use crate::nn::{
    embed, feed_forward, layer_norm, multi_head_attention, Dropout, EmbeddingTables,
    FeedForwardParams, LayerNormParams, MultiHeadParams,
};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("ontology error: {0}")]
    Ontology(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    Capacity { len: usize, max_len: usize },
    #[error("incompatible parameters: {0}")]
    Compatibility(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    /// Heads `N` in slot-token and slot self-attention.
    pub heads: usize,
    /// Slot self-attention layers `L`.
    pub layers: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Inner width of the encoder feed-forward blocks.
    pub encoder_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Std of the token embedding table.
    pub embedding_std: f64,
    /// Std of the position and segment tables. Kept well below
    /// `embedding_std` so content dominates the frozen phrase vectors.
    pub position_std: f64,
    /// Multiplier on the initial encoder query and key weights. Sharper
    /// attention at init spreads the frozen phrase vectors further apart.
    pub encoder_qk_gain: f64,
    /// Multiplier on the initial output weights of each slot self-attention
    /// branch (attention `W_O` and the second feed-forward layer). Small
    /// values start every layer close to the identity on slot vectors.
    pub self_attn_branch_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers: 6,
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_ffn: 128,
            vocab_size: 0,
            max_len: 128,
            dropout: 0.1,
            ln_eps: 1e-12,
            embedding_std: 0.02,
            position_std: 0.002,
            encoder_qk_gain: 3.0,
            self_attn_branch_gain: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.hidden < 2 {
            return bad(format!("hidden size {} must be at least 2", self.hidden));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide hidden {}", self.heads, self.hidden));
        }
        if self.encoder_heads == 0 || !self.hidden.is_multiple_of(self.encoder_heads) {
            return bad(format!(
                "encoder heads {} must divide hidden {}",
                self.encoder_heads, self.hidden
            ));
        }
        if self.encoder_ffn == 0 {
            return bad("encoder_ffn must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab size {} leaves no room for specials", self.vocab_size));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} is below 3", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(positive(self.ln_eps) && positive(self.embedding_std) && positive(self.position_std)) {
            return bad("ln_eps, embedding_std and position_std must be positive".into());
        }
        if !positive(self.encoder_qk_gain) {
            return bad(format!("encoder_qk_gain {} must be positive", self.encoder_qk_gain));
        }
        if !positive(self.self_attn_branch_gain) {
            return bad(format!(
                "self_attn_branch_gain {} must be positive",
                self.self_attn_branch_gain
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    /// Normal with variance `gain² / fan_in`.
    Weight { fan_in: usize, gain: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    group: Group,
    kind: InitKind,
}

fn push_weight(out: &mut Vec<Spec>, group: Group, name: String, rows: usize, cols: usize) {
    out.push(Spec {
        name,
        shape: vec![rows, cols],
        group,
        kind: InitKind::Weight { fan_in: cols, gain: 1.0 },
    });
}

fn push_vec(out: &mut Vec<Spec>, group: Group, name: String, n: usize, kind: InitKind) {
    out.push(Spec {
        name,
        shape: vec![n],
        group,
        kind,
    });
}

fn push_ln(out: &mut Vec<Spec>, group: Group, p: &str, d: usize) {
    push_vec(out, group, format!("{p}.gain"), d, InitKind::Ones);
    push_vec(out, group, format!("{p}.bias"), d, InitKind::Zeros);
}

fn push_mha(out: &mut Vec<Spec>, group: Group, p: &str, d: usize) {
    for w in ["wq", "wk", "wz", "wo"] {
        push_weight(out, group, format!("{p}.{w}"), d, d);
    }
}

fn push_ffn(out: &mut Vec<Spec>, group: Group, p: &str, d_in: usize, d_hidden: usize, d_out: usize) {
    push_weight(out, group, format!("{p}.w1"), d_hidden, d_in);
    push_vec(out, group, format!("{p}.b1"), d_hidden, InitKind::Zeros);
    push_weight(out, group, format!("{p}.w2"), d_out, d_hidden);
    push_vec(out, group, format!("{p}.b2"), d_out, InitKind::Zeros);
}

/// Names, shapes and groups of every trainable tensor, in store order.
fn layout(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.hidden;
    let mut s = Vec::new();
    let e = Group::Encoder;
    for (name, rows, std) in [
        ("encoder.tok", cfg.vocab_size, cfg.embedding_std),
        ("encoder.pos", cfg.max_len, cfg.position_std),
        ("encoder.seg", 2, cfg.position_std),
    ] {
        s.push(Spec {
            name: name.into(),
            shape: vec![rows, d],
            group: e,
            kind: InitKind::Normal { std },
        });
    }
    push_ln(&mut s, e, "encoder.emb_ln", d);
    for i in 0..cfg.encoder_layers {
        push_mha(&mut s, e, &format!("encoder.{i}.attn"), d);
        for spec in s.iter_mut().rev().take(4) {
            if spec.name.ends_with(".wq") || spec.name.ends_with(".wk") {
                spec.kind = InitKind::Weight {
                    fan_in: d,
                    gain: cfg.encoder_qk_gain,
                };
            }
        }
        push_ln(&mut s, e, &format!("encoder.{i}.ln1"), d);
        push_ffn(&mut s, e, &format!("encoder.{i}.ffn"), d, cfg.encoder_ffn, d);
        push_ln(&mut s, e, &format!("encoder.{i}.ln2"), d);
    }
    let dec = Group::Decoder;
    push_mha(&mut s, dec, "slot_attn", d);
    push_ffn(&mut s, dec, "slot_ffn", 2 * d, d, d);
    for l in 0..cfg.layers {
        push_ln(&mut s, dec, &format!("self.{l}.ln_a"), d);
        push_mha(&mut s, dec, &format!("self.{l}.attn"), d);
        push_ln(&mut s, dec, &format!("self.{l}.ln_b"), d);
        push_ffn(&mut s, dec, &format!("self.{l}.ffn"), d, d, d);
        let branch_out = [format!("self.{l}.attn.wo"), format!("self.{l}.ffn.w2")];
        for spec in s.iter_mut().filter(|sp| branch_out.contains(&sp.name)) {
            spec.kind = InitKind::Weight {
                fan_in: d,
                gain: cfg.self_attn_branch_gain,
            };
        }
    }
    push_weight(&mut s, dec, "proj.w".into(), d, d);
    push_vec(&mut s, dec, "proj.b".into(), d, InitKind::Zeros);
    push_ln(&mut s, dec, "proj_ln", d);
    s
}

fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = params::Init { rng: &mut rng };
    let mut store = ParamStore::new();
    for spec in layout(cfg) {
        let (value, decay) = match spec.kind {
            InitKind::Weight { fan_in, gain } => {
                (init.normal(&spec.shape, gain / (fan_in as f64).sqrt()), true)
            }
            InitKind::Normal { std } => (init.normal(&spec.shape, std), true),
            InitKind::Zeros => (Tensor::zeros(&spec.shape), false),
            InitKind::Ones => {
                let n = spec.shape[0];
                (Tensor::vector(vec![T::one(); n]), false)
            }
        };
        store.insert(spec.name, value, spec.group, decay);
    }
    store
}

/// Checks that `store` has exactly the tensors `cfg` requires, restricted to
/// names starting with `prefix`.
fn check_layout<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>, prefix: &str) -> Result<()> {
    let specs: Vec<Spec> = layout(cfg)
        .into_iter()
        .filter(|s| s.name.starts_with(prefix))
        .collect();
    if specs.len() != store.len() {
        return Err(ModelError::Compatibility(format!(
            "expected {} tensors under {prefix:?}, found {}",
            specs.len(),
            store.len()
        )));
    }
    for (spec, (name, p)) in specs.iter().zip(store.iter()) {
        if spec.name != name {
            return Err(ModelError::Compatibility(format!(
                "expected tensor {}, found {name}",
                spec.name
            )));
        }
        if spec.shape != p.value.shape() {
            return Err(ModelError::Compatibility(format!(
                "tensor {name} has shape {:?}, config requires {:?}",
                p.value.shape(),
                spec.shape
            )));
        }
        if !p.value.is_finite() {
            return Err(ModelError::Compatibility(format!("tensor {name} is not finite")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub attn: MultiHeadParams,
    pub ln1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embeddings: EmbeddingTables,
    pub emb_ln: LayerNormParams,
    pub layers: Vec<EncoderLayerVars>,
}

/// Slot-token attention: multi-head attention plus the `d x 2d` FFN.
#[derive(Debug, Clone, Copy)]
pub struct SlotTokenParams {
    pub attn: MultiHeadParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionLayer {
    pub ln_a: LayerNormParams,
    pub attn: MultiHeadParams,
    pub ln_b: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionParams {
    pub w: Var,
    pub b: Var,
    pub ln: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub slot_token: SlotTokenParams,
    pub layers: Vec<SelfAttentionLayer>,
    pub projection: ProjectionParams,
}

struct Lookup<'a, T> {
    store: &'a ParamStore<T>,
    bound: &'a Bound,
}

impl<T: Scalar> Lookup<'_, T> {
    fn v(&self, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from validated store"));
        self.bound.vars[i]
    }

    fn ln(&self, p: &str) -> LayerNormParams {
        LayerNormParams {
            gain: self.v(&format!("{p}.gain")),
            bias: self.v(&format!("{p}.bias")),
        }
    }

    fn mha(&self, p: &str, heads: usize) -> MultiHeadParams {
        MultiHeadParams {
            w_q: self.v(&format!("{p}.wq")),
            w_k: self.v(&format!("{p}.wk")),
            w_z: self.v(&format!("{p}.wz")),
            w_o: self.v(&format!("{p}.wo")),
            heads,
        }
    }

    fn ffn(&self, p: &str) -> FeedForwardParams {
        FeedForwardParams {
            w1: self.v(&format!("{p}.w1")),
            b1: self.v(&format!("{p}.b1")),
            w2: self.v(&format!("{p}.w2")),
            b2: self.v(&format!("{p}.b2")),
        }
    }

    fn encoder(&self, cfg: &ModelConfig) -> EncoderVars {
        EncoderVars {
            embeddings: EmbeddingTables {
                token: self.v("encoder.tok"),
                position: self.v("encoder.pos"),
                segment: self.v("encoder.seg"),
            },
            emb_ln: self.ln("encoder.emb_ln"),
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayerVars {
                    attn: self.mha(&format!("encoder.{i}.attn"), cfg.encoder_heads),
                    ln1: self.ln(&format!("encoder.{i}.ln1")),
                    ffn: self.ffn(&format!("encoder.{i}.ffn")),
                    ln2: self.ln(&format!("encoder.{i}.ln2")),
                })
                .collect(),
        }
    }

    fn decoder(&self, cfg: &ModelConfig) -> DecoderVars {
        DecoderVars {
            slot_token: SlotTokenParams {
                attn: self.mha("slot_attn", cfg.heads),
                ffn: self.ffn("slot_ffn"),
            },
            layers: (0..cfg.layers)
                .map(|l| SelfAttentionLayer {
                    ln_a: self.ln(&format!("self.{l}.ln_a")),
                    attn: self.mha(&format!("self.{l}.attn"), cfg.heads),
                    ln_b: self.ln(&format!("self.{l}.ln_b")),
                    ffn: self.ffn(&format!("self.{l}.ffn")),
                })
                .collect(),
            projection: ProjectionParams {
                w: self.v("proj.w"),
                b: self.v("proj.b"),
                ln: self.ln("proj_ln"),
            },
        }
    }
}

/// Post-norm transformer encoder over one sequence. Returns `|X| x d`.
#[allow(clippy::too_many_arguments)]
pub fn encode_context<T: Scalar>(
    g: &mut Graph<T>,
    enc: &EncoderVars,
    ids: &[usize],
    positions: &[usize],
    segments: &[usize],
    mask: &[bool],
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let key_mask = mask.iter().any(|&m| !m).then_some(mask);
    let x = embed(g, &enc.embeddings, ids, positions, segments)?;
    let mut x = layer_norm(g, x, &enc.emb_ln, eps)?;
    for layer in &enc.layers {
        let a = multi_head_attention(g, x, x, x, &layer.attn, key_mask, dropout)?;
        let h = g.add(x, a)?;
        let h = layer_norm(g, h, &layer.ln1, eps)?;
        let f = feed_forward(g, h, &layer.ffn)?;
        let f = dropout.apply(g, f)?;
        let s = g.add(h, f)?;
        x = layer_norm(g, s, &layer.ln2, eps)?;
    }
    Ok(x)
}

/// `r = MultiHead(h_S, H, H)`, `c = W₂ʳ ReLU(W₁ʳ [h_S ; r] + b₁ʳ) + b₂ʳ`, for all
/// slot rows of `slots` at once. Returns `J x d`.
pub fn slot_token_attention<T: Scalar>(
    g: &mut Graph<T>,
    slots: Var,
    h: Var,
    p: &SlotTokenParams,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let r = multi_head_attention(g, slots, h, h, &p.attn, key_mask, dropout)?;
    let cat = g.concat_cols(&[slots, r])?;
    let c = feed_forward(g, cat, &p.ffn)?;
    Ok(dropout.apply(g, c)?)
}

/// `L` layers of `F̃ = LN(F)`, `G = MHA(F̃,F̃,F̃) + F̃`, `G̃ = LN(G)`,
/// `F' = FFN(G̃) + G̃`. With no layers the input is returned unchanged.
pub fn slot_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    c: Var,
    layers: &[SelfAttentionLayer],
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let mut f = c;
    for layer in layers {
        let ft = layer_norm(g, f, &layer.ln_a, eps)?;
        let a = multi_head_attention(g, ft, ft, ft, &layer.attn, None, dropout)?;
        let gg = g.add(a, ft)?;
        let gt = layer_norm(g, gg, &layer.ln_b, eps)?;
        let o = feed_forward(g, gt, &layer.ffn)?;
        let o = dropout.apply(g, o)?;
        f = g.add(o, gt)?;
    }
    Ok(f)
}

/// `γ = LayerNorm(Linear(f))`, row-wise.
pub fn project<T: Scalar>(g: &mut Graph<T>, f: Var, p: &ProjectionParams, eps: f64) -> Result<Var> {
    let y = g.linear(f, p.w, Some(p.b))?;
    Ok(layer_norm(g, y, &p.ln, eps)?)
}

/// Log-probabilities `log softmax(-‖γ - h_V‖₂)` over the rows of
/// `candidates`, for a single-row `gamma`.
pub fn value_log_probs<T: Scalar>(g: &mut Graph<T>, gamma: Var, candidates: Var) -> Result<Var> {
    let dist = g.l2_distances(gamma, candidates)?;
    let neg = g.scale(dist, -T::one());
    Ok(g.log_softmax_rows(neg))
}

/// `p(V) ∝ exp(-‖γ - h_V‖₂)` over the rows of `candidates`.
pub fn value_distribution<T: Scalar>(gamma: &[T], candidates: &Tensor<T>) -> Result<Vec<T>> {
    if candidates.cols() != gamma.len() {
        return Err(TensorError::Shape {
            op: "value_distribution",
            lhs: vec![gamma.len()],
            rhs: candidates.shape().to_vec(),
        }
        .into());
    }
    let neg: Vec<T> = (0..candidates.rows())
        .map(|k| {
            let sq: T = gamma
                .iter()
                .zip(candidates.row(k))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            -sq.sqrt()
        })
        .collect();
    let max = neg.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = neg.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax_first<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `Σⱼ -log pⱼ` for the per-slot probabilities of the gold values.
pub fn nll_loss<T: Scalar>(gold_probs: &[T]) -> T {
    gold_probs.iter().map(|&p| -p.ln()).sum()
}

/// Slot and value vectors computed once by the frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotValueBank<T> {
    /// `J x d`, row `j` encodes the qualified name of slot `j`.
    pub slots: Tensor<T>,
    /// Per slot, `|V_j| x d` in ontology value order.
    pub values: Vec<Tensor<T>>,
}

impl<T: Scalar> SlotValueBank<T> {
    pub fn num_slots(&self) -> usize {
        self.values.len()
    }

    /// `J + Σⱼ |V_j|`.
    pub fn num_vectors(&self) -> usize {
        self.slots.rows() + self.values.iter().map(|v| v.rows()).sum::<usize>()
    }

    pub fn covers(&self, ontology: &Ontology) -> bool {
        self.values.len() == ontology.num_slots()
            && self
                .values
                .iter()
                .enumerate()
                .all(|(j, v)| v.rows() == ontology.values(j).len())
    }
}

/// Runs the frozen encoder on `[CLS] text [SEP]` and returns the `[CLS]`
/// output.
pub fn encode_phrase<T: Scalar>(
    frozen: &ParamStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Vec<T>> {
    let mut ids = vec![vocab.cls_id()];
    ids.extend(tokenize(text).iter().map(|t| vocab.id(t)));
    ids.push(vocab.sep_id());
    if ids.len() > cfg.max_len {
        return Err(ModelError::Capacity {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    let n = ids.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut g = Graph::new();
    let bound = frozen.bind(&mut g, false);
    let enc = Lookup {
        store: frozen,
        bound: &bound,
    }
    .encoder(cfg);
    let h = encode_context(
        &mut g,
        &enc,
        &ids,
        &positions,
        &vec![0; n],
        &vec![true; n],
        cfg.ln_eps,
        &mut Dropout::off(),
    )?;
    Ok(g.value(h).row(0).to_vec())
}

pub fn build_bank<T: Scalar>(
    frozen: &ParamStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    ontology: &Ontology,
) -> Result<SlotValueBank<T>> {
    let d = cfg.hidden;
    let mut cache: HashMap<String, Vec<T>> = HashMap::new();
    let mut encode = |text: &str| -> Result<Vec<T>> {
        if let Some(v) = cache.get(text) {
            return Ok(v.clone());
        }
        let v = encode_phrase(frozen, cfg, vocab, text)?;
        cache.insert(text.to_string(), v.clone());
        Ok(v)
    };
    let mut slot_rows = Vec::with_capacity(ontology.num_slots() * d);
    let mut values = Vec::with_capacity(ontology.num_slots());
    for space in ontology.spaces() {
        slot_rows.extend(encode(&space.qualified)?);
        let mut rows = Vec::with_capacity(space.values.len() * d);
        for v in &space.values {
            rows.extend(encode(v)?);
        }
        values.push(Tensor::new(vec![space.values.len(), d], rows)?);
    }
    Ok(SlotValueBank {
        slots: Tensor::new(vec![ontology.num_slots(), d], slot_rows)?,
        values,
    })
}

/// Ontology value index of every slot in `state`.
pub fn gold_indices(ontology: &Ontology, state: &DialogueState) -> Result<Vec<usize>> {
    ontology
        .spaces()
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let v = state.get(&s.qualified);
            ontology.value_index(j, v).ok_or_else(|| {
                ModelError::Ontology(format!("value {v:?} not in the space of {}", s.qualified))
            })
        })
        .collect()
}

/// Graph handles for one turn.
#[derive(Debug, Clone)]
pub struct TurnGraph {
    /// Per-slot `1 x |V_j|` log-probabilities.
    pub log_probs: Vec<Var>,
    /// `Σⱼ -log p(gold_j)` when gold indices were supplied.
    pub loss: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnPrediction<T> {
    pub distributions: Vec<Vec<T>>,
    /// Predicted value index per slot.
    pub values: Vec<usize>,
}

impl<T: Scalar> TurnPrediction<T> {
    pub fn state(&self, ontology: &Ontology) -> DialogueState {
        let mut s = DialogueState::new();
        for (j, &v) in self.values.iter().enumerate() {
            s.set(&ontology.spaces()[j].qualified, &ontology.values(j)[v]);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    frozen: ParamStore<T>,
    bank: SlotValueBank<T>,
}

impl<T: Scalar> StarModel<T> {
    /// Fresh model whose frozen encoder is a copy of the initial encoder.
    pub fn new(
        config: ModelConfig,
        vocab: &Vocabulary,
        ontology: &Ontology,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Config(format!(
                "vocab has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let params = init_params(&config, seed);
        let frozen = params.filter_prefix("encoder.");
        let bank = build_bank(&frozen, &config, vocab, ontology)?;
        Ok(Self {
            config,
            params,
            frozen,
            bank,
        })
    }

    /// Reassembles a model from stored tensors; the bank is recomputed.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<T>,
        frozen: ParamStore<T>,
        vocab: &Vocabulary,
        ontology: &Ontology,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Compatibility(format!(
                "vocab has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        check_layout(&config, &params, "")?;
        check_layout(&config, &frozen, "encoder.")?;
        let bank = build_bank(&frozen, &config, vocab, ontology)?;
        Ok(Self {
            config,
            params,
            frozen,
            bank,
        })
    }

    /// Copies the current encoder into the frozen snapshot and rebuilds the
    /// bank.
    pub fn refreeze(&mut self, vocab: &Vocabulary, ontology: &Ontology) -> Result<()> {
        self.frozen = self.params.filter_prefix("encoder.");
        self.bank = build_bank(&self.frozen, &self.config, vocab, ontology)?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn frozen(&self) -> &ParamStore<T> {
        &self.frozen
    }

    pub fn bank(&self) -> &SlotValueBank<T> {
        &self.bank
    }

    pub fn encoder_vars(&self, bound: &Bound) -> EncoderVars {
        Lookup {
            store: &self.params,
            bound,
        }
        .encoder(&self.config)
    }

    pub fn decoder_vars(&self, bound: &Bound) -> DecoderVars {
        Lookup {
            store: &self.params,
            bound,
        }
        .decoder(&self.config)
    }

    /// Records the full forward pass for one turn on `g`.
    pub fn build_turn(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        seq: &TokenSequence,
        gold: Option<&[usize]>,
        dropout: &mut Dropout<'_>,
    ) -> Result<TurnGraph> {
        let cfg = &self.config;
        if seq.len() > cfg.max_len {
            return Err(ModelError::Capacity {
                len: seq.len(),
                max_len: cfg.max_len,
            });
        }
        let j = self.bank.num_slots();
        if let Some(gold) = gold {
            if gold.len() != j {
                return Err(ModelError::Ontology(format!(
                    "{} gold values for {j} slots",
                    gold.len()
                )));
            }
        }
        let enc = self.encoder_vars(bound);
        let dec = self.decoder_vars(bound);
        let h = encode_context(
            g,
            &enc,
            &seq.ids,
            &seq.positions,
            &seq.segments,
            &seq.mask,
            cfg.ln_eps,
            dropout,
        )?;
        let key_mask = seq.mask.iter().any(|&m| !m).then_some(seq.mask.as_slice());
        let slots = g.constant(self.bank.slots.clone());
        let c = slot_token_attention(g, slots, h, &dec.slot_token, key_mask, dropout)?;
        let f = slot_self_attention(g, c, &dec.layers, cfg.ln_eps, dropout)?;
        let gamma = project(g, f, &dec.projection, cfg.ln_eps)?;
        let mut log_probs = Vec::with_capacity(j);
        let mut picks = Vec::with_capacity(j);
        for (s, cands) in self.bank.values.iter().enumerate() {
            let row = g.slice_rows(gamma, s, 1)?;
            let cv = g.constant(cands.clone());
            let lp = value_log_probs(g, row, cv)?;
            if let Some(gold) = gold {
                if gold[s] >= cands.rows() {
                    return Err(ModelError::Ontology(format!(
                        "gold index {} out of range for slot {s}",
                        gold[s]
                    )));
                }
                picks.push(g.pick(lp, &[gold[s]])?);
            }
            log_probs.push(lp);
        }
        let loss = if picks.is_empty() {
            None
        } else {
            let all = g.concat_cols(&picks)?;
            let total = g.sum(all);
            Some(g.scale(total, -T::one()))
        };
        Ok(TurnGraph { log_probs, loss })
    }

    /// Inference: per-slot distributions and predicted value indices.
    pub fn forward_turn(&self, seq: &TokenSequence) -> Result<TurnPrediction<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let tg = self.build_turn(&mut g, &bound, seq, None, &mut Dropout::off())?;
        let mut distributions = Vec::with_capacity(tg.log_probs.len());
        let mut values = Vec::with_capacity(tg.log_probs.len());
        for lp in tg.log_probs {
            let lpv = g.value(lp).data();
            values.push(argmax_first(lpv));
            distributions.push(lpv.iter().map(|v| v.exp()).collect());
        }
        Ok(TurnPrediction {
            distributions,
            values,
        })
    }

    /// Loss and per-parameter gradients (store order) for one turn.
    pub fn loss_and_grads(
        &self,
        seq: &TokenSequence,
        gold: &[usize],
        dropout: &mut Dropout<'_>,
    ) -> Result<(T, Vec<Option<Vec<T>>>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let tg = self.build_turn(&mut g, &bound, seq, Some(gold), dropout)?;
        let loss = tg.loss.expect("gold supplied");
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let grads = bound
            .vars
            .iter()
            .map(|&v| g.grad(v).map(<[T]>::to_vec))
            .collect();
        Ok((value, grads))
    }
}
