//! A compact BERT-style text encoder with exact forward and backward passes.
//!
//! The stack is deliberately small and fully deterministic: a whitespace
//! tokenizer over a fixed vocabulary, learned token and position embeddings,
//! post-layer-norm residual blocks (multi-head self-attention followed by a
//! GELU feed-forward), a two-layer contrastive projection head, and a
//! masked-token output head whose weights are tied to the token embedding
//! matrix. All arithmetic runs in `f64` with fixed reduction orders, so the
//! forward pass is bit-deterministic and invariant to how much padding a
//! batch carries. Gradients come from hand-written backpropagation and are
//! verified against central finite differences in the tests.

pub mod io;

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Padding token id.
pub const PAD_ID: u32 = 0;
/// Out-of-vocabulary token id.
pub const UNK_ID: u32 = 1;
/// Sequence-start token id; its final hidden state is the sequence embedding.
pub const CLS_ID: u32 = 2;
/// Sequence-end token id.
pub const SEP_ID: u32 = 3;
/// Mask token id used by masked-language-model training.
pub const MASK_ID: u32 = 4;

/// Literal spellings of the reserved tokens, in id order.
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Standard deviation of the Gaussian used to initialize weights.
const INIT_STD: f64 = 0.02;
/// Layer-norm variance floor.
const LN_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Whitespace tokenizer over a fixed vocabulary.
///
/// Ids are contiguous from 0; the five reserved tokens always occupy ids
/// 0 through 4 and ordinary words follow.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    max_len: usize,
}

impl Tokenizer {
    /// Builds a tokenizer from ordinary word tokens (reserved tokens are
    /// prepended automatically). `max_len` bounds the full sequence length
    /// including `[CLS]` and `[SEP]`.
    pub fn new<S: AsRef<str>>(words: &[S], max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::InvalidInput(format!(
                "max sequence length {max_len} cannot fit [CLS] and [SEP]"
            )));
        }
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary token {w:?} is empty or contains whitespace"
                )));
            }
            id_to_token.push(w.to_string());
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
        }
        Ok(Tokenizer {
            token_to_id,
            id_to_token,
            max_len,
        })
    }

    /// Builds a vocabulary from raw texts: lowercase whitespace tokens ranked
    /// by frequency (ties broken alphabetically), capped so the total
    /// vocabulary including reserved tokens does not exceed `vocab_cap`.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S], vocab_cap: usize, max_len: usize) -> Result<Self> {
        if vocab_cap <= RESERVED_TOKENS.len() {
            return Err(Error::InvalidInput(format!(
                "vocabulary cap {vocab_cap} leaves no room for ordinary words"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in text.as_ref().to_lowercase().split_whitespace() {
                *counts.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(vocab_cap - RESERVED_TOKENS.len());
        let words: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
        Tokenizer::new(&words, max_len)
    }

    /// Total number of ids, reserved tokens included.
    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Maximum sequence length including `[CLS]` and `[SEP]`.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Id of a token string, if present.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Token string for an id, if in range.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Lowercases, splits on whitespace, maps unknown words to `[UNK]`,
    /// truncates to `max_len - 2` words, and wraps with `[CLS]` / `[SEP]`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = vec![CLS_ID];
        for word in text.to_lowercase().split_whitespace().take(self.max_len - 2) {
            ids.push(self.token_to_id.get(word).copied().unwrap_or(UNK_ID));
        }
        ids.push(SEP_ID);
        let n = ids.len();
        let special = (0..n).map(|i| i == 0 || i == n - 1).collect();
        TokenSequence {
            ids,
            mask: vec![true; n],
            special,
        }
    }
}

/// One encoded sequence: `[CLS]` first, `[SEP]` last, no padding.
///
/// `mask` marks positions that attention may look at (all `true` for freshly
/// tokenized text; padding introduced at batch time is `false`). `special`
/// marks `[CLS]` / `[SEP]` positions, which pooling and token masking skip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub special: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if self.ids.len() != self.mask.len() || self.ids.len() != self.special.len() {
            return Err(Error::InvalidInput(format!(
                "sequence fields disagree on length: {} ids, {} mask, {} special",
                self.ids.len(),
                self.mask.len(),
                self.special.len()
            )));
        }
        if self.ids.len() > cfg.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds max positions {}",
                self.ids.len(),
                cfg.max_positions
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput(
                "sequence has no attendable positions".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration and parameter storage
// ---------------------------------------------------------------------------

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Widths of the two projection-head layers; input width is `d_model`.
    pub projection: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab_size: 512,
            max_positions: 32,
            projection: [64, 64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("projection[0]", self.projection[0]),
            ("projection[1]", self.projection[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name}"), "must be at least 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "encoder.heads",
                format!("d_model {} not divisible by heads {}", self.d_model, self.heads),
            ));
        }
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("must exceed the {} reserved tokens", RESERVED_TOKENS.len()),
            ));
        }
        if self.max_positions < 2 {
            return Err(Error::config(
                "encoder.max_positions",
                "must fit at least [CLS] and [SEP]",
            ));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Name, shape, and flat offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn build_layout(cfg: &EncoderConfig) -> Vec<TensorSpec> {
    let d = cfg.d_model;
    let (p0, p1) = (cfg.projection[0], cfg.projection[1]);
    let mut layout = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, layout: &mut Vec<TensorSpec>| {
        let len: usize = shape.iter().product();
        layout.push(TensorSpec { name, shape, offset });
        offset += len;
    };
    push("tok_emb".into(), vec![cfg.vocab_size, d], &mut layout);
    push("pos_emb".into(), vec![cfg.max_positions, d], &mut layout);
    push("emb_ln_gamma".into(), vec![d], &mut layout);
    push("emb_ln_beta".into(), vec![d], &mut layout);
    for l in 0..cfg.layers {
        for (suffix, shape) in [
            ("wq", vec![d, d]),
            ("bq", vec![d]),
            ("wk", vec![d, d]),
            ("bk", vec![d]),
            ("wv", vec![d, d]),
            ("bv", vec![d]),
            ("wo", vec![d, d]),
            ("bo", vec![d]),
            ("ln1_gamma", vec![d]),
            ("ln1_beta", vec![d]),
            ("w1", vec![d, cfg.d_ff]),
            ("b1", vec![cfg.d_ff]),
            ("w2", vec![cfg.d_ff, d]),
            ("b2", vec![d]),
            ("ln2_gamma", vec![d]),
            ("ln2_beta", vec![d]),
        ] {
            push(format!("layer{l}.{suffix}"), shape, &mut layout);
        }
    }
    push("mlm_bias".into(), vec![cfg.vocab_size], &mut layout);
    push("proj_w1".into(), vec![d, p0], &mut layout);
    push("proj_b1".into(), vec![p0], &mut layout);
    push("proj_w2".into(), vec![p0, p1], &mut layout);
    push("proj_b2".into(), vec![p1], &mut layout);
    layout
}

/// Indices into the layout, in push order (see `build_layout`).
const L_TOK: usize = 0;
const L_POS: usize = 1;
const L_EMB_G: usize = 2;
const L_EMB_B: usize = 3;
const L_PER_LAYER: usize = 16;
const L_WQ: usize = 0;
const L_BQ: usize = 1;
const L_WK: usize = 2;
const L_BK: usize = 3;
const L_WV: usize = 4;
const L_BV: usize = 5;
const L_WO: usize = 6;
const L_BO: usize = 7;
const L_LN1G: usize = 8;
const L_LN1B: usize = 9;
const L_W1: usize = 10;
const L_B1: usize = 11;
const L_W2: usize = 12;
const L_B2: usize = 13;
const L_LN2G: usize = 14;
const L_LN2B: usize = 15;

/// All model parameters in one flat `f64` buffer with a named layout.
///
/// A single buffer keeps the optimizer, checkpointing, and the
/// finite-difference tests trivial: every parameter is addressable by a flat
/// index, and gradients share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    layout: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl EncoderParams {
    /// All-zero parameters (layer-norm gains included; use `init` for training).
    pub fn zeros(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = build_layout(cfg);
        let total = layout.iter().map(TensorSpec::len).sum();
        Ok(EncoderParams {
            cfg: cfg.clone(),
            layout,
            data: vec![0.0; total],
        })
    }

    /// Gaussian-initialized weights and embeddings (std 0.02), unit layer-norm
    /// gains, zero biases. Deterministic in `seed`.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for i in 0..params.layout.len() {
            let spec = params.layout[i].clone();
            let slice = &mut params.data[spec.offset..spec.offset + spec.len()];
            let leaf = spec.name.rsplit('.').next().unwrap_or(&spec.name);
            if matches!(
                leaf,
                "tok_emb" | "pos_emb" | "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "proj_w1"
                    | "proj_w2"
            ) {
                for v in slice {
                    *v = normal.sample(&mut r);
                }
            } else if leaf.ends_with("gamma") {
                slice.fill(1.0);
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Named view into the parameter buffer.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.slice_of(&self.data, name)
    }

    /// Named view into any buffer that shares this layout (e.g. gradients).
    pub fn slice_of<'a>(&self, buffer: &'a [f64], name: &str) -> Option<&'a [f64]> {
        let spec = self.layout.iter().find(|s| s.name == name)?;
        buffer.get(spec.offset..spec.offset + spec.len())
    }

    pub fn validate_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            let spec = self
                .layout
                .iter()
                .rfind(|s| s.offset <= i)
                .expect("offset covered by layout");
            return Err(Error::NonFinite(format!("encoder parameter {}", spec.name)));
        }
        Ok(())
    }

    fn spec(&self, idx: usize) -> &TensorSpec {
        &self.layout[idx]
    }

    fn t(&self, idx: usize) -> &[f64] {
        let s = &self.layout[idx];
        &self.data[s.offset..s.offset + s.len()]
    }

    fn layer_idx(&self, layer: usize, which: usize) -> usize {
        4 + layer * L_PER_LAYER + which
    }

    fn after_layers(&self, extra: usize) -> usize {
        4 + self.cfg.layers * L_PER_LAYER + extra
    }
}

/// Gradient buffer sharing `EncoderParams`'s flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(params: &EncoderParams) -> Self {
        Gradients {
            data: vec![0.0; params.n_params()],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Named view, resolved through the owning parameters' layout.
    pub fn tensor<'a>(&'a self, params: &EncoderParams, name: &str) -> Option<&'a [f64]> {
        params.slice_of(&self.data, name)
    }

    /// Elementwise accumulation of another gradient buffer (same layout).
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.data.len(), other.data.len(), "gradient layout mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn range(&mut self, params: &EncoderParams, idx: usize) -> &mut [f64] {
        let s = params.spec(idx);
        &mut self.data[s.offset..s.offset + s.len()]
    }
}

// ---------------------------------------------------------------------------
// Dense math helpers (fixed, sequential reduction order)
// ---------------------------------------------------------------------------

/// `out[m×n] += a[m×k] · b[k×n]`.
fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` where `a` is `m×k` and `c` is `m×n`.
fn matmul_at_acc(a: &[f64], m: usize, k: usize, c: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

/// `out[m×k] += c · bᵀ` where `c` is `m×n` and `b` is `k×n`.
fn matmul_bt_acc(c: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&cv, &bv) in crow.iter().zip(brow) {
                s += cv * bv;
            }
            *o += s;
        }
    }
}

fn add_bias(out: &mut [f64], rows: usize, n: usize, bias: &[f64]) {
    debug_assert_eq!(bias.len(), n);
    for i in 0..rows {
        for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn add_col_sums(x: &[f64], rows: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n);
    for i in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[i * n..(i + 1) * n]) {
            *o += v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smooth GELU (tanh form).
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Normalizes one row in place-free style: writes `y` and `xhat`, returns the
/// reciprocal standard deviation.
fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = gamma[i] * xhat[i] + beta[i];
    }
    rstd
}

/// Backward of `layer_norm_row`: accumulates `dgamma`/`dbeta`, writes `dx`.
fn layer_norm_row_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
        let dxhat = dy[i] * gamma[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat[i];
    }
    let m1 = sum_dxhat / n;
    let m2 = sum_dxhat_xhat / n;
    for i in 0..dy.len() {
        let dxhat = dy[i] * gamma[i];
        dx[i] = rstd * (dxhat - m1 - xhat[i] * m2);
    }
}

/// In-place softmax over one score row; `-inf` entries become exactly 0.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct LayerCache {
    x_in: Vec<f64>,   // [B*T*d] block input
    q: Vec<f64>,      // [B*T*d]
    k: Vec<f64>,      // [B*T*d]
    v: Vec<f64>,      // [B*T*d]
    probs: Vec<f64>,  // [B*H*T*T] attention weights
    context: Vec<f64>, // [B*T*d] heads concatenated, before W_O
    xhat1: Vec<f64>,  // [B*T*d]
    rstd1: Vec<f64>,  // [B*T]
    h1: Vec<f64>,     // [B*T*d] after first layer norm
    u: Vec<f64>,      // [B*T*d_ff] feed-forward pre-activation
    g: Vec<f64>,      // [B*T*d_ff] after GELU
    xhat2: Vec<f64>,  // [B*T*d]
    rstd2: Vec<f64>,  // [B*T]
}

struct Cache {
    xhat0: Vec<f64>, // [B*T*d] embedding layer-norm internals
    rstd0: Vec<f64>, // [B*T]
    layers: Vec<LayerCache>,
}

/// Output of `encoder_forward`: padded hidden states, per-sequence `[CLS]`
/// states, and (when requested) the activation cache backpropagation needs.
pub struct Forward {
    batch: Vec<TokenSequence>,
    t_max: usize,
    d_model: usize,
    valid: Vec<bool>,  // [B*T] attendable positions
    hidden: Vec<f64>,  // [B*T*d]
    cls: Vec<f64>,     // [B*d]
    cache: Option<Cache>,
}

impl Forward {
    pub fn batch_len(&self) -> usize {
        self.batch.len()
    }

    pub fn seq_len(&self) -> usize {
        self.t_max
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.batch
    }

    /// Flat `[batch * seq_len * d_model]` hidden states (padded rows included).
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    pub fn hidden_row(&self, b: usize, t: usize) -> &[f64] {
        let d = self.d_model;
        &self.hidden[(b * self.t_max + t) * d..(b * self.t_max + t + 1) * d]
    }

    /// Final hidden state of the `[CLS]` position of sequence `b`.
    pub fn cls(&self, b: usize) -> &[f64] {
        &self.cls[b * self.d_model..(b + 1) * self.d_model]
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    fn valid_at(&self, b: usize, t: usize) -> bool {
        self.valid[b * self.t_max + t]
    }
}

/// Runs the encoder over a batch, padding to the longest sequence.
///
/// Set `want_cache` when a backward pass will follow. Hidden states at padded
/// positions are computed but carry no information; downstream consumers must
/// route zero upstream gradient to them.
pub fn encoder_forward(
    params: &EncoderParams,
    seqs: &[TokenSequence],
    want_cache: bool,
) -> Result<Forward> {
    let cfg = &params.cfg;
    if seqs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for seq in seqs {
        seq.validate(cfg)?;
    }
    let bsz = seqs.len();
    let t_max = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let d_ff = cfg.d_ff;
    let rows = bsz * t_max;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut valid = vec![false; rows];
    for (b, seq) in seqs.iter().enumerate() {
        for (t, &m) in seq.mask.iter().enumerate() {
            valid[b * t_max + t] = m;
        }
    }

    // Token + position embeddings, then the embedding layer norm.
    let tok_emb = params.t(L_TOK);
    let pos_emb = params.t(L_POS);
    let mut e_sum = vec![0.0; rows * d];
    for (b, seq) in seqs.iter().enumerate() {
        for t in 0..t_max {
            let id = if t < seq.len() { seq.ids[t] } else { PAD_ID } as usize;
            let row = &mut e_sum[(b * t_max + t) * d..(b * t_max + t + 1) * d];
            for ((o, &te), &pe) in row
                .iter_mut()
                .zip(&tok_emb[id * d..(id + 1) * d])
                .zip(&pos_emb[t * d..(t + 1) * d])
            {
                *o = te + pe;
            }
        }
    }
    let mut x = vec![0.0; rows * d];
    let mut xhat0 = vec![0.0; rows * d];
    let mut rstd0 = vec![0.0; rows];
    {
        let gamma = params.t(L_EMB_G);
        let beta = params.t(L_EMB_B);
        for r in 0..rows {
            rstd0[r] = layer_norm_row(
                &e_sum[r * d..(r + 1) * d],
                gamma,
                beta,
                &mut xhat0[r * d..(r + 1) * d],
                &mut x[r * d..(r + 1) * d],
            );
        }
    }

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    let mut scores = vec![0.0; t_max * t_max];
    for l in 0..cfg.layers {
        let wq = params.t(params.layer_idx(l, L_WQ));
        let bq = params.t(params.layer_idx(l, L_BQ));
        let wk = params.t(params.layer_idx(l, L_WK));
        let bk = params.t(params.layer_idx(l, L_BK));
        let wv = params.t(params.layer_idx(l, L_WV));
        let bv = params.t(params.layer_idx(l, L_BV));
        let wo = params.t(params.layer_idx(l, L_WO));
        let bo = params.t(params.layer_idx(l, L_BO));

        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        matmul_acc(&x, rows, d, wq, d, &mut q);
        add_bias(&mut q, rows, d, bq);
        matmul_acc(&x, rows, d, wk, d, &mut k);
        add_bias(&mut k, rows, d, bk);
        matmul_acc(&x, rows, d, wv, d, &mut v);
        add_bias(&mut v, rows, d, bv);

        let mut probs = vec![0.0; bsz * heads * t_max * t_max];
        let mut context = vec![0.0; rows * d];
        for b in 0..bsz {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..t_max {
                    let qrow = &q[(b * t_max + i) * d + col..(b * t_max + i) * d + col + dh];
                    for j in 0..t_max {
                        scores[i * t_max + j] = if valid[b * t_max + j] {
                            let krow =
                                &k[(b * t_max + j) * d + col..(b * t_max + j) * d + col + dh];
                            dot(qrow, krow) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_row(&mut scores[i * t_max..(i + 1) * t_max]);
                }
                let pbase = (b * heads + h) * t_max * t_max;
                probs[pbase..pbase + t_max * t_max].copy_from_slice(&scores[..t_max * t_max]);
                for i in 0..t_max {
                    for j in 0..t_max {
                        let p = probs[pbase + i * t_max + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &v[(b * t_max + j) * d + col..(b * t_max + j) * d + col + dh];
                        let crow = &mut context
                            [(b * t_max + i) * d + col..(b * t_max + i) * d + col + dh];
                        for (c, &vv) in crow.iter_mut().zip(vrow) {
                            *c += p * vv;
                        }
                    }
                }
            }
        }

        let mut attn = vec![0.0; rows * d];
        matmul_acc(&context, rows, d, wo, d, &mut attn);
        add_bias(&mut attn, rows, d, bo);

        // Residual + first layer norm.
        let mut h1 = vec![0.0; rows * d];
        let mut xhat1 = vec![0.0; rows * d];
        let mut rstd1 = vec![0.0; rows];
        {
            let gamma = params.t(params.layer_idx(l, L_LN1G));
            let beta = params.t(params.layer_idx(l, L_LN1B));
            for r in 0..rows {
                let res: Vec<f64> = x[r * d..(r + 1) * d]
                    .iter()
                    .zip(&attn[r * d..(r + 1) * d])
                    .map(|(a, b)| a + b)
                    .collect();
                rstd1[r] = layer_norm_row(
                    &res,
                    gamma,
                    beta,
                    &mut xhat1[r * d..(r + 1) * d],
                    &mut h1[r * d..(r + 1) * d],
                );
            }
        }

        // Feed-forward.
        let w1 = params.t(params.layer_idx(l, L_W1));
        let b1 = params.t(params.layer_idx(l, L_B1));
        let w2 = params.t(params.layer_idx(l, L_W2));
        let b2 = params.t(params.layer_idx(l, L_B2));
        let mut u = vec![0.0; rows * d_ff];
        matmul_acc(&h1, rows, d, w1, d_ff, &mut u);
        add_bias(&mut u, rows, d_ff, b1);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut ff = vec![0.0; rows * d];
        matmul_acc(&g, rows, d_ff, w2, d, &mut ff);
        add_bias(&mut ff, rows, d, b2);

        // Residual + second layer norm.
        let mut x_next = vec![0.0; rows * d];
        let mut xhat2 = vec![0.0; rows * d];
        let mut rstd2 = vec![0.0; rows];
        {
            let gamma = params.t(params.layer_idx(l, L_LN2G));
            let beta = params.t(params.layer_idx(l, L_LN2B));
            for r in 0..rows {
                let res: Vec<f64> = h1[r * d..(r + 1) * d]
                    .iter()
                    .zip(&ff[r * d..(r + 1) * d])
                    .map(|(a, b)| a + b)
                    .collect();
                rstd2[r] = layer_norm_row(
                    &res,
                    gamma,
                    beta,
                    &mut xhat2[r * d..(r + 1) * d],
                    &mut x_next[r * d..(r + 1) * d],
                );
            }
        }

        let x_in = std::mem::replace(&mut x, x_next);
        if want_cache {
            layer_caches.push(LayerCache {
                x_in,
                q,
                k,
                v,
                probs,
                context,
                xhat1,
                rstd1,
                h1,
                u,
                g,
                xhat2,
                rstd2,
            });
        }
    }

    let mut cls = vec![0.0; bsz * d];
    for b in 0..bsz {
        cls[b * d..(b + 1) * d].copy_from_slice(&x[(b * t_max) * d..(b * t_max + 1) * d]);
    }

    let cache = want_cache.then_some(Cache {
        xhat0,
        rstd0,
        layers: layer_caches,
    });
    Ok(Forward {
        batch: seqs.to_vec(),
        t_max,
        d_model: d,
        valid,
        hidden: x,
        cls,
        cache,
    })
}

// ---------------------------------------------------------------------------
// Heads and pooling
// ---------------------------------------------------------------------------

/// Two-layer projection head with a GELU between the layers.
pub fn project(params: &EncoderParams, e: &[f64]) -> Result<Vec<f64>> {
    let cfg = &params.cfg;
    if e.len() != cfg.d_model {
        return Err(Error::DimensionMismatch {
            expected: cfg.d_model,
            got: e.len(),
        });
    }
    let (p0, p1) = (cfg.projection[0], cfg.projection[1]);
    let w1 = params.t(params.after_layers(1));
    let b1 = params.t(params.after_layers(2));
    let w2 = params.t(params.after_layers(3));
    let b2 = params.t(params.after_layers(4));
    let mut h = b1.to_vec();
    matmul_acc(e, 1, cfg.d_model, w1, p0, &mut h);
    let a: Vec<f64> = h.iter().map(|&z| gelu(z)).collect();
    let mut z = b2.to_vec();
    matmul_acc(&a, 1, p0, w2, p1, &mut z);
    Ok(z)
}

/// Backward of `project`: accumulates head gradients, returns `d(input)`.
pub fn project_backward(
    params: &EncoderParams,
    e: &[f64],
    dz: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>> {
    let cfg = &params.cfg;
    let (p0, p1) = (cfg.projection[0], cfg.projection[1]);
    if e.len() != cfg.d_model {
        return Err(Error::DimensionMismatch {
            expected: cfg.d_model,
            got: e.len(),
        });
    }
    if dz.len() != p1 {
        return Err(Error::DimensionMismatch {
            expected: p1,
            got: dz.len(),
        });
    }
    let w1 = params.t(params.after_layers(1));
    let b1 = params.t(params.after_layers(2));
    let w2 = params.t(params.after_layers(3));
    // Recompute the (cheap) intermediate activations.
    let mut h = b1.to_vec();
    matmul_acc(e, 1, cfg.d_model, w1, p0, &mut h);
    let a: Vec<f64> = h.iter().map(|&z| gelu(z)).collect();

    matmul_at_acc(&a, 1, p0, dz, p1, grads.range(params, params.after_layers(3)));
    add_col_sums(dz, 1, p1, grads.range(params, params.after_layers(4)));
    let mut da = vec![0.0; p0];
    matmul_bt_acc(dz, 1, p1, w2, p0, &mut da);
    let du: Vec<f64> = da
        .iter()
        .zip(&h)
        .map(|(&g, &z)| g * gelu_prime(z))
        .collect();
    matmul_at_acc(e, 1, cfg.d_model, &du, p0, grads.range(params, params.after_layers(1)));
    add_col_sums(&du, 1, p0, grads.range(params, params.after_layers(2)));
    let mut de = vec![0.0; cfg.d_model];
    matmul_bt_acc(&du, 1, p0, w1, cfg.d_model, &mut de);
    Ok(de)
}

/// Vocabulary logits for a batch of hidden rows: `h · Eᵀ + b` with `E` the
/// token embedding matrix (tied weights).
pub fn mlm_logits(params: &EncoderParams, h: &[f64]) -> Result<Vec<f64>> {
    let d = params.cfg.d_model;
    let v = params.cfg.vocab_size;
    if h.is_empty() || h.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: h.len(),
        });
    }
    let rows = h.len() / d;
    let mut logits = vec![0.0; rows * v];
    matmul_bt_acc(h, rows, d, params.t(L_TOK), v, &mut logits);
    add_bias(&mut logits, rows, v, params.t(params.after_layers(0)));
    Ok(logits)
}

/// Backward of `mlm_logits`: accumulates tied-embedding and bias gradients,
/// returns `d(hidden rows)`.
pub fn mlm_logits_backward(
    params: &EncoderParams,
    h: &[f64],
    dlogits: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>> {
    let d = params.cfg.d_model;
    let v = params.cfg.vocab_size;
    if h.is_empty() || h.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: h.len(),
        });
    }
    let rows = h.len() / d;
    if dlogits.len() != rows * v {
        return Err(Error::DimensionMismatch {
            expected: rows * v,
            got: dlogits.len(),
        });
    }
    matmul_at_acc(dlogits, rows, v, h, d, grads.range(params, L_TOK));
    add_col_sums(dlogits, rows, v, grads.range(params, params.after_layers(0)));
    let mut dh = vec![0.0; rows * d];
    matmul_acc(dlogits, rows, v, params.t(L_TOK), d, &mut dh);
    Ok(dh)
}

/// Mean of the hidden rows at non-special, attendable positions of sequence
/// `b`; all zeros when no such position exists.
pub fn mean_nonspecial(fwd: &Forward, b: usize) -> Vec<f64> {
    let d = fwd.d_model;
    let seq = &fwd.batch[b];
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for t in 0..seq.len() {
        if seq.special[t] || !fwd.valid_at(b, t) {
            continue;
        }
        for (m, &v) in mean.iter_mut().zip(fwd.hidden_row(b, t)) {
            *m += v;
        }
        count += 1;
    }
    if count > 0 {
        for m in &mut mean {
            *m /= count as f64;
        }
    }
    mean
}

/// `[CLS]` state concatenated with the mean over content tokens: a
/// `2 * d_model` sequence embedding. The mean half is zero for sequences with
/// no content tokens.
pub fn combined_embedding(params: &EncoderParams, seq: &TokenSequence) -> Result<Vec<f64>> {
    let fwd = encoder_forward(params, std::slice::from_ref(seq), false)?;
    Ok(combined_from_forward(&fwd, 0))
}

/// `combined_embedding` from an existing forward pass.
pub fn combined_from_forward(fwd: &Forward, b: usize) -> Vec<f64> {
    let mut out = fwd.cls(b).to_vec();
    out.extend(mean_nonspecial(fwd, b));
    out
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Backpropagates `d_hidden` (flat `[batch * seq_len * d_model]`, zero at
/// padded positions) through the encoder, returning gradients for every
/// parameter tensor. Requires a forward pass run with `want_cache`.
pub fn encoder_backward(
    params: &EncoderParams,
    fwd: &Forward,
    d_hidden: &[f64],
) -> Result<Gradients> {
    let cfg = &params.cfg;
    let cache = fwd.cache.as_ref().ok_or_else(|| {
        Error::InvalidInput("backward requires a forward pass run with want_cache".into())
    })?;
    let bsz = fwd.batch.len();
    let t_max = fwd.t_max;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh_dim = cfg.head_dim();
    let d_ff = cfg.d_ff;
    let rows = bsz * t_max;
    let scale = 1.0 / (dh_dim as f64).sqrt();
    if d_hidden.len() != rows * d {
        return Err(Error::DimensionMismatch {
            expected: rows * d,
            got: d_hidden.len(),
        });
    }

    let mut grads = Gradients::zeros(params);
    let mut dx = d_hidden.to_vec();

    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];

        // Second layer norm (input was h1 + ff).
        let mut dres2 = vec![0.0; rows * d];
        {
            let gamma = params.t(params.layer_idx(l, L_LN2G));
            let (gi, bi) = (params.layer_idx(l, L_LN2G), params.layer_idx(l, L_LN2B));
            for r in 0..rows {
                let (go, bo_) = (params.spec(gi).offset, params.spec(bi).offset);
                let (head, tail) = grads.data.split_at_mut(bo_);
                layer_norm_row_backward(
                    &dx[r * d..(r + 1) * d],
                    &lc.xhat2[r * d..(r + 1) * d],
                    lc.rstd2[r],
                    gamma,
                    &mut head[go..go + d],
                    &mut tail[..d],
                    &mut dres2[r * d..(r + 1) * d],
                );
            }
        }

        // Feed-forward branch: ff = gelu(h1·W1 + b1)·W2 + b2.
        let w1 = params.t(params.layer_idx(l, L_W1));
        let w2 = params.t(params.layer_idx(l, L_W2));
        let mut dg = vec![0.0; rows * d_ff];
        matmul_bt_acc(&dres2, rows, d, w2, d_ff, &mut dg);
        matmul_at_acc(&lc.g, rows, d_ff, &dres2, d, grads.range(params, params.layer_idx(l, L_W2)));
        add_col_sums(&dres2, rows, d, grads.range(params, params.layer_idx(l, L_B2)));
        let du: Vec<f64> = dg
            .iter()
            .zip(&lc.u)
            .map(|(&g, &z)| g * gelu_prime(z))
            .collect();
        let mut dh1 = dres2; // residual path into h1
        matmul_bt_acc(&du, rows, d_ff, w1, d, &mut dh1);
        matmul_at_acc(&lc.h1, rows, d, &du, d_ff, grads.range(params, params.layer_idx(l, L_W1)));
        add_col_sums(&du, rows, d_ff, grads.range(params, params.layer_idx(l, L_B1)));

        // First layer norm (input was x_in + attn).
        let mut dres1 = vec![0.0; rows * d];
        {
            let gamma = params.t(params.layer_idx(l, L_LN1G));
            let (gi, bi) = (params.layer_idx(l, L_LN1G), params.layer_idx(l, L_LN1B));
            for r in 0..rows {
                let (go, bo_) = (params.spec(gi).offset, params.spec(bi).offset);
                let (head, tail) = grads.data.split_at_mut(bo_);
                layer_norm_row_backward(
                    &dh1[r * d..(r + 1) * d],
                    &lc.xhat1[r * d..(r + 1) * d],
                    lc.rstd1[r],
                    gamma,
                    &mut head[go..go + d],
                    &mut tail[..d],
                    &mut dres1[r * d..(r + 1) * d],
                );
            }
        }

        // Attention output projection.
        let wo = params.t(params.layer_idx(l, L_WO));
        let mut dcontext = vec![0.0; rows * d];
        matmul_bt_acc(&dres1, rows, d, wo, d, &mut dcontext);
        matmul_at_acc(&lc.context, rows, d, &dres1, d, grads.range(params, params.layer_idx(l, L_WO)));
        add_col_sums(&dres1, rows, d, grads.range(params, params.layer_idx(l, L_BO)));

        // Attention core, per sequence and head.
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dprobs = vec![0.0; t_max * t_max];
        for b in 0..bsz {
            for h in 0..heads {
                let col = h * dh_dim;
                let pbase = (b * heads + h) * t_max * t_max;
                for i in 0..t_max {
                    let dcrow = &dcontext
                        [(b * t_max + i) * d + col..(b * t_max + i) * d + col + dh_dim];
                    for j in 0..t_max {
                        let p = lc.probs[pbase + i * t_max + j];
                        if p == 0.0 {
                            dprobs[i * t_max + j] = 0.0;
                            continue;
                        }
                        let vrow =
                            &lc.v[(b * t_max + j) * d + col..(b * t_max + j) * d + col + dh_dim];
                        dprobs[i * t_max + j] = dot(dcrow, vrow);
                        // dV accumulates P^T · dContext.
                        let dvrow = &mut dv
                            [(b * t_max + j) * d + col..(b * t_max + j) * d + col + dh_dim];
                        for (o, &c) in dvrow.iter_mut().zip(dcrow) {
                            *o += p * c;
                        }
                    }
                }
                // Softmax backward, then score gradients into dQ/dK.
                for i in 0..t_max {
                    let prow = &lc.probs[pbase + i * t_max..pbase + (i + 1) * t_max];
                    let dprow = &dprobs[i * t_max..(i + 1) * t_max];
                    let row_dot: f64 = prow
                        .iter()
                        .zip(dprow)
                        .filter(|(&p, _)| p != 0.0)
                        .map(|(&p, &g)| p * g)
                        .sum();
                    for j in 0..t_max {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dprow[j] - row_dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let qrow = &lc.q
                            [(b * t_max + i) * d + col..(b * t_max + i) * d + col + dh_dim];
                        let krow = &lc.k
                            [(b * t_max + j) * d + col..(b * t_max + j) * d + col + dh_dim];
                        let dqrow_base = (b * t_max + i) * d + col;
                        let dkrow_base = (b * t_max + j) * d + col;
                        for z in 0..dh_dim {
                            dq[dqrow_base + z] += ds * krow[z];
                            dk[dkrow_base + z] += ds * qrow[z];
                        }
                    }
                }
            }
        }

        // Input projections: q = x_in·Wq + bq, etc.
        let mut dx_in = dres1; // residual path
        for (dmat, wi, bi) in [
            (&dq, L_WQ, L_BQ),
            (&dk, L_WK, L_BK),
            (&dv, L_WV, L_BV),
        ] {
            let w = params.t(params.layer_idx(l, wi));
            matmul_bt_acc(dmat, rows, d, w, d, &mut dx_in);
            matmul_at_acc(&lc.x_in, rows, d, dmat, d, grads.range(params, params.layer_idx(l, wi)));
            add_col_sums(dmat, rows, d, grads.range(params, params.layer_idx(l, bi)));
        }
        dx = dx_in;
    }

    // Embedding layer norm, then scatter into the embedding tables.
    let mut de = vec![0.0; rows * d];
    {
        let gamma = params.t(L_EMB_G);
        for r in 0..rows {
            let (go, bo_) = (params.spec(L_EMB_G).offset, params.spec(L_EMB_B).offset);
            let (head, tail) = grads.data.split_at_mut(bo_);
            layer_norm_row_backward(
                &dx[r * d..(r + 1) * d],
                &cache.xhat0[r * d..(r + 1) * d],
                cache.rstd0[r],
                gamma,
                &mut head[go..go + d],
                &mut tail[..d],
                &mut de[r * d..(r + 1) * d],
            );
        }
    }
    {
        let tok_off = params.spec(L_TOK).offset;
        let pos_off = params.spec(L_POS).offset;
        for (b, seq) in fwd.batch.iter().enumerate() {
            for t in 0..t_max {
                let id = if t < seq.len() { seq.ids[t] } else { PAD_ID } as usize;
                let row = &de[(b * t_max + t) * d..(b * t_max + t + 1) * d];
                for (z, &g) in row.iter().enumerate() {
                    grads.data[tok_off + id * d + z] += g;
                    grads.data[pos_off + t * d + z] += g;
                }
            }
        }
    }
    Ok(grads)
}
