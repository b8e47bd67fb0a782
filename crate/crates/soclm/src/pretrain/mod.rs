//! Pre-training: the masking policy, masked-language-model loss, the
//! contrastive social loss, the joint objective, and the two-stage loop.
//!
//! Stage 1 trains the encoder with the masked-token loss alone. Stage 2
//! resumes from the stage-1 parameters and optimizes
//! `L_total = L_social + lambda * L_MLM`, where `L_social` is a normalized
//! temperature-scaled cross entropy over projected `[CLS]` embeddings of
//! socially similar tweet pairs (in-batch negatives) and the MLM term covers
//! the masked tokens of both pair members. Optimization is Adam with linear
//! warmup and global-norm gradient clipping; every step is driven by a named
//! deterministic random stream, so identical seeds give identical parameters.

pub mod io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encoder_backward, encoder_forward, mlm_logits, mlm_logits_backward, project,
    project_backward, EncoderConfig, EncoderParams, Gradients, TokenSequence, Tokenizer,
    RESERVED_TOKENS,
};
use crate::error::{Error, Result};
use crate::graph::Corpus;
use crate::rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Token-masking policy: selection probability and the three-way action split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    /// Probability that a non-special token is selected for prediction.
    pub mask_prob: f64,
    /// Of the selected tokens: fraction replaced by `[MASK]`.
    pub mask_rate: f64,
    /// Of the selected tokens: fraction replaced by a random ordinary token.
    pub random_rate: f64,
    /// Of the selected tokens: fraction left unchanged.
    pub keep_rate: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            mask_prob: 0.15,
            mask_rate: 0.8,
            random_rate: 0.1,
            keep_rate: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mask_prob", self.mask_prob),
            ("mask_rate", self.mask_rate),
            ("random_rate", self.random_rate),
            ("keep_rate", self.keep_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    format!("mask.{name}"),
                    format!("{v} outside [0, 1]"),
                ));
            }
        }
        let total = self.mask_rate + self.random_rate + self.keep_rate;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "mask",
                format!("action split sums to {total}, expected 1"),
            ));
        }
        Ok(())
    }
}

/// Contrastive-loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
    /// Tweet pairs per training batch.
    pub batch_pairs: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            batch_pairs: 16,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "contrastive.temperature",
                "must be positive and finite",
            ));
        }
        if self.batch_pairs == 0 {
            return Err(Error::config("contrastive.batch_pairs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Joint-objective and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointLossConfig {
    /// Weight of the MLM term in the stage-2 objective.
    pub lambda: f64,
    /// Peak Adam learning rate.
    pub lr: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Training stage this configuration drives (1 = MLM only, 2 = joint).
    pub stage: u8,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig {
            lambda: 0.05,
            lr: 1e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            stage: 2,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("joint.lambda", "must be finite and >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("joint.lr", "must be positive and finite"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("joint.clip_norm", "must be positive and finite"));
        }
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::config("joint.stage", "must be 1 or 2"));
        }
        Ok(())
    }
}

/// Stage-1 (MLM-only) training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub mask: MaskPolicy,
    pub opt: JointLossConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            encoder: EncoderConfig::default(),
            steps: 400,
            batch_size: 32,
            mask: MaskPolicy::default(),
            opt: JointLossConfig {
                stage: 1,
                ..JointLossConfig::default()
            },
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mask.validate()?;
        self.opt.validate()?;
        if self.opt.stage != 1 {
            return Err(Error::config("stage1.opt.stage", "must be 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("stage1.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Stage-2 (joint) training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub mask: MaskPolicy,
    pub contrastive: ContrastiveConfig,
    pub opt: JointLossConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 300,
            mask: MaskPolicy::default(),
            contrastive: ContrastiveConfig::default(),
            opt: JointLossConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.contrastive.validate()?;
        self.opt.validate()?;
        if self.opt.stage != 2 {
            return Err(Error::config("stage2.opt.stage", "must be 2"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// One prediction target produced by masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskTarget {
    /// Index of the sequence within its batch.
    pub seq: usize,
    /// Token position within the sequence.
    pub pos: usize,
    /// Original token id at that position.
    pub id: u32,
}

/// A batch of masked sequences plus the positions to predict.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub seqs: Vec<TokenSequence>,
    pub targets: Vec<MaskTarget>,
}

/// Applies the masking policy to one sequence. Each non-special, attendable
/// token is independently selected with `mask_prob`; selected tokens are
/// replaced by `[MASK]`, replaced by a random ordinary token, or kept, per the
/// action split. Returns the edited sequence and `(position, original id)`
/// targets for every selected position.
pub fn mask_tokens<R: Rng>(
    seq: &TokenSequence,
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> (TokenSequence, Vec<(usize, u32)>) {
    let mut out = seq.clone();
    let mut targets = Vec::new();
    let n_ordinary = vocab_size.saturating_sub(RESERVED_TOKENS.len());
    for pos in 0..seq.len() {
        if seq.special[pos] || !seq.mask[pos] {
            continue;
        }
        if rng.random::<f64>() >= policy.mask_prob {
            continue;
        }
        targets.push((pos, seq.ids[pos]));
        let action = rng.random::<f64>();
        if action < policy.mask_rate {
            out.ids[pos] = crate::encoder::MASK_ID;
        } else if action < policy.mask_rate + policy.random_rate && n_ordinary > 0 {
            out.ids[pos] =
                (RESERVED_TOKENS.len() + rng.random_range(0..n_ordinary)) as u32;
        } // else: keep the original token.
    }
    (out, targets)
}

/// Masks every sequence of a batch in order.
pub fn mask_batch<R: Rng>(
    seqs: &[TokenSequence],
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedBatch {
    let mut out = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        let (masked, seq_targets) = mask_tokens(seq, policy, vocab_size, rng);
        out.push(masked);
        targets.extend(seq_targets.into_iter().map(|(pos, id)| MaskTarget {
            seq: si,
            pos,
            id,
        }));
    }
    MaskedBatch {
        seqs: out,
        targets,
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Cross-entropy over masked positions, scaled by `weight`. `h` holds one
/// hidden row per target. Accumulates tied-head gradients into `grads` and
/// returns `(unweighted mean loss, weight-scaled d(hidden rows))`.
fn mlm_ce(
    params: &EncoderParams,
    h: &[f64],
    targets: &[u32],
    weight: f64,
    grads: &mut Gradients,
) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        if !h.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 0,
                got: h.len(),
            });
        }
        return Ok((0.0, Vec::new()));
    }
    let v = params.config().vocab_size;
    let d = params.config().d_model;
    if h.len() != targets.len() * d {
        return Err(Error::DimensionMismatch {
            expected: targets.len() * d,
            got: h.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InvalidInput(format!(
            "mask target id {bad} out of range for vocabulary of {v}"
        )));
    }
    let rows = targets.len();
    let mut logits = mlm_logits(params, h)?;
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let row = &mut logits[r * v..(r + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - row[target as usize];
        // Convert the row to weight-scaled softmax-CE logit gradients in place.
        for (j, l) in row.iter_mut().enumerate() {
            let p = (*l - lse).exp();
            let indicator = if j == target as usize { 1.0 } else { 0.0 };
            *l = weight * (p - indicator) / rows as f64;
        }
    }
    loss /= rows as f64;
    let dh = mlm_logits_backward(params, h, &logits, grads)?;
    Ok((loss, dh))
}

/// Masked-language-model loss over a set of hidden rows (one per target id).
/// Mean cross-entropy; zero targets give loss 0. Accumulates gradients for
/// the tied output head into `grads` and returns `d(hidden rows)`.
pub fn mlm_loss(
    params: &EncoderParams,
    h: &[f64],
    targets: &[u32],
    grads: &mut Gradients,
) -> Result<(f64, Vec<f64>)> {
    mlm_ce(params, h, targets, 1.0, grads)
}

/// Normalized temperature-scaled cross entropy over `2B` projected vectors.
///
/// `pairs` lists each partner relation exactly once; every index in
/// `0..2 * pairs.len()` must appear in exactly one pair. For anchor `i` with
/// partner `p(i)` the per-anchor loss is
/// `-log( exp(sim(i, p(i)) / tau) / sum_{j != i} exp(sim(i, j) / tau) )`
/// with cosine similarity; the result is the mean over all `2B` anchors.
/// Returns the loss and its gradient with respect to the raw (unnormalized)
/// vectors.
pub fn nt_xent_loss(
    z: &[f64],
    dim: usize,
    pairs: &[(u32, u32)],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature {tau} must be positive and finite"
        )));
    }
    if dim == 0 || pairs.is_empty() {
        return Err(Error::InvalidInput(
            "contrastive batch needs at least one pair and dim >= 1".into(),
        ));
    }
    let n = 2 * pairs.len();
    if z.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: n * dim,
            got: z.len(),
        });
    }
    let mut partner = vec![usize::MAX; n];
    for &(a, b) in pairs {
        let (a, b) = (a as usize, b as usize);
        if a >= n || b >= n || a == b {
            return Err(Error::InvalidInput(format!(
                "pair ({a}, {b}) invalid for {n} vectors"
            )));
        }
        if partner[a] != usize::MAX || partner[b] != usize::MAX {
            return Err(Error::InvalidInput(format!(
                "index {} appears in more than one pair",
                if partner[a] != usize::MAX { a } else { b }
            )));
        }
        partner[a] = b;
        partner[b] = a;
    }

    // Normalize once per batch.
    let mut zn = vec![0.0; n * dim];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &z[i * dim..(i + 1) * dim];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("contrastive vector {i}")));
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!(
                "contrastive vector {i} has zero norm"
            )));
        }
        norms[i] = norm;
        for (o, &v) in zn[i * dim..(i + 1) * dim].iter_mut().zip(row) {
            *o = v / norm;
        }
    }

    // Cosine similarities (scaled by 1/tau).
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: f64 = zn[i * dim..(i + 1) * dim]
                .iter()
                .zip(&zn[j * dim..(j + 1) * dim])
                .map(|(a, b)| a * b)
                .sum();
            s[i * n + j] = d / tau;
        }
    }

    let mut loss = 0.0;
    let mut dzn = vec![0.0; n * dim];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                max = max.max(s[i * n + j]);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (s[i * n + j] - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss += lse - s[i * n + partner[i]];
        // d(loss_i)/d(s_ij) = (softmax_j - [j == partner]) / (n * tau);
        // each contributes to both endpoint gradients through the dot product.
        for j in 0..n {
            if j == i {
                continue;
            }
            let p = (s[i * n + j] - lse).exp();
            let indicator = if j == partner[i] { 1.0 } else { 0.0 };
            let c = (p - indicator) / (n as f64 * tau);
            if c == 0.0 {
                continue;
            }
            for k in 0..dim {
                dzn[i * dim + k] += c * zn[j * dim + k];
                dzn[j * dim + k] += c * zn[i * dim + k];
            }
        }
    }
    loss /= n as f64;

    // Back through the normalization: dz = (dzn - zn * (zn . dzn)) / norm.
    let mut dz = vec![0.0; n * dim];
    for i in 0..n {
        let zi = &zn[i * dim..(i + 1) * dim];
        let gi = &dzn[i * dim..(i + 1) * dim];
        let proj: f64 = zi.iter().zip(gi).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            dz[i * dim + k] = (gi[k] - zi[k] * proj) / norms[i];
        }
    }
    Ok((loss, dz))
}

// ---------------------------------------------------------------------------
// Joint objective
// ---------------------------------------------------------------------------

/// Loss values from one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_social: f64,
    pub loss_mlm: f64,
}

/// One loss-curve row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_social: f64,
    pub loss_mlm: f64,
}

fn gather_target_rows(fwd: &crate::encoder::Forward, targets: &[MaskTarget]) -> Result<Vec<f64>> {
    let d = fwd.d_model();
    let mut h = Vec::with_capacity(targets.len() * d);
    for t in targets {
        if t.seq >= fwd.batch_len() || t.pos >= fwd.sequences()[t.seq].len() {
            return Err(Error::InvalidInput(format!(
                "mask target at sequence {} position {} out of bounds",
                t.seq, t.pos
            )));
        }
        h.extend_from_slice(fwd.hidden_row(t.seq, t.pos));
    }
    Ok(h)
}

fn scatter_target_rows(
    d_hidden: &mut [f64],
    fwd: &crate::encoder::Forward,
    targets: &[MaskTarget],
    dh: &[f64],
) {
    let d = fwd.d_model();
    let t_max = fwd.seq_len();
    for (r, t) in targets.iter().enumerate() {
        let base = (t.seq * t_max + t.pos) * d;
        for k in 0..d {
            d_hidden[base + k] += dh[r * d + k];
        }
    }
}

/// MLM-only loss and full parameter gradients over a masked batch.
pub fn mlm_batch_loss_and_grads(
    params: &EncoderParams,
    batch: &MaskedBatch,
) -> Result<(f64, Gradients)> {
    let fwd = encoder_forward(params, &batch.seqs, true)?;
    let mut grads = Gradients::zeros(params);
    let h = gather_target_rows(&fwd, &batch.targets)?;
    let ids: Vec<u32> = batch.targets.iter().map(|t| t.id).collect();
    let (loss, dh) = mlm_ce(params, &h, &ids, 1.0, &mut grads)?;
    let mut d_hidden = vec![0.0; fwd.batch_len() * fwd.seq_len() * fwd.d_model()];
    scatter_target_rows(&mut d_hidden, &fwd, &batch.targets, &dh);
    grads.add_assign(&encoder_backward(params, &fwd, &d_hidden)?);
    Ok((loss, grads))
}

/// Joint loss `L_social + lambda * L_MLM` and full parameter gradients over a
/// masked batch laid out as adjacent pairs `(0,1), (2,3), ...`.
pub fn joint_loss_and_grads(
    params: &EncoderParams,
    batch: &MaskedBatch,
    tau: f64,
    lambda: f64,
) -> Result<(StepMetrics, Gradients)> {
    let n = batch.seqs.len();
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "joint batch holds {n} sequences; need a positive even count"
        )));
    }
    let fwd = encoder_forward(params, &batch.seqs, true)?;
    let d = fwd.d_model();
    let p1 = params.config().projection[1];
    let mut grads = Gradients::zeros(params);
    let mut d_hidden = vec![0.0; n * fwd.seq_len() * d];

    // Social term over projected [CLS] states.
    let mut z = vec![0.0; n * p1];
    for b in 0..n {
        z[b * p1..(b + 1) * p1].copy_from_slice(&project(params, fwd.cls(b))?);
    }
    let pairs: Vec<(u32, u32)> = (0..n / 2)
        .map(|i| ((2 * i) as u32, (2 * i + 1) as u32))
        .collect();
    let (loss_social, dz) = nt_xent_loss(&z, p1, &pairs, tau)?;
    for b in 0..n {
        let de = project_backward(params, fwd.cls(b), &dz[b * p1..(b + 1) * p1], &mut grads)?;
        let base = b * fwd.seq_len() * d;
        for k in 0..d {
            d_hidden[base + k] += de[k];
        }
    }

    // MLM term over the masked tokens of both pair members.
    let h = gather_target_rows(&fwd, &batch.targets)?;
    let ids: Vec<u32> = batch.targets.iter().map(|t| t.id).collect();
    let (loss_mlm, dh) = mlm_ce(params, &h, &ids, lambda, &mut grads)?;
    scatter_target_rows(&mut d_hidden, &fwd, &batch.targets, &dh);

    grads.add_assign(&encoder_backward(params, &fwd, &d_hidden)?);
    Ok((
        StepMetrics {
            loss_total: loss_social + lambda * loss_mlm,
            loss_social,
            loss_mlm,
        },
        grads,
    ))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param size mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/grad size mismatch");
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Linear learning-rate warmup: ramps from `base / warmup` to `base` over the
/// first `warmup` steps (0-based `step`), then stays at `base`.
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        return base;
    }
    base * (((step + 1) as f64 / warmup as f64).min(1.0))
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.data().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.data_mut() {
            *g *= scale;
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Training steps and stages
// ---------------------------------------------------------------------------

/// Masks a batch of tweet pairs and performs one joint-objective update.
/// `vocab_size` is the tokenizer vocabulary (bounds random replacements).
#[allow(clippy::too_many_arguments)]
pub fn joint_step<R: Rng>(
    params: &mut EncoderParams,
    pairs: &[(TokenSequence, TokenSequence)],
    policy: &MaskPolicy,
    vocab_size: usize,
    ccfg: &ContrastiveConfig,
    jcfg: &JointLossConfig,
    opt: &mut AdamState,
    step: usize,
    rng: &mut R,
) -> Result<StepMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty pair batch".into()));
    }
    let mut seqs = Vec::with_capacity(2 * pairs.len());
    for (a, b) in pairs {
        seqs.push(a.clone());
        seqs.push(b.clone());
    }
    let batch = mask_batch(&seqs, policy, vocab_size, rng);
    let (metrics, mut grads) = joint_loss_and_grads(params, &batch, ccfg.temperature, jcfg.lambda)?;
    clip_gradients(&mut grads, jcfg.clip_norm);
    let lr = warmup_lr(jcfg.lr, step, jcfg.warmup_steps);
    opt.step(params.data_mut(), grads.data(), lr);
    Ok(metrics)
}

/// Stage 1: masked-language-model training from scratch on the corpus.
/// Deterministic in `seed`; zero steps returns the initialization unchanged.
pub fn pretrain_stage1(
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<(EncoderParams, Vec<LossRow>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if tok.vocab_size() > cfg.encoder.vocab_size {
        return Err(Error::config(
            "stage1.encoder.vocab_size",
            format!(
                "tokenizer needs {} ids but the encoder allows {}",
                tok.vocab_size(),
                cfg.encoder.vocab_size
            ),
        ));
    }
    let mut params = EncoderParams::init(&cfg.encoder, rng::substream_seed(seed, "pretrain.stage1.init"))?;
    let seqs: Vec<TokenSequence> = corpus
        .entries()
        .iter()
        .map(|(_, text)| tok.tokenize(text))
        .collect();
    let mut data_rng = rng::substream(seed, "pretrain.stage1.data");
    let mut opt = AdamState::new(params.n_params());
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch_seqs: Vec<TokenSequence> = (0..cfg.batch_size)
            .map(|_| seqs[data_rng.random_range(0..seqs.len())].clone())
            .collect();
        let batch = mask_batch(&batch_seqs, &cfg.mask, tok.vocab_size(), &mut data_rng);
        let (loss, mut grads) = mlm_batch_loss_and_grads(&params, &batch)?;
        clip_gradients(&mut grads, cfg.opt.clip_norm);
        let lr = warmup_lr(cfg.opt.lr, step, cfg.opt.warmup_steps);
        opt.step(params.data_mut(), grads.data(), lr);
        rows.push(LossRow {
            step: step + 1,
            loss_total: loss,
            loss_social: 0.0,
            loss_mlm: loss,
        });
    }
    params.validate_finite()?;
    Ok((params, rows))
}

/// Stage 2: joint training from stage-1 parameters on mined tweet pairs.
/// See the module docs for the objective.
/// Every pair id must resolve to corpus text; an empty pair set is an error.
pub fn pretrain_stage2(
    start: &EncoderParams,
    corpus: &Corpus,
    tok: &Tokenizer,
    pairs: &[(String, String, f64)],
    cfg: &Stage2Config,
    seed: u64,
) -> Result<(EncoderParams, Vec<LossRow>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "stage 2 requires a non-empty mined pair set".into(),
        ));
    }
    let mut resolved: Vec<(TokenSequence, TokenSequence)> = Vec::with_capacity(pairs.len());
    for (a, b, _) in pairs {
        let lookup = |id: &str| -> Result<TokenSequence> {
            corpus
                .text(id)
                .map(|t| tok.tokenize(t))
                .ok_or_else(|| Error::InvalidInput(format!("no tweet text for mined pair id {id:?}")))
        };
        resolved.push((lookup(a)?, lookup(b)?));
    }
    let mut params = start.clone();
    let mut data_rng = rng::substream(seed, "pretrain.stage2.data");
    let mut opt = AdamState::new(params.n_params());
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(TokenSequence, TokenSequence)> = (0..cfg.contrastive.batch_pairs)
            .map(|_| resolved[data_rng.random_range(0..resolved.len())].clone())
            .collect();
        let metrics = joint_step(
            &mut params,
            &batch,
            &cfg.mask,
            tok.vocab_size(),
            &cfg.contrastive,
            &cfg.opt,
            &mut opt,
            step,
            &mut data_rng,
        )?;
        rows.push(LossRow {
            step: step + 1,
            loss_total: metrics.loss_total,
            loss_social: metrics.loss_social,
            loss_mlm: metrics.loss_mlm,
        });
    }
    params.validate_finite()?;
    Ok((params, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{CLS_ID, MASK_ID, SEP_ID};
    use crate::graph::synth::{generate_world, WorldConfig};
    use crate::rng::seeded;
    use rand::Rng;

    fn seq_from_ids(ids: &[u32]) -> TokenSequence {
        let mut full = vec![CLS_ID];
        full.extend_from_slice(ids);
        full.push(SEP_ID);
        let n = full.len();
        let mut special = vec![false; n];
        special[0] = true;
        special[n - 1] = true;
        TokenSequence {
            ids: full,
            mask: vec![true; n],
            special,
        }
    }

    fn split_policy(mask_prob: f64, mask: f64, random: f64, keep: f64) -> MaskPolicy {
        MaskPolicy {
            mask_prob,
            mask_rate: mask,
            random_rate: random,
            keep_rate: keep,
        }
    }

    fn tensor_range(params: &EncoderParams, name: &str) -> (usize, usize) {
        let spec = params
            .layout()
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"));
        (spec.offset, spec.len())
    }

    // -- masking ------------------------------------------------------------

    #[test]
    fn zero_probability_masks_nothing() {
        let seq = seq_from_ids(&[7, 8, 9, 10]);
        let policy = split_policy(0.0, 0.8, 0.1, 0.1);
        let (out, targets) = mask_tokens(&seq, &policy, 64, &mut seeded(1));
        assert_eq!(out, seq);
        assert!(targets.is_empty());
    }

    #[test]
    fn full_probability_pure_mask_action_hits_every_ordinary_token() {
        let seq = seq_from_ids(&[7, 8, 9, 10, 11]);
        let policy = split_policy(1.0, 1.0, 0.0, 0.0);
        let (out, targets) = mask_tokens(&seq, &policy, 64, &mut seeded(2));
        // [CLS] and [SEP] untouched; everything else becomes [MASK].
        assert_eq!(out.ids[0], CLS_ID);
        assert_eq!(*out.ids.last().unwrap(), SEP_ID);
        for pos in 1..out.len() - 1 {
            assert_eq!(out.ids[pos], MASK_ID);
        }
        let expected: Vec<(usize, u32)> =
            (1..seq.len() - 1).map(|p| (p, seq.ids[p])).collect();
        assert_eq!(targets, expected);
    }

    #[test]
    fn selection_rate_matches_mask_prob() {
        let seq = seq_from_ids(&(0..50).map(|i| 5 + i).collect::<Vec<u32>>());
        let policy = MaskPolicy::default();
        let mut rng = seeded(3);
        let trials = 2_000;
        let mut selected = 0usize;
        for _ in 0..trials {
            let (_, targets) = mask_tokens(&seq, &policy, 64, &mut rng);
            selected += targets.len();
        }
        let rate = selected as f64 / (trials * 50) as f64;
        assert!(
            (0.145..=0.155).contains(&rate),
            "selection rate {rate} strays from 0.15"
        );
    }

    #[test]
    fn random_action_draws_ordinary_replacement_tokens() {
        let ids: Vec<u32> = (0..40).map(|i| 5 + (i % 30)).collect();
        let seq = seq_from_ids(&ids);
        let policy = split_policy(1.0, 0.0, 1.0, 0.0);
        let vocab = 64usize;
        let (out, targets) = mask_tokens(&seq, &policy, vocab, &mut seeded(4));
        assert_eq!(targets.len(), 40);
        let mut changed = 0;
        for (pos, orig) in &targets {
            let id = out.ids[*pos];
            assert!(
                (RESERVED_TOKENS.len() as u32..vocab as u32).contains(&id),
                "replacement id {id} outside the ordinary range"
            );
            assert_eq!(*orig, seq.ids[*pos]);
            if id != *orig {
                changed += 1;
            }
        }
        assert!(changed > 20, "random replacements barely changed anything");
    }

    #[test]
    fn keep_action_records_targets_without_edits() {
        let seq = seq_from_ids(&[9, 12, 33, 40]);
        let policy = split_policy(1.0, 0.0, 0.0, 1.0);
        let (out, targets) = mask_tokens(&seq, &policy, 64, &mut seeded(5));
        assert_eq!(out, seq);
        assert_eq!(targets.len(), 4);
    }

    #[test]
    fn invalid_mask_policies_are_rejected() {
        assert!(split_policy(0.15, 0.5, 0.1, 0.1).validate().is_err());
        assert!(split_policy(1.5, 0.8, 0.1, 0.1).validate().is_err());
        assert!(split_policy(0.15, -0.1, 1.0, 0.1).validate().is_err());
        assert!(MaskPolicy::default().validate().is_ok());
    }

    #[test]
    fn padding_positions_are_never_selected() {
        let mut seq = seq_from_ids(&[7, 8, 9]);
        seq.ids.push(0);
        seq.mask.push(false);
        seq.special.push(false);
        let policy = split_policy(1.0, 1.0, 0.0, 0.0);
        let (out, targets) = mask_tokens(&seq, &policy, 64, &mut seeded(6));
        assert_eq!(*out.ids.last().unwrap(), 0);
        assert!(targets.iter().all(|&(p, _)| p < 4));
    }

    // -- MLM loss -----------------------------------------------------------

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let cfg = EncoderConfig {
            vocab_size: 200,
            ..tiny_cfg()
        };
        let params = EncoderParams::zeros(&cfg).unwrap();
        let d = cfg.d_model;
        let mut rng = seeded(7);
        let h: Vec<f64> = (0..3 * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut grads = Gradients::zeros(&params);
        let (loss, dh) = mlm_loss(&params, &h, &[0, 57, 199], &mut grads).unwrap();
        assert!(
            (loss - (200f64).ln()).abs() < 1e-9,
            "uniform loss {loss} != ln 200"
        );
        assert_eq!(dh.len(), h.len());
    }

    #[test]
    fn confident_correct_predictions_give_near_zero_loss() {
        // d_model == vocab, token embeddings 30 * I, hidden rows = one-hot at
        // the target: logit margin 30 makes the softmax essentially certain.
        let cfg = EncoderConfig {
            layers: 1,
            d_model: 8,
            heads: 1,
            d_ff: 8,
            vocab_size: 8,
            max_positions: 4,
            projection: [4, 4],
        };
        let mut params = EncoderParams::zeros(&cfg).unwrap();
        let (tok_off, _) = tensor_range(&params, "tok_emb");
        for i in 0..8 {
            params.data_mut()[tok_off + i * 8 + i] = 30.0;
        }
        let targets = [2u32, 5, 7];
        let mut h = vec![0.0; targets.len() * 8];
        for (r, &t) in targets.iter().enumerate() {
            h[r * 8 + t as usize] = 1.0;
        }
        let mut grads = Gradients::zeros(&params);
        let (loss, _) = mlm_loss(&params, &h, &targets, &mut grads).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6, "confident loss {loss}");
    }

    #[test]
    fn constant_logit_shifts_leave_the_loss_unchanged() {
        let cfg = tiny_cfg();
        let mut params = EncoderParams::init(&cfg, 11).unwrap();
        let d = cfg.d_model;
        let mut rng = seeded(8);
        let h: Vec<f64> = (0..4 * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let targets = [1u32, 6, 12, 19];
        let mut grads = Gradients::zeros(&params);
        let (base, _) = mlm_loss(&params, &h, &targets, &mut grads).unwrap();
        let (bias_off, bias_len) = tensor_range(&params, "mlm_bias");
        for b in &mut params.data_mut()[bias_off..bias_off + bias_len] {
            *b += 7.5;
        }
        let mut grads2 = Gradients::zeros(&params);
        let (shifted, _) = mlm_loss(&params, &h, &targets, &mut grads2).unwrap();
        assert!(
            (base - shifted).abs() < 1e-12,
            "shift changed the loss: {base} vs {shifted}"
        );
    }

    #[test]
    fn no_targets_means_zero_loss_and_zero_grads() {
        let params = EncoderParams::init(&tiny_cfg(), 12).unwrap();
        let mut grads = Gradients::zeros(&params);
        let (loss, dh) = mlm_loss(&params, &[], &[], &mut grads).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dh.is_empty());
        assert!(grads.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mlm_loss_rejects_bad_targets_and_shapes() {
        let cfg = tiny_cfg();
        let params = EncoderParams::init(&cfg, 13).unwrap();
        let h = vec![0.1; cfg.d_model];
        let mut grads = Gradients::zeros(&params);
        assert!(mlm_loss(&params, &h, &[cfg.vocab_size as u32], &mut grads).is_err());
        assert!(mlm_loss(&params, &h, &[0, 1], &mut grads).is_err());
        assert!(mlm_loss(&params, &h[..3], &[0], &mut grads).is_err());
    }

    #[test]
    fn mlm_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut params = EncoderParams::init(&cfg, 14).unwrap();
        let d = cfg.d_model;
        let mut rng = seeded(15);
        let mut h: Vec<f64> = (0..3 * d).map(|_| rng.random::<f64>() - 0.5).collect();
        let targets = [3u32, 0, 17];

        let mut grads = Gradients::zeros(&params);
        let (_, dh) = mlm_loss(&params, &h, &targets, &mut grads).unwrap();

        let eps = 1e-5;
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-10 + 1e-6 * a.abs().max(b.abs());

        // Hidden-state gradients.
        for i in 0..h.len() {
            let orig = h[i];
            h[i] = orig + eps;
            let mut g = Gradients::zeros(&params);
            let (lp, _) = mlm_loss(&params, &h, &targets, &mut g).unwrap();
            h[i] = orig - eps;
            let mut g = Gradients::zeros(&params);
            let (lm, _) = mlm_loss(&params, &h, &targets, &mut g).unwrap();
            h[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!(tol(fd, dh[i]), "dh[{i}]: fd {fd} vs analytic {}", dh[i]);
        }

        // Head parameters: token embeddings (as output matrix) and bias.
        for name in ["tok_emb", "mlm_bias"] {
            let (offset, len) = tensor_range(&params, name);
            let mut probe = seeded(16);
            for _ in 0..24 {
                let i = offset + probe.random_range(0..len);
                let orig = params.data()[i];
                params.data_mut()[i] = orig + eps;
                let mut g = Gradients::zeros(&params);
                let (lp, _) = mlm_loss(&params, &h, &targets, &mut g).unwrap();
                params.data_mut()[i] = orig - eps;
                let mut g = Gradients::zeros(&params);
                let (lm, _) = mlm_loss(&params, &h, &targets, &mut g).unwrap();
                params.data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let analytic = grads.data()[i];
                assert!(
                    tol(fd, analytic),
                    "{name}[{i}]: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    // -- NT-Xent ------------------------------------------------------------

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let mut rng = seeded(17);
        let z: Vec<f64> = (0..2 * 6).map(|_| rng.random::<f64>() - 0.5).collect();
        let (loss, dz) = nt_xent_loss(&z, 6, &[(0, 1)], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dz.iter().all(|&g| g == 0.0), "B = 1 gradient not zero");
    }

    #[test]
    fn identical_vectors_give_ln_seven_at_any_temperature() {
        let row = [0.3, -1.2, 0.8, 2.0];
        let mut z = Vec::new();
        for _ in 0..8 {
            z.extend_from_slice(&row);
        }
        let pairs = [(0, 1), (2, 3), (4, 5), (6, 7)];
        let (l1, _) = nt_xent_loss(&z, 4, &pairs, 0.1).unwrap();
        let (l2, _) = nt_xent_loss(&z, 4, &pairs, 0.37).unwrap();
        assert!((l1 - (7f64).ln()).abs() < 1e-6, "loss {l1} != ln 7");
        assert!((l1 - l2).abs() < 1e-9, "temperature changed a flat batch");
    }

    #[test]
    fn loss_matches_direct_enumeration() {
        let dim = 5;
        let pairs = [(0u32, 3u32), (1, 4), (2, 5)];
        let tau = 0.1;
        let mut rng = seeded(18);
        let z: Vec<f64> = (0..6 * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (loss, _) = nt_xent_loss(&z, dim, &pairs, tau).unwrap();

        // Independent oracle: normalize, enumerate every term directly.
        let n = 6;
        let mut zn = vec![0.0; n * dim];
        for i in 0..n {
            let norm = z[i * dim..(i + 1) * dim]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            for k in 0..dim {
                zn[i * dim + k] = z[i * dim + k] / norm;
            }
        }
        let sim = |a: usize, b: usize| -> f64 {
            (0..dim).map(|k| zn[a * dim + k] * zn[b * dim + k]).sum()
        };
        let mut partner = vec![0usize; n];
        for &(a, b) in &pairs {
            partner[a as usize] = b as usize;
            partner[b as usize] = a as usize;
        }
        let mut expected = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                if j != i {
                    denom += (sim(i, j) / tau).exp();
                }
            }
            expected += -((sim(i, partner[i]) / tau).exp() / denom).ln();
        }
        expected /= n as f64;
        assert!(
            (loss - expected).abs() < 1e-9,
            "loss {loss} vs enumerated {expected}"
        );
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let dim = 5;
        let pairs = [(0u32, 3u32), (1, 4), (2, 5)];
        let tau = 0.2;
        let mut rng = seeded(19);
        let mut z: Vec<f64> = (0..6 * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (_, dz) = nt_xent_loss(&z, dim, &pairs, tau).unwrap();
        let eps = 1e-5;
        for i in 0..z.len() {
            let orig = z[i];
            z[i] = orig + eps;
            let (lp, _) = nt_xent_loss(&z, dim, &pairs, tau).unwrap();
            z[i] = orig - eps;
            let (lm, _) = nt_xent_loss(&z, dim, &pairs, tau).unwrap();
            z[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - dz[i]).abs() <= 1e-10 + 1e-6 * fd.abs().max(dz[i].abs()),
                "dz[{i}]: fd {fd} vs analytic {}",
                dz[i]
            );
        }
    }

    #[test]
    fn degenerate_vectors_are_rejected() {
        let mut z = vec![1.0; 4 * 3];
        z[3] = 0.0;
        z[4] = 0.0;
        z[5] = 0.0;
        let err = nt_xent_loss(&z, 3, &[(0, 1), (2, 3)], 0.1).unwrap_err();
        assert!(err.to_string().contains("zero norm"), "{err}");
        z[3] = f64::NAN;
        assert!(nt_xent_loss(&z, 3, &[(0, 1), (2, 3)], 0.1).is_err());
    }

    #[test]
    fn invalid_pairings_and_temperatures_are_rejected() {
        let z = vec![0.5; 4 * 3];
        assert!(nt_xent_loss(&z, 3, &[(0, 0), (1, 2)], 0.1).is_err());
        assert!(nt_xent_loss(&z, 3, &[(0, 1), (1, 2)], 0.1).is_err());
        assert!(nt_xent_loss(&z, 3, &[(0, 1), (2, 9)], 0.1).is_err());
        assert!(nt_xent_loss(&z, 3, &[(0, 1), (2, 3)], 0.0).is_err());
        assert!(nt_xent_loss(&z, 3, &[(0, 1), (2, 3)], -1.0).is_err());
        assert!(nt_xent_loss(&z[..9], 3, &[(0, 1), (2, 3)], 0.1).is_err());
    }

    #[test]
    fn loss_is_nonnegative_on_random_batches() {
        for seed in 0..6 {
            let mut rng = seeded(seed);
            let dim = 8;
            let z: Vec<f64> = (0..10 * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let pairs = [(0u32, 1u32), (2, 3), (4, 5), (6, 7), (8, 9)];
            let (loss, _) = nt_xent_loss(&z, dim, &pairs, 0.1).unwrap();
            assert!(loss >= 0.0, "seed {seed}: negative loss {loss}");
        }
    }

    #[test]
    fn pair_list_order_is_irrelevant() {
        let mut rng = seeded(20);
        let dim = 4;
        let z: Vec<f64> = (0..8 * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let (a, ga) = nt_xent_loss(&z, dim, &[(0, 1), (2, 3), (4, 5), (6, 7)], 0.1).unwrap();
        let (b, gb) = nt_xent_loss(&z, dim, &[(5, 4), (0, 1), (7, 6), (3, 2)], 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    // -- joint objective ----------------------------------------------------

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 20,
            max_positions: 12,
            projection: [8, 8],
        }
    }

    fn paired_batch(seed: u64) -> MaskedBatch {
        let seqs = vec![
            seq_from_ids(&[5, 6, 7, 8]),
            seq_from_ids(&[9, 10, 11]),
            seq_from_ids(&[12, 13, 14, 15, 16]),
            seq_from_ids(&[17, 18]),
        ];
        mask_batch(&seqs, &split_policy(0.4, 0.8, 0.1, 0.1), 20, &mut seeded(seed))
    }

    #[test]
    fn zero_lambda_total_equals_social_exactly() {
        let params = EncoderParams::init(&tiny_cfg(), 21).unwrap();
        let batch = paired_batch(22);
        assert!(!batch.targets.is_empty(), "fixture never masked anything");
        let (m, _) = joint_loss_and_grads(&params, &batch, 0.1, 0.0).unwrap();
        assert_eq!(m.loss_total, m.loss_social);
        assert!(m.loss_mlm > 0.0);
    }

    #[test]
    fn joint_gradients_decompose_into_social_plus_lambda_mlm() {
        let params = EncoderParams::init(&tiny_cfg(), 23).unwrap();
        let batch = paired_batch(24);
        assert!(!batch.targets.is_empty());
        let lambda = 0.05;
        let (m_joint, g_joint) = joint_loss_and_grads(&params, &batch, 0.1, lambda).unwrap();
        let (m_social, g_social) = joint_loss_and_grads(&params, &batch, 0.1, 0.0).unwrap();
        let (l_mlm, g_mlm) = mlm_batch_loss_and_grads(&params, &batch).unwrap();

        assert!((m_joint.loss_social - m_social.loss_social).abs() < 1e-12);
        assert!((m_joint.loss_mlm - l_mlm).abs() < 1e-12);
        assert!(
            (m_joint.loss_total - (m_social.loss_social + lambda * l_mlm)).abs() < 1e-12
        );
        for i in 0..g_joint.data().len() {
            let combined = g_social.data()[i] + lambda * g_mlm.data()[i];
            let got = g_joint.data()[i];
            assert!(
                (combined - got).abs() <= 1e-12 + 1e-9 * combined.abs().max(got.abs()),
                "grad[{i}]: joint {got} vs social+lambda*mlm {combined}"
            );
        }
    }

    #[test]
    fn joint_batches_must_hold_adjacent_pairs() {
        let params = EncoderParams::init(&tiny_cfg(), 25).unwrap();
        let seqs = vec![seq_from_ids(&[5, 6]), seq_from_ids(&[7, 8]), seq_from_ids(&[9])];
        let batch = mask_batch(&seqs, &MaskPolicy::default(), 20, &mut seeded(26));
        assert!(joint_loss_and_grads(&params, &batch, 0.1, 0.05).is_err());
        let empty = MaskedBatch {
            seqs: Vec::new(),
            targets: Vec::new(),
        };
        assert!(joint_loss_and_grads(&params, &empty, 0.1, 0.05).is_err());
    }

    // -- optimizer ----------------------------------------------------------

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        assert!((warmup_lr(1e-3, 0, 100) - 1e-5).abs() < 1e-18);
        assert!((warmup_lr(1e-3, 49, 100) - 5e-4).abs() < 1e-15);
        assert_eq!(warmup_lr(1e-3, 99, 100), 1e-3);
        assert_eq!(warmup_lr(1e-3, 2_000, 100), 1e-3);
        assert_eq!(warmup_lr(1e-3, 0, 0), 1e-3);
    }

    #[test]
    fn clipping_caps_the_global_norm_and_keeps_direction() {
        let params = EncoderParams::zeros(&tiny_cfg()).unwrap();
        let mut grads = Gradients::zeros(&params);
        let n = grads.data().len();
        for (i, g) in grads.data_mut().iter_mut().enumerate() {
            *g = (i % 7) as f64 - 3.0;
        }
        let before: Vec<f64> = grads.data().to_vec();
        let norm0: f64 = before.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm0 > 1.0);
        let reported = clip_gradients(&mut grads, 1.0);
        assert!((reported - norm0).abs() < 1e-9 * norm0);
        let norm1: f64 = grads.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norm1 - 1.0).abs() < 1e-9, "clipped norm {norm1}");
        for i in 0..n {
            assert!((grads.data()[i] * norm0 - before[i]).abs() < 1e-9);
        }

        // Under the threshold: bitwise untouched.
        let mut small = Gradients::zeros(&params);
        small.data_mut()[0] = 0.25;
        let snapshot = small.data().to_vec();
        let reported = clip_gradients(&mut small, 1.0);
        assert_eq!(reported, 0.25);
        assert_eq!(small.data(), snapshot.as_slice());
    }

    #[test]
    fn adam_first_step_size_is_the_learning_rate() {
        // With a constant unit gradient, bias correction makes the first
        // update exactly lr * 1 / (1 + eps).
        let mut p = vec![0.0f64];
        let mut opt = AdamState::new(1);
        opt.step(&mut p, &[1.0], 0.01);
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "first step {}", p[0]);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut p = vec![10.0f64];
        let mut opt = AdamState::new(1);
        for _ in 0..800 {
            let g = 2.0 * (p[0] - 3.0);
            opt.step(&mut p, &[g], 0.05);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "Adam stalled at {}", p[0]);
    }

    // -- stages -------------------------------------------------------------

    fn tiny_world() -> crate::graph::synth::SyntheticWorld {
        generate_world(
            &WorldConfig {
                n_topics: 2,
                n_users: 20,
                n_tweets: 60,
                vocab_size: 64,
                tokens_per_tweet: 6,
                noise_rate: 0.05,
                relations: vec!["fave".into()],
                edges_per_user: 10,
                user_dim: 8,
                engagement_focus: 50.0,
            },
            7,
        )
        .unwrap()
    }

    fn world_tokenizer(w: &crate::graph::synth::SyntheticWorld, max_len: usize) -> Tokenizer {
        let texts: Vec<&str> = w.corpus.entries().iter().map(|(_, t)| t.as_str()).collect();
        Tokenizer::from_corpus(&texts, 128, max_len).unwrap()
    }

    fn small_stage1_cfg(steps: usize) -> Stage1Config {
        Stage1Config {
            encoder: EncoderConfig {
                layers: 2,
                d_model: 32,
                heads: 2,
                d_ff: 64,
                vocab_size: 128,
                max_positions: 16,
                projection: [32, 16],
            },
            steps,
            batch_size: 16,
            mask: MaskPolicy::default(),
            opt: JointLossConfig {
                stage: 1,
                lr: 1e-3,
                warmup_steps: 20,
                ..JointLossConfig::default()
            },
        }
    }

    #[test]
    fn stage1_with_zero_steps_returns_the_initialization() {
        let w = tiny_world();
        let tok = world_tokenizer(&w, 16);
        let cfg = small_stage1_cfg(0);
        let (params, rows) = pretrain_stage1(&w.corpus, &tok, &cfg, 99).unwrap();
        assert!(rows.is_empty());
        let init = EncoderParams::init(
            &cfg.encoder,
            crate::rng::substream_seed(99, "pretrain.stage1.init"),
        )
        .unwrap();
        assert_eq!(params.data(), init.data());
    }

    #[test]
    fn stage1_is_deterministic_in_the_seed() {
        let w = tiny_world();
        let tok = world_tokenizer(&w, 16);
        let cfg = small_stage1_cfg(5);
        let (a, rows_a) = pretrain_stage1(&w.corpus, &tok, &cfg, 42).unwrap();
        let (b, rows_b) = pretrain_stage1(&w.corpus, &tok, &cfg, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(rows_a, rows_b);
        let (c, _) = pretrain_stage1(&w.corpus, &tok, &cfg, 43).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn stage1_beats_the_mlm_quality_bar() {
        // Planted corpus: topical token slices over a 64-token vocabulary.
        // The bar is 0.8 * ln(vocab), i.e. the loss must end at least 20%
        // below the uniform-prediction plateau.
        let w = generate_world(
            &WorldConfig {
                n_topics: 2,
                n_users: 40,
                n_tweets: 150,
                vocab_size: 64,
                tokens_per_tweet: 8,
                noise_rate: 0.05,
                relations: vec!["fave".into()],
                edges_per_user: 10,
                user_dim: 8,
                engagement_focus: 50.0,
            },
            31,
        )
        .unwrap();
        let tok = world_tokenizer(&w, 16);
        let cfg = Stage1Config {
            encoder: EncoderConfig {
                layers: 2,
                d_model: 32,
                heads: 2,
                d_ff: 64,
                vocab_size: 512,
                max_positions: 16,
                projection: [32, 16],
            },
            steps: 700,
            batch_size: 16,
            mask: MaskPolicy::default(),
            opt: JointLossConfig {
                stage: 1,
                lr: 2e-3,
                warmup_steps: 50,
                ..JointLossConfig::default()
            },
        };
        let (_, rows) = pretrain_stage1(&w.corpus, &tok, &cfg, 5).unwrap();
        let tail: Vec<f64> = rows.iter().rev().take(20).map(|r| r.loss_mlm).collect();
        let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
        let bar = 0.8 * (cfg.encoder.vocab_size as f64).ln();
        assert!(
            final_loss < bar,
            "final MLM loss {final_loss} did not clear the bar {bar}"
        );
    }

    fn same_topic_pairs(w: &crate::graph::synth::SyntheticWorld) -> Vec<(String, String, f64)> {
        let tweets = w.graph.tweets();
        let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); 2];
        for (i, &t) in w.tweet_topics.iter().enumerate() {
            by_topic[t as usize].push(i);
        }
        let mut pairs = Vec::new();
        for members in &by_topic {
            for chunk in members.chunks(2) {
                if let [a, b] = chunk {
                    pairs.push((tweets[*a].clone(), tweets[*b].clone(), 0.1));
                }
            }
        }
        pairs
    }

    fn stage2_cfg(steps: usize) -> Stage2Config {
        Stage2Config {
            steps,
            mask: MaskPolicy::default(),
            contrastive: ContrastiveConfig {
                temperature: 0.1,
                batch_pairs: 8,
            },
            opt: JointLossConfig {
                lambda: 0.05,
                lr: 1e-3,
                warmup_steps: 20,
                clip_norm: 1.0,
                stage: 2,
            },
        }
    }

    #[test]
    fn stage2_rejects_empty_or_dangling_pair_sets() {
        let w = tiny_world();
        let tok = world_tokenizer(&w, 16);
        let cfg = small_stage1_cfg(0);
        let (init, _) = pretrain_stage1(&w.corpus, &tok, &cfg, 1).unwrap();

        let err = pretrain_stage2(&init, &w.corpus, &tok, &[], &stage2_cfg(1), 2).unwrap_err();
        assert!(err.to_string().contains("non-empty"), "{err}");

        let pairs = vec![(
            w.graph.tweets()[0].clone(),
            "t999999".to_string(),
            0.1,
        )];
        let err =
            pretrain_stage2(&init, &w.corpus, &tok, &pairs, &stage2_cfg(1), 2).unwrap_err();
        assert!(err.to_string().contains("t999999"), "{err}");
    }

    #[test]
    fn smoothed_joint_loss_decreases_over_training() {
        let w = tiny_world();
        let tok = world_tokenizer(&w, 16);
        let (init, _) = pretrain_stage1(&w.corpus, &tok, &small_stage1_cfg(0), 3).unwrap();
        let pairs = same_topic_pairs(&w);
        assert!(pairs.len() >= 20);
        let (_, rows) = pretrain_stage2(&init, &w.corpus, &tok, &pairs, &stage2_cfg(200), 4).unwrap();
        assert_eq!(rows.len(), 200);
        let head: f64 = rows[..20].iter().map(|r| r.loss_total).sum::<f64>() / 20.0;
        let tail: f64 = rows[180..].iter().map(|r| r.loss_total).sum::<f64>() / 20.0;
        assert!(
            tail < head,
            "smoothed loss rose: first-20 mean {head}, last-20 mean {tail}"
        );
    }

    // At the start of stage 2 the projection head is untrained and every
    // projected [CLS] vector points essentially the same way (within- and
    // cross-topic cosines are both ~0.99), so the meaningful measure of
    // social alignment is the within-minus-cross separation, which starts
    // near zero and must widen as the contrastive objective organizes z.
    #[test]
    fn stage2_widens_topic_separation_of_projections() {
        let w = tiny_world();
        let tok = world_tokenizer(&w, 16);
        let (init, _) = pretrain_stage1(&w.corpus, &tok, &small_stage1_cfg(200), 8).unwrap();
        let pairs = same_topic_pairs(&w);
        let (trained, _) =
            pretrain_stage2(&init, &w.corpus, &tok, &pairs, &stage2_cfg(150), 9).unwrap();

        let topic_cosines = |params: &EncoderParams| -> (f64, f64) {
            let tweets = w.graph.tweets();
            let mut zs: Vec<Vec<f64>> = Vec::with_capacity(tweets.len());
            for id in tweets {
                let seq = tok.tokenize(w.corpus.text(id).unwrap());
                let fwd = encoder_forward(params, std::slice::from_ref(&seq), false).unwrap();
                let z = project(params, fwd.cls(0)).unwrap();
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                zs.push(z.iter().map(|v| v / norm).collect());
            }
            let mut within = (0.0, 0usize);
            let mut cross = (0.0, 0usize);
            for i in 0..zs.len() {
                for j in i + 1..zs.len() {
                    let cos: f64 = zs[i].iter().zip(&zs[j]).map(|(a, b)| a * b).sum();
                    if w.tweet_topics[i] == w.tweet_topics[j] {
                        within.0 += cos;
                        within.1 += 1;
                    } else {
                        cross.0 += cos;
                        cross.1 += 1;
                    }
                }
            }
            (within.0 / within.1 as f64, cross.0 / cross.1 as f64)
        };

        let (before_within, before_cross) = topic_cosines(&init);
        let (after_within, after_cross) = topic_cosines(&trained);
        let before_gap = before_within - before_cross;
        let after_gap = after_within - after_cross;
        assert!(
            after_gap > before_gap,
            "separation shrank: before {before_within:.4}-{before_cross:.4}, \
             after {after_within:.4}-{after_cross:.4}"
        );
        assert!(
            after_gap > 0.3,
            "weak final separation: within {after_within:.4}, cross {after_cross:.4}"
        );
    }
}
