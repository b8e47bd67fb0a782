//! Evaluation surface: frozen-feature extraction, engagement prediction with
//! HITS@k, feature-based and fine-tuned hashtag classification, and
//! supervision-budget sweeps.
//!
//! Tweet features come from a trained encoder and stay fixed while the
//! engagement predictor or the feature-based classifier trains on top of
//! them; fine-tuning instead updates the encoder end to end. All training
//! and sampling here is pure given a seed.

pub mod io;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    combined_from_forward, encoder_backward, encoder_forward, mean_nonspecial, EncoderParams,
    TokenSequence, Tokenizer,
};
use crate::error::{Error, Result};
use crate::graph::{Corpus, EngagementRecord, LabelSet};
use crate::pretrain::AdamState;
use crate::rng;

/// Batch width used when running the encoder over a corpus.
const EMBED_BATCH: usize = 32;

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// How a tweet's token states are pooled into one feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Final hidden state of `[CLS]`.
    Cls,
    /// Mean over content-token states.
    Mean,
    /// `[CLS]` concatenated with the content mean (`2 * d_model` wide).
    Combined,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Combined => "combined",
        })
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            "combined" => Ok(Pooling::Combined),
            other => Err(Error::InvalidInput(format!(
                "unknown pooling {other:?}; expected cls, mean, or combined"
            ))),
        }
    }
}

/// Id-aligned dense feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    ids: Vec<String>,
    data: Vec<f64>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl Features {
    pub fn new(ids: Vec<String>, data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim.max(1),
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {bad}")));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate feature id {id:?}")));
            }
        }
        Ok(Features {
            ids,
            data,
            dim,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.row_index(id).map(|i| self.row(i))
    }
}

/// Embeds every corpus tweet with the frozen encoder under the chosen
/// pooling. Features are id-aligned with corpus order and deterministic.
pub fn embed_tweets(
    params: &EncoderParams,
    tok: &Tokenizer,
    corpus: &Corpus,
    pooling: Pooling,
) -> Result<Features> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let d = params.config().d_model;
    let dim = match pooling {
        Pooling::Cls | Pooling::Mean => d,
        Pooling::Combined => 2 * d,
    };
    let entries = corpus.entries();
    let mut ids = Vec::with_capacity(entries.len());
    let mut data = Vec::with_capacity(entries.len() * dim);
    for chunk in entries.chunks(EMBED_BATCH) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|(_, text)| tok.tokenize(text)).collect();
        let fwd = encoder_forward(params, &seqs, false)?;
        for (b, (id, _)) in chunk.iter().enumerate() {
            ids.push(id.clone());
            match pooling {
                Pooling::Cls => data.extend_from_slice(fwd.cls(b)),
                Pooling::Mean => data.extend(mean_nonspecial(&fwd, b)),
                Pooling::Combined => data.extend(combined_from_forward(&fwd, b)),
            }
        }
    }
    Features::new(ids, data, dim)
}

// ---------------------------------------------------------------------------
// Engagement prediction
// ---------------------------------------------------------------------------

/// Tweet-sampling distribution with weights proportional to
/// `frequency^(3/4)`.
#[derive(Debug, Clone)]
pub struct NegativeDistribution {
    rows: Vec<usize>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl NegativeDistribution {
    /// Builds the distribution from `(feature row, frequency)` counts.
    pub fn from_counts(counts: &[(usize, u64)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidInput(
                "negative distribution needs at least one tweet".into(),
            ));
        }
        let mut rows = Vec::with_capacity(counts.len());
        let mut weights = Vec::with_capacity(counts.len());
        for &(row, freq) in counts {
            if freq == 0 {
                return Err(Error::InvalidInput(format!(
                    "tweet row {row} has zero frequency"
                )));
            }
            rows.push(row);
            weights.push((freq as f64).powf(0.75));
        }
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(NegativeDistribution {
            rows,
            probs,
            cumulative,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Probability assigned to the i-th entry.
    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Feature row of the i-th entry.
    pub fn row(&self, i: usize) -> usize {
        self.rows[i]
    }

    /// Samples one feature row.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let idx = self.cumulative.partition_point(|&c| c < u);
        self.rows[idx.min(self.rows.len() - 1)]
    }
}

/// Engagement-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngagementConfig {
    /// Shared projection width for users and tweets.
    pub d_p: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negative tweets sampled per positive record.
    pub negatives: usize,
}

impl Default for EngagementConfig {
    fn default() -> Self {
        EngagementConfig {
            d_p: 128,
            lr: 1e-3,
            epochs: 10,
            batch_size: 64,
            negatives: 5,
        }
    }
}

impl EngagementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_p == 0 {
            return Err(Error::config("engagement.d_p", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("engagement.lr", "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::config("engagement.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("engagement.batch_size", "must be at least 1"));
        }
        if self.negatives == 0 {
            return Err(Error::config("engagement.negatives", "must be at least 1"));
        }
        Ok(())
    }
}

/// Bilinear engagement scorer: users and tweets project into a shared space
/// and the engagement probability is the sigmoid of their dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct EngagementPredictor {
    /// `d_u x d_p`, row-major.
    w_u: Vec<f64>,
    /// `d_e x d_p`, row-major.
    w_t: Vec<f64>,
    d_u: usize,
    d_e: usize,
    d_p: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, computed stably.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

impl EngagementPredictor {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_u, self.d_e, self.d_p)
    }

    fn project(w: &[f64], x: &[f64], d_in: usize, d_p: usize) -> Vec<f64> {
        let mut out = vec![0.0; d_p];
        for (i, &xi) in x.iter().enumerate().take(d_in) {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * d_p..(i + 1) * d_p];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }

    /// Projects a raw user vector into the shared space.
    pub fn project_user(&self, user: &[f64]) -> Result<Vec<f64>> {
        if user.len() != self.d_u {
            return Err(Error::DimensionMismatch {
                expected: self.d_u,
                got: user.len(),
            });
        }
        Ok(Self::project(&self.w_u, user, self.d_u, self.d_p))
    }

    /// Projects a tweet feature vector into the shared space.
    pub fn project_tweet(&self, tweet: &[f64]) -> Result<Vec<f64>> {
        if tweet.len() != self.d_e {
            return Err(Error::DimensionMismatch {
                expected: self.d_e,
                got: tweet.len(),
            });
        }
        Ok(Self::project(&self.w_t, tweet, self.d_e, self.d_p))
    }
}

/// Engagement probability `sigmoid(h_u . h_t)` for one user/tweet pair.
pub fn predict_engagement(
    model: &EngagementPredictor,
    user: &[f64],
    tweet: &[f64],
) -> Result<f64> {
    let hu = model.project_user(user)?;
    let ht = model.project_tweet(tweet)?;
    let s: f64 = hu.iter().zip(&ht).map(|(a, b)| a * b).sum();
    Ok(sigmoid(s))
}

struct ResolvedRecords {
    /// (user vector index into `users`, tweet feature row).
    pairs: Vec<(usize, usize)>,
    users: Vec<Vec<f64>>,
    d_u: usize,
}

fn resolve_records(records: &[EngagementRecord], feats: &Features) -> Result<ResolvedRecords> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no engagement records".into()));
    }
    let d_u = records[0].user_vector.len();
    let mut pairs = Vec::with_capacity(records.len());
    let mut users = Vec::with_capacity(records.len());
    for r in records {
        if r.user_vector.len() != d_u {
            return Err(Error::DimensionMismatch {
                expected: d_u,
                got: r.user_vector.len(),
            });
        }
        if r.user_vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "user vector for tweet {:?}",
                r.tweet_id
            )));
        }
        let row = feats.row_index(&r.tweet_id).ok_or_else(|| {
            Error::InvalidInput(format!("record tweet {:?} has no features", r.tweet_id))
        })?;
        pairs.push((users.len(), row));
        users.push(r.user_vector.clone());
    }
    Ok(ResolvedRecords { pairs, users, d_u })
}

/// Frequency^(3/4) negative distribution over the tweets of `records`.
pub fn negative_distribution(
    records: &[EngagementRecord],
    feats: &Features,
) -> Result<NegativeDistribution> {
    let mut counts: HashMap<usize, u64> = HashMap::new();
    for r in records {
        let row = feats.row_index(&r.tweet_id).ok_or_else(|| {
            Error::InvalidInput(format!("record tweet {:?} has no features", r.tweet_id))
        })?;
        *counts.entry(row).or_insert(0) += 1;
    }
    let mut pairs: Vec<(usize, u64)> = counts.into_iter().collect();
    pairs.sort_unstable();
    NegativeDistribution::from_counts(&pairs)
}

/// One record's loss `-log sigmoid(h_u . h_t) - sum log sigmoid(-h_u . h_n)`
/// against fixed negatives. When gradient buffers are given, the record's
/// contribution (scaled by `scale`) is accumulated into them. Shared by the
/// trainer, dev-loss selection, and [`engagement_objective`].
fn record_objective(
    model: &EngagementPredictor,
    user: &[f64],
    feats: &Features,
    t: usize,
    negs: &[usize],
    scale: f64,
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let (d_u, d_e, d_p) = (model.d_u, model.d_e, model.d_p);
    let hu = EngagementPredictor::project(&model.w_u, user, d_u, d_p);
    let mut dhu = vec![0.0; d_p];
    let tweet = feats.row(t);
    let ht = EngagementPredictor::project(&model.w_t, tweet, d_e, d_p);
    let s: f64 = hu.iter().zip(&ht).map(|(a, b)| a * b).sum();
    let mut loss = -log_sigmoid(s);
    if let Some((_, g_t)) = grads.as_mut() {
        let ds = scale * (sigmoid(s) - 1.0);
        for k in 0..d_p {
            dhu[k] += ds * ht[k];
        }
        for (i, &xi) in tweet.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for k in 0..d_p {
                g_t[i * d_p + k] += ds * xi * hu[k];
            }
        }
    }
    for &n in negs {
        let neg = feats.row(n);
        let hn = EngagementPredictor::project(&model.w_t, neg, d_e, d_p);
        let sn: f64 = hu.iter().zip(&hn).map(|(a, b)| a * b).sum();
        loss -= log_sigmoid(-sn);
        if let Some((_, g_t)) = grads.as_mut() {
            let dsn = scale * sigmoid(sn);
            for k in 0..d_p {
                dhu[k] += dsn * hn[k];
            }
            for (i, &xi) in neg.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for k in 0..d_p {
                    g_t[i * d_p + k] += dsn * xi * hu[k];
                }
            }
        }
    }
    if let Some((g_u, _)) = grads.as_mut() {
        for (i, &ui) in user.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            for k in 0..d_p {
                g_u[i * d_p + k] += ui * dhu[k];
            }
        }
    }
    loss
}

/// Mean engagement objective and its gradient in `[w_u, w_t]` layout for a
/// fixed negative assignment: row `i` pairs `users[i]` with feature row
/// `positives[i]` against the feature rows in `negatives[i]`.
pub fn engagement_objective(
    model: &EngagementPredictor,
    users: &[Vec<f64>],
    positives: &[usize],
    negatives: &[Vec<usize>],
    feats: &Features,
) -> Result<(f64, Vec<f64>)> {
    if users.is_empty() || users.len() != positives.len() || users.len() != negatives.len() {
        return Err(Error::InvalidInput(
            "engagement objective needs equal, non-zero numbers of users, positives, and negative lists"
                .into(),
        ));
    }
    for u in users {
        if u.len() != model.d_u {
            return Err(Error::DimensionMismatch {
                expected: model.d_u,
                got: u.len(),
            });
        }
    }
    if feats.dim() != model.d_e {
        return Err(Error::DimensionMismatch {
            expected: model.d_e,
            got: feats.dim(),
        });
    }
    for &row in positives.iter().chain(negatives.iter().flatten()) {
        if row >= feats.len() {
            return Err(Error::InvalidInput(format!(
                "feature row {row} out of range ({} rows)",
                feats.len()
            )));
        }
    }
    let scale = 1.0 / users.len() as f64;
    let mut g_u = vec![0.0; model.w_u.len()];
    let mut g_t = vec![0.0; model.w_t.len()];
    let mut loss = 0.0;
    for i in 0..users.len() {
        loss += record_objective(
            model,
            &users[i],
            feats,
            positives[i],
            &negatives[i],
            scale,
            Some((&mut g_u, &mut g_t)),
        );
    }
    let mut grad = g_u;
    grad.extend_from_slice(&g_t);
    Ok((loss * scale, grad))
}

/// Mean negative log-likelihood of records against fixed negatives.
fn engagement_loss(
    model: &EngagementPredictor,
    resolved: &ResolvedRecords,
    feats: &Features,
    negatives: &[Vec<usize>],
) -> f64 {
    let mut total = 0.0;
    for (i, &(u, t)) in resolved.pairs.iter().enumerate() {
        total += record_objective(
            model,
            &resolved.users[u],
            feats,
            t,
            &negatives[i],
            1.0,
            None,
        );
    }
    total / resolved.pairs.len() as f64
}

/// Trains the engagement predictor on frozen tweet features by minimizing
/// `-log sigmoid(h_u . h_t) - sum log sigmoid(-h_u . h_t')` with negatives
/// drawn from the frequency^(3/4) distribution of the training records.
/// When `dev` is given, the epoch with the lowest dev loss (against dev
/// negatives fixed up front) is returned.
pub fn train_engagement_model(
    feats: &Features,
    train: &[EngagementRecord],
    dev: Option<&[EngagementRecord]>,
    cfg: &EngagementConfig,
    seed: u64,
) -> Result<EngagementPredictor> {
    cfg.validate()?;
    let resolved = resolve_records(train, feats)?;
    let dist = negative_distribution(train, feats)?;
    let d_u = resolved.d_u;
    let d_e = feats.dim();
    let d_p = cfg.d_p;

    let mut init_rng = rng::substream(seed, "engagement.init");
    let normal = rand_distr::Normal::new(0.0, 0.05).expect("valid std");
    let mut model = EngagementPredictor {
        w_u: (0..d_u * d_p)
            .map(|_| rand_distr::Distribution::sample(&normal, &mut init_rng))
            .collect(),
        w_t: (0..d_e * d_p)
            .map(|_| rand_distr::Distribution::sample(&normal, &mut init_rng))
            .collect(),
        d_u,
        d_e,
        d_p,
    };

    // Dev records and their negatives are fixed once so epoch comparisons
    // measure the model, not the sampling noise.
    let dev_resolved = dev.map(|d| resolve_records(d, feats)).transpose()?;
    let dev_negatives: Option<Vec<Vec<usize>>> = dev_resolved.as_ref().map(|dr| {
        let mut dev_rng = rng::substream(seed, "engagement.dev");
        dr.pairs
            .iter()
            .map(|_| (0..cfg.negatives).map(|_| dist.sample(&mut dev_rng)).collect())
            .collect()
    });

    let mut opt = AdamState::new(model.w_u.len() + model.w_t.len());
    let mut data_rng = rng::substream(seed, "engagement.data");
    let mut order: Vec<usize> = (0..resolved.pairs.len()).collect();
    let mut best: Option<(f64, EngagementPredictor)> = None;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut data_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g_u = vec![0.0; model.w_u.len()];
            let mut g_t = vec![0.0; model.w_t.len()];
            let scale = 1.0 / batch.len() as f64;
            for &ri in batch {
                let (u, t) = resolved.pairs[ri];
                let negs: Vec<usize> =
                    (0..cfg.negatives).map(|_| dist.sample(&mut data_rng)).collect();
                record_objective(
                    &model,
                    &resolved.users[u],
                    feats,
                    t,
                    &negs,
                    scale,
                    Some((&mut g_u, &mut g_t)),
                );
            }
            let mut grads = g_u;
            grads.extend_from_slice(&g_t);
            let mut params: Vec<f64> = model.w_u.clone();
            params.extend_from_slice(&model.w_t);
            opt.step(&mut params, &grads, cfg.lr);
            model.w_u.copy_from_slice(&params[..d_u * d_p]);
            model.w_t.copy_from_slice(&params[d_u * d_p..]);
        }
        if let (Some(dr), Some(dn)) = (&dev_resolved, &dev_negatives) {
            let dev_loss = engagement_loss(&model, dr, feats, dn);
            if best.as_ref().is_none_or(|(b, _)| dev_loss < *b) {
                best = Some((dev_loss, model.clone()));
            }
        }
    }
    let out = match best {
        Some((_, m)) => m,
        None => model,
    };
    if out.w_u.iter().chain(&out.w_t).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("engagement predictor weights".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// HITS@k
// ---------------------------------------------------------------------------

/// HITS@k evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HitsConfig {
    pub k: usize,
    pub n_candidates: usize,
}

impl Default for HitsConfig {
    fn default() -> Self {
        HitsConfig {
            k: 10,
            n_candidates: 100,
        }
    }
}

impl HitsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("hits.k", "must be at least 1"));
        }
        if self.n_candidates < 2 {
            return Err(Error::config("hits.n_candidates", "must be at least 2"));
        }
        if self.k > self.n_candidates {
            return Err(Error::config(
                "hits.k",
                format!("k {} exceeds n_candidates {}", self.k, self.n_candidates),
            ));
        }
        Ok(())
    }
}

/// HITS@k under an arbitrary scorer.
///
/// For record `r`, the engaged tweet competes against `n_candidates - 1`
/// distinct negatives drawn uniformly from `pool` (excluding the positive),
/// resampled per record. Rank is `1 +` the number of negatives scoring at
/// least the positive — ties count against the positive — and a record hits
/// when its rank is at most `k`. Returns the mean hit rate.
///
/// `score(record_index, pool_row)` must be finite.
pub fn hits_at_k_scored<F>(
    records: &[EngagementRecord],
    pool: &[String],
    cfg: &HitsConfig,
    seed: u64,
    score: F,
) -> Result<f64>
where
    F: Fn(usize, usize) -> f64,
{
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no evaluation records".into()));
    }
    if pool.len() < cfg.n_candidates {
        return Err(Error::InvalidInput(format!(
            "candidate pool holds {} tweets but n_candidates is {}",
            pool.len(),
            cfg.n_candidates
        )));
    }
    let pool_index: HashMap<&str, usize> = pool
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if pool_index.len() != pool.len() {
        return Err(Error::InvalidInput("candidate pool has duplicates".into()));
    }

    let mut rng = rng::substream(seed, "hits");
    let mut hits = 0usize;
    let mut scratch: Vec<usize> = Vec::with_capacity(pool.len());
    for (r, record) in records.iter().enumerate() {
        let pos_row = *pool_index.get(record.tweet_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "record tweet {:?} missing from the candidate pool",
                record.tweet_id
            ))
        })?;
        // Partial Fisher-Yates over the pool minus the positive: exactly
        // uniform distinct negatives.
        scratch.clear();
        scratch.extend(0..pool.len());
        scratch.swap_remove(pos_row);
        let n_neg = cfg.n_candidates - 1;
        let pos_score = score(r, pos_row);
        let mut at_least = 0usize;
        for i in 0..n_neg {
            let j = rng.random_range(i..scratch.len());
            scratch.swap(i, j);
            if score(r, scratch[i]) >= pos_score {
                at_least += 1;
            }
        }
        if at_least + 1 <= cfg.k {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// HITS@k of a trained engagement predictor over test records. The candidate
/// pool is the sorted set of distinct tweets appearing in the records.
pub fn hits_at_k_model(
    model: &EngagementPredictor,
    feats: &Features,
    records: &[EngagementRecord],
    cfg: &HitsConfig,
    seed: u64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no evaluation records".into()));
    }
    let mut pool: Vec<String> = records
        .iter()
        .map(|r| r.tweet_id.clone())
        .collect::<std::collections::BTreeSet<String>>()
        .into_iter()
        .collect();
    pool.sort();
    // Precompute projections: tweets once per pool row, users once per record.
    let mut tweet_proj = Vec::with_capacity(pool.len());
    for id in &pool {
        let row = feats
            .row_of(id)
            .ok_or_else(|| Error::InvalidInput(format!("record tweet {id:?} has no features")))?;
        tweet_proj.push(model.project_tweet(row)?);
    }
    let mut user_proj = Vec::with_capacity(records.len());
    for r in records {
        user_proj.push(model.project_user(&r.user_vector)?);
    }
    hits_at_k_scored(records, &pool, cfg, seed, |r, row| {
        user_proj[r]
            .iter()
            .zip(&tweet_proj[row])
            .map(|(a, b)| a * b)
            .sum()
    })
}

// ---------------------------------------------------------------------------
// Linear classification on frozen features
// ---------------------------------------------------------------------------

/// Multinomial logistic-regression settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// L2 penalty on the weight matrix (bias unregularized).
    pub l2: f64,
    /// Convergence tolerance on the gradient infinity norm.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            l2: 1e-4,
            tol: 1e-6,
            max_iters: 2_000,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config("classifier.l2", "must be finite and >= 0"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::config("classifier.tol", "must be positive and finite"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("classifier.max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Linear softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `n_classes x dim`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    n_classes: usize,
    dim: usize,
}

impl LinearClassifier {
    pub fn zeros(n_classes: usize, dim: usize) -> Result<Self> {
        if n_classes < 2 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "classifier needs >= 2 classes and dim >= 1, got {n_classes} x {dim}"
            )));
        }
        Ok(LinearClassifier {
            w: vec![0.0; n_classes * dim],
            b: vec![0.0; n_classes],
            n_classes,
            dim,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut out = self.b.clone();
        for (c, o) in out.iter_mut().enumerate() {
            *o += self.w[c * self.dim..(c + 1) * self.dim]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>();
        }
        Ok(out)
    }

    /// Class probabilities (softmax of the logits).
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.logits(x)?;
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in l.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in l.iter_mut() {
            *v /= total;
        }
        Ok(l)
    }

    /// Most probable class; ties resolve to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        let l = self.logits(x)?;
        let mut best = 0usize;
        for (c, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = c;
            }
        }
        Ok(best as u32)
    }
}

/// Mean cross entropy plus `l2/2 * ||W||^2`; gradient laid out as `[w, b]`.
pub fn lr_objective(
    w: &[f64],
    b: &[f64],
    n_classes: usize,
    dim: usize,
    x: &[f64],
    y: &[u32],
    l2: f64,
) -> (f64, Vec<f64>) {
    let n = y.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len() + b.len()];
    let (gw, gb) = grad.split_at_mut(w.len());
    for (r, &label) in y.iter().enumerate() {
        let row = &x[r * dim..(r + 1) * dim];
        let mut logits: Vec<f64> = b.to_vec();
        for (c, o) in logits.iter_mut().enumerate() {
            *o += w[c * dim..(c + 1) * dim]
                .iter()
                .zip(row)
                .map(|(wv, xv)| wv * xv)
                .sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[label as usize];
        for c in 0..n_classes {
            let p = (logits[c] - lse).exp();
            let d = (p - if c as u32 == label { 1.0 } else { 0.0 }) / n as f64;
            gb[c] += d;
            if d != 0.0 {
                for (g, &xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                    *g += d * xv;
                }
            }
        }
    }
    loss /= n as f64;
    let mut reg = 0.0;
    for (g, &wv) in gw.iter_mut().zip(w) {
        reg += wv * wv;
        *g += l2 * wv;
    }
    loss += 0.5 * l2 * reg;
    (loss, grad)
}

/// Trains a multinomial logistic-regression classifier on frozen features by
/// full-batch gradient descent with a backtracking line search, stopping when
/// the gradient infinity norm falls under `tol`.
pub fn train_feature_classifier(
    x: &[f64],
    dim: usize,
    y: &[u32],
    n_classes: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    if dim == 0 || y.is_empty() || x.len() != y.len() * dim {
        return Err(Error::DimensionMismatch {
            expected: y.len() * dim.max(1),
            got: x.len(),
        });
    }
    if n_classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c as usize >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let distinct: std::collections::HashSet<u32> = y.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidInput(
            "training labels cover a single class".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier features".into()));
    }

    let mut model = LinearClassifier::zeros(n_classes, dim)?;
    let mut step = 1.0f64;
    let (mut loss, mut grad) =
        lr_objective(&model.w, &model.b, n_classes, dim, x, y, cfg.l2);
    for _ in 0..cfg.max_iters {
        let ginf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if ginf < cfg.tol {
            break;
        }
        let gsq: f64 = grad.iter().map(|g| g * g).sum();
        // Backtracking (Armijo) line search along the negative gradient.
        loop {
            let mut wc = model.w.clone();
            let mut bc = model.b.clone();
            for (i, v) in wc.iter_mut().enumerate() {
                *v -= step * grad[i];
            }
            for (i, v) in bc.iter_mut().enumerate() {
                *v -= step * grad[model.w.len() + i];
            }
            let (lc, gc) = lr_objective(&wc, &bc, n_classes, dim, x, y, cfg.l2);
            if lc <= loss - 1e-4 * step * gsq {
                model.w = wc;
                model.b = bc;
                loss = lc;
                grad = gc;
                step = (step * 1.5).min(64.0);
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return Ok(model); // flat to machine precision
            }
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Macro-F1 and supervision sweeps
// ---------------------------------------------------------------------------

/// Unweighted mean of per-class F1 over all `n_classes` classes; a class
/// absent from both predictions and labels contributes 0.
pub fn macro_f1(preds: &[u32], labels: &[u32], n_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() || n_classes == 0 {
        return Err(Error::InvalidInput(
            "macro-F1 needs at least one prediction and one class".into(),
        ));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c as usize >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "class {bad} out of range for {n_classes} classes"
        )));
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[l as usize] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(total / n_classes as f64)
}

/// Median of a non-empty sample (mean of the central two for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Supervision-sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Labeled training examples retained per class at each point.
    pub budgets: Vec<usize>,
    /// Independent subsampling/training repetitions per budget.
    pub n_runs: usize,
    pub classifier: ClassifierConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            budgets: vec![2, 8, 32],
            n_runs: 5,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::config("sweep.budgets", "must be non-empty"));
        }
        if self.budgets.iter().any(|&b| b == 0) {
            return Err(Error::config("sweep.budgets", "budgets must be >= 1"));
        }
        if self.n_runs == 0 {
            return Err(Error::config("sweep.n_runs", "must be at least 1"));
        }
        self.classifier.validate()
    }
}

/// One sweep measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub budget: usize,
    pub run: usize,
    pub macro_f1: f64,
}

/// Gathers the feature rows and class labels for `ids`, erroring on any id
/// missing from either side.
pub fn labeled_rows(
    feats: &Features,
    labels: &LabelSet,
    ids: &[String],
) -> Result<(Vec<f64>, Vec<u32>)> {
    let mut x = Vec::with_capacity(ids.len() * feats.dim());
    let mut y = Vec::with_capacity(ids.len());
    for id in ids {
        let row = feats
            .row_of(id)
            .ok_or_else(|| Error::InvalidInput(format!("tweet {id:?} has no features")))?;
        let label = labels
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("tweet {id:?} has no label")))?;
        x.extend_from_slice(row);
        y.push(label);
    }
    Ok((x, y))
}

/// Trains feature-based classifiers at decreasing supervision budgets.
///
/// For every budget and run, each class keeps at most `budget` training
/// examples (all of them when a class holds fewer), sampled without
/// replacement from `train_ids`; the classifier is scored by macro-F1 on
/// `test_ids`.
pub fn supervision_sweep(
    feats: &Features,
    labels: &LabelSet,
    train_ids: &[String],
    test_ids: &[String],
    cfg: &SweepConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::InvalidInput(
            "sweep needs non-empty train and test id lists".into(),
        ));
    }
    let n_classes = labels.n_classes();
    let (_, y_test) = labeled_rows(feats, labels, test_ids)?;

    // Group the training pool by class, preserving input order.
    let mut by_class: Vec<Vec<&String>> = vec![Vec::new(); n_classes];
    for id in train_ids {
        let label = labels
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("tweet {id:?} has no label")))?;
        by_class[label as usize].push(id);
    }

    let mut rows = Vec::with_capacity(cfg.budgets.len() * cfg.n_runs);
    for &budget in &cfg.budgets {
        for run in 0..cfg.n_runs {
            let mut rng = rng::substream(seed, &format!("sweep.budget{budget}.run{run}"));
            let mut kept: Vec<String> = Vec::new();
            for members in &by_class {
                let mut pool: Vec<&String> = members.clone();
                pool.shuffle(&mut rng);
                kept.extend(pool.into_iter().take(budget).cloned());
            }
            let (x_train, y_train) = labeled_rows(feats, labels, &kept)?;
            let model =
                train_feature_classifier(&x_train, feats.dim(), &y_train, n_classes, &cfg.classifier)?;
            let preds: Result<Vec<u32>> = test_ids
                .iter()
                .map(|id| model.predict(feats.row_of(id).expect("checked above")))
                .collect();
            let f1 = macro_f1(&preds?, &y_test, n_classes)?;
            rows.push(SweepRow {
                budget,
                run,
                macro_f1: f1,
            });
        }
    }
    Ok(rows)
}

/// Per-budget medians of sweep rows, in first-appearance budget order.
pub fn sweep_medians(rows: &[SweepRow]) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = Vec::new();
    for r in rows {
        if !order.contains(&r.budget) {
            order.push(r.budget);
        }
    }
    order
        .into_iter()
        .map(|b| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.budget == b)
                .map(|r| r.macro_f1)
                .collect();
            (b, median(&vals))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Training epochs; at most 30.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 3e-4,
            batch_size: 16,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > 30 {
            return Err(Error::config(
                "finetune.epochs",
                format!("{} outside 1..=30", self.epochs),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("finetune.lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// A fine-tuned encoder with its classification head.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: EncoderParams,
    pub head: LinearClassifier,
    /// 1-based epoch whose dev macro-F1 was selected.
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Argmax class predictions from an encoder + linear head over `[CLS]`.
pub fn classify_ids(
    params: &EncoderParams,
    tok: &Tokenizer,
    head: &LinearClassifier,
    corpus: &Corpus,
    ids: &[String],
) -> Result<Vec<u32>> {
    let mut preds = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EMBED_BATCH) {
        let seqs: Result<Vec<TokenSequence>> = chunk
            .iter()
            .map(|id| {
                corpus
                    .text(id)
                    .map(|t| tok.tokenize(t))
                    .ok_or_else(|| Error::InvalidInput(format!("tweet {id:?} missing from corpus")))
            })
            .collect();
        let fwd = encoder_forward(params, &seqs?, false)?;
        for b in 0..chunk.len() {
            preds.push(head.predict(fwd.cls(b))?);
        }
    }
    Ok(preds)
}

/// Fine-tunes the encoder end to end with a linear head over `[CLS]`,
/// selecting the epoch with the best dev macro-F1 (earliest on ties).
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier(
    start: &EncoderParams,
    tok: &Tokenizer,
    corpus: &Corpus,
    labels: &LabelSet,
    train_ids: &[String],
    dev_ids: &[String],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::InvalidInput("no fine-tuning training ids".into()));
    }
    if dev_ids.is_empty() {
        return Err(Error::InvalidInput(
            "fine-tuning epoch selection needs a non-empty dev set".into(),
        ));
    }
    let n_classes = labels.n_classes();
    if n_classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    let d = start.config().d_model;

    // Resolve sequences and labels up front so bad ids fail fast.
    let resolve = |ids: &[String]| -> Result<Vec<(TokenSequence, u32)>> {
        ids.iter()
            .map(|id| {
                let text = corpus
                    .text(id)
                    .ok_or_else(|| Error::InvalidInput(format!("tweet {id:?} missing from corpus")))?;
                let label = labels
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("tweet {id:?} has no label")))?;
                Ok((tok.tokenize(text), label))
            })
            .collect()
    };
    let train = resolve(train_ids)?;
    let dev_labels: Vec<u32> = resolve(dev_ids)?.into_iter().map(|(_, l)| l).collect();

    let mut params = start.clone();
    let mut head = LinearClassifier::zeros(n_classes, d)?;
    {
        let mut head_rng = rng::substream(seed, "finetune.head");
        let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
        for v in head.w.iter_mut() {
            *v = rand_distr::Distribution::sample(&normal, &mut head_rng);
        }
    }

    let mut enc_opt = AdamState::new(params.n_params());
    let mut head_opt = AdamState::new(head.w.len() + head.b.len());
    let mut data_rng = rng::substream(seed, "finetune.data");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, EncoderParams, LinearClassifier)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut data_rng);
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<TokenSequence> = batch.iter().map(|&i| train[i].0.clone()).collect();
            let fwd = encoder_forward(&params, &seqs, true)?;
            let scale = 1.0 / batch.len() as f64;
            let mut d_hidden = vec![0.0; batch.len() * fwd.seq_len() * d];
            let mut g_head = vec![0.0; head.w.len() + head.b.len()];
            for (b, &i) in batch.iter().enumerate() {
                let label = train[i].1 as usize;
                let cls = fwd.cls(b);
                let logits = head.logits(cls)?;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse =
                    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
                for c in 0..n_classes {
                    let dl = scale * ((logits[c] - lse).exp() - if c == label { 1.0 } else { 0.0 });
                    g_head[head.w.len() + c] += dl;
                    for k in 0..d {
                        g_head[c * d + k] += dl * cls[k];
                        d_hidden[(b * fwd.seq_len()) * d + k] += dl * head.w[c * d + k];
                    }
                }
            }
            let grads = encoder_backward(&params, &fwd, &d_hidden)?;
            enc_opt.step(params.data_mut(), grads.data(), cfg.lr);
            let mut head_params: Vec<f64> = head.w.clone();
            head_params.extend_from_slice(&head.b);
            head_opt.step(&mut head_params, &g_head, cfg.lr);
            let w_len = head.w.len();
            head.w.copy_from_slice(&head_params[..w_len]);
            head.b.copy_from_slice(&head_params[w_len..]);
        }
        let preds = classify_ids(&params, tok, &head, corpus, dev_ids)?;
        let f1 = macro_f1(&preds, &dev_labels, n_classes)?;
        // Ties go to the later epoch: when dev saturates, selection should
        // not freeze training at the first saturated checkpoint.
        if best.as_ref().is_none_or(|(b, ..)| f1 >= *b) {
            best = Some((f1, epoch, params.clone(), head.clone()));
        }
    }
    let (best_dev_f1, best_epoch, params, head) = best.expect("at least one epoch ran");
    params.validate_finite()?;
    Ok(FinetuneOutcome {
        params,
        head,
        best_epoch,
        best_dev_f1,
    })
}
