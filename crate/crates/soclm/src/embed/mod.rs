//! Shallow graph embeddings: users, tweets, and per-relation translation
//! vectors trained with a negative-sampling objective and Adagrad.
//!
//! An edge (u, r, t) scores as (u + r)·t. Training minimizes
//! −[log σ(f(e)) + Σ log σ(−f(e′))] over corrupted edges e′, doing one
//! Adagrad update per positive edge in shuffled epoch order. With one thread
//! the result is bit-reproducible; with several, workers update the shared
//! table lock-free (hogwild), trading reproducibility for throughput.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, EngagementGraph};
use crate::rng;

pub mod io;

/// Which entity class a parameter row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entity {
    User,
    Tweet,
    Rel,
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::User => write!(f, "user"),
            Entity::Tweet => write!(f, "tweet"),
            Entity::Rel => write!(f, "relation"),
        }
    }
}

/// Dense embeddings for every user, tweet, and relation of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    n_users: usize,
    n_tweets: usize,
    n_rels: usize,
    users: Vec<f64>,
    tweets: Vec<f64>,
    rels: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(n_users: usize, n_tweets: usize, n_rels: usize, dim: usize) -> EmbeddingTable {
        EmbeddingTable {
            dim,
            n_users,
            n_tweets,
            n_rels,
            users: vec![0.0; n_users * dim],
            tweets: vec![0.0; n_tweets * dim],
            rels: vec![0.0; n_rels * dim],
        }
    }

    /// Word2vec-style init: i.i.d. uniform in [−0.5/d, 0.5/d].
    pub fn init(
        n_users: usize,
        n_tweets: usize,
        n_rels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> EmbeddingTable {
        let mut t = EmbeddingTable::zeros(n_users, n_tweets, n_rels, dim);
        let half = 0.5 / dim as f64;
        for v in t
            .users
            .iter_mut()
            .chain(t.tweets.iter_mut())
            .chain(t.rels.iter_mut())
        {
            *v = rng.random_range(-half..half);
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_tweets(&self) -> usize {
        self.n_tweets
    }

    pub fn n_rels(&self) -> usize {
        self.n_rels
    }

    fn store(&self, entity: Entity) -> &[f64] {
        match entity {
            Entity::User => &self.users,
            Entity::Tweet => &self.tweets,
            Entity::Rel => &self.rels,
        }
    }

    fn store_mut(&mut self, entity: Entity) -> &mut [f64] {
        match entity {
            Entity::User => &mut self.users,
            Entity::Tweet => &mut self.tweets,
            Entity::Rel => &mut self.rels,
        }
    }

    pub fn row(&self, entity: Entity, idx: u32) -> &[f64] {
        let s = idx as usize * self.dim;
        &self.store(entity)[s..s + self.dim]
    }

    pub fn row_mut(&mut self, entity: Entity, idx: u32) -> &mut [f64] {
        let s = idx as usize * self.dim;
        let dim = self.dim;
        &mut self.store_mut(entity)[s..s + dim]
    }

    pub fn user(&self, idx: u32) -> &[f64] {
        self.row(Entity::User, idx)
    }

    pub fn tweet(&self, idx: u32) -> &[f64] {
        self.row(Entity::Tweet, idx)
    }

    pub fn rel(&self, idx: u16) -> &[f64] {
        self.row(Entity::Rel, idx as u32)
    }

    /// Score of an edge under this table: (u + r)·t.
    pub fn score(&self, edge: Edge) -> f64 {
        score_edge(self.user(edge.user), self.rel(edge.relation), self.tweet(edge.tweet))
            .expect("table rows share one dim")
    }
}

/// Translation score (u + r)·t, accumulated in f64.
pub fn score_edge(u: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if u.len() != r.len() || u.len() != t.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: if u.len() != r.len() { r.len() } else { t.len() },
        });
    }
    Ok(u.iter()
        .zip(r)
        .zip(t)
        .map(|((&u, &r), &t)| (u + r) * t)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Uniform,
    Prevalence,
    /// Alternates uniform and prevalence draws, half each.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionSide {
    User,
    Tweet,
    /// A fair coin per negative picks the corrupted side.
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegSampleConfig {
    pub n_negatives: usize,
    pub strategy: NegativeStrategy,
    pub side: CorruptionSide,
}

impl Default for NegSampleConfig {
    fn default() -> Self {
        NegSampleConfig {
            n_negatives: 5,
            strategy: NegativeStrategy::Mixed,
            side: CorruptionSide::Both,
        }
    }
}

/// Draws corrupted edges for a fixed graph and sampling config.
pub struct NegativeSampler {
    cfg: NegSampleConfig,
    n_users: usize,
    n_tweets: usize,
    user_prevalence: WeightedIndex<f64>,
    tweet_prevalence: WeightedIndex<f64>,
}

impl NegativeSampler {
    pub fn new(graph: &EngagementGraph, cfg: NegSampleConfig) -> Result<NegativeSampler> {
        if cfg.n_negatives == 0 {
            return Err(Error::InvalidInput("n_negatives must be >= 1".into()));
        }
        let may_corrupt_user = cfg.side != CorruptionSide::Tweet;
        let may_corrupt_tweet = cfg.side != CorruptionSide::User;
        if may_corrupt_user && graph.n_users() < 2 {
            return Err(Error::InvalidInput(
                "user corruption needs at least 2 users".into(),
            ));
        }
        if may_corrupt_tweet && graph.n_tweets() < 2 {
            return Err(Error::InvalidInput(
                "tweet corruption needs at least 2 tweets".into(),
            ));
        }
        let mut user_freq = vec![0.0; graph.n_users()];
        let mut tweet_freq = vec![0.0; graph.n_tweets()];
        for e in graph.edges() {
            user_freq[e.user as usize] += 1.0;
            tweet_freq[e.tweet as usize] += 1.0;
        }
        let user_prevalence = WeightedIndex::new(&user_freq)
            .map_err(|e| Error::InvalidInput(format!("bad user prevalence weights: {e}")))?;
        let tweet_prevalence = WeightedIndex::new(&tweet_freq)
            .map_err(|e| Error::InvalidInput(format!("bad tweet prevalence weights: {e}")))?;
        Ok(NegativeSampler {
            cfg,
            n_users: graph.n_users(),
            n_tweets: graph.n_tweets(),
            user_prevalence,
            tweet_prevalence,
        })
    }

    /// Corrupted edges for one positive: each differs from `edge` in exactly
    /// the corrupted entity, relation preserved.
    pub fn sample(&self, edge: Edge, rng: &mut impl Rng) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.cfg.n_negatives);
        for i in 0..self.cfg.n_negatives {
            let corrupt_user = match self.cfg.side {
                CorruptionSide::User => true,
                CorruptionSide::Tweet => false,
                CorruptionSide::Both => rng.random_range(0..2) == 0,
            };
            let uniform = match self.cfg.strategy {
                NegativeStrategy::Uniform => true,
                NegativeStrategy::Prevalence => false,
                NegativeStrategy::Mixed => i % 2 == 0,
            };
            let neg = if corrupt_user {
                let user = loop {
                    let c = if uniform {
                        rng.random_range(0..self.n_users) as u32
                    } else {
                        self.user_prevalence.sample(rng) as u32
                    };
                    if c != edge.user {
                        break c;
                    }
                };
                Edge { user, ..edge }
            } else {
                let tweet = loop {
                    let c = if uniform {
                        rng.random_range(0..self.n_tweets) as u32
                    } else {
                        self.tweet_prevalence.sample(rng) as u32
                    };
                    if c != edge.tweet {
                        break c;
                    }
                };
                Edge { tweet, ..edge }
            };
            out.push(neg);
        }
        out
    }
}

/// Gradients touching only the entities of one positive + negatives sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrads {
    pub entries: BTreeMap<(Entity, u32), Vec<f64>>,
}

impl SparseGrads {
    fn accum(&mut self, entity: Entity, idx: u32, dim: usize, scale: f64, v: &[f64]) {
        let g = self
            .entries
            .entry((entity, idx))
            .or_insert_with(|| vec![0.0; dim]);
        for (gj, &vj) in g.iter_mut().zip(v) {
            *gj += scale * vj;
        }
    }
}

/// Numerically stable log(1 + e^x).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradients shared by the pure API and the lock-free trainer; the
/// getter copies a parameter row into the scratch buffer.
fn nce_core(
    dim: usize,
    get: &dyn Fn(Entity, u32, &mut [f64]),
    pos: Edge,
    negs: &[Edge],
) -> Result<(f64, SparseGrads)> {
    // Gather every touched row once.
    let mut rows: BTreeMap<(Entity, u32), Vec<f64>> = BTreeMap::new();
    let touch = |entity: Entity, idx: u32, rows: &mut BTreeMap<(Entity, u32), Vec<f64>>| {
        rows.entry((entity, idx)).or_insert_with(|| {
            let mut buf = vec![0.0; dim];
            get(entity, idx, &mut buf);
            buf
        });
    };
    touch(Entity::User, pos.user, &mut rows);
    touch(Entity::Tweet, pos.tweet, &mut rows);
    touch(Entity::Rel, pos.relation as u32, &mut rows);
    for n in negs {
        touch(Entity::User, n.user, &mut rows);
        touch(Entity::Tweet, n.tweet, &mut rows);
    }
    let row = |entity: Entity, idx: u32| -> &[f64] { &rows[&(entity, idx)] };

    let mut grads = SparseGrads::default();
    let mut ur = vec![0.0; dim];
    let mut loss = 0.0;

    // Positive term: −log σ(f) = softplus(−f); d/df = σ(f) − 1.
    let u = row(Entity::User, pos.user);
    let r = row(Entity::Rel, pos.relation as u32);
    let t = row(Entity::Tweet, pos.tweet);
    let f = score_edge(u, r, t)?;
    if !f.is_finite() {
        return Err(Error::NonFinite(format!(
            "edge score for user {} / tweet {}",
            pos.user, pos.tweet
        )));
    }
    loss += softplus(-f);
    let a = sigmoid(f) - 1.0;
    for (j, x) in ur.iter_mut().enumerate() {
        *x = u[j] + r[j];
    }
    grads.accum(Entity::User, pos.user, dim, a, t);
    grads.accum(Entity::Rel, pos.relation as u32, dim, a, t);
    grads.accum(Entity::Tweet, pos.tweet, dim, a, &ur);

    // Negative terms: −log σ(−f′) = softplus(f′); d/df′ = σ(f′).
    for n in negs {
        let u = row(Entity::User, n.user);
        let r = row(Entity::Rel, n.relation as u32);
        let t = row(Entity::Tweet, n.tweet);
        let f = score_edge(u, r, t)?;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "negative edge score for user {} / tweet {}",
                n.user, n.tweet
            )));
        }
        loss += softplus(f);
        let b = sigmoid(f);
        for (j, x) in ur.iter_mut().enumerate() {
            *x = u[j] + r[j];
        }
        grads.accum(Entity::User, n.user, dim, b, t);
        grads.accum(Entity::Rel, n.relation as u32, dim, b, t);
        grads.accum(Entity::Tweet, n.tweet, dim, b, &ur);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "nce loss at user {} / tweet {}",
            pos.user, pos.tweet
        )));
    }
    Ok((loss, grads))
}

/// Loss −[log σ(f(e)) + Σ log σ(−f(e′))] with gradients for every entity
/// appearing in the sample.
pub fn nce_loss_and_grads(
    pos: Edge,
    negs: &[Edge],
    table: &EmbeddingTable,
) -> Result<(f64, SparseGrads)> {
    nce_core(
        table.dim,
        &|entity, idx, buf| buf.copy_from_slice(table.row(entity, idx)),
        pos,
        negs,
    )
}

/// Per-parameter squared-gradient accumulators plus the step hyperparameters.
#[derive(Debug, Clone)]
pub struct AdagradState {
    pub lr: f64,
    pub eps: f64,
    acc: EmbeddingTable,
}

impl AdagradState {
    pub fn new(table: &EmbeddingTable, lr: f64, eps: f64) -> AdagradState {
        AdagradState {
            lr,
            eps,
            acc: EmbeddingTable::zeros(table.n_users, table.n_tweets, table.n_rels, table.dim),
        }
    }

    pub fn accumulator(&self, entity: Entity, idx: u32) -> &[f64] {
        self.acc.row(entity, idx)
    }
}

/// acc += g²; p −= lr·g / (√acc + eps), per touched parameter.
pub fn adagrad_step(table: &mut EmbeddingTable, grads: &SparseGrads, state: &mut AdagradState) {
    for ((entity, idx), g) in &grads.entries {
        debug_assert_eq!(g.len(), table.dim);
        let acc = state.acc.row_mut(*entity, *idx);
        let p = table.row_mut(*entity, *idx);
        for j in 0..g.len() {
            acc[j] += g[j] * g[j];
            p[j] -= state.lr * g[j] / (acc[j].sqrt() + state.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub eps: f64,
    pub negatives: NegSampleConfig,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            epochs: 10,
            lr: 0.1,
            eps: 1e-10,
            negatives: NegSampleConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be >= 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidInput(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidInput(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.threads == 0 {
            return Err(Error::InvalidInput("threads must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub table: EmbeddingTable,
    /// Mean per-edge loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

/// Shared parameter + accumulator storage for lock-free workers. Values are
/// f64 bits in relaxed atomics; with one thread this is plain memory.
struct AtomicStore {
    dim: usize,
    users: Vec<AtomicU64>,
    tweets: Vec<AtomicU64>,
    rels: Vec<AtomicU64>,
}

impl AtomicStore {
    fn from_table(t: &EmbeddingTable) -> AtomicStore {
        let conv = |v: &[f64]| v.iter().map(|x| AtomicU64::new(x.to_bits())).collect();
        AtomicStore {
            dim: t.dim,
            users: conv(&t.users),
            tweets: conv(&t.tweets),
            rels: conv(&t.rels),
        }
    }

    fn store(&self, entity: Entity) -> &[AtomicU64] {
        match entity {
            Entity::User => &self.users,
            Entity::Tweet => &self.tweets,
            Entity::Rel => &self.rels,
        }
    }

    fn load_row(&self, entity: Entity, idx: u32, buf: &mut [f64]) {
        let s = idx as usize * self.dim;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = f64::from_bits(self.store(entity)[s + j].load(Ordering::Relaxed));
        }
    }

    fn into_table(self, n_users: usize, n_tweets: usize, n_rels: usize) -> EmbeddingTable {
        let conv =
            |v: Vec<AtomicU64>| v.into_iter().map(|a| f64::from_bits(a.into_inner())).collect();
        EmbeddingTable {
            dim: self.dim,
            n_users,
            n_tweets,
            n_rels,
            users: conv(self.users),
            tweets: conv(self.tweets),
            rels: conv(self.rels),
        }
    }
}

/// One worker's pass over its slice of the shuffled edge list.
fn run_chunk(
    edges: &[Edge],
    order: &[u32],
    params: &AtomicStore,
    acc: &AtomicStore,
    sampler: &NegativeSampler,
    lr: f64,
    eps: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let dim = params.dim;
    let mut total = 0.0;
    for &ei in order {
        let pos = edges[ei as usize];
        let negs = sampler.sample(pos, rng);
        let (loss, grads) =
            nce_core(dim, &|entity, idx, buf| params.load_row(entity, idx, buf), pos, &negs)?;
        total += loss;
        for ((entity, idx), g) in &grads.entries {
            let s = *idx as usize * dim;
            let pstore = params.store(*entity);
            let astore = acc.store(*entity);
            for (j, &gj) in g.iter().enumerate() {
                let a = f64::from_bits(astore[s + j].load(Ordering::Relaxed)) + gj * gj;
                astore[s + j].store(a.to_bits(), Ordering::Relaxed);
                let p = f64::from_bits(pstore[s + j].load(Ordering::Relaxed));
                pstore[s + j].store((p - lr * gj / (a.sqrt() + eps)).to_bits(), Ordering::Relaxed);
            }
        }
    }
    Ok(total)
}

/// Train the full table by shuffled-epoch SGD over all edges.
///
/// Deterministic for `threads == 1`; more threads run hogwild and give a
/// different but still valid table each run. `epochs == 0` returns the
/// initialization unchanged.
pub fn train_embeddings(
    graph: &EngagementGraph,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if graph.edges().is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty graph".into()));
    }
    let sampler = NegativeSampler::new(graph, cfg.negatives.clone())?;
    let init = EmbeddingTable::init(
        graph.n_users(),
        graph.n_tweets(),
        graph.n_relations(),
        cfg.dim,
        &mut rng::substream(seed, "embed.init"),
    );
    let params = AtomicStore::from_table(&init);
    let acc = AtomicStore::from_table(&EmbeddingTable::zeros(
        graph.n_users(),
        graph.n_tweets(),
        graph.n_relations(),
        cfg.dim,
    ));
    let n = graph.edges().len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for ep in 0..cfg.epochs {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng::substream(seed, &format!("embed.ep{ep}.shuffle")));
        let chunk_len = n.div_ceil(cfg.threads);
        let mut total = 0.0;
        if cfg.threads == 1 {
            let mut wrng = rng::substream(seed, &format!("embed.ep{ep}.w0"));
            total = run_chunk(
                graph.edges(),
                &order,
                &params,
                &acc,
                &sampler,
                cfg.lr,
                cfg.eps,
                &mut wrng,
            )?;
        } else {
            let results: Vec<Result<f64>> = std::thread::scope(|s| {
                let handles: Vec<_> = order
                    .chunks(chunk_len)
                    .enumerate()
                    .map(|(w, chunk)| {
                        let params = &params;
                        let acc = &acc;
                        let sampler = &sampler;
                        s.spawn(move || {
                            let mut wrng = rng::substream(seed, &format!("embed.ep{ep}.w{w}"));
                            run_chunk(
                                graph.edges(),
                                chunk,
                                params,
                                acc,
                                sampler,
                                cfg.lr,
                                cfg.eps,
                                &mut wrng,
                            )
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker does not panic"))
                    .collect()
            });
            for r in results {
                total += r?;
            }
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(TrainOutput {
        table: params.into_table(graph.n_users(), graph.n_tweets(), graph.n_relations()),
        epoch_losses,
    })
}
