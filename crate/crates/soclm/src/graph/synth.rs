//! Synthetic social world with planted topic structure.
//!
//! Tweets and users are assigned topics round-robin. Tweet text draws mostly
//! from a per-topic vocabulary slice, users engage mostly with same-topic
//! tweets, and user vectors cluster around per-topic means — so engagement,
//! text, and labels all carry recoverable signal about the same latent topics.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Corpus, EngagementGraph, EngagementRecord, LabelSet};
use crate::rng;

/// Probability that a tweet token comes from its topic slice rather than the
/// shared background vocabulary.
const TOPIC_TOKEN_RATE: f64 = 0.6;
/// Std-dev of per-component noise added to a topic mean to form user vectors.
const USER_NOISE_STD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_topics: usize,
    pub n_users: usize,
    pub n_tweets: usize,
    /// Size of the token vocabulary tweet text is drawn from.
    pub vocab_size: usize,
    pub tokens_per_tweet: usize,
    /// Fraction of edges pointed at a tweet outside the user's topic.
    pub noise_rate: f64,
    pub relations: Vec<String>,
    #[serde(default = "default_edges_per_user")]
    pub edges_per_user: usize,
    #[serde(default = "default_user_dim")]
    pub user_dim: usize,
    /// Sharpness of within-topic taste for the first relation. Users and
    /// tweets carry a latent position in [0, 1]; a same-topic engagement via
    /// the first relation picks tweet t with probability
    /// ∝ exp(−focus·(x_user − y_tweet)²), while the remaining relations are
    /// broadcast-style and pick uniformly inside the topic. 0 = all uniform.
    #[serde(default = "default_engagement_focus")]
    pub engagement_focus: f64,
}

fn default_edges_per_user() -> usize {
    10
}

fn default_user_dim() -> usize {
    16
}

fn default_engagement_focus() -> f64 {
    50.0
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_topics: 4,
            n_users: 300,
            n_tweets: 1200,
            vocab_size: 512,
            tokens_per_tweet: 12,
            noise_rate: 0.05,
            relations: vec!["fave".into(), "retweet".into(), "reply".into()],
            edges_per_user: default_edges_per_user(),
            user_dim: default_user_dim(),
            engagement_focus: default_engagement_focus(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidInput(msg));
        if self.n_topics < 2 {
            return err(format!("n_topics must be >= 2, got {}", self.n_topics));
        }
        if self.n_tweets < self.n_topics {
            return err(format!(
                "n_tweets ({}) must cover every topic ({})",
                self.n_tweets, self.n_topics
            ));
        }
        if self.n_users == 0 {
            return err("n_users must be > 0".into());
        }
        if self.vocab_size <= self.n_topics {
            return err(format!(
                "vocab_size ({}) must exceed n_topics ({})",
                self.vocab_size, self.n_topics
            ));
        }
        if self.tokens_per_tweet == 0 {
            return err("tokens_per_tweet must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return err(format!(
                "noise_rate must be in [0, 1), got {}",
                self.noise_rate
            ));
        }
        if self.relations.is_empty() {
            return err("relations must be non-empty".into());
        }
        let mut sorted = self.relations.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.relations.len() {
            return err("relations contain duplicates".into());
        }
        if self.edges_per_user == 0 {
            return err("edges_per_user must be > 0".into());
        }
        if self.user_dim == 0 {
            return err("user_dim must be > 0".into());
        }
        if !(self.engagement_focus >= 0.0) {
            return err(format!(
                "engagement_focus must be >= 0, got {}",
                self.engagement_focus
            ));
        }
        Ok(())
    }
}

/// A generated world. Topic assignments are exposed so tests can measure the
/// planted structure directly.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub graph: EngagementGraph,
    pub corpus: Corpus,
    pub labels: LabelSet,
    pub records: Vec<EngagementRecord>,
    /// Topic of each user, aligned with `graph.users()`.
    pub user_topics: Vec<u32>,
    /// Topic of each tweet, aligned with `graph.tweets()`.
    pub tweet_topics: Vec<u32>,
    /// Latent within-topic position of each user, aligned with `graph.users()`.
    pub user_positions: Vec<f64>,
    /// Latent within-topic position of each tweet, aligned with `graph.tweets()`.
    pub tweet_positions: Vec<f64>,
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let k = config.n_topics;

    // Vocabulary: one slice per topic at the front, shared background after.
    let slice = (config.vocab_size / (2 * k)).max(1);
    let background_start = (slice * k).min(config.vocab_size - 1);
    let token = |i: usize| format!("tok{i:04}");

    // Tweets, texts, and labels. Ids are zero-padded so lexicographic order
    // matches creation order.
    let tweet_ids: Vec<String> = (0..config.n_tweets).map(|i| format!("t{i:06}")).collect();
    let tweet_topics: Vec<u32> = (0..config.n_tweets).map(|i| (i % k) as u32).collect();
    let mut corpus = Corpus::default();
    let mut labels = LabelSet::default();
    for (i, id) in tweet_ids.iter().enumerate() {
        let topic = tweet_topics[i] as usize;
        let mut words = Vec::with_capacity(config.tokens_per_tweet);
        for _ in 0..config.tokens_per_tweet {
            let t = if rng.random::<f64>() < TOPIC_TOKEN_RATE {
                topic * slice + rng.random_range(0..slice)
            } else {
                rng.random_range(background_start..config.vocab_size)
            };
            words.push(token(t));
        }
        corpus.push(id, &words.join(" "))?;
        labels.insert(id, &format!("topic{topic}"));
    }
    let tweets_by_topic: Vec<Vec<usize>> = (0..k)
        .map(|t| (0..config.n_tweets).filter(|&i| i % k == t).collect())
        .collect();
    let tweet_pos: Vec<f64> = (0..config.n_tweets).map(|_| rng.random::<f64>()).collect();

    // Users and their engagements. The first relation tracks personal taste
    // (weight exp(−focus·(x_user − y_tweet)²) over same-topic tweets), giving
    // held-out edges of that relation a rankable signal; the other relations
    // spread uniformly across the topic and glue it together.
    let user_ids: Vec<String> = (0..config.n_users).map(|j| format!("u{j:06}")).collect();
    let user_topics: Vec<u32> = (0..config.n_users).map(|j| (j % k) as u32).collect();
    let user_pos: Vec<f64> = (0..config.n_users).map(|_| rng.random::<f64>()).collect();
    let mut graph = EngagementGraph::default();
    let mut edge_users = Vec::new();
    for (j, uid) in user_ids.iter().enumerate() {
        let topic = user_topics[j] as usize;
        let pool = &tweets_by_topic[topic];
        let weights: Vec<f64> = pool
            .iter()
            .map(|&t| (-config.engagement_focus * (user_pos[j] - tweet_pos[t]).powi(2)).exp())
            .collect();
        let taste = WeightedIndex::new(&weights).expect("positive weights");
        for _ in 0..config.edges_per_user {
            let rel_idx = rng.random_range(0..config.relations.len());
            let tweet = if rng.random::<f64>() < config.noise_rate {
                // Uniform over tweets outside the user's topic.
                loop {
                    let t = rng.random_range(0..config.n_tweets);
                    if t % k != topic {
                        break t;
                    }
                }
            } else if rel_idx == 0 {
                pool[taste.sample(&mut rng)]
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            graph.add_event(uid, &tweet_ids[tweet], &config.relations[rel_idx]);
            edge_users.push(j);
        }
    }

    // User vectors: per-topic Gaussian means, a fresh noisy draw per record.
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let topic_means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..config.user_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut records = Vec::with_capacity(graph.edges().len());
    for (e, &j) in graph.edges().iter().zip(&edge_users) {
        let mean = &topic_means[user_topics[j] as usize];
        let user_vector: Vec<f64> = mean
            .iter()
            .map(|m| m + USER_NOISE_STD * normal.sample(&mut rng))
            .collect();
        records.push(EngagementRecord {
            user_vector,
            tweet_id: graph.tweet_id(e.tweet).to_string(),
        });
    }

    // Entity interning order can differ from creation order only for tweets
    // (they enter the graph as engaged), so re-align tweet-side metadata.
    let creation_index: std::collections::HashMap<&str, usize> = tweet_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut aligned_tweet_topics = Vec::with_capacity(graph.n_tweets());
    let mut aligned_tweet_pos = Vec::with_capacity(graph.n_tweets());
    for id in graph.tweets() {
        let i = creation_index[id.as_str()];
        aligned_tweet_topics.push(tweet_topics[i]);
        aligned_tweet_pos.push(tweet_pos[i]);
    }
    Ok(SyntheticWorld {
        graph,
        corpus,
        labels,
        records,
        user_topics,
        tweet_topics: aligned_tweet_topics,
        user_positions: user_pos,
        tweet_positions: aligned_tweet_pos,
    })
}
