//! Engagement graph data model: typed user→tweet edges, the tweet corpus,
//! class labels, and per-engagement user-vector records, plus splitting and
//! summary statistics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub mod io;
pub mod synth;

/// One engagement event. Indices refer to the owning graph's entity lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub user: u32,
    pub tweet: u32,
    pub relation: u16,
}

/// Directed bipartite multigraph of user→tweet engagements with typed edges.
///
/// Users, tweets, and relations are interned in first-appearance order, so a
/// graph rebuilt from its own serialized form compares equal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngagementGraph {
    users: Vec<String>,
    tweets: Vec<String>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    user_index: HashMap<String, u32>,
    tweet_index: HashMap<String, u32>,
}

impl EngagementGraph {
    /// Record one engagement event, interning unseen entities and relations.
    pub fn add_event(&mut self, user: &str, tweet: &str, relation: &str) {
        let user = intern(&mut self.users, &mut self.user_index, user);
        let tweet = intern(&mut self.tweets, &mut self.tweet_index, tweet);
        let relation = match self.relations.iter().position(|r| r == relation) {
            Some(i) => i as u16,
            None => {
                self.relations.push(relation.to_string());
                (self.relations.len() - 1) as u16
            }
        };
        self.edges.push(Edge {
            user,
            tweet,
            relation,
        });
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_tweets(&self) -> usize {
        self.tweets.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn tweets(&self) -> &[String] {
        &self.tweets
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn user_id(&self, idx: u32) -> &str {
        &self.users[idx as usize]
    }

    pub fn tweet_id(&self, idx: u32) -> &str {
        &self.tweets[idx as usize]
    }

    pub fn user_idx(&self, id: &str) -> Option<u32> {
        self.user_index.get(id).copied()
    }

    pub fn tweet_idx(&self, id: &str) -> Option<u32> {
        self.tweet_index.get(id).copied()
    }

    /// Keep only edges passing the filter. Entity lists are preserved so
    /// indices stay valid across subsets.
    pub fn retain_edges(&self, keep: impl Fn(&Edge) -> bool) -> EngagementGraph {
        let mut out = self.clone();
        out.edges.retain(|e| keep(e));
        out
    }

    /// Keep only edges whose tweet id passes the filter.
    pub fn filter_by_tweet(&self, keep: impl Fn(&str) -> bool) -> EngagementGraph {
        self.retain_edges(|e| keep(&self.tweets[e.tweet as usize]))
    }
}

fn intern(list: &mut Vec<String>, index: &mut HashMap<String, u32>, id: &str) -> u32 {
    if let Some(&i) = index.get(id) {
        return i;
    }
    let i = list.len() as u32;
    list.push(id.to_string());
    index.insert(id.to_string(), i);
    i
}

/// Tweet texts, id-unique, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn push(&mut self, id: &str, text: &str) -> Result<()> {
        if self.index.contains_key(id) {
            return Err(Error::InvalidInput(format!("duplicate tweet id {id:?}")));
        }
        self.index.insert(id.to_string(), self.entries.len());
        self.entries.push((id.to_string(), text.to_string()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn text(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.entries[i].1.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

/// Hashtag-style class labels over tweets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    class_names: Vec<String>,
    entries: Vec<(String, u32)>,
    index: HashMap<String, u32>,
}

impl LabelSet {
    /// Label a tweet, interning the class name on first appearance.
    pub fn insert(&mut self, tweet_id: &str, class_name: &str) {
        let class = match self.class_names.iter().position(|c| c == class_name) {
            Some(i) => i as u32,
            None => {
                self.class_names.push(class_name.to_string());
                (self.class_names.len() - 1) as u32
            }
        };
        self.index.insert(tweet_id.to_string(), class);
        self.entries.push((tweet_id.to_string(), class));
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, tweet_id: &str) -> Option<u32> {
        self.index.get(tweet_id).copied()
    }

    pub fn entries(&self) -> &[(String, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every labeled tweet must exist in the corpus.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        for (id, _) in &self.entries {
            if !corpus.contains(id) {
                return Err(Error::InvalidInput(format!(
                    "labeled tweet {id:?} missing from corpus"
                )));
            }
        }
        Ok(())
    }
}

/// One engagement observation: a dense user vector and the engaged tweet.
#[derive(Debug, Clone, PartialEq)]
pub struct EngagementRecord {
    pub user_vector: Vec<f64>,
    pub tweet_id: String,
}

/// Tweet-level train/dev/test partition.
#[derive(Debug, Clone)]
pub struct TweetSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl TweetSplit {
    pub fn train_set(&self) -> HashSet<&str> {
        self.train.iter().map(|s| s.as_str()).collect()
    }

    pub fn dev_set(&self) -> HashSet<&str> {
        self.dev.iter().map(|s| s.as_str()).collect()
    }

    pub fn test_set(&self) -> HashSet<&str> {
        self.test.iter().map(|s| s.as_str()).collect()
    }
}

/// Partition tweets into train/dev/test by the given ratios.
///
/// The tweet is the splitting unit; engagement records follow their tweet.
/// Dev and test sizes are floored, train takes the remainder, so 10 tweets at
/// (0.8, 0.1, 0.1) split as (8, 1, 1).
pub fn split_tweets(tweet_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<TweetSplit> {
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "split ratios must all be > 0, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    let mut ids: Vec<String> = tweet_ids.to_vec();
    let mut rng = rng::seeded(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_dev = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_dev - n_test;
    let train = ids[..n_train].to_vec();
    let dev = ids[n_train..n_train + n_dev].to_vec();
    let test = ids[n_train + n_dev..].to_vec();
    Ok(TweetSplit { train, dev, test })
}

/// Records whose tweet falls in the given id set, in input order.
pub fn records_for<'a>(
    records: &'a [EngagementRecord],
    tweet_ids: &HashSet<&str>,
) -> Vec<&'a EngagementRecord> {
    records
        .iter()
        .filter(|r| tweet_ids.contains(r.tweet_id.as_str()))
        .collect()
}

/// Summary counts over a graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_users: usize,
    pub n_tweets: usize,
    pub n_edges: usize,
    pub relation_counts: BTreeMap<String, u64>,
    pub user_degree_hist: BTreeMap<u32, u64>,
    pub tweet_degree_hist: BTreeMap<u32, u64>,
}

impl GraphStats {
    pub fn relation_count(&self, name: &str) -> u64 {
        self.relation_counts.get(name).copied().unwrap_or(0)
    }
}

pub fn graph_stats(graph: &EngagementGraph) -> GraphStats {
    let mut relation_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut user_deg = vec![0u64; graph.n_users()];
    let mut tweet_deg = vec![0u64; graph.n_tweets()];
    for e in graph.edges() {
        *relation_counts
            .entry(graph.relations()[e.relation as usize].clone())
            .or_insert(0) += 1;
        user_deg[e.user as usize] += 1;
        tweet_deg[e.tweet as usize] += 1;
    }
    let mut user_degree_hist = BTreeMap::new();
    for d in user_deg {
        *user_degree_hist.entry(d as u32).or_insert(0) += 1;
    }
    let mut tweet_degree_hist = BTreeMap::new();
    for d in tweet_deg {
        *tweet_degree_hist.entry(d as u32).or_insert(0) += 1;
    }
    GraphStats {
        n_users: graph.n_users(),
        n_tweets: graph.n_tweets(),
        n_edges: graph.edges().len(),
        relation_counts,
        user_degree_hist,
        tweet_degree_hist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_edge_graph() -> EngagementGraph {
        let mut g = EngagementGraph::default();
        g.add_event("u1", "t1", "fave");
        g.add_event("u2", "t1", "reply");
        g
    }

    #[test]
    fn interning_is_first_appearance_order() {
        let g = two_edge_graph();
        assert_eq!(g.n_users(), 2);
        assert_eq!(g.n_tweets(), 1);
        assert_eq!(g.relations(), &["fave".to_string(), "reply".to_string()]);
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn duplicate_events_are_kept_as_multi_edges() {
        let mut g = EngagementGraph::default();
        g.add_event("u1", "t1", "fave");
        g.add_event("u1", "t1", "fave");
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn stats_count_relations_and_mass() {
        let g = two_edge_graph();
        let s = graph_stats(&g);
        assert_eq!(s.relation_count("fave"), 1);
        assert_eq!(s.relation_count("reply"), 1);
        assert_eq!(s.relation_count("retweet"), 0);
        let mass: u64 = s.tweet_degree_hist.iter().map(|(d, c)| *d as u64 * c).sum();
        assert_eq!(mass, 2);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let ids: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let s = split_tweets(&ids, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_rejects_zero_ratio() {
        let ids: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        assert!(split_tweets(&ids, [1.0, 0.0, 0.0], 3).is_err());
        assert!(split_tweets(&ids, [0.5, 0.3, 0.1], 3).is_err());
    }

    #[test]
    fn splits_partition_the_tweet_set_for_many_seeds() {
        let ids: Vec<String> = (0..137).map(|i| format!("t{i}")).collect();
        for seed in 0..20 {
            let s = split_tweets(&ids, [0.8, 0.1, 0.1], seed).unwrap();
            let mut all: Vec<&String> =
                s.train.iter().chain(&s.dev).chain(&s.test).collect();
            assert_eq!(all.len(), ids.len());
            all.sort();
            all.dedup();
            assert_eq!(all.len(), ids.len(), "splits overlap at seed {seed}");
        }
    }

    #[test]
    fn different_seeds_give_different_trains_of_equal_size() {
        let ids: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
        let a = split_tweets(&ids, [0.8, 0.1, 0.1], 1).unwrap();
        let b = split_tweets(&ids, [0.8, 0.1, 0.1], 2).unwrap();
        assert_eq!(a.train.len(), 800);
        assert_eq!(b.train.len(), 800);
        let sa: HashSet<_> = a.train.iter().collect();
        let sb: HashSet<_> = b.train.iter().collect();
        assert_ne!(sa, sb);
    }

    #[test]
    fn corpus_rejects_duplicate_ids() {
        let mut c = Corpus::default();
        c.push("t1", "hello").unwrap();
        assert!(c.push("t1", "again").is_err());
    }

    #[test]
    fn labels_validate_against_corpus() {
        let mut c = Corpus::default();
        c.push("t1", "hello").unwrap();
        let mut l = LabelSet::default();
        l.insert("t1", "a");
        assert!(l.validate_against(&c).is_ok());
        l.insert("t2", "b");
        assert!(l.validate_against(&c).is_err());
    }
}
