//! Pipeline orchestration: the staged experiment runner behind the CLI.
//!
//! A run is described by one JSON [`PipelineConfig`] with a block per stage
//! family (`world`, `twhin`, `index`, `pretrain`, `eval`) plus a root seed,
//! an output directory, and a deterministic-mode flag. Stages communicate
//! only through files under the output directory; every stage writes a
//! [`Manifest`] recording the config hash, the seed, and content digests of
//! its inputs and outputs, which is enough to re-run it in isolation.
//!
//! All randomness flows from the root seed through named substreams, one per
//! stage, so any stage can be re-run independently and reproduce its
//! artifacts byte for byte. In deterministic mode the graph-embedding stage
//! is forced to a single thread (multi-threaded embedding training is
//! lock-free and therefore run-to-run nondeterministic).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::io::{load_metrics, save_metrics, save_sweep_csv, MetricRecord};
use crate::downstream::{
    embed_tweets, hits_at_k_model, labeled_rows, macro_f1, sweep_medians, train_engagement_model,
    train_feature_classifier, ClassifierConfig, EngagementConfig, FinetuneConfig, HitsConfig,
    Pooling, SweepConfig,
};
use crate::downstream::{classify_ids, finetune_classifier, supervision_sweep};
use crate::embed::io::{load_embeddings, save_embeddings, NamedEmbeddings};
use crate::embed::{train_embeddings, TrainConfig};
use crate::encoder::io::{load_checkpoint, load_vocab, save_checkpoint, save_vocab};
use crate::encoder::Tokenizer;
use crate::error::{Error, Result};
use crate::graph::io::{
    load_corpus, load_engagement_log, load_labels, load_records, save_corpus, save_engagement_log,
    save_labels, save_records,
};
use crate::graph::synth::{generate_world, WorldConfig};
use crate::graph::{split_tweets, Corpus};
use crate::index::io::{load_index, load_pairs, save_index, save_pairs};
use crate::index::{build_index, mine_pairs, IndexConfig, IndexMode};
use crate::pretrain::io::save_loss_csv;
use crate::pretrain::{
    pretrain_stage1, pretrain_stage2, ContrastiveConfig, JointLossConfig, MaskPolicy,
    Stage1Config, Stage2Config,
};
use crate::rng;
use crate::encoder::EncoderConfig;

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

/// Pair-mining settings layered on top of a built index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    /// Neighbors kept per query tweet.
    pub k: usize,
    /// Inverted lists probed per query.
    pub nprobe: usize,
    /// Optional cosine-distance cutoff for kept pairs.
    pub max_distance: Option<f64>,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            k: 5,
            nprobe: 8,
            max_distance: None,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.nprobe == 0 {
            return Err(Error::config("nprobe", "must be at least 1"));
        }
        if let Some(d) = self.max_distance {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::config("max_distance", "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Index stage block: how the tweet-embedding index is built and mined.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexStageConfig {
    pub build: IndexConfig,
    pub mine: MineConfig,
}

impl Default for IndexStageConfig {
    fn default() -> Self {
        IndexStageConfig {
            // Exact mode by default: the default world is far too small for
            // meaningful quantization codebooks.
            build: IndexConfig {
                n_list: 8,
                m: 8,
                k_codes: 16,
                mode: IndexMode::Exact,
                seed: 0,
                train_iters: IndexConfig::default().train_iters,
            },
            mine: MineConfig::default(),
        }
    }
}

/// Tokenizer construction settings shared by both pre-training stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Vocabulary cap, reserved symbols included.
    pub vocab_cap: usize,
    /// Maximum token-sequence length, specials included.
    pub max_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_cap: 128,
            max_len: 16,
        }
    }
}

/// Pre-training stage block: tokenizer plus both stage configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainStageConfig {
    pub tokenizer: TokenizerConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for PretrainStageConfig {
    fn default() -> Self {
        PretrainStageConfig {
            tokenizer: TokenizerConfig::default(),
            stage1: Stage1Config {
                encoder: EncoderConfig {
                    layers: 2,
                    d_model: 32,
                    heads: 2,
                    d_ff: 64,
                    vocab_size: 128,
                    max_positions: 16,
                    projection: [32, 16],
                },
                steps: 200,
                batch_size: 16,
                mask: MaskPolicy::default(),
                opt: JointLossConfig {
                    stage: 1,
                    lr: 1e-3,
                    warmup_steps: 20,
                    ..JointLossConfig::default()
                },
            },
            stage2: Stage2Config {
                steps: 120,
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
            },
        }
    }
}

/// Evaluation stage block: shared split plus per-task settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// How tweet features are pooled from the encoder.
    pub pooling: Pooling,
    /// Train/dev/test fractions of the tweet split.
    pub split: [f64; 3],
    pub engagement: EngagementConfig,
    pub hits: HitsConfig,
    pub classifier: ClassifierConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pooling: Pooling::Combined,
            split: [0.7, 0.15, 0.15],
            engagement: EngagementConfig {
                d_p: 16,
                lr: 1e-2,
                epochs: 8,
                batch_size: 32,
                negatives: 4,
            },
            hits: HitsConfig {
                k: 3,
                n_candidates: 10,
            },
            classifier: ClassifierConfig::default(),
            finetune: FinetuneConfig {
                epochs: 3,
                lr: 1e-3,
                batch_size: 16,
            },
            sweep: SweepConfig {
                budgets: vec![2, 8, 32],
                n_runs: 3,
                classifier: ClassifierConfig::default(),
            },
        }
    }
}

/// The complete experiment description: one JSON document drives every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own named substream from it.
    /// Required in deterministic mode; `null` otherwise draws one per run.
    pub seed: Option<u64>,
    /// Directory all artifacts and manifests are written under.
    pub out_dir: PathBuf,
    /// When true, runs are byte-for-byte reproducible given the same config.
    pub deterministic: bool,
    pub world: WorldConfig,
    pub twhin: TrainConfig,
    pub index: IndexStageConfig,
    pub pretrain: PretrainStageConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: Some(42),
            out_dir: PathBuf::from("out"),
            deterministic: true,
            world: WorldConfig {
                n_topics: 2,
                n_users: 30,
                n_tweets: 120,
                vocab_size: 64,
                tokens_per_tweet: 6,
                noise_rate: 0.05,
                relations: vec!["fave".into()],
                edges_per_user: 12,
                user_dim: 8,
                engagement_focus: 50.0,
            },
            twhin: TrainConfig::default(),
            index: IndexStageConfig::default(),
            pretrain: PretrainStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Re-scopes a block validator's error under `path`.
fn block<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Config {
            path: path.to_string(),
            msg,
        },
        Error::Config { path: inner, msg } => Error::Config {
            path: format!("{path}.{inner}"),
            msg,
        },
        other => Error::Config {
            path: path.to_string(),
            msg: other.to_string(),
        },
    })
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deterministic && self.seed.is_none() {
            return Err(Error::config(
                "seed",
                "deterministic mode requires an explicit seed",
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir", "must not be empty"));
        }
        block("world", self.world.validate())?;
        block("twhin", self.twhin.validate())?;
        block("index.build", self.index.build.validate())?;
        block("index.mine", self.index.mine.validate())?;
        let p = &self.pretrain;
        if p.tokenizer.vocab_cap <= crate::encoder::RESERVED_TOKENS.len() {
            return Err(Error::config(
                "pretrain.tokenizer.vocab_cap",
                "must exceed the reserved-symbol count",
            ));
        }
        if p.tokenizer.max_len < 3 {
            return Err(Error::config(
                "pretrain.tokenizer.max_len",
                "must be at least 3 (two specials plus one token)",
            ));
        }
        if p.tokenizer.max_len > p.stage1.encoder.max_positions {
            return Err(Error::config(
                "pretrain.tokenizer.max_len",
                format!(
                    "exceeds encoder max_positions ({})",
                    p.stage1.encoder.max_positions
                ),
            ));
        }
        block("pretrain.stage1", p.stage1.validate())?;
        block("pretrain.stage2", p.stage2.validate())?;
        if p.stage1.opt.stage != 1 {
            return Err(Error::config("pretrain.stage1.opt.stage", "must be 1"));
        }
        if p.stage2.opt.stage != 2 {
            return Err(Error::config("pretrain.stage2.opt.stage", "must be 2"));
        }
        let s: f64 = self.eval.split.iter().sum();
        if self.eval.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "eval.split",
                format!("fractions must lie in [0, 1] and sum to 1, got {:?}", self.eval.split),
            ));
        }
        block("eval.engagement", self.eval.engagement.validate())?;
        block("eval.hits", self.eval.hits.validate())?;
        block("eval.classifier", self.eval.classifier.validate())?;
        block("eval.finetune", self.eval.finetune.validate())?;
        block("eval.sweep", self.eval.sweep.validate())?;
        Ok(())
    }

    /// The root seed for one invocation: the configured seed, or a fresh one
    /// when non-deterministic mode leaves it unset.
    pub fn effective_seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None if !self.deterministic => Ok(rand::random()),
            None => Err(Error::config(
                "seed",
                "deterministic mode requires an explicit seed",
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Config loading and --set overrides
// ---------------------------------------------------------------------------

/// Applies one `path=value` override to a JSON config document. The value is
/// parsed as JSON when possible and falls back to a plain string, so
/// `twhin.lr=0.05`, `world.relations=["fave","retweet"]`, and
/// `eval.pooling=combined` all behave as expected.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::config(spec, "override must have the form path=value")
    })?;
    if path.is_empty() {
        return Err(Error::config(spec, "override path must not be empty"));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::config(
                segments[..i].join("."),
                "is not a config section and cannot be indexed into",
            )
        })?;
        if i + 1 == segments.len() {
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert((*seg).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*seg).ok_or_else(|| {
            Error::config(segments[..=i].join("."), "unknown config section")
        })?;
    }
    unreachable!("override paths have at least one segment")
}

/// Recursively merges `patch` into `base`: objects merge key by key; every
/// other value, arrays included, replaces the base value wholesale.
fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves the layered run configuration: the built-in default document,
/// the config file deep-merged over it (so files may be partial at any
/// level), then `--set` overrides. Unknown keys anywhere are rejected with
/// their dotted path. Returns the validated config.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default()).expect("default serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let patch = serde_json::from_str::<serde_json::Value>(&text).map_err(|e| Error::Parse {
            path: p.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        deep_merge(&mut value, patch);
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: PipelineConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        Error::Config {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// One runnable pipeline stage, in dependency order; `All` runs the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    EmbedGraph,
    BuildIndex,
    MinePairs,
    Pretrain1,
    Pretrain2,
    EvalEngagement,
    EvalHashtag,
    Sweep,
    All,
}

/// Every concrete stage in execution order (excludes `All`).
pub const STAGE_ORDER: [Stage; 9] = [
    Stage::Gen,
    Stage::EmbedGraph,
    Stage::BuildIndex,
    Stage::MinePairs,
    Stage::Pretrain1,
    Stage::Pretrain2,
    Stage::EvalEngagement,
    Stage::EvalHashtag,
    Stage::Sweep,
];

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::EmbedGraph => "embed-graph",
            Stage::BuildIndex => "build-index",
            Stage::MinePairs => "mine-pairs",
            Stage::Pretrain1 => "pretrain1",
            Stage::Pretrain2 => "pretrain2",
            Stage::EvalEngagement => "eval-engagement",
            Stage::EvalHashtag => "eval-hashtag",
            Stage::Sweep => "sweep",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        let all = [
            Stage::Gen,
            Stage::EmbedGraph,
            Stage::BuildIndex,
            Stage::MinePairs,
            Stage::Pretrain1,
            Stage::Pretrain2,
            Stage::EvalEngagement,
            Stage::EvalHashtag,
            Stage::Sweep,
            Stage::All,
        ];
        all.into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage `{s}`")))
    }
}

/// All artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path) -> ArtifactPaths {
        ArtifactPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn graph(&self) -> PathBuf {
        self.root.join("world/graph.tsv")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("world/corpus.tsv")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("world/labels.tsv")
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("world/records.bin")
    }
    pub fn records_sidecar(&self) -> PathBuf {
        self.root.join("world/records.bin.ids")
    }
    pub fn user_embeddings(&self) -> PathBuf {
        self.root.join("twhin/users.emb")
    }
    pub fn tweet_embeddings(&self) -> PathBuf {
        self.root.join("twhin/tweets.emb")
    }
    pub fn twhin_losses(&self) -> PathBuf {
        self.root.join("twhin/losses.csv")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index/index.bin")
    }
    pub fn pairs(&self) -> PathBuf {
        self.root.join("index/pairs.tsv")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("pretrain/vocab.tsv")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("pretrain/stage1.ckpt")
    }
    pub fn stage1_losses(&self) -> PathBuf {
        self.root.join("pretrain/stage1_losses.csv")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("pretrain/stage2.ckpt")
    }
    pub fn stage2_losses(&self) -> PathBuf {
        self.root.join("pretrain/stage2_losses.csv")
    }
    pub fn engagement_metrics(&self) -> PathBuf {
        self.root.join("eval/engagement.json")
    }
    pub fn hashtag_metrics(&self) -> PathBuf {
        self.root.join("eval/hashtag.json")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("eval/sweep.csv")
    }
    pub fn sweep_metrics(&self) -> PathBuf {
        self.root.join("eval/sweep.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval/metrics.json")
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("manifests/{}.json", stage.name()))
    }

    /// Creates the artifact subdirectories; savers expect parents to exist.
    pub fn ensure_dirs(&self) -> Result<()> {
        for sub in ["world", "twhin", "index", "pretrain", "eval", "manifests"] {
            let dir = self.root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Errors out with the producing stage's name when an upstream artifact is
/// missing.
fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "missing artifact {}: run the `{producer}` stage first",
            path.display()
        )))
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Reproducibility record written next to every stage's artifacts. Contains
/// no timestamps: two identical runs produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Stage that produced the outputs.
    pub stage: String,
    /// Root seed of the invocation.
    pub seed: u64,
    /// SHA-256 of the full resolved config, canonically serialized.
    pub config_sha256: String,
    /// The config block governing this stage, embedded verbatim.
    pub stage_config: serde_json::Value,
    /// Content digests of consumed artifacts, keyed by path relative to the
    /// output directory.
    pub inputs: BTreeMap<String, String>,
    /// Content digests of produced artifacts.
    pub outputs: BTreeMap<String, String>,
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Content digest of a file on disk.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn digest_map(paths: &ArtifactPaths, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for f in files {
        let key = f
            .strip_prefix(&paths.root)
            .unwrap_or(f)
            .to_string_lossy()
            .into_owned();
        map.insert(key, file_digest(f)?);
    }
    Ok(map)
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

struct StageIo {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Runs one stage (or, for [`Stage::All`], every stage in order) and writes
/// its manifest(s). Returns the paths of the manifests written.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let seed = cfg.effective_seed()?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    paths.ensure_dirs()?;
    let config_sha = sha256_hex(
        serde_json::to_string(cfg)
            .expect("config serializes")
            .as_bytes(),
    );

    let mut manifests = Vec::new();
    let stages: &[Stage] = match stage {
        Stage::All => &STAGE_ORDER,
        ref s => std::slice::from_ref(s),
    };
    for &st in stages {
        let io = dispatch(cfg, &paths, seed, st)?;
        manifests.push(write_manifest(cfg, &paths, seed, &config_sha, st, &io)?);
    }
    if stage == Stage::All {
        let io = combine_metrics(&paths)?;
        manifests.push(write_manifest(cfg, &paths, seed, &config_sha, Stage::All, &io)?);
    }
    Ok(manifests)
}

fn write_manifest(
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
    seed: u64,
    config_sha: &str,
    stage: Stage,
    io: &StageIo,
) -> Result<PathBuf> {
    let stage_config = match stage {
        Stage::Gen => serde_json::to_value(&cfg.world),
        Stage::EmbedGraph => serde_json::to_value(&cfg.twhin),
        Stage::BuildIndex | Stage::MinePairs => serde_json::to_value(&cfg.index),
        Stage::Pretrain1 | Stage::Pretrain2 => serde_json::to_value(&cfg.pretrain),
        Stage::EvalEngagement | Stage::EvalHashtag | Stage::Sweep => {
            serde_json::to_value(&cfg.eval)
        }
        Stage::All => serde_json::to_value(cfg),
    }
    .expect("config blocks serialize");
    let manifest = Manifest {
        stage: stage.name().to_string(),
        seed,
        config_sha256: config_sha.to_string(),
        stage_config,
        inputs: digest_map(paths, &io.inputs)?,
        outputs: digest_map(paths, &io.outputs)?,
    };
    let path = paths.manifest(stage);
    save_json(&path, &manifest)?;
    Ok(path)
}

fn stage_seed(root: u64, stage: Stage) -> u64 {
    rng::substream_seed(root, &format!("pipeline.{}", stage.name()))
}

fn dispatch(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64, stage: Stage) -> Result<StageIo> {
    match stage {
        Stage::Gen => run_gen(cfg, paths, seed),
        Stage::EmbedGraph => run_embed_graph(cfg, paths, seed),
        Stage::BuildIndex => run_build_index(cfg, paths, seed),
        Stage::MinePairs => run_mine_pairs(cfg, paths),
        Stage::Pretrain1 => run_pretrain1(cfg, paths, seed),
        Stage::Pretrain2 => run_pretrain2(cfg, paths, seed),
        Stage::EvalEngagement => run_eval_engagement(cfg, paths, seed),
        Stage::EvalHashtag => run_eval_hashtag(cfg, paths, seed),
        Stage::Sweep => run_sweep(cfg, paths, seed),
        Stage::All => unreachable!("All is expanded by run_stage"),
    }
}

fn run_gen(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    let world = generate_world(&cfg.world, stage_seed(seed, Stage::Gen))?;
    save_engagement_log(&world.graph, &paths.graph())?;
    save_corpus(&world.corpus, &paths.corpus())?;
    save_labels(&world.labels, &paths.labels())?;
    save_records(&world.records, &paths.records())?;
    Ok(StageIo {
        inputs: vec![],
        outputs: vec![
            paths.graph(),
            paths.corpus(),
            paths.labels(),
            paths.records(),
            paths.records_sidecar(),
        ],
    })
}

fn run_embed_graph(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    require(&paths.graph(), Stage::Gen)?;
    let graph = load_engagement_log(&paths.graph())?;
    let mut tcfg = cfg.twhin.clone();
    if cfg.deterministic {
        tcfg.threads = 1;
    }
    let out = train_embeddings(&graph, &tcfg, stage_seed(seed, Stage::EmbedGraph))?;
    let dim = out.table.dim();
    let collect = |n: usize, row: &dyn Fn(u32) -> Vec<f64>| -> Vec<f64> {
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            data.extend(row(i as u32));
        }
        data
    };
    let users = NamedEmbeddings::new(
        dim,
        graph.users().to_vec(),
        collect(graph.n_users(), &|i| out.table.user(i).to_vec()),
    )?;
    let tweets = NamedEmbeddings::new(
        dim,
        graph.tweets().to_vec(),
        collect(graph.n_tweets(), &|i| out.table.tweet(i).to_vec()),
    )?;
    save_embeddings(&users, &paths.user_embeddings())?;
    save_embeddings(&tweets, &paths.tweet_embeddings())?;
    let loss_path = paths.twhin_losses();
    if let Some(parent) = loss_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = String::from("epoch,loss\n");
    for (ep, loss) in out.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{},{}\n", ep + 1, loss));
    }
    fs::write(&loss_path, text).map_err(|e| Error::io(&loss_path, e))?;
    Ok(StageIo {
        inputs: vec![paths.graph()],
        outputs: vec![
            paths.user_embeddings(),
            paths.tweet_embeddings(),
            paths.twhin_losses(),
        ],
    })
}

fn run_build_index(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    require(&paths.tweet_embeddings(), Stage::EmbedGraph)?;
    let emb = load_embeddings(&paths.tweet_embeddings())?;
    let mut icfg = cfg.index.build.clone();
    // The pipeline owns all seeding: the block's own seed field is replaced
    // by this stage's substream.
    icfg.seed = stage_seed(seed, Stage::BuildIndex);
    let index = build_index(&emb.data, emb.dim, &icfg)?;
    save_index(&index, &paths.index())?;
    Ok(StageIo {
        inputs: vec![paths.tweet_embeddings()],
        outputs: vec![paths.index()],
    })
}

fn run_mine_pairs(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<StageIo> {
    require(&paths.index(), Stage::BuildIndex)?;
    require(&paths.tweet_embeddings(), Stage::EmbedGraph)?;
    let index = load_index(&paths.index())?;
    let emb = load_embeddings(&paths.tweet_embeddings())?;
    let mine = &cfg.index.mine;
    let pairs = mine_pairs(
        &index,
        &emb.data,
        emb.dim,
        mine.k,
        mine.nprobe,
        mine.max_distance,
    )?;
    save_pairs(&pairs, &emb.ids, &paths.pairs())?;
    Ok(StageIo {
        inputs: vec![paths.index(), paths.tweet_embeddings()],
        outputs: vec![paths.pairs()],
    })
}

fn run_pretrain1(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    require(&paths.corpus(), Stage::Gen)?;
    let corpus = load_corpus(&paths.corpus())?;
    let texts: Vec<&str> = corpus.entries().iter().map(|(_, t)| t.as_str()).collect();
    let tok = Tokenizer::from_corpus(
        &texts,
        cfg.pretrain.tokenizer.vocab_cap,
        cfg.pretrain.tokenizer.max_len,
    )?;
    save_vocab(&tok, &paths.vocab())?;
    let (params, losses) = pretrain_stage1(
        &corpus,
        &tok,
        &cfg.pretrain.stage1,
        stage_seed(seed, Stage::Pretrain1),
    )?;
    save_checkpoint(&params, &paths.stage1())?;
    save_loss_csv(&paths.stage1_losses(), &losses)?;
    Ok(StageIo {
        inputs: vec![paths.corpus()],
        outputs: vec![paths.vocab(), paths.stage1(), paths.stage1_losses()],
    })
}

fn run_pretrain2(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    require(&paths.stage1(), Stage::Pretrain1)?;
    require(&paths.vocab(), Stage::Pretrain1)?;
    require(&paths.corpus(), Stage::Gen)?;
    require(&paths.pairs(), Stage::MinePairs)?;
    let start = load_checkpoint(&paths.stage1())?;
    let tok = load_vocab(&paths.vocab(), cfg.pretrain.tokenizer.max_len)?;
    let corpus = load_corpus(&paths.corpus())?;
    let pairs = load_pairs(&paths.pairs())?;
    let (params, losses) = pretrain_stage2(
        &start,
        &corpus,
        &tok,
        &pairs,
        &cfg.pretrain.stage2,
        stage_seed(seed, Stage::Pretrain2),
    )?;
    save_checkpoint(&params, &paths.stage2())?;
    save_loss_csv(&paths.stage2_losses(), &losses)?;
    Ok(StageIo {
        inputs: vec![
            paths.stage1(),
            paths.vocab(),
            paths.corpus(),
            paths.pairs(),
        ],
        outputs: vec![paths.stage2(), paths.stage2_losses()],
    })
}

/// Loads the encoder artifacts every evaluation stage needs.
fn load_eval_inputs(
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
) -> Result<(crate::encoder::EncoderParams, Tokenizer, Corpus)> {
    require(&paths.stage2(), Stage::Pretrain2)?;
    require(&paths.vocab(), Stage::Pretrain1)?;
    require(&paths.corpus(), Stage::Gen)?;
    let params = load_checkpoint(&paths.stage2())?;
    let tok = load_vocab(&paths.vocab(), cfg.pretrain.tokenizer.max_len)?;
    let corpus = load_corpus(&paths.corpus())?;
    Ok((params, tok, corpus))
}

fn pooling_name(p: Pooling) -> String {
    p.to_string()
}

fn run_eval_engagement(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    let (params, tok, corpus) = load_eval_inputs(cfg, paths)?;
    require(&paths.records(), Stage::Gen)?;
    let records = load_records(&paths.records())?;
    let feats = embed_tweets(&params, &tok, &corpus, cfg.eval.pooling)?;

    // Split by tweet so no test tweet is seen in training.
    let mut tweet_ids: Vec<String> = records
        .iter()
        .map(|r| r.tweet_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    tweet_ids.sort();
    let split = split_tweets(&tweet_ids, cfg.eval.split, stage_seed(seed, Stage::EvalEngagement))?;
    let train_set = split.train_set();
    let dev_set = split.dev_set();
    let test_set = split.test_set();
    let pick = |set: &std::collections::HashSet<&str>| -> Vec<_> {
        records
            .iter()
            .filter(|r| set.contains(r.tweet_id.as_str()))
            .cloned()
            .collect()
    };
    let train = pick(&train_set);
    let dev = pick(&dev_set);
    let test = pick(&test_set);

    let eval_seed = stage_seed(seed, Stage::EvalEngagement);
    let model = train_engagement_model(
        &feats,
        &train,
        if dev.is_empty() { None } else { Some(&dev) },
        &cfg.eval.engagement,
        rng::substream_seed(eval_seed, "train"),
    )?;
    let hits = hits_at_k_model(
        &model,
        &feats,
        &test,
        &cfg.eval.hits,
        rng::substream_seed(eval_seed, "hits"),
    )?;
    let metrics = vec![MetricRecord {
        task: "engagement".into(),
        pooling: pooling_name(cfg.eval.pooling),
        seed,
        metric_name: format!("hits_at_{}", cfg.eval.hits.k),
        value: hits,
        n_runs: 1,
        median: hits,
    }];
    save_metrics(&paths.engagement_metrics(), &metrics)?;
    Ok(StageIo {
        inputs: vec![
            paths.stage2(),
            paths.vocab(),
            paths.corpus(),
            paths.records(),
            paths.records_sidecar(),
        ],
        outputs: vec![paths.engagement_metrics()],
    })
}

fn run_eval_hashtag(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    let (params, tok, corpus) = load_eval_inputs(cfg, paths)?;
    require(&paths.labels(), Stage::Gen)?;
    let labels = load_labels(&paths.labels())?;
    labels.validate_against(&corpus)?;
    let feats = embed_tweets(&params, &tok, &corpus, cfg.eval.pooling)?;

    let mut ids: Vec<String> = labels.entries().iter().map(|(id, _)| id.clone()).collect();
    ids.sort();
    let split = split_tweets(&ids, cfg.eval.split, stage_seed(seed, Stage::EvalHashtag))?;
    let n_classes = labels.n_classes();

    // Feature-based: frozen features + multinomial logistic regression.
    let (x_train, y_train) = labeled_rows(&feats, &labels, &split.train)?;
    let (_, y_test) = labeled_rows(&feats, &labels, &split.test)?;
    let lr_model = train_feature_classifier(
        &x_train,
        feats.dim(),
        &y_train,
        n_classes,
        &cfg.eval.classifier,
    )?;
    let mut lr_preds = Vec::with_capacity(split.test.len());
    for id in &split.test {
        let row = feats.row_of(id).ok_or_else(|| {
            Error::InvalidInput(format!("no features for test tweet `{id}`"))
        })?;
        lr_preds.push(lr_model.predict(row)?);
    }
    let feature_f1 = macro_f1(&lr_preds, &y_test, n_classes)?;

    // Fine-tuned: the same checkpoint trained end to end.
    let outcome = finetune_classifier(
        &params,
        &tok,
        &corpus,
        &labels,
        &split.train,
        &split.dev,
        &cfg.eval.finetune,
        rng::substream_seed(stage_seed(seed, Stage::EvalHashtag), "finetune"),
    )?;
    let ft_preds = classify_ids(&outcome.params, &tok, &outcome.head, &corpus, &split.test)?;
    let finetune_f1 = macro_f1(&ft_preds, &y_test, n_classes)?;

    let pooling = pooling_name(cfg.eval.pooling);
    let metrics = vec![
        MetricRecord {
            task: "hashtag".into(),
            pooling: pooling.clone(),
            seed,
            metric_name: "macro_f1_feature".into(),
            value: feature_f1,
            n_runs: 1,
            median: feature_f1,
        },
        MetricRecord {
            task: "hashtag".into(),
            pooling,
            seed,
            metric_name: "macro_f1_finetune".into(),
            value: finetune_f1,
            n_runs: 1,
            median: finetune_f1,
        },
    ];
    save_metrics(&paths.hashtag_metrics(), &metrics)?;
    Ok(StageIo {
        inputs: vec![
            paths.stage2(),
            paths.vocab(),
            paths.corpus(),
            paths.labels(),
        ],
        outputs: vec![paths.hashtag_metrics()],
    })
}

fn run_sweep(cfg: &PipelineConfig, paths: &ArtifactPaths, seed: u64) -> Result<StageIo> {
    let (params, tok, corpus) = load_eval_inputs(cfg, paths)?;
    require(&paths.labels(), Stage::Gen)?;
    let labels = load_labels(&paths.labels())?;
    let feats = embed_tweets(&params, &tok, &corpus, cfg.eval.pooling)?;

    let mut ids: Vec<String> = labels.entries().iter().map(|(id, _)| id.clone()).collect();
    ids.sort();
    // Same split protocol as the hashtag evaluation so numbers are comparable.
    let split = split_tweets(&ids, cfg.eval.split, stage_seed(seed, Stage::EvalHashtag))?;
    let rows = supervision_sweep(
        &feats,
        &labels,
        &split.train,
        &split.test,
        &cfg.eval.sweep,
        stage_seed(seed, Stage::Sweep),
    )?;
    save_sweep_csv(&paths.sweep_csv(), &rows)?;

    let medians: BTreeMap<usize, f64> = sweep_medians(&rows).into_iter().collect();
    let pooling = pooling_name(cfg.eval.pooling);
    let metrics: Vec<MetricRecord> = rows
        .iter()
        .map(|r| MetricRecord {
            task: "sweep".into(),
            pooling: pooling.clone(),
            seed,
            metric_name: format!("macro_f1_budget_{}_run_{}", r.budget, r.run),
            value: r.macro_f1,
            n_runs: cfg.eval.sweep.n_runs,
            median: medians[&r.budget],
        })
        .collect();
    save_metrics(&paths.sweep_metrics(), &metrics)?;
    Ok(StageIo {
        inputs: vec![
            paths.stage2(),
            paths.vocab(),
            paths.corpus(),
            paths.labels(),
        ],
        outputs: vec![paths.sweep_csv(), paths.sweep_metrics()],
    })
}

/// Concatenates the three evaluation reports into `eval/metrics.json`.
fn combine_metrics(paths: &ArtifactPaths) -> Result<StageIo> {
    let mut combined = Vec::new();
    let sources = [
        paths.engagement_metrics(),
        paths.hashtag_metrics(),
        paths.sweep_metrics(),
    ];
    for src in &sources {
        combined.extend(load_metrics(src)?);
    }
    save_metrics(&paths.metrics(), &combined)?;
    Ok(StageIo {
        inputs: sources.to_vec(),
        outputs: vec![paths.metrics()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn micro_config(out: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.out_dir = out.to_path_buf();
        cfg.seed = Some(9);
        cfg.world.n_users = 16;
        cfg.world.n_tweets = 48;
        cfg.world.edges_per_user = 8;
        cfg.twhin.epochs = 3;
        cfg.pretrain.stage1.steps = 30;
        cfg.pretrain.stage2.steps = 20;
        cfg.eval.engagement.epochs = 2;
        cfg.eval.hits = HitsConfig {
            k: 2,
            n_candidates: 5,
        };
        cfg.eval.finetune.epochs = 1;
        cfg.eval.sweep = SweepConfig {
            budgets: vec![2, 4],
            n_runs: 2,
            classifier: ClassifierConfig::default(),
        };
        cfg
    }

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn validation_errors_are_path_qualified() {
        let mut cfg = PipelineConfig::default();
        cfg.world.n_topics = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("world"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.eval.split = [0.5, 0.2, 0.2];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("eval.split"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.pretrain.stage2.contrastive.temperature = -1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("pretrain.stage2.contrastive.temperature"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.deterministic = true;
        cfg.seed = None;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut value = serde_json::to_value(PipelineConfig::default()).unwrap();
        apply_override(&mut value, "twhin.lr=0.05").unwrap();
        apply_override(&mut value, "eval.pooling=mean").unwrap();
        apply_override(&mut value, "world.relations=[\"fave\",\"retweet\"]").unwrap();
        apply_override(&mut value, "seed=7").unwrap();
        let cfg: PipelineConfig = serde_json::from_value(value).unwrap();
        assert_eq!(cfg.twhin.lr, 0.05);
        assert_eq!(cfg.eval.pooling, Pooling::Mean);
        assert_eq!(cfg.world.relations, vec!["fave", "retweet"]);
        assert_eq!(cfg.seed, Some(7));
    }

    #[test]
    fn bad_overrides_are_rejected_with_paths() {
        let mut value = serde_json::to_value(PipelineConfig::default()).unwrap();
        let err = apply_override(&mut value, "no-equals").unwrap_err().to_string();
        assert!(err.contains("path=value"), "{err}");
        let err = apply_override(&mut value, "nope.lr=1").unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
        // Unknown leaf keys survive the override but fail deserialization
        // with the offending path.
        apply_override(&mut value, "twhin.learning_rate=1").unwrap();
        let err = serde_path_to_error::deserialize::<_, PipelineConfig>(value)
            .unwrap_err();
        assert!(err.path().to_string().contains("twhin"), "{err}");
    }

    #[test]
    fn resolve_config_reads_files_and_applies_overrides() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = PipelineConfig::default();
        cfg.seed = Some(123);
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let resolved =
            resolve_config(Some(&path), &["twhin.dim=16".to_string()]).unwrap();
        assert_eq!(resolved.seed, Some(123));
        assert_eq!(resolved.twhin.dim, 16);

        fs::write(&path, "{ not json").unwrap();
        let err = resolve_config(Some(&path), &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");

        let missing = dir.path().join("absent.json");
        assert!(resolve_config(Some(&missing), &[]).is_err());
    }

    #[test]
    fn partial_config_files_inherit_the_defaults() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("partial.json");
        fs::write(
            &path,
            r#"{"seed": 7, "world": {"n_users": 10}, "twhin": {"epochs": 2}}"#,
        )
        .unwrap();
        let cfg = resolve_config(Some(&path), &[]).unwrap();
        let defaults = PipelineConfig::default();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.world.n_users, 10);
        assert_eq!(cfg.world.n_tweets, defaults.world.n_tweets);
        assert_eq!(cfg.twhin.epochs, 2);
        assert_eq!(cfg.twhin.dim, defaults.twhin.dim);

        // Unknown keys in a partial file are still rejected with their path.
        fs::write(&path, r#"{"twhin": {"learning_rate": 0.5}}"#).unwrap();
        let err = resolve_config(Some(&path), &[]).unwrap_err().to_string();
        assert!(err.contains("twhin"), "{err}");
    }

    #[test]
    fn stage_names_round_trip() {
        for st in STAGE_ORDER.iter().chain([Stage::All].iter()) {
            assert_eq!(Stage::from_str(st.name()).unwrap(), *st);
        }
        assert!(Stage::from_str("bogus").is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_per_stage() {
        let seeds: BTreeSet<u64> = STAGE_ORDER.iter().map(|&s| stage_seed(5, s)).collect();
        assert_eq!(seeds.len(), STAGE_ORDER.len());
        assert_eq!(stage_seed(5, Stage::Gen), stage_seed(5, Stage::Gen));
        assert_ne!(stage_seed(5, Stage::Gen), stage_seed(6, Stage::Gen));
    }

    #[test]
    fn sha256_matches_the_published_value() {
        // FIPS 180-2 test vector for "abc".
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn stages_require_their_upstream_artifacts() {
        let dir = TempDir::new().unwrap();
        let cfg = micro_config(dir.path());
        let err = run_stage(&cfg, Stage::Pretrain2).unwrap_err().to_string();
        assert!(err.contains("pretrain1"), "{err}");
        let err = run_stage(&cfg, Stage::EmbedGraph).unwrap_err().to_string();
        assert!(err.contains("gen"), "{err}");
        let err = run_stage(&cfg, Stage::MinePairs).unwrap_err().to_string();
        assert!(err.contains("build-index"), "{err}");

        // pretrain2 with everything except mined pairs names mine-pairs.
        run_stage(&cfg, Stage::Gen).unwrap();
        run_stage(&cfg, Stage::Pretrain1).unwrap();
        let err = run_stage(&cfg, Stage::Pretrain2).unwrap_err().to_string();
        assert!(err.contains("mine-pairs"), "{err}");
    }

    #[test]
    fn full_run_writes_artifacts_manifests_and_identical_reruns() {
        let dir = TempDir::new().unwrap();
        let cfg = micro_config(dir.path());
        let manifests = run_stage(&cfg, Stage::All).unwrap();
        assert_eq!(manifests.len(), STAGE_ORDER.len() + 1);

        let paths = ArtifactPaths::new(dir.path());
        for p in [
            paths.graph(),
            paths.corpus(),
            paths.labels(),
            paths.records(),
            paths.user_embeddings(),
            paths.tweet_embeddings(),
            paths.index(),
            paths.pairs(),
            paths.vocab(),
            paths.stage1(),
            paths.stage2(),
            paths.engagement_metrics(),
            paths.hashtag_metrics(),
            paths.sweep_csv(),
            paths.sweep_metrics(),
            paths.metrics(),
        ] {
            assert!(p.is_file(), "missing artifact {}", p.display());
        }

        // Manifests parse, name their stage, and their digests match disk.
        for (st, mp) in STAGE_ORDER.iter().chain([Stage::All].iter()).zip(&manifests) {
            let m = load_manifest(mp).unwrap();
            assert_eq!(m.stage, st.name());
            assert_eq!(m.seed, 9);
            assert!(!m.outputs.is_empty());
            for (rel, digest) in m.inputs.iter().chain(m.outputs.iter()) {
                assert_eq!(
                    &file_digest(&paths.root.join(rel)).unwrap(),
                    digest,
                    "stale digest for {rel}"
                );
            }
        }

        // The combined metrics report contains every task.
        let metrics = load_metrics(&paths.metrics()).unwrap();
        let tasks: BTreeSet<&str> = metrics.iter().map(|m| m.task.as_str()).collect();
        assert_eq!(tasks, BTreeSet::from(["engagement", "hashtag", "sweep"]));

        // Deterministic rerun into a fresh directory: byte-identical metrics
        // and manifests (paths inside manifests are relative).
        let dir2 = TempDir::new().unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir2.path().to_path_buf();
        run_stage(&cfg2, Stage::All).unwrap();
        let paths2 = ArtifactPaths::new(dir2.path());
        let a = fs::read(paths.metrics()).unwrap();
        let b = fs::read(paths2.metrics()).unwrap();
        assert_eq!(a, b, "metrics differ between identical runs");
        for st in STAGE_ORDER.iter().chain([Stage::All].iter()) {
            let ma = fs::read_to_string(paths.manifest(*st)).unwrap();
            let mb = fs::read_to_string(paths2.manifest(*st)).unwrap();
            // The config hash covers out_dir, which differs; strip that line.
            let strip = |s: &str| -> String {
                s.lines()
                    .filter(|l| !l.contains("config_sha256") && !l.contains("out_dir"))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(strip(&ma), strip(&mb), "manifest differs for {st}");
        }
    }

    #[test]
    fn single_stage_rerun_reproduces_its_artifact() {
        let dir = TempDir::new().unwrap();
        let cfg = micro_config(dir.path());
        run_stage(&cfg, Stage::Gen).unwrap();
        run_stage(&cfg, Stage::EmbedGraph).unwrap();
        let paths = ArtifactPaths::new(dir.path());
        let first = fs::read(paths.tweet_embeddings()).unwrap();
        run_stage(&cfg, Stage::EmbedGraph).unwrap();
        let second = fs::read(paths.tweet_embeddings()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn nondeterministic_mode_without_seed_still_runs() {
        let dir = TempDir::new().unwrap();
        let mut cfg = micro_config(dir.path());
        cfg.deterministic = false;
        cfg.seed = None;
        cfg.validate().unwrap();
        run_stage(&cfg, Stage::Gen).unwrap();
        assert!(ArtifactPaths::new(dir.path()).graph().is_file());
    }
}
