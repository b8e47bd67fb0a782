//! Quantized approximate-nearest-neighbor index over tweet embeddings.
//!
//! Vectors are L2-normalized at build time so cosine ranking coincides with
//! squared-L2 ranking. A coarse k-means partition (inverted lists) narrows
//! each query to `nprobe` lists; inside a list, distance is the cosine
//! distance between the raw query and either the stored vector (exact mode)
//! or the product-quantized reconstruction (quantized mode, asymmetric
//! distance). On top of search sits [`mine_pairs`], which extracts each
//! vector's nearest neighbors as similar-tweet training pairs.
//!
//! Everything is single-threaded and deterministic for a fixed seed; the
//! built [`PQIndex`] is read-only, so concurrent queries are safe.

pub mod io;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of Lloyd iterations used by every k-means run in this module.
pub const DEFAULT_TRAIN_ITERS: usize = 25;

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (ties broken by the lowest index).
fn nearest_centroid(v: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(v, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding and empty-cluster repair.
///
/// `data` is row-major with `dim` columns. Returns the flat `k × dim`
/// centroid matrix. Deterministic for a fixed seed. The within-cluster
/// squared error never increases from one iteration to the next.
pub fn kmeans(data: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(kmeans_with_history(data, dim, k, iters, seed)?.0)
}

/// [`kmeans`] plus the within-cluster squared error measured after every
/// iteration, so callers can observe Lloyd monotonicity directly.
pub fn kmeans_with_history(
    data: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim == 0 {
        return Err(Error::InvalidInput("kmeans: dim must be > 0".into()));
    }
    if data.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: data.len() % dim,
        });
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(Error::InvalidInput("kmeans: k must be > 0".into()));
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "kmeans: k ({k}) exceeds number of points ({n})"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans input".into()));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut r = rng::seeded(seed);

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance to the nearest chosen centroid. When every remaining
    // point already coincides with a centroid the weights vanish; fall back
    // to the lowest-index point not yet chosen.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = r.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_l2(row(i), &centroids[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&d2)
                .map_err(|e| Error::InvalidInput(format!("kmeans seeding: {e}")))?
                .sample(&mut r)
        } else {
            (0..n)
                .find(|&i| !chosen[i])
                .expect("k <= n leaves an unchosen point")
        };
        chosen[pick] = true;
        centroids.extend_from_slice(row(pick));
        let new_cent = &centroids[c * dim..(c + 1) * dim];
        for i in 0..n {
            d2[i] = d2[i].min(squared_l2(row(i), new_cent));
        }
    }

    let mut history = Vec::with_capacity(iters);
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        // Assignment step.
        for i in 0..n {
            assignment[i] = nearest_centroid(row(i), &centroids, dim).0;
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            sizes[a] += 1;
        }
        // Empty-cluster repair: reassign the farthest member of the largest
        // cluster. Moving that point can only lower the squared error, so
        // Lloyd monotonicity survives the repair.
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&c| sizes[c]).expect("k > 0");
            if sizes[largest] <= 1 {
                continue; // nothing to split; duplicate centroid stays empty
            }
            let farthest = (0..n)
                .filter(|&i| assignment[i] == largest)
                .max_by(|&a, &b| {
                    let da = squared_l2(row(a), &centroids[largest * dim..(largest + 1) * dim]);
                    let db = squared_l2(row(b), &centroids[largest * dim..(largest + 1) * dim]);
                    da.partial_cmp(&db)
                        .expect("finite distances")
                        .then(b.cmp(&a)) // ties: lowest point index
                })
                .expect("largest cluster is non-empty");
            assignment[farthest] = empty;
            sizes[largest] -= 1;
            sizes[empty] += 1;
        }
        // Update step: means of assigned points.
        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            let a = assignment[i];
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if sizes[c] > 0 {
                for (cent, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *cent = s / sizes[c] as f64;
                }
            }
        }
        let sse: f64 = (0..n)
            .map(|i| nearest_centroid(row(i), &centroids, dim).1)
            .sum();
        history.push(sse);
    }
    Ok((centroids, history))
}

// ---------------------------------------------------------------------------
// Product quantization
// ---------------------------------------------------------------------------

/// Per-subspace codebooks for product quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct PQCodebooks {
    dim: usize,
    m: usize,
    k_codes: usize,
    /// `codebooks[s]` is a flat `k_codes × (dim/m)` matrix for subspace `s`.
    codebooks: Vec<Vec<f64>>,
}

impl PQCodebooks {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k_codes(&self) -> usize {
        self.k_codes
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    /// Flat `k_codes × sub_dim` codebook of subspace `s`.
    pub fn codebook(&self, s: usize) -> &[f64] {
        &self.codebooks[s]
    }
}

/// Trains independent k-means codebooks on each of the `m` subspace slices.
/// Subspace `s` uses seed `seed + s`, so `m = 1` is exactly [`kmeans`] over
/// the full vectors.
pub fn train_pq(
    data: &[f64],
    dim: usize,
    m: usize,
    k_codes: usize,
    iters: usize,
    seed: u64,
) -> Result<PQCodebooks> {
    if m == 0 || dim == 0 || dim % m != 0 {
        return Err(Error::InvalidInput(format!(
            "product quantization needs dim divisible by m, got dim {dim}, m {m}"
        )));
    }
    if data.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: data.len() % dim,
        });
    }
    let n = data.len() / dim;
    let sub = dim / m;
    let mut codebooks = Vec::with_capacity(m);
    for s in 0..m {
        let mut slice = Vec::with_capacity(n * sub);
        for i in 0..n {
            slice.extend_from_slice(&data[i * dim + s * sub..i * dim + (s + 1) * sub]);
        }
        codebooks.push(kmeans(
            &slice,
            sub,
            k_codes,
            iters,
            seed.wrapping_add(s as u64),
        )?);
    }
    Ok(PQCodebooks {
        dim,
        m,
        k_codes,
        codebooks,
    })
}

/// Per-subspace nearest codeword by squared L2 (ties: lowest code).
pub fn pq_encode(v: &[f64], books: &PQCodebooks) -> Result<Vec<u16>> {
    if v.len() != books.dim {
        return Err(Error::DimensionMismatch {
            expected: books.dim,
            got: v.len(),
        });
    }
    let sub = books.sub_dim();
    let mut code = Vec::with_capacity(books.m);
    for s in 0..books.m {
        let (best, _) = nearest_centroid(&v[s * sub..(s + 1) * sub], &books.codebooks[s], sub);
        code.push(best as u16);
    }
    Ok(code)
}

/// Concatenates the codewords selected by `code`.
pub fn pq_decode(code: &[u16], books: &PQCodebooks) -> Result<Vec<f64>> {
    if code.len() != books.m {
        return Err(Error::DimensionMismatch {
            expected: books.m,
            got: code.len(),
        });
    }
    let sub = books.sub_dim();
    let mut v = Vec::with_capacity(books.dim);
    for (s, &c) in code.iter().enumerate() {
        let c = c as usize;
        if c >= books.k_codes {
            return Err(Error::InvalidInput(format!(
                "code {c} out of range for k_codes {}",
                books.k_codes
            )));
        }
        v.extend_from_slice(&books.codebooks[s][c * sub..(c + 1) * sub]);
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// The index
// ---------------------------------------------------------------------------

/// Whether the index keeps raw vectors (exact oracle mode) or PQ codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Quantized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub n_list: usize,
    pub m: usize,
    pub k_codes: usize,
    pub mode: IndexMode,
    #[serde(default)]
    pub seed: u64,
    /// Lloyd iterations for the coarse and PQ codebook k-means.
    #[serde(default = "default_train_iters")]
    pub train_iters: usize,
}

fn default_train_iters() -> usize {
    DEFAULT_TRAIN_ITERS
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            n_list: 64,
            m: 8,
            k_codes: 256,
            mode: IndexMode::Quantized,
            seed: 0,
            train_iters: DEFAULT_TRAIN_ITERS,
        }
    }
}

impl IndexConfig {
    /// Data-independent sanity checks; data-dependent limits (such as
    /// `n_list` against the collection size) are enforced by [`build_index`].
    pub fn validate(&self) -> Result<()> {
        if self.n_list == 0 {
            return Err(Error::config("n_list", "must be at least 1"));
        }
        if self.m == 0 {
            return Err(Error::config("m", "must be at least 1"));
        }
        if self.k_codes == 0 || self.k_codes > u16::MAX as usize + 1 {
            return Err(Error::config(
                "k_codes",
                format!("must be in 1..={}, got {}", u16::MAX as usize + 1, self.k_codes),
            ));
        }
        if self.train_iters == 0 {
            return Err(Error::config("train_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// One search hit: the indexed vector's row and its cosine distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub distance: f64,
}

/// Inverted-file index with product-quantized residuals (or raw vectors in
/// exact mode). Vectors are stored L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PQIndex {
    dim: usize,
    n: usize,
    mode: IndexMode,
    /// Flat `n_list × dim` coarse centroids.
    coarse: Vec<f64>,
    n_list: usize,
    /// Indexed rows per coarse list; together the lists partition `0..n`.
    lists: Vec<Vec<u32>>,
    /// Quantized mode: PQ code of each row's residual, indexed by row.
    codes: Vec<Vec<u16>>,
    books: Option<PQCodebooks>,
    /// Exact mode: flat normalized vectors, indexed by row.
    raw: Vec<f64>,
}

fn normalize_rows(data: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for (i, row) in data.chunks_exact(dim).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector {i}")));
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!(
                "vector {i} has zero norm; cosine distance is undefined"
            )));
        }
        out.extend(row.iter().map(|v| v / norm));
    }
    Ok(out)
}

/// Builds the index over `data` (row-major, `dim` columns). The builder
/// normalizes every vector, clusters them into `cfg.n_list` inverted lists,
/// and in quantized mode trains PQ codebooks on the residuals from the coarse
/// centroids.
pub fn build_index(data: &[f64], dim: usize, cfg: &IndexConfig) -> Result<PQIndex> {
    if dim == 0 {
        return Err(Error::InvalidInput("build_index: dim must be > 0".into()));
    }
    if data.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: data.len() % dim,
        });
    }
    let n = data.len() / dim;
    if n == 0 {
        return Err(Error::InvalidInput("build_index: no vectors".into()));
    }
    if cfg.n_list == 0 || cfg.n_list > n {
        return Err(Error::InvalidInput(format!(
            "n_list ({}) must be in 1..={n}",
            cfg.n_list
        )));
    }
    let normed = normalize_rows(data, dim)?;
    let coarse = kmeans(
        &normed,
        dim,
        cfg.n_list,
        cfg.train_iters,
        rng::substream_seed(cfg.seed, "index.coarse"),
    )?;
    let mut lists = vec![Vec::new(); cfg.n_list];
    let mut assign = Vec::with_capacity(n);
    for (i, row) in normed.chunks_exact(dim).enumerate() {
        let (c, _) = nearest_centroid(row, &coarse, dim);
        lists[c].push(i as u32);
        assign.push(c);
    }
    match cfg.mode {
        IndexMode::Exact => Ok(PQIndex {
            dim,
            n,
            mode: cfg.mode,
            coarse,
            n_list: cfg.n_list,
            lists,
            codes: Vec::new(),
            books: None,
            raw: normed,
        }),
        IndexMode::Quantized => {
            let mut residuals = Vec::with_capacity(n * dim);
            for (i, row) in normed.chunks_exact(dim).enumerate() {
                let cent = &coarse[assign[i] * dim..(assign[i] + 1) * dim];
                residuals.extend(row.iter().zip(cent).map(|(v, c)| v - c));
            }
            let books = train_pq(
                &residuals,
                dim,
                cfg.m,
                cfg.k_codes,
                cfg.train_iters,
                rng::substream_seed(cfg.seed, "index.pq"),
            )?;
            let codes = residuals
                .chunks_exact(dim)
                .map(|r| pq_encode(r, &books))
                .collect::<Result<Vec<_>>>()?;
            Ok(PQIndex {
                dim,
                n,
                mode: cfg.mode,
                coarse,
                n_list: cfg.n_list,
                lists,
                codes,
                books: Some(books),
                raw: Vec::new(),
            })
        }
    }
}

impl PQIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn n_list(&self) -> usize {
        self.n_list
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn codebooks(&self) -> Option<&PQCodebooks> {
        self.books.as_ref()
    }

    /// PQ code of row `i` (quantized mode only).
    pub fn code(&self, i: usize) -> Option<&[u16]> {
        self.codes.get(i).map(Vec::as_slice)
    }

    /// Coarse centroid of list `l` as a slice.
    pub fn centroid(&self, l: usize) -> &[f64] {
        &self.coarse[l * self.dim..(l + 1) * self.dim]
    }

    /// The vector search compares the query against: the stored normalized
    /// vector (exact) or the re-normalized PQ reconstruction (quantized).
    fn candidate_distance(&self, qn: &[f64], i: u32, list: usize) -> f64 {
        let d = match self.mode {
            IndexMode::Exact => {
                let row = &self.raw[i as usize * self.dim..(i as usize + 1) * self.dim];
                1.0 - dot(qn, row)
            }
            IndexMode::Quantized => {
                let books = self.books.as_ref().expect("quantized index has codebooks");
                let rec = pq_decode(&self.codes[i as usize], books).expect("stored code is valid");
                let cent = self.centroid(list);
                let full: Vec<f64> = rec.iter().zip(cent).map(|(r, c)| r + c).collect();
                let norm = full.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    // Degenerate reconstruction; report the midpoint of the
                    // cosine-distance range rather than poisoning the sort.
                    1.0
                } else {
                    1.0 - dot(qn, &full) / norm
                }
            }
        };
        d.clamp(0.0, 2.0)
    }

    /// Top-`k` neighbors of `query` scanning the `nprobe` nearest inverted
    /// lists. Results are sorted by ascending cosine distance with ties
    /// broken by ascending row index. Returns fewer than `k` hits when the
    /// probed lists hold fewer vectors.
    pub fn search(&self, query: &[f64], k: usize, nprobe: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::InvalidInput("search: k must be > 0".into()));
        }
        if nprobe == 0 || nprobe > self.n_list {
            return Err(Error::InvalidInput(format!(
                "search: nprobe ({nprobe}) must be in 1..={}",
                self.n_list
            )));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let qn = normalize_rows(query, self.dim)?;
        // Rank lists by distance from the query to their centroid.
        let mut by_dist: Vec<usize> = (0..self.n_list).collect();
        let cdist: Vec<f64> = (0..self.n_list)
            .map(|l| squared_l2(&qn, self.centroid(l)))
            .collect();
        by_dist.sort_by(|&a, &b| cdist[a].partial_cmp(&cdist[b]).expect("finite").then(a.cmp(&b)));
        let mut hits = Vec::new();
        for &l in by_dist.iter().take(nprobe) {
            for &i in &self.lists[l] {
                hits.push(Neighbor {
                    index: i,
                    distance: self.candidate_distance(&qn, i, l),
                });
            }
        }
        hits.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("finite distance")
                .then(a.index.cmp(&b.index))
        });
        hits.truncate(k);
        Ok(hits)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Pair mining
// ---------------------------------------------------------------------------

/// Unordered deduplicated similar-tweet pairs `(i, j, cosine_distance)` with
/// `i < j`, sorted by `(i, distance, j)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarPairSet {
    pairs: Vec<(u32, u32, f64)>,
}

impl SimilarPairSet {
    pub fn pairs(&self) -> &[(u32, u32, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub(crate) fn from_raw(pairs: Vec<(u32, u32, f64)>) -> Self {
        SimilarPairSet { pairs }
    }
}

/// Queries the index with every indexed vector, keeps each vector's `k`
/// nearest non-self neighbors (optionally cut at `max_distance`), and emits
/// the union as deduplicated unordered pairs. A pair found from both
/// endpoints keeps the smaller of the two approximate distances.
pub fn mine_pairs(
    index: &PQIndex,
    data: &[f64],
    dim: usize,
    k: usize,
    nprobe: usize,
    max_distance: Option<f64>,
) -> Result<SimilarPairSet> {
    if dim != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: dim,
        });
    }
    if data.len() / dim != index.len() || data.len() % dim != 0 {
        return Err(Error::InvalidInput(format!(
            "mine_pairs: expected the {} indexed vectors, got {}",
            index.len(),
            data.len() / dim
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("mine_pairs: k must be > 0".into()));
    }
    let mut best: std::collections::BTreeMap<(u32, u32), f64> = std::collections::BTreeMap::new();
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let i = i as u32;
        // One extra hit covers the query's own entry before the self-drop.
        let hits = index.search(row, k.saturating_add(1), nprobe)?;
        let mut kept = 0usize;
        for h in hits {
            if h.index == i {
                continue;
            }
            if kept == k {
                break;
            }
            kept += 1;
            if let Some(cut) = max_distance {
                if h.distance > cut {
                    continue;
                }
            }
            let key = (i.min(h.index), i.max(h.index));
            let d = best.entry(key).or_insert(f64::INFINITY);
            *d = d.min(h.distance);
        }
    }
    let mut pairs: Vec<(u32, u32, f64)> = best.into_iter().map(|((a, b), d)| (a, b, d)).collect();
    pairs.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then(x.2.partial_cmp(&y.2).expect("finite distance"))
            .then(x.1.cmp(&y.1))
    });
    Ok(SimilarPairSet::from_raw(pairs))
}
