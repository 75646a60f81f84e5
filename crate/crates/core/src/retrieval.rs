//! Sample-level search: an inverted index over the search pool, exact top-K
//! retrieval by feature-overlap count, and positive-sample selection for the
//! contrastive loss.
//!
//! The relevance function here is an exact uniform-weight overlap count, not
//! BM25/TF-IDF: the original search-engine scoring is unspecified upstream,
//! and counting is deterministic and oracle-checkable. Field weighting is an
//! extension point.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};

/// Inverted index from feature id to the ascending list of pool sample ids
/// containing it. Build-once, read-many; queries never mutate it.
pub struct SearchPoolIndex {
    postings: Vec<Vec<u32>>,
    pool: Dataset,
    pub k_default: usize,
    query_counter: AtomicU64,
}

/// Top-K neighbors: scores non-increasing, ties broken by ascending
/// sample id, ids distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub neighbor_ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.is_empty()
    }
}

/// How the positive neighbor for the contrastive loss is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveStrategy {
    /// Highest-scoring neighbor (the default).
    MostRelated,
    /// Uniform over the retrieved set, deterministic given the seed.
    Random,
}

impl std::str::FromStr for PositiveStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most_related" => Ok(PositiveStrategy::MostRelated),
            "random" => Ok(PositiveStrategy::Random),
            other => Err(Error::invalid(format!(
                "unknown positive strategy `{other}` (expected most_related|random)"
            ))),
        }
    }
}

/// Number of fields on which two samples share the same feature id, with
/// uniform field weights.
pub fn score(query: &Sample, candidate: &Sample) -> Result<f64> {
    if query.features.len() != candidate.features.len() {
        return Err(Error::Shape {
            op: "score",
            detail: format!(
                "query has {} fields, candidate has {}",
                query.features.len(),
                candidate.features.len()
            ),
        });
    }
    let matches = query
        .features
        .iter()
        .zip(&candidate.features)
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64)
}

/// Build the inverted index over a non-empty pool. The pool's sample ids
/// must be 0-based and contiguous (it is the oldest temporal slice).
pub fn build_index(pool: &Dataset) -> Result<SearchPoolIndex> {
    if pool.is_empty() {
        return Err(Error::invalid("build_index: empty pool"));
    }
    if pool.len() > u32::MAX as usize {
        return Err(Error::invalid("build_index: pool too large"));
    }
    let mut postings = vec![Vec::new(); pool.vocab_size as usize];
    for (i, s) in pool.samples.iter().enumerate() {
        debug_assert_eq!(s.sample_id, i as u64, "pool ids must be contiguous from 0");
        for &f in &s.features {
            postings[f as usize].push(i as u32);
        }
    }
    Ok(SearchPoolIndex {
        postings,
        pool: pool.clone(),
        k_default: 10,
        query_counter: AtomicU64::new(0),
    })
}

impl SearchPoolIndex {
    pub fn pool(&self) -> &Dataset {
        &self.pool
    }

    pub fn postings_list(&self, feature_id: u32) -> &[u32] {
        &self.postings[feature_id as usize]
    }

    /// How many retrieval queries this index has served. The benchmark's
    /// isolation check asserts the knowledge-base path leaves this at zero.
    pub fn query_count(&self) -> u64 {
        self.query_counter.load(Ordering::Relaxed)
    }

    /// Exact top-K by overlap count via postings-list counting. Equals a
    /// brute-force scan with the same tie rule (score desc, id asc). When
    /// fewer than K samples overlap the query, the oldest zero-score pool
    /// samples fill the remainder so downstream stages always have
    /// neighbors.
    pub fn retrieve_topk(&self, query: &Sample, k: usize) -> Result<RetrievalResult> {
        self.query_counter.fetch_add(1, Ordering::Relaxed);
        if query.features.len() != self.pool.num_fields() {
            return Err(Error::Shape {
                op: "retrieve_topk",
                detail: format!(
                    "query has {} fields, pool has {}",
                    query.features.len(),
                    self.pool.num_fields()
                ),
            });
        }
        let k = k.min(self.pool.len());
        if k == 0 {
            return Ok(RetrievalResult { neighbor_ids: Vec::new(), scores: Vec::new() });
        }

        // Gather all posting entries for the query's features, then
        // run-length count after sorting. Candidates come out id-ascending.
        let mut hits: Vec<u32> = Vec::new();
        for &f in &query.features {
            if (f as usize) < self.postings.len() {
                hits.extend_from_slice(&self.postings[f as usize]);
            }
        }
        hits.sort_unstable();

        let mut candidates: Vec<(u32, u32)> = Vec::new(); // (count, id), id-ascending
        let mut i = 0;
        while i < hits.len() {
            let id = hits[i];
            let mut j = i;
            while j + 1 < hits.len() && hits[j + 1] == id {
                j += 1;
            }
            candidates.push(((j - i + 1) as u32, id));
            i = j + 1;
        }

        // Stable sort by count descending keeps the ascending-id tie order.
        candidates.sort_by_key(|&(count, _)| std::cmp::Reverse(count));

        let mut neighbor_ids: Vec<u64> = Vec::with_capacity(k);
        let mut scores: Vec<f64> = Vec::with_capacity(k);
        for &(count, id) in candidates.iter().take(k) {
            neighbor_ids.push(u64::from(id));
            scores.push(f64::from(count));
        }

        if neighbor_ids.len() < k {
            // Zero-score fill: oldest pool ids not already present.
            let mut present: Vec<u64> = neighbor_ids.clone();
            present.sort_unstable();
            let mut next = 0u64;
            let mut cursor = 0;
            while neighbor_ids.len() < k {
                while cursor < present.len() && present[cursor] == next {
                    cursor += 1;
                    next += 1;
                }
                neighbor_ids.push(next);
                scores.push(0.0);
                next += 1;
            }
        }
        Ok(RetrievalResult { neighbor_ids, scores })
    }

    /// Materialize the retrieved neighbors as pool samples.
    pub fn resolve(&self, result: &RetrievalResult) -> Vec<&Sample> {
        result
            .neighbor_ids
            .iter()
            .map(|&id| &self.pool.samples[id as usize])
            .collect()
    }
}

/// Pick the positive neighbor from a non-empty retrieval result.
pub fn select_positive(
    result: &RetrievalResult,
    strategy: PositiveStrategy,
    seed: u64,
) -> Result<u64> {
    if result.is_empty() {
        return Err(Error::invalid("select_positive: empty retrieval result"));
    }
    match strategy {
        PositiveStrategy::MostRelated => Ok(result.neighbor_ids[0]),
        PositiveStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = rng.gen_range(0..result.neighbor_ids.len());
            Ok(result.neighbor_ids[idx])
        }
    }
}

const CACHE_MAGIC: &[u8; 4] = b"RKN1";

/// Persist per-sample retrieval results to a binary sidecar keyed by
/// sample_id, so repeated teacher pre-training runs skip the retrieval pass.
pub fn save_neighbor_cache(
    path: &std::path::Path,
    keys: &[u64],
    results: &[RetrievalResult],
) -> Result<()> {
    if keys.len() != results.len() {
        return Err(Error::invalid(format!(
            "cache: {} keys vs {} results",
            keys.len(),
            results.len()
        )));
    }
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(keys.len() as u64).to_le_bytes())?;
    for (key, r) in keys.iter().zip(results) {
        w.write_all(&key.to_le_bytes())?;
        w.write_all(&(r.len() as u32).to_le_bytes())?;
        for (&id, &s) in r.neighbor_ids.iter().zip(&r.scores) {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&s.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_neighbor_cache(path: &std::path::Path) -> Result<Vec<(u64, RetrievalResult)>> {
    use std::io::Read;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |detail: &str| Error::Parse {
        path: path.display().to_string(),
        line: None,
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not a neighbor cache file"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    let mut off = 12;
    for _ in 0..count {
        if off + 12 > bytes.len() {
            return Err(bad("truncated record header"));
        }
        let key = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        let n = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if off + n * 16 > bytes.len() {
            return Err(bad("truncated record body"));
        }
        let mut result = RetrievalResult {
            neighbor_ids: Vec::with_capacity(n),
            scores: Vec::with_capacity(n),
        };
        for _ in 0..n {
            result.neighbor_ids.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
            result.scores.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        out.push((key, result));
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Brute-force scan over the whole pool with the same tie rule; the oracle
/// for [`SearchPoolIndex::retrieve_topk`].
pub fn brute_force_topk(pool: &Dataset, query: &Sample, k: usize) -> Result<RetrievalResult> {
    let mut scored: Vec<(f64, u64)> = Vec::with_capacity(pool.len());
    for (i, s) in pool.samples.iter().enumerate() {
        scored.push((score(query, s)?, i as u64));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(k.min(pool.len()));
    Ok(RetrievalResult {
        neighbor_ids: scored.iter().map(|&(_, id)| id).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
    })
}
