//! Knowledge store, embedding abstraction, top-k cosine retrieval, and the
//! gatekeeper routing decision.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{fnv1a, normalize, DetectorHit};
use crate::intent::Intent;
use crate::model::CpeTag;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate chunk id `{id}`")]
    DuplicateId { id: String },
    #[error("chunk `{id}`: embedding dimension {got}, store expects {want}")]
    WrongDimension { id: String, got: usize, want: usize },
    #[error("chunk `{id}`: text must be non-empty")]
    EmptyText { id: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Text embedding backend. The default is a deterministic mock; hosted
/// embedding models plug in behind the same trait.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
    fn dim(&self) -> usize;
}

/// Deterministic mock embedder: seeded feature hashing of character n-grams,
/// L2-normalized. Identical text always embeds to the identical vector, and
/// texts sharing more n-grams land closer in cosine space.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    ngram: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> HashEmbedder {
        assert!(dim >= 2, "embedding dimension must be at least 2");
        HashEmbedder { dim, seed, ngram: 3 }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(256, 0)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let norm_text = normalize(text);
        let chars: Vec<char> = norm_text.chars().collect();
        let mut v = vec![0.0f64; self.dim];
        let seed_bytes = self.seed.to_le_bytes();

        let mut add_feature = |gram: &[char]| {
            let mut bytes = seed_bytes.to_vec();
            let mut buf = [0u8; 4];
            for &c in gram {
                bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
            let h = fnv1a(&bytes);
            let idx = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        };

        if chars.len() < self.ngram {
            add_feature(&chars);
        } else {
            for gram in chars.windows(self.ngram) {
                add_feature(gram);
            }
        }

        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Sign cancellation on degenerate input; pin a direction.
            v[0] = 1.0;
            return Ok(v);
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Cosine similarity, clamped into [-1, 1] against float drift.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// A retrievable knowledge unit. Corrections carry curated fixes and outrank
/// plain facts at equal similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Fact,
    Correction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub id: String,
    pub kind: ChunkKind,
    pub text: String,
    pub embedding: Vec<f64>,
    pub source: String,
}

/// On-disk record for one chunk; embeddings are computed at load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: String,
    pub kind: ChunkKind,
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub chunk: Chunk,
    pub similarity: f64,
}

/// In-memory exact-scan store. Bulk-load then read-mostly.
#[derive(Debug, Default)]
pub struct ChunkStore {
    chunks: Vec<Chunk>,
}

impl ChunkStore {
    pub fn new() -> ChunkStore {
        ChunkStore { chunks: Vec::new() }
    }

    pub fn insert(&mut self, chunk: Chunk) -> Result<(), StoreError> {
        if chunk.text.is_empty() {
            return Err(StoreError::EmptyText { id: chunk.id });
        }
        if let Some(first) = self.chunks.first() {
            if chunk.embedding.len() != first.embedding.len() {
                return Err(StoreError::WrongDimension {
                    id: chunk.id,
                    got: chunk.embedding.len(),
                    want: first.embedding.len(),
                });
            }
        }
        if self.chunks.iter().any(|c| c.id == chunk.id) {
            return Err(StoreError::DuplicateId { id: chunk.id });
        }
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn insert_record(
        &mut self,
        record: ChunkRecord,
        embedder: &dyn Embedder,
    ) -> Result<(), StoreError> {
        let embedding = embedder.embed(&record.text)?;
        self.insert(Chunk {
            id: record.id,
            kind: record.kind,
            text: record.text,
            embedding,
            source: record.source,
        })
    }

    /// Load a line-delimited records file (one JSON object per line with
    /// fields id, kind, text, source), embedding each chunk as it loads.
    pub fn load_records(path: &Path, embedder: &dyn Embedder) -> Result<ChunkStore, StoreError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut store = ChunkStore::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ChunkRecord =
                serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            store.insert_record(record, embedder)?;
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Exact top-k scan, sorted by similarity descending. Ties prefer
    /// Correction over Fact, then ascending chunk id. An empty store yields
    /// an empty list; the caller routes that to clarification.
    pub fn retrieve(
        &self,
        query: &[f64],
        k: usize,
    ) -> Result<Vec<RetrievalResult>, SimilarityError> {
        assert!(k >= 1, "k must be positive");
        if self.chunks.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored: Vec<RetrievalResult> = Vec::with_capacity(self.chunks.len());
        for chunk in &self.chunks {
            let similarity = cosine(query, &chunk.embedding)?;
            scored.push(RetrievalResult {
                chunk: chunk.clone(),
                similarity,
            });
        }
        scored.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .expect("similarities are never NaN")
                .then_with(|| kind_rank(a.chunk.kind).cmp(&kind_rank(b.chunk.kind)))
                .then_with(|| a.chunk.id.cmp(&b.chunk.id))
        });
        scored.truncate(k);
        Ok(scored)
    }
}

fn kind_rank(kind: ChunkKind) -> u8 {
    match kind {
        ChunkKind::Correction => 0,
        ChunkKind::Fact => 1,
    }
}

/// Relevance-gate thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateConfig {
    pub top_k: usize,
    pub tau: f64,
    /// Elevated threshold applied when the rolling-window audit flagged the
    /// session (mixed-intent mitigation).
    pub tau_mixed: f64,
    pub max_clarify_loops: u32,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            top_k: 5,
            tau: 0.70,
            tau_mixed: 0.80,
            max_clarify_loops: 1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_k < 1 {
            return Err("top_k must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.tau_mixed) {
            return Err("tau and tau_mixed must lie in [0, 1]".to_string());
        }
        if self.tau_mixed < self.tau {
            return Err("tau_mixed must be at least tau".to_string());
        }
        Ok(())
    }

    pub fn effective_tau(&self, mixed_intent: bool) -> f64 {
        if mixed_intent {
            self.tau_mixed
        } else {
            self.tau
        }
    }
}

/// The gatekeeper routing outcome. Route and tag are bound one-to-one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRoute {
    Refuse,
    Clarify,
    BlockInjection,
    Allow,
}

impl GateRoute {
    pub fn tag(&self) -> CpeTag {
        match self {
            GateRoute::Refuse => CpeTag::CpeIntentBlock,
            GateRoute::Clarify => CpeTag::CpeLowRel,
            GateRoute::BlockInjection => CpeTag::CpeInjRegex,
            GateRoute::Allow => CpeTag::CpeAllow,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub route: GateRoute,
    pub cpe_tag: CpeTag,
    pub max_sim: Option<f64>,
    pub hits: Vec<DetectorHit>,
}

impl GateDecision {
    fn from_route(route: GateRoute, max_sim: Option<f64>, hits: Vec<DetectorHit>) -> GateDecision {
        GateDecision {
            route,
            cpe_tag: route.tag(),
            max_sim,
            hits,
        }
    }
}

/// The decision table, evaluated with explicit precedence:
///
/// 1. intent is neither tourism nor self-directed → refuse and redirect;
/// 2. any injection hit → block, regardless of similarity (relevance can be
///    gamed, so it never launders an encoded payload);
/// 3. best similarity below the effective threshold → ask clarification;
/// 4. otherwise allow. The threshold boundary is inclusive: a best
///    similarity of exactly tau allows.
pub fn gate(
    intent: Intent,
    results: &[RetrievalResult],
    hits: &[DetectorHit],
    cfg: &GateConfig,
    mixed_intent: bool,
) -> GateDecision {
    let max_sim = results
        .iter()
        .map(|r| r.similarity)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_sim = if results.is_empty() { 0.0 } else { max_sim };

    if intent == Intent::Other {
        return GateDecision::from_route(GateRoute::Refuse, Some(max_sim), hits.to_vec());
    }
    if !hits.is_empty() {
        return GateDecision::from_route(GateRoute::BlockInjection, Some(max_sim), hits.to_vec());
    }
    if max_sim < cfg.effective_tau(mixed_intent) {
        return GateDecision::from_route(GateRoute::Clarify, Some(max_sim), Vec::new());
    }
    GateDecision::from_route(GateRoute::Allow, Some(max_sim), Vec::new())
}

/// Deduplicated chunk ids of a result list, in rank order.
pub fn result_ids(results: &[RetrievalResult]) -> Vec<String> {
    let mut seen = HashSet::new();
    results
        .iter()
        .filter(|r| seen.insert(r.chunk.id.clone()))
        .map(|r| r.chunk.id.clone())
        .collect()
}
