//! Chunked, embedded documentation index with exact cosine retrieval.
//!
//! The on-disk format is a single file:
//!
//! ```text
//! magic   8 bytes   "NSAGKS\0\0"
//! version u32 LE
//! length  u64 LE    byte length of the JSON payload
//! payload           JSON-encoded store
//! digest  32 bytes  SHA-256 of the payload
//! ```

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Execution;
use crate::llm_gateway::{Embedder, Embedding, LlmError};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NSAGKS\0\0";
pub const DEFAULT_MAX_CHUNK_CHARS: usize = 2000;
pub const DEFAULT_OVERLAP_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate document id {0}")]
    DuplicateDocument(String),
    #[error("embedding failed: {0}")]
    EmbeddingFailed(#[from] LlmError),
    #[error("embedding has dimension {got}, index uses {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm embedding for chunk {0}")]
    ZeroVector(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source_uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk: Chunk,
    pub vector: Embedding,
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub max_chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS, overlap_chars: DEFAULT_OVERLAP_CHARS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub docs: usize,
    pub chunks: usize,
    /// Wall-clock seconds.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk: Chunk,
    pub score: f64,
}

/// Splits a document body with a fixed sliding window over characters.
///
/// Windows start every `max_chunk_chars - overlap_chars` characters. Dropping
/// the first `overlap_chars` characters of every chunk after the first and
/// concatenating reproduces the body.
pub fn chunk_document(
    doc: &Document,
    max_chunk_chars: usize,
    overlap_chars: usize,
) -> Result<Vec<Chunk>, StoreError> {
    if max_chunk_chars <= overlap_chars {
        return Err(StoreError::InvalidArgument(format!(
            "max_chunk_chars ({max_chunk_chars}) must exceed overlap_chars ({overlap_chars})"
        )));
    }
    let chars: Vec<char> = doc.body.chars().collect();
    let starts: Vec<usize> = if chars.len() <= max_chunk_chars {
        vec![0]
    } else {
        (0..chars.len()).step_by(max_chunk_chars - overlap_chars).collect()
    };
    Ok(starts
        .into_iter()
        .enumerate()
        .map(|(ordinal, start)| {
            let end = (start + max_chunk_chars).min(chars.len());
            Chunk {
                chunk_id: format!("{}#{ordinal:04}", doc.doc_id),
                doc_id: doc.doc_id.clone(),
                text: chars[start..end].iter().collect(),
                ordinal,
            }
        })
        .collect())
}

/// Flat in-memory index. Wrap in a `RwLock` to share: searches take `&self`,
/// ingestion takes `&mut self`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorStore {
    dimension: Option<usize>,
    doc_ids: BTreeSet<String>,
    entries: Vec<IndexEntry>,
    #[serde(skip)]
    execution: Execution,
}

impl VectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn set_execution(&mut self, execution: Execution) {
        self.execution = execution;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn documents(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Adds pre-embedded chunks atomically: either every entry is added or none.
    pub fn insert_embedded(&mut self, items: Vec<(Chunk, Embedding)>) -> Result<(), StoreError> {
        let mut dim = self.dimension;
        let mut new_entries = Vec::with_capacity(items.len());
        for (chunk, vector) in items {
            let d = vector.dimension();
            match dim {
                None if d == 0 => return Err(StoreError::ZeroVector(chunk.chunk_id)),
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(StoreError::DimensionMismatch { expected, got: d })
                }
                _ => {}
            }
            let norm = vector.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(StoreError::ZeroVector(chunk.chunk_id));
            }
            new_entries.push(IndexEntry { chunk, vector, norm });
        }
        for e in &new_entries {
            self.doc_ids.insert(e.chunk.doc_id.clone());
        }
        self.entries.extend(new_entries);
        self.dimension = dim;
        Ok(())
    }

    /// Exact cosine scan. Results sorted by descending score, ties by chunk id.
    pub fn search_vector(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>, StoreError> {
        self.search_vector_with(query, k, self.execution)
    }

    pub fn search_vector_with(
        &self,
        query: &Embedding,
        k: usize,
        execution: Execution,
    ) -> Result<Vec<SearchHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidArgument("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(StoreError::EmptyIndex);
        }
        let expected = self.dimension.unwrap_or(0);
        if query.dimension() != expected {
            return Err(StoreError::DimensionMismatch { expected, got: query.dimension() });
        }
        let qnorm = query.norm();
        if !(qnorm > 0.0 && qnorm.is_finite()) {
            return Err(StoreError::InvalidArgument("query embedding has zero norm".into()));
        }
        let scores: Vec<f64> = execution.map(&self.entries, |e| {
            (e.vector.dot(query) / (e.norm * qnorm)).clamp(-1.0, 1.0)
        });
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.entries[a].chunk.chunk_id.cmp(&self.entries[b].chunk.chunk_id))
        });
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| SearchHit { chunk: self.entries[i].chunk.clone(), score: scores[i] })
            .collect())
    }

    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let payload = serde_json::to_vec(self)
            .map_err(|e| StoreError::CorruptIndex(format!("serialize: {e}")))?;
        let digest = Sha256::digest(&payload);
        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&digest);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, out)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(StoreError::CorruptIndex("bad header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != INDEX_FORMAT_VERSION {
            return Err(StoreError::VersionMismatch { found: version, expected: INDEX_FORMAT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() != len.saturating_add(32) {
            return Err(StoreError::CorruptIndex(format!(
                "expected {} payload bytes, found {}",
                len + 32,
                body.len()
            )));
        }
        let (payload, digest) = body.split_at(len);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(StoreError::CorruptIndex("checksum mismatch".into()));
        }
        serde_json::from_slice(payload).map_err(|e| StoreError::CorruptIndex(e.to_string()))
    }
}

/// Chunks, embeds and indexes `docs`. On any failure the store is left unchanged.
pub fn ingest_documents(
    docs: &[Document],
    embedder: &dyn Embedder,
    store: &mut VectorStore,
    chunking: ChunkingConfig,
) -> Result<IngestionReport, StoreError> {
    let started = Instant::now();
    let mut seen = BTreeSet::new();
    for d in docs {
        if d.body.is_empty() {
            return Err(StoreError::InvalidArgument(format!("document {} has an empty body", d.doc_id)));
        }
        if store.doc_ids.contains(&d.doc_id) || !seen.insert(d.doc_id.as_str()) {
            return Err(StoreError::DuplicateDocument(d.doc_id.clone()));
        }
    }
    let execution = store.execution;
    let per_doc = execution.try_map(docs, |d| -> Result<Vec<(Chunk, Embedding)>, StoreError> {
        let chunks = chunk_document(d, chunking.max_chunk_chars, chunking.overlap_chars)?;
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = crate::llm_gateway::embed_texts(embedder, &texts)?;
        Ok(chunks.into_iter().zip(vectors).collect())
    })?;
    let items: Vec<(Chunk, Embedding)> = per_doc.into_iter().flatten().collect();
    let chunks = items.len();
    store.insert_embedded(items)?;
    Ok(IngestionReport { docs: docs.len(), chunks, elapsed: started.elapsed().as_secs_f64() })
}

/// Embeds `query` and returns the top `k` chunks.
pub fn search(
    query: &str,
    k: usize,
    embedder: &dyn Embedder,
    store: &VectorStore,
) -> Result<Vec<SearchHit>, StoreError> {
    if store.is_empty() {
        return Err(StoreError::EmptyIndex);
    }
    let q = crate::llm_gateway::embed_texts(embedder, &[query.to_string()])?;
    store.search_vector(&q[0], k)
}

/// Reads every `.txt`/`.md` file below `dir` as one document, with the
/// relative path (forward slashes) as its id. Empty files are skipped.
pub fn load_directory(dir: &Path) -> Result<Vec<Document>, StoreError> {
    if !dir.is_dir() {
        return Err(StoreError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a readable directory", dir.display()),
        )));
    }
    let mut docs = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| StoreError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !matches!(ext.as_str(), "txt" | "md" | "markdown") {
            continue;
        }
        let body = std::fs::read_to_string(path)?;
        if body.trim().is_empty() {
            tracing::warn!(path = %path.display(), "skipping empty document");
            continue;
        }
        let rel = path.strip_prefix(dir).unwrap_or(path);
        let doc_id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let title = body
            .lines()
            .map(|l| l.trim_start_matches('#').trim())
            .find(|l| !l.is_empty())
            .unwrap_or(&doc_id)
            .to_string();
        docs.push(Document { doc_id, title, body, source_uri: path.display().to_string() });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::HashEmbedder;

    fn doc(id: &str, body: &str) -> Document {
        Document { doc_id: id.into(), title: id.into(), body: body.into(), source_uri: String::new() }
    }

    fn unit(dim: usize, i: usize) -> Embedding {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Embedding(v)
    }

    #[test]
    fn short_body_is_one_chunk() {
        let c = chunk_document(&doc("d", "hello"), 400, 100).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, "hello");
        let c = chunk_document(&doc("d", &"x".repeat(400)), 400, 100).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn sliding_window_offsets() {
        let body: String = (0..1000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let chunks = chunk_document(&doc("d", &body), 400, 100).unwrap();
        // Hand-stepped: window 400, stride 300 -> starts 0, 300, 600, 900.
        assert_eq!(chunks.len(), 4);
        assert_eq!(chunks.iter().map(|c| c.ordinal).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(chunks[0].text, body[0..400]);
        assert_eq!(chunks[1].text, body[300..700]);
        assert_eq!(chunks[2].text, body[600..1000]);
        assert_eq!(chunks[3].text, body[900..1000]);

        let mut rebuilt = chunks[0].text.clone();
        for c in &chunks[1..] {
            rebuilt.extend(c.text.chars().skip(100));
        }
        assert_eq!(rebuilt, body);
    }

    #[test]
    fn overlap_equal_to_max_is_rejected() {
        assert!(chunk_document(&doc("d", "abc"), 100, 100).is_err());
    }

    #[test]
    fn empty_ingest_changes_nothing() {
        let mut store = VectorStore::new();
        let r = ingest_documents(&[], &HashEmbedder::default(), &mut store, ChunkingConfig::default()).unwrap();
        assert_eq!((r.docs, r.chunks), (0, 0));
        assert!(store.is_empty());
    }

    #[test]
    fn three_single_chunk_docs() {
        let mut store = VectorStore::new();
        let docs = vec![doc("a", "alpha"), doc("b", "beta"), doc("c", "gamma")];
        let r = ingest_documents(&docs, &HashEmbedder::default(), &mut store, ChunkingConfig::default()).unwrap();
        assert_eq!(r.chunks, 3);
        assert_eq!(store.len(), 3);
        assert!(matches!(
            ingest_documents(&[doc("a", "again")], &HashEmbedder::default(), &mut store, ChunkingConfig::default()),
            Err(StoreError::DuplicateDocument(_))
        ));
    }

    struct FailingEmbedder;
    impl Embedder for FailingEmbedder {
        fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
            if texts.iter().any(|t| t.contains("boom")) {
                Err(LlmError::ProviderUnreachable("down".into()))
            } else {
                Ok(texts.iter().map(|_| unit(4, 0)).collect())
            }
        }
    }

    #[test]
    fn failed_ingest_rolls_back() {
        let mut store = VectorStore::new();
        let docs = vec![doc("a", "fine"), doc("b", "boom")];
        let err = ingest_documents(&docs, &FailingEmbedder, &mut store, ChunkingConfig::default()).unwrap_err();
        assert!(matches!(err, StoreError::EmbeddingFailed(_)));
        assert!(store.is_empty());
        assert_eq!(store.documents(), 0);
    }

    #[test]
    fn identical_vector_scores_one_and_k_is_capped() {
        let mut store = VectorStore::new();
        store
            .insert_embedded((0..3).map(|i| {
                (Chunk { chunk_id: format!("c{i}"), doc_id: "d".into(), text: String::new(), ordinal: i }, unit(3, i))
            }).collect())
            .unwrap();
        let hits = store.search_vector(&unit(3, 1), 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].chunk.chunk_id, "c1");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        // c0 and c2 tie at 0: ascending chunk id.
        assert_eq!(hits[1].chunk.chunk_id, "c0");
        assert_eq!(hits[2].chunk.chunk_id, "c2");
    }

    #[test]
    fn empty_index_search_fails() {
        let store = VectorStore::new();
        assert!(matches!(search("q", 3, &HashEmbedder::default(), &store), Err(StoreError::EmptyIndex)));
    }

    #[test]
    fn persistence_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let mut store = VectorStore::new();
        ingest_documents(&[doc("a", "alpha beta")], &HashEmbedder::new(16), &mut store, ChunkingConfig::default())
            .unwrap();
        store.persist(&path).unwrap();
        assert_eq!(VectorStore::load(&path).unwrap(), store);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(VectorStore::load(&path), Err(StoreError::CorruptIndex(_))));

        let mut bumped = bytes.clone();
        bumped[8] += 1;
        std::fs::write(&path, &bumped).unwrap();
        assert!(matches!(VectorStore::load(&path), Err(StoreError::VersionMismatch { found: 2, .. })));

        let mut flipped = bytes;
        let mid = 30;
        flipped[mid] ^= 0x20;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(VectorStore::load(&path), Err(StoreError::CorruptIndex(_))));
    }

    #[test]
    fn directory_loader_uses_relative_ids() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("nr")).unwrap();
        std::fs::write(dir.path().join("nr/helper.md"), "# NrHelper\nbody").unwrap();
        std::fs::write(dir.path().join("a.txt"), "plain").unwrap();
        std::fs::write(dir.path().join("skip.bin"), "x").unwrap();
        std::fs::write(dir.path().join("empty.txt"), "  ").unwrap();
        let docs = load_directory(dir.path()).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a.txt", "nr/helper.md"]);
        assert_eq!(docs[1].title, "NrHelper");
        assert!(load_directory(&dir.path().join("missing")).is_err());
    }
}
