//! Dual retrieval: an episodic memory of solved tasks and a live index of the
//! repository's source files, both stored as [`Collection`]s and searched by
//! cosine similarity.

mod embed;
mod hnsw;
mod memory;
mod repo;
mod store;
mod watch;

use std::path::PathBuf;

pub use embed::{cosine, Embedder, Embedding, HashingEmbedder, RemoteEmbedder, DEFAULT_DIMENSION};
pub use hnsw::{Hnsw, HnswParams};
pub use memory::{EpisodicMemory, MemoryRecord};
pub use repo::{content_hash, IndexSummary, RepoDocument, RepoIndex, SkippedFile, SourceFilter};
pub use store::{read_manifest, Collection, Manifest, Record, RetrievalHit, SearchBackend};
pub use watch::{watch_repository, RepoWatcher, WatchConfig, WatchMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("DimensionError: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("ProviderError: {0}")]
    Provider(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("StoreError: {0}")]
    Store(String),
    #[error("corrupt or incompatible manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("PathError: {0}")]
    Path(String),
    #[error("watcher error: {0}")]
    Watch(String),
}
