use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::embed::{Embedder, Embedding};
use super::store::{Collection, Record, RetrievalHit, SearchBackend};
use super::RetrievalError;
use crate::types::Task;

/// A stored (task, code) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: String,
    pub task_id: String,
    pub task_text: String,
    pub code: String,
    pub embedding: Embedding,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

impl MemoryRecord {
    fn from_record(r: Record) -> Self {
        let field = |k: &str| r.payload.get(k).and_then(|v| v.as_str()).unwrap_or_default().to_string();
        MemoryRecord {
            task_id: field("task_id"),
            task_text: field("task_text"),
            code: field("code"),
            created_at: r.payload.get("created_at").and_then(|v| v.as_u64()).unwrap_or(0),
            id: r.id,
            embedding: r.vector,
        }
    }
}

/// Append-only store of solved tasks, searched by task-text similarity.
#[derive(Clone)]
pub struct EpisodicMemory {
    collection: Arc<Collection>,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for EpisodicMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpisodicMemory")
            .field("embedder", &self.embedder.id())
            .field("len", &self.collection.len())
            .finish()
    }
}

impl EpisodicMemory {
    pub fn in_memory(embedder: Arc<dyn Embedder>, backend: SearchBackend) -> Self {
        let collection = Collection::in_memory(embedder.dimension(), embedder.id(), backend);
        EpisodicMemory {
            collection: Arc::new(collection),
            embedder,
        }
    }

    pub fn open(dir: impl AsRef<Path>, embedder: Arc<dyn Embedder>, backend: SearchBackend) -> Result<Self, RetrievalError> {
        let collection = Collection::open(dir, embedder.dimension(), embedder.id(), backend)?;
        Ok(EpisodicMemory {
            collection: Arc::new(collection),
            embedder,
        })
    }

    pub fn len(&self) -> usize {
        self.collection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collection.is_empty()
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Appends an episode. Storing the same task twice yields two records.
    pub fn store_episode(&self, task: &Task, code: &str) -> Result<String, RetrievalError> {
        let embedding = self.embedder.embed(&task.description)?;
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let hash = hex::encode(Sha256::digest(task.description.as_bytes()));
        // Ids sort in insertion order; the store serializes writers, so the
        // length read here cannot race with another insert under the same id.
        let mut seq = self.collection.len();
        loop {
            let id = format!("ep-{seq:08}");
            let record = Record {
                id: id.clone(),
                payload: json!({
                    "task_id": task.id.0,
                    "task_text": task.description,
                    "code": code,
                    "created_at": created_at,
                }),
                vector: embedding.clone(),
                hash: hash.clone(),
            };
            match self.collection.insert(record) {
                Ok(()) => return Ok(id),
                Err(RetrievalError::Store(m)) if m.starts_with("duplicate record id") => seq += 1,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn query(&self, text: &str, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        let q = self.embedder.embed(text)?;
        self.collection.top_k(&q, k)
    }

    pub fn list(&self) -> Vec<MemoryRecord> {
        self.collection.records().into_iter().map(MemoryRecord::from_record).collect()
    }

    pub fn collection(&self) -> &Collection {
        &self.collection
    }
}
