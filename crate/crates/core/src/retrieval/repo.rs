use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::embed::Embedder;
use super::store::{Collection, Record, RetrievalHit};
use super::RetrievalError;

const SNIFF_BYTES: usize = 8192;

/// Which files count as source. Hidden entries and common build directories are
/// always skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFilter {
    pub extensions: Vec<String>,
    pub max_file_bytes: u64,
}

impl Default for SourceFilter {
    fn default() -> Self {
        SourceFilter {
            extensions: ["py", "rs", "js", "ts", "go", "java", "c", "h", "cc", "cpp", "hpp", "rb", "sh"]
                .map(String::from)
                .to_vec(),
            max_file_bytes: 1 << 20,
        }
    }
}

const SKIPPED_DIRS: [&str; 4] = ["target", "node_modules", "__pycache__", "venv"];

impl SourceFilter {
    fn wants(&self, rel: &Path) -> bool {
        rel.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| self.extensions.iter().any(|x| x == e))
    }
}

fn excluded_component(name: &str) -> bool {
    name.starts_with('.') || SKIPPED_DIRS.contains(&name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSummary {
    /// Documents in the index after this pass.
    pub indexed: usize,
    /// Files embedded during this pass (new or changed content).
    pub embedded: usize,
    pub unchanged: usize,
    pub removed: usize,
    pub skipped: Vec<SkippedFile>,
}

/// One indexed source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoDocument {
    pub path: String,
    pub content_hash: String,
}

/// Embedding index over a working tree, keyed by relative path.
pub struct RepoIndex {
    root: PathBuf,
    collection: Arc<Collection>,
    embedder: Arc<dyn Embedder>,
    filter: SourceFilter,
    writer: Mutex<()>,
}

impl std::fmt::Debug for RepoIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RepoIndex")
            .field("root", &self.root)
            .field("documents", &self.collection.len())
            .finish()
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RepoIndex {
    pub fn new(
        root: impl AsRef<Path>,
        collection: Arc<Collection>,
        embedder: Arc<dyn Embedder>,
        filter: SourceFilter,
    ) -> Result<Self, RetrievalError> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(RetrievalError::Path(format!("{} is not a readable directory", root.display())));
        }
        if collection.dimension() != embedder.dimension() {
            return Err(RetrievalError::Dimension {
                expected: collection.dimension(),
                found: embedder.dimension(),
            });
        }
        Ok(RepoIndex {
            root: root.to_path_buf(),
            collection,
            embedder,
            filter,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.collection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collection.is_empty()
    }

    /// Path to content hash for every indexed document.
    pub fn state(&self) -> BTreeMap<String, String> {
        self.collection.records().into_iter().map(|r| (r.id, r.hash)).collect()
    }

    pub fn documents(&self) -> Vec<RepoDocument> {
        self.collection
            .records()
            .into_iter()
            .map(|r| RepoDocument {
                path: r.id,
                content_hash: r.hash,
            })
            .collect()
    }

    /// Brings the index in line with disk. Files whose hash is unchanged are not
    /// re-embedded; documents for vanished files are removed.
    pub fn index_repository(&self) -> Result<IndexSummary, RetrievalError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if !self.root.is_dir() {
            return Err(RetrievalError::Path(format!("{} is not a readable directory", self.root.display())));
        }
        let mut summary = IndexSummary::default();
        let mut seen = BTreeSet::new();
        let walker = walkdir::WalkDir::new(&self.root)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || !excluded_component(&e.file_name().to_string_lossy()));
        for entry in walker {
            let entry = match entry {
                Ok(e) => e,
                Err(e) => {
                    let path = e
                        .path()
                        .and_then(|p| p.strip_prefix(&self.root).ok())
                        .map(|p| p.display().to_string())
                        .unwrap_or_default();
                    summary.skipped.push(SkippedFile {
                        path,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            if !entry.file_type().is_file() {
                continue;
            }
            let Ok(rel) = entry.path().strip_prefix(&self.root) else {
                continue;
            };
            if !self.filter.wants(rel) {
                continue;
            }
            let Some(rel_str) = rel.to_str().map(|s| s.replace('\\', "/")) else {
                summary.skipped.push(SkippedFile {
                    path: rel.display().to_string(),
                    reason: "non-UTF-8 path".into(),
                });
                continue;
            };
            match self.index_file(entry.path(), &rel_str)? {
                FileOutcome::Embedded => summary.embedded += 1,
                FileOutcome::Unchanged => summary.unchanged += 1,
                FileOutcome::Skipped(reason) => {
                    summary.skipped.push(SkippedFile { path: rel_str, reason });
                    continue;
                }
            }
            seen.insert(rel_str);
        }
        for id in self.state().into_keys() {
            if !seen.contains(&id) && self.collection.remove(&id)? {
                summary.removed += 1;
            }
        }
        summary.indexed = self.collection.len();
        Ok(summary)
    }

    fn index_file(&self, abs: &Path, rel: &str) -> Result<FileOutcome, RetrievalError> {
        match std::fs::metadata(abs) {
            Ok(m) if m.len() > self.filter.max_file_bytes => {
                return Ok(FileOutcome::Skipped(format!("larger than {} bytes", self.filter.max_file_bytes)))
            }
            Ok(_) => {}
            Err(e) => return Ok(FileOutcome::Skipped(e.to_string())),
        }
        let bytes = match std::fs::read(abs) {
            Ok(b) => b,
            Err(e) => return Ok(FileOutcome::Skipped(e.to_string())),
        };
        if bytes[..bytes.len().min(SNIFF_BYTES)].contains(&0) {
            return Ok(FileOutcome::Skipped("binary".into()));
        }
        let Ok(text) = std::str::from_utf8(&bytes) else {
            return Ok(FileOutcome::Skipped("not UTF-8".into()));
        };
        let hash = content_hash(&bytes);
        if self.collection.get(rel).is_some_and(|r| r.hash == hash) {
            return Ok(FileOutcome::Unchanged);
        }
        let vector = self.embedder.embed(&format!("{rel}\n{text}"))?;
        self.collection.upsert(Record {
            id: rel.to_string(),
            payload: json!({ "path": rel, "content": text }),
            vector,
            hash,
        })?;
        Ok(FileOutcome::Embedded)
    }

    pub fn query(&self, text: &str, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        let q = self.embedder.embed(text)?;
        self.collection.top_k(&q, k)
    }
}

enum FileOutcome {
    Embedded,
    Unchanged,
    Skipped(String),
}
