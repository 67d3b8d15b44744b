use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::embed::{cosine, Embedding};
use super::hnsw::{Hnsw, HnswParams};
use super::RetrievalError;

const MANIFEST: &str = "manifest.json";
const LOG: &str = "records.jsonl";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchBackend {
    /// Exhaustive cosine scan; returns the true top-k.
    #[default]
    Exact,
    Hnsw(HnswParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub payload: Value,
    pub vector: Embedding,
    /// Digest of the embedded content.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub similarity: f64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dimension: usize,
    pub provider: String,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    id: String,
    #[serde(default)]
    payload: Value,
    #[serde(default)]
    vector: Vec<f64>,
    #[serde(default)]
    hash: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    deleted: bool,
}

#[derive(Debug)]
struct Persist {
    dir: PathBuf,
    log: File,
    lines: usize,
}

#[derive(Debug, Default)]
struct Graph {
    index: Option<Hnsw>,
    ids: Vec<String>,
    dirty: bool,
}

/// One named collection of embedded records. Reads run concurrently; writes are
/// serialized. Records persist as an append-only JSON-lines log with a manifest.
#[derive(Debug)]
pub struct Collection {
    dimension: usize,
    provider: String,
    backend: SearchBackend,
    records: RwLock<BTreeMap<String, Record>>,
    persist: Mutex<Option<Persist>>,
    graph: Mutex<Graph>,
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> RetrievalError {
    RetrievalError::Store(format!("{}: {e}", path.display()))
}

impl Collection {
    pub fn in_memory(dimension: usize, provider: impl Into<String>, backend: SearchBackend) -> Self {
        Collection {
            dimension,
            provider: provider.into(),
            backend,
            records: RwLock::new(BTreeMap::new()),
            persist: Mutex::new(None),
            graph: Mutex::new(Graph {
                dirty: true,
                ..Graph::default()
            }),
        }
    }

    /// Opens (creating if needed) the collection stored in `dir`. The manifest
    /// must agree with `dimension` and `provider`.
    pub fn open(
        dir: impl AsRef<Path>,
        dimension: usize,
        provider: impl Into<String>,
        backend: SearchBackend,
    ) -> Result<Self, RetrievalError> {
        let dir = dir.as_ref().to_path_buf();
        let provider = provider.into();
        std::fs::create_dir_all(&dir).map_err(|e| store_err(&dir, e))?;
        let manifest_path = dir.join(MANIFEST);
        if manifest_path.exists() {
            let manifest = read_manifest(&dir)?;
            if manifest.dimension != dimension || manifest.provider != provider {
                return Err(RetrievalError::Manifest {
                    path: manifest_path,
                    message: format!(
                        "collection was built with {} (dimension {}), opened with {provider} (dimension {dimension})",
                        manifest.provider, manifest.dimension
                    ),
                });
            }
        }

        let log_path = dir.join(LOG);
        let mut records = BTreeMap::new();
        let mut lines = 0;
        if log_path.exists() {
            let file = File::open(&log_path).map_err(|e| store_err(&log_path, e))?;
            let all: Vec<String> = BufReader::new(file)
                .lines()
                .collect::<Result<_, _>>()
                .map_err(|e| store_err(&log_path, e))?;
            let last = all.len();
            for (n, line) in all.into_iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogLine = match serde_json::from_str(&line) {
                    Ok(l) => l,
                    // A torn final line from an interrupted append is dropped.
                    Err(e) if n + 1 == last => {
                        log::warn!("{}: ignoring torn final record: {e}", log_path.display());
                        continue;
                    }
                    Err(e) => return Err(store_err(&log_path, format!("line {}: {e}", n + 1))),
                };
                lines += 1;
                if entry.deleted {
                    records.remove(&entry.id);
                } else {
                    if entry.vector.len() != dimension {
                        return Err(store_err(&log_path, format!("line {}: vector dimension {}", n + 1, entry.vector.len())));
                    }
                    records.insert(
                        entry.id.clone(),
                        Record {
                            id: entry.id,
                            payload: entry.payload,
                            vector: Embedding::new(entry.vector),
                            hash: entry.hash,
                        },
                    );
                }
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| store_err(&log_path, e))?;
        let collection = Collection {
            dimension,
            provider,
            backend,
            records: RwLock::new(records),
            persist: Mutex::new(Some(Persist { dir, log, lines })),
            graph: Mutex::new(Graph {
                dirty: true,
                ..Graph::default()
            }),
        };
        {
            let mut persist = collection.persist.lock().unwrap_or_else(|e| e.into_inner());
            let records = collection.records.read().unwrap_or_else(|e| e.into_inner());
            collection.write_manifest(persist.as_mut().expect("persisted"), records.len())?;
        }
        Ok(collection)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Record> {
        self.records.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    /// All records in id order.
    pub fn records(&self) -> Vec<Record> {
        self.records
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }

    fn check_dimension(&self, found: usize) -> Result<(), RetrievalError> {
        if found != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                found,
            });
        }
        Ok(())
    }

    fn write_manifest(&self, persist: &mut Persist, count: usize) -> Result<(), RetrievalError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dimension: self.dimension,
            provider: self.provider.clone(),
            count,
        };
        let path = persist.dir.join(MANIFEST);
        let tmp = persist.dir.join(format!("{MANIFEST}.tmp"));
        let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&tmp, body).map_err(|e| store_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))
    }

    fn append(&self, persist: &mut Persist, line: &LogLine) -> Result<(), RetrievalError> {
        let mut text = serde_json::to_string(line).expect("record serializes");
        text.push('\n');
        let path = persist.dir.join(LOG);
        persist
            .log
            .write_all(text.as_bytes())
            .and_then(|_| persist.log.sync_data())
            .map_err(|e| store_err(&path, e))?;
        persist.lines += 1;
        Ok(())
    }

    fn compact_if_needed(&self, persist: &mut Persist, records: &BTreeMap<String, Record>) -> Result<(), RetrievalError> {
        if persist.lines <= 2 * records.len() + 64 {
            return Ok(());
        }
        let path = persist.dir.join(LOG);
        let tmp = persist.dir.join(format!("{LOG}.tmp"));
        let mut out = String::new();
        for r in records.values() {
            out.push_str(&serde_json::to_string(&to_line(r)).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(&tmp, out).map_err(|e| store_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))?;
        persist.log = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| store_err(&path, e))?;
        persist.lines = records.len();
        Ok(())
    }

    /// Inserts or replaces the record with `record.id`.
    pub fn upsert(&self, record: Record) -> Result<(), RetrievalError> {
        self.check_dimension(record.vector.dimension())?;
        let mut persist = self.persist.lock().unwrap_or_else(|e| e.into_inner());
        let mut records = self.records.write().unwrap_or_else(|e| e.into_inner());
        let replaced = records.contains_key(&record.id);
        if let Some(p) = persist.as_mut() {
            self.append(p, &to_line(&record))?;
        }
        let id = record.id.clone();
        records.insert(id.clone(), record);
        if let Some(p) = persist.as_mut() {
            self.compact_if_needed(p, &records)?;
            self.write_manifest(p, records.len())?;
        }
        let mut graph = self.graph.lock().unwrap_or_else(|e| e.into_inner());
        let graph = &mut *graph;
        match (&mut graph.index, replaced || graph.dirty) {
            (Some(index), false) => {
                index.insert(records[&id].vector.values.clone());
                graph.ids.push(id);
            }
            _ => graph.dirty = true,
        }
        Ok(())
    }

    /// Inserts a record whose id must be new.
    pub fn insert(&self, record: Record) -> Result<(), RetrievalError> {
        if self.records.read().unwrap_or_else(|e| e.into_inner()).contains_key(&record.id) {
            return Err(RetrievalError::Store(format!("duplicate record id {}", record.id)));
        }
        self.upsert(record)
    }

    pub fn remove(&self, id: &str) -> Result<bool, RetrievalError> {
        let mut persist = self.persist.lock().unwrap_or_else(|e| e.into_inner());
        let mut records = self.records.write().unwrap_or_else(|e| e.into_inner());
        if !records.contains_key(id) {
            return Ok(false);
        }
        if let Some(p) = persist.as_mut() {
            self.append(
                p,
                &LogLine {
                    id: id.to_string(),
                    payload: Value::Null,
                    vector: Vec::new(),
                    hash: String::new(),
                    deleted: true,
                },
            )?;
        }
        records.remove(id);
        if let Some(p) = persist.as_mut() {
            self.compact_if_needed(p, &records)?;
            self.write_manifest(p, records.len())?;
        }
        self.graph.lock().unwrap_or_else(|e| e.into_inner()).dirty = true;
        Ok(true)
    }

    /// The `k` most similar records, most similar first; ties broken by id.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        self.check_dimension(query.dimension())?;
        if k == 0 {
            return Ok(Vec::new());
        }
        match self.backend {
            SearchBackend::Exact => Ok(self.exact(query, k)),
            SearchBackend::Hnsw(params) => Ok(self.approximate(query, k, params)),
        }
    }

    /// Exhaustive scan regardless of the configured backend.
    pub fn exact(&self, query: &Embedding, k: usize) -> Vec<RetrievalHit> {
        let records = self.records.read().unwrap_or_else(|e| e.into_inner());
        let mut scored: Vec<(f64, &Record)> = records
            .values()
            .map(|r| (cosine(&query.values, &r.vector.values), r))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored
            .into_iter()
            .take(k)
            .map(|(similarity, r)| RetrievalHit {
                id: r.id.clone(),
                similarity,
                payload: r.payload.clone(),
            })
            .collect()
    }

    fn approximate(&self, query: &Embedding, k: usize, params: HnswParams) -> Vec<RetrievalHit> {
        let records = self.records.read().unwrap_or_else(|e| e.into_inner());
        let mut graph = self.graph.lock().unwrap_or_else(|e| e.into_inner());
        if graph.dirty || graph.index.is_none() {
            let mut index = Hnsw::new(params);
            let mut ids = Vec::with_capacity(records.len());
            for r in records.values() {
                index.insert(r.vector.clone().normalized().values);
                ids.push(r.id.clone());
            }
            *graph = Graph {
                index: Some(index),
                ids,
                dirty: false,
            };
        }
        let q = query.clone().normalized();
        let index = graph.index.as_ref().expect("built above");
        let mut hits: Vec<RetrievalHit> = index
            .search(&q.values, k)
            .into_iter()
            .filter_map(|(node, _)| {
                let r = records.get(&graph.ids[node])?;
                Some(RetrievalHit {
                    id: r.id.clone(),
                    similarity: cosine(&query.values, &r.vector.values),
                    payload: r.payload.clone(),
                })
            })
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
        hits.truncate(k);
        hits
    }
}

fn to_line(r: &Record) -> LogLine {
    LogLine {
        id: r.id.clone(),
        payload: r.payload.clone(),
        vector: r.vector.values.clone(),
        hash: r.hash.clone(),
        deleted: false,
    }
}

/// Reads a collection manifest; errors name the manifest path.
pub fn read_manifest(dir: &Path) -> Result<Manifest, RetrievalError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| RetrievalError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RetrievalError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(RetrievalError::Manifest {
            path,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(id: &str, v: Vec<f64>) -> Record {
        Record {
            id: id.into(),
            payload: json!({ "text": id }),
            vector: Embedding::new(v).normalized(),
            hash: String::new(),
        }
    }

    #[test]
    fn exact_ordering_and_ties() {
        let c = Collection::in_memory(2, "t", SearchBackend::Exact);
        c.insert(rec("b", vec![1.0, 0.0])).unwrap();
        c.insert(rec("a", vec![1.0, 0.0])).unwrap();
        c.insert(rec("c", vec![0.0, 1.0])).unwrap();
        let hits = c.top_k(&Embedding::new(vec![1.0, 0.0]), 5).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(hits[0].similarity, 1.0);
        assert!(c.top_k(&Embedding::new(vec![1.0, 0.0]), 0).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        let c = Collection::in_memory(2, "t", SearchBackend::Exact);
        assert!(matches!(
            c.top_k(&Embedding::new(vec![1.0]), 1),
            Err(RetrievalError::Dimension { expected: 2, found: 1 })
        ));
        assert!(c.insert(rec("x", vec![1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = vec![0.1, 1.0 / 3.0, std::f64::consts::PI];
        {
            let c = Collection::open(dir.path(), 3, "t", SearchBackend::Exact).unwrap();
            c.insert(rec("one", v.clone())).unwrap();
            c.insert(rec("two", vec![1.0, 0.0, 0.0])).unwrap();
            c.remove("two").unwrap();
        }
        let c = Collection::open(dir.path(), 3, "t", SearchBackend::Exact).unwrap();
        assert_eq!(c.len(), 1);
        let expected = Embedding::new(v).normalized();
        let got = c.get("one").unwrap().vector;
        assert!(got.values.iter().zip(&expected.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(read_manifest(dir.path()).unwrap().count, 1);
    }

    #[test]
    fn manifest_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        Collection::open(dir.path(), 3, "t", SearchBackend::Exact).unwrap();
        assert!(matches!(
            Collection::open(dir.path(), 4, "t", SearchBackend::Exact),
            Err(RetrievalError::Manifest { .. })
        ));
        std::fs::write(dir.path().join(MANIFEST), "{not json").unwrap();
        let err = Collection::open(dir.path(), 3, "t", SearchBackend::Exact).unwrap_err();
        assert!(err.to_string().contains("manifest.json"));
    }

    #[test]
    fn torn_final_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = Collection::open(dir.path(), 2, "t", SearchBackend::Exact).unwrap();
            c.insert(rec("a", vec![1.0, 0.0])).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(LOG)).unwrap();
        f.write_all(b"{\"id\":\"b\",\"payl").unwrap();
        let c = Collection::open(dir.path(), 2, "t", SearchBackend::Exact).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn compaction_keeps_live_records() {
        let dir = tempfile::tempdir().unwrap();
        let c = Collection::open(dir.path(), 2, "t", SearchBackend::Exact).unwrap();
        for i in 0..200 {
            c.upsert(rec("same", vec![1.0, i as f64])).unwrap();
        }
        drop(c);
        let lines = std::fs::read_to_string(dir.path().join(LOG)).unwrap().lines().count();
        assert!(lines < 100);
        let c = Collection::open(dir.path(), 2, "t", SearchBackend::Exact).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn hnsw_backend_updates_after_writes() {
        let c = Collection::in_memory(2, "t", SearchBackend::Hnsw(HnswParams::default()));
        c.insert(rec("a", vec![1.0, 0.0])).unwrap();
        assert_eq!(c.top_k(&Embedding::new(vec![1.0, 0.0]), 1).unwrap()[0].id, "a");
        c.insert(rec("b", vec![0.0, 1.0])).unwrap();
        assert_eq!(c.top_k(&Embedding::new(vec![0.0, 1.0]), 1).unwrap()[0].id, "b");
        c.remove("b").unwrap();
        assert_eq!(c.top_k(&Embedding::new(vec![0.0, 1.0]), 1).unwrap()[0].id, "a");
    }
}
