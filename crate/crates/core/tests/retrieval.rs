use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use groundloop_core::retrieval::{
    watch_repository, Collection, Embedder, Embedding, EpisodicMemory, HashingEmbedder, HnswParams, Record,
    RepoIndex, SearchBackend, SourceFilter, WatchConfig, WatchMode,
};
use groundloop_core::types::Task;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn corpus(seed: u64, n: usize, d: usize, backend: SearchBackend) -> (Collection, Vec<(String, Vec<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Collection::in_memory(d, "test", backend);
    let mut raw = Vec::new();
    for i in 0..n {
        let v = random_vector(&mut rng, d);
        let id = format!("r{i:05}");
        c.insert(Record {
            id: id.clone(),
            payload: Value::Null,
            vector: Embedding::new(v.clone()).normalized(),
            hash: String::new(),
        })
        .unwrap();
        raw.push((id, v));
    }
    (c, raw)
}

/// Independent brute-force oracle over the raw (unnormalized) vectors.
fn oracle(raw: &[(String, Vec<f64>)], q: &[f64], k: usize) -> Vec<String> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &String)> = raw
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            (dot / (norm(v) * norm(q)), id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

#[test]
fn distinct_words_never_share_a_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut words = HashSet::new();
    while words.len() < 1000 {
        let len = rng.gen_range(2..10);
        words.insert((0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect::<String>());
    }
    let e = HashingEmbedder::default();
    let mut seen = HashSet::new();
    for w in &words {
        let v = e.embed(w).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-9);
        let bits: Vec<u64> = v.values.iter().map(|x| x.to_bits()).collect();
        assert!(seen.insert(bits), "collision for {w}");
    }
}

#[test]
fn exact_top_k_matches_scan_on_500_records() {
    let (c, raw) = corpus(9, 500, 64, SearchBackend::Exact);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let q = random_vector(&mut rng, 64);
        let got: Vec<String> = c.top_k(&Embedding::new(q.clone()), 5).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(got, oracle(&raw, &q, 5));
    }
}

#[test]
fn stored_vector_query_returns_itself_first() {
    let (c, raw) = corpus(4, 200, 16, SearchBackend::Exact);
    let hits = c.top_k(&Embedding::new(raw[17].1.clone()), 3).unwrap();
    assert_eq!(hits[0].id, raw[17].0);
    assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
}

#[test]
fn hnsw_recall_at_5() {
    let mut total = 0usize;
    let mut found = 0usize;
    for seed in 0..10 {
        let (c, raw) = corpus(seed, 1000, 32, SearchBackend::Hnsw(HnswParams::default()));
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for _ in 0..20 {
            let q = random_vector(&mut rng, 32);
            let truth: HashSet<String> = oracle(&raw, &q, 5).into_iter().collect();
            let got = c.top_k(&Embedding::new(q), 5).unwrap();
            total += 5;
            found += got.iter().filter(|h| truth.contains(&h.id)).count();
        }
    }
    let recall = found as f64 / total as f64;
    assert!(recall >= 0.95, "recall {recall}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_top_k_equals_scan(seed in any::<u64>(), n in 0usize..400, k in 0usize..12) {
        let (c, raw) = corpus(seed, n, 8, SearchBackend::Exact);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q = random_vector(&mut rng, 8);
        let got: Vec<String> = c.top_k(&Embedding::new(q.clone()), k).unwrap().into_iter().map(|h| h.id).collect();
        prop_assert_eq!(got.len(), k.min(n));
        prop_assert_eq!(got, oracle(&raw, &q, k));
    }

    #[test]
    fn ordering_is_scale_invariant(seed in any::<u64>(), scale in 0.001f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Collection::in_memory(8, "t", SearchBackend::Exact);
        let b = Collection::in_memory(8, "t", SearchBackend::Exact);
        for i in 0..60 {
            let v = random_vector(&mut rng, 8);
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let id = format!("{i:03}");
            a.insert(Record { id: id.clone(), payload: Value::Null, vector: Embedding::new(v).normalized(), hash: String::new() }).unwrap();
            b.insert(Record { id, payload: Value::Null, vector: Embedding::new(scaled).normalized(), hash: String::new() }).unwrap();
        }
        let q = Embedding::new(random_vector(&mut rng, 8));
        let ids = |c: &Collection| c.top_k(&q, 10).unwrap().into_iter().map(|h| h.id).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
    }
}

#[test]
fn episodes_survive_reopen_and_match_disk() {
    let dir = tempfile::tempdir().unwrap();
    let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
    let task = Task::new("t1", "merge two sorted lists", vec![]).unwrap();
    let id = {
        let m = EpisodicMemory::open(dir.path(), embedder.clone(), SearchBackend::Exact).unwrap();
        m.store_episode(&task, "def merge(a, b): ...\n").unwrap()
    };
    let raw = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    let line: Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
    assert_eq!(line["id"], json!(id));
    assert_eq!(line["payload"]["task_text"], "merge two sorted lists");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 1);
    assert_eq!(manifest["dimension"], 256);

    let m = EpisodicMemory::open(dir.path(), embedder.clone(), SearchBackend::Exact).unwrap();
    assert_eq!(m.len(), 1);
    let hits = m.query("merge two sorted lists", 5).unwrap();
    assert_eq!(hits[0].id, id);
    let disk: Vec<f64> = line["vector"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(m.list()[0].embedding.values, disk);
    assert_eq!(disk, embedder.embed("merge two sorted lists").unwrap().values);
}

fn new_index(root: &std::path::Path) -> Arc<RepoIndex> {
    let e: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
    let c = Arc::new(Collection::in_memory(e.dimension(), e.id(), SearchBackend::Exact));
    Arc::new(RepoIndex::new(root, c, e, SourceFilter::default()).unwrap())
}

fn rebuild_state(root: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    let fresh = new_index(root);
    fresh.index_repository().unwrap();
    fresh.state()
}

#[test]
fn incremental_index_equals_rebuild_after_random_edits() {
    let dir = tempfile::tempdir().unwrap();
    let idx = new_index(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..20 {
        for _ in 0..5 {
            let name = format!("m{}.py", rng.gen_range(0..8));
            let path = dir.path().join(&name);
            if rng.gen_bool(0.25) {
                let _ = std::fs::remove_file(&path);
            } else {
                std::fs::write(&path, format!("x = {}\n", rng.gen::<u16>())).unwrap();
            }
        }
        idx.index_repository().unwrap();
        assert_eq!(idx.state(), rebuild_state(dir.path()), "round {round}");
    }
}

fn wait_for(deadline: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    cond()
}

fn exercise_watcher(force_polling: bool) {
    let dir = tempfile::tempdir().unwrap();
    let idx = new_index(dir.path());
    idx.index_repository().unwrap();
    let cfg = WatchConfig {
        settle_ms: 2000,
        poll_ms: 300,
        force_polling,
    };
    let watcher = watch_repository(idx.clone(), cfg).unwrap();
    if force_polling {
        assert_eq!(watcher.mode(), WatchMode::Polling);
    }
    let settle = Duration::from_millis(2000);

    std::fs::write(dir.path().join("new.py"), "a = 1\n").unwrap();
    assert!(wait_for(settle, || idx.state().contains_key("new.py")));

    std::fs::remove_file(dir.path().join("new.py")).unwrap();
    assert!(wait_for(settle, || !idx.state().contains_key("new.py")));

    for i in 0..100 {
        std::fs::write(dir.path().join("hot.py"), format!("v = {i}\n")).unwrap();
    }
    let expected = rebuild_state(dir.path());
    assert!(wait_for(settle + Duration::from_millis(500), || idx.state() == expected));
    drop(watcher);
}

#[test]
fn watcher_tracks_create_delete_and_bursts() {
    exercise_watcher(false);
}

#[test]
fn polling_fallback_tracks_changes() {
    exercise_watcher(true);
}
