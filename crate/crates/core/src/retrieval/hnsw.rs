//! Hierarchical navigable small-world graph over unit vectors.
//!
//! Insertion order and the level RNG are the only sources of variation, so a
//! fixed seed and insertion order give an identical graph.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Maximum neighbours per node on upper layers (twice this on layer 0).
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 128,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    dist: f64,
    node: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct Hnsw {
    params: HnswParams,
    vectors: Vec<Vec<f64>>,
    /// neighbours[node][layer]
    neighbours: Vec<Vec<Vec<usize>>>,
    entry: Option<usize>,
    top_layer: usize,
    rng: ChaCha8Rng,
    level_mult: f64,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

impl Hnsw {
    pub fn new(params: HnswParams) -> Self {
        let m = params.m.max(2);
        Hnsw {
            params: HnswParams { m, ..params },
            vectors: Vec::new(),
            neighbours: Vec::new(),
            entry: None,
            top_layer: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            level_mult: 1.0 / (m as f64).ln(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn search_layer(&self, query: &[f64], entry: &[usize], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited: HashSet<usize> = entry.iter().copied().collect();
        let mut candidates = BinaryHeap::new();
        let mut best = BinaryHeap::new();
        for &e in entry {
            let s = Scored {
                dist: distance(query, &self.vectors[e]),
                node: e,
            };
            candidates.push(Reverse(s));
            best.push(s);
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let worst = best.peek().map_or(f64::INFINITY, |w: &Scored| w.dist);
            if c.dist > worst && best.len() >= ef {
                break;
            }
            for &n in &self.neighbours[c.node][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    dist: distance(query, &self.vectors[n]),
                    node: n,
                };
                let worst = best.peek().map_or(f64::INFINITY, |w| w.dist);
                if best.len() < ef || s.dist < worst {
                    candidates.push(Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out = best.into_vec();
        out.sort();
        out
    }

    /// Inserts a unit vector; returns its node index (insertion order).
    pub fn insert(&mut self, vector: Vec<f64>) -> usize {
        let node = self.vectors.len();
        let u: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let level = (-u.ln() * self.level_mult).floor() as usize;
        self.vectors.push(vector);
        self.neighbours.push(vec![Vec::new(); level + 1]);

        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.top_layer = level;
            return node;
        };
        let query = self.vectors[node].clone();
        for layer in (level + 1..=self.top_layer).rev() {
            ep = self.search_layer(&query, &[ep], 1, layer)[0].node;
        }
        let mut entry = vec![ep];
        for layer in (0..=level.min(self.top_layer)).rev() {
            let found = self.search_layer(&query, &entry, self.params.ef_construction, layer);
            let chosen: Vec<usize> = found.iter().take(self.params.m).map(|s| s.node).collect();
            self.neighbours[node][layer] = chosen.clone();
            for &n in &chosen {
                self.neighbours[n][layer].push(node);
                if self.neighbours[n][layer].len() > self.max_degree(layer) {
                    self.prune(n, layer);
                }
            }
            entry = found.iter().map(|s| s.node).collect();
        }
        if level > self.top_layer {
            self.top_layer = level;
            self.entry = Some(node);
        }
        node
    }

    fn prune(&mut self, node: usize, layer: usize) {
        let base = &self.vectors[node];
        let mut scored: Vec<Scored> = self.neighbours[node][layer]
            .iter()
            .map(|&n| Scored {
                dist: distance(base, &self.vectors[n]),
                node: n,
            })
            .collect();
        scored.sort();
        scored.truncate(self.max_degree(layer));
        self.neighbours[node][layer] = scored.into_iter().map(|s| s.node).collect();
    }

    /// Approximate nearest nodes as (node, similarity), most similar first.
    pub fn search(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        if k == 0 {
            return Vec::new();
        }
        for layer in (1..=self.top_layer).rev() {
            ep = self.search_layer(query, &[ep], 1, layer)[0].node;
        }
        self.search_layer(query, &[ep], self.params.ef_search.max(k), 0)
            .into_iter()
            .map(|s| (s.node, (1.0 - s.dist).clamp(-1.0, 1.0)))
            .collect()
    }
}
