//! Hierarchical navigable small-world graph.
//!
//! Insertion is sequential in record order and node levels come from a
//! seeded SplitMix64 stream, so a fixed seed always yields the same graph.
//! After the build, nodes unreachable from the entry point on layer 0 get a
//! back-link from their nearest reachable node.
//!
//! A new node links to up to `2 * m` neighbours on layer 0 and `m` above,
//! chosen with the diversity heuristic.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hit_order, IndexError, Metric, NeighborHit, PreparedQuery, VectorSet};
use crate::rng::SplitMix64;
use crate::store::Store;

pub const DEFAULT_EF_SEARCH: usize = 64;
const MAX_LEVEL: usize = 16;
const FILE_MAGIC: &[u8; 4] = b"HBH1";
const FILE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Out-degree on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            seed: 42,
        }
    }
}

impl HnswParams {
    fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::InvalidParameter("m must be >= 2".into()));
        }
        if self.ef_construction < self.m {
            return Err(IndexError::InvalidParameter("ef_construction must be >= m".into()));
        }
        Ok(())
    }

    fn capacity(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    dist: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    fn clear(&mut self) {
        self.bits.fill(0);
    }

    /// Returns true when `i` was not yet marked.
    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }
}

/// Adjacency lists per node and layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HnswGraph {
    entry: u32,
    max_level: usize,
    links: Vec<Vec<Vec<u32>>>,
}

impl HnswGraph {
    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn node_count(&self) -> usize {
        self.links.len()
    }

    pub fn level(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    pub fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        self.links[node as usize]
            .get(layer)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn edge_count(&self) -> usize {
        self.links.iter().flatten().map(Vec::len).sum()
    }

    /// Nodes reachable from the entry point over layer-0 edges.
    pub fn reachable_from_entry(&self) -> Vec<bool> {
        let mut seen = vec![false; self.links.len()];
        let mut stack = vec![self.entry];
        seen[self.entry as usize] = true;
        while let Some(u) = stack.pop() {
            for &v in self.neighbors(u, 0) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }

    fn search_layer<F>(&self, dist: F, entry: &[Cand], ef: usize, layer: usize, visited: &mut Visited) -> Vec<Cand>
    where
        F: Fn(u32) -> f64,
    {
        let mut candidates: BinaryHeap<Reverse<Cand>> = BinaryHeap::with_capacity(ef * 2);
        let mut results: BinaryHeap<Cand> = BinaryHeap::with_capacity(ef + 1);
        for &c in entry {
            if visited.insert(c.id) {
                candidates.push(Reverse(c));
                results.push(c);
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(Reverse(c)) = candidates.pop() {
            let worst = results.peek().expect("non-empty").dist;
            if c.dist > worst && results.len() >= ef {
                break;
            }
            for &nb in self.neighbors(c.id, layer) {
                if !visited.insert(nb) {
                    continue;
                }
                let d = dist(nb);
                if results.len() < ef || d < results.peek().expect("non-empty").dist {
                    let cand = Cand { dist: d, id: nb };
                    candidates.push(Reverse(cand));
                    results.push(cand);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Greedy descent through the upper layers down to `stop_layer + 1`.
    fn descend<F>(&self, dist: &F, stop_layer: usize, visited: &mut Visited) -> Vec<Cand>
    where
        F: Fn(u32) -> f64,
    {
        let mut ep = vec![Cand {
            dist: dist(self.entry),
            id: self.entry,
        }];
        for layer in (stop_layer + 1..=self.max_level).rev() {
            visited.clear();
            ep = self.search_layer(dist, &ep, 1, layer, visited);
        }
        ep
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    set: VectorSet,
    params: HnswParams,
    graph: HnswGraph,
}

impl HnswIndex {
    pub fn build(store: &Store, metric: Metric, params: HnswParams) -> Result<Self, IndexError> {
        if store.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        Self::build_from_set(VectorSet::from_store(store, metric)?, params)
    }

    pub fn build_from_set(set: VectorSet, params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        if set.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        let n = set.len();
        if n > u32::MAX as usize {
            return Err(IndexError::InvalidParameter("too many vectors".into()));
        }
        let level_mult = 1.0 / (params.m as f64).ln();
        let mut rng = SplitMix64::new(params.seed);
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u = 1.0 - rng.next_f64();
                ((-u.ln() * level_mult).floor() as usize).min(MAX_LEVEL)
            })
            .collect();

        let mut graph = HnswGraph {
            entry: 0,
            max_level: levels[0],
            links: Vec::with_capacity(n),
        };
        graph.links.push(vec![Vec::new(); levels[0] + 1]);
        let mut visited = Visited::new(n);
        for q in 1..n as u32 {
            insert(&set, &params, &mut graph, q, levels[q as usize], &mut visited);
        }
        repair_reachability(&set, &params, &mut graph, &mut visited);
        Ok(Self { set, params, graph })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn graph(&self) -> &HnswGraph {
        &self.graph
    }

    pub fn metric(&self) -> Metric {
        self.set.metric()
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// Approximate top-`k`; the beam width is `max(ef_search, k)`.
    pub fn query(&self, vector: &[f32], k: usize, ef_search: Option<usize>) -> Result<Vec<NeighborHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidParameter("k must be >= 1".into()));
        }
        let q = self.set.prepare(vector)?;
        let ef = ef_search.unwrap_or(DEFAULT_EF_SEARCH).max(k);
        let mut found = self.search(&q, ef);
        found.sort_by(|a, b| hit_order((a.dist, self.set.id(a.id as usize)), (b.dist, self.set.id(b.id as usize))));
        found.truncate(k);
        Ok(found
            .into_iter()
            .map(|c| NeighborHit {
                record_id: self.set.id(c.id as usize).to_string(),
                distance: c.dist,
            })
            .collect())
    }

    fn search(&self, q: &PreparedQuery, ef: usize) -> Vec<Cand> {
        let dist = |i: u32| self.set.distance_to(q, i as usize);
        let mut visited = Visited::new(self.set.len());
        let ep = self.graph.descend(&dist, 0, &mut visited);
        visited.clear();
        self.graph.search_layer(dist, &ep, ef, 0, &mut visited)
    }

    /// Serializes the graph (not the vectors) with a trailing CRC-32C.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(FILE_MAGIC);
        buf.extend_from_slice(&FILE_VERSION.to_le_bytes());
        buf.push(match self.metric() {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        });
        buf.extend_from_slice(&(self.params.m as u32).to_le_bytes());
        buf.extend_from_slice(&(self.params.ef_construction as u32).to_le_bytes());
        buf.extend_from_slice(&self.params.seed.to_le_bytes());
        buf.extend_from_slice(&(self.set.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.set.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.graph.entry.to_le_bytes());
        buf.push(self.graph.max_level as u8);
        for node in &self.graph.links {
            buf.push((node.len() - 1) as u8);
            for layer in node {
                buf.extend_from_slice(&(layer.len() as u32).to_le_bytes());
                for &nb in layer {
                    buf.extend_from_slice(&nb.to_le_bytes());
                }
            }
        }
        let crc = crc32c::crc32c(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let tmp = path.with_extension("bin.tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a graph saved by [`HnswIndex::save`] and binds it to `store`.
    pub fn load(path: &Path, store: &Store) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 4 {
            return Err(IndexError::Format("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32c::crc32c(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(IndexError::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != FILE_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FILE_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let metric = match r.u8()? {
            0 => Metric::Euclidean,
            1 => Metric::Cosine,
            other => return Err(IndexError::Format(format!("unknown metric tag {other}"))),
        };
        let params = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            seed: r.u64()?,
        };
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if n != store.record_count() || dim != store.dim() {
            return Err(IndexError::Format(format!(
                "index covers {n} x {dim}, store holds {} x {}",
                store.record_count(),
                store.dim()
            )));
        }
        let entry = r.u32()?;
        let max_level = r.u8()? as usize;
        let mut links = Vec::with_capacity(n);
        for _ in 0..n {
            let level = r.u8()? as usize;
            let mut node = Vec::with_capacity(level + 1);
            for _ in 0..=level {
                let count = r.u32()? as usize;
                let mut layer = Vec::with_capacity(count);
                for _ in 0..count {
                    let nb = r.u32()?;
                    if nb as usize >= n {
                        return Err(IndexError::Format("neighbor id out of range".into()));
                    }
                    layer.push(nb);
                }
                node.push(layer);
            }
            links.push(node);
        }
        if r.pos != body.len() || entry as usize >= n {
            return Err(IndexError::Format("inconsistent graph payload".into()));
        }
        Ok(Self {
            set: VectorSet::from_store(store, metric)?,
            params,
            graph: HnswGraph {
                entry,
                max_level,
                links,
            },
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos + n;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| IndexError::Format("unexpected end of file".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Keeps a candidate only if it is closer to the base than to every
/// neighbour already selected. `candidates` must be sorted ascending.
fn select_neighbors(set: &VectorSet, candidates: &[Cand], m: usize) -> Vec<u32> {
    let mut selected: Vec<u32> = Vec::with_capacity(m);
    for c in candidates {
        if selected.len() >= m {
            break;
        }
        let diverse = selected
            .iter()
            .all(|&s| set.distance_between(c.id as usize, s as usize) >= c.dist);
        if diverse {
            selected.push(c.id);
        }
    }
    selected
}

fn insert(set: &VectorSet, params: &HnswParams, graph: &mut HnswGraph, q: u32, level: usize, visited: &mut Visited) {
    graph.links.push(vec![Vec::new(); level + 1]);
    let dist = |i: u32| set.distance_between(q as usize, i as usize);
    let top = level.min(graph.max_level);
    let mut ep = graph.descend(&dist, top, visited);
    for layer in (0..=top).rev() {
        visited.clear();
        let found = graph.search_layer(dist, &ep, params.ef_construction, layer, visited);
        let neighbors = select_neighbors(set, &found, params.capacity(layer));
        for &nb in &neighbors {
            link(set, params, graph, nb, q, layer);
        }
        graph.links[q as usize][layer] = neighbors;
        ep = found;
    }
    if level > graph.max_level {
        graph.max_level = level;
        graph.entry = q;
    }
}

/// Adds `target` to `node`'s list on `layer`, re-pruning when over capacity.
fn link(set: &VectorSet, params: &HnswParams, graph: &mut HnswGraph, node: u32, target: u32, layer: usize) {
    let cap = params.capacity(layer);
    let list = &mut graph.links[node as usize][layer];
    if list.len() < cap {
        list.push(target);
        return;
    }
    let mut cands: Vec<Cand> = list
        .iter()
        .chain(std::iter::once(&target))
        .map(|&id| Cand {
            dist: set.distance_between(node as usize, id as usize),
            id,
        })
        .collect();
    cands.sort_unstable();
    *list = select_neighbors(set, &cands, cap);
}

fn repair_reachability(set: &VectorSet, params: &HnswParams, graph: &mut HnswGraph, visited: &mut Visited) {
    let mut reached = graph.reachable_from_entry();
    for u in 0..graph.node_count() as u32 {
        if reached[u as usize] {
            continue;
        }
        let dist = |i: u32| set.distance_between(u as usize, i as usize);
        let ep = graph.descend(&dist, 0, visited);
        visited.clear();
        let found = graph.search_layer(dist, &ep, params.ef_construction, 0, visited);
        let anchor = found
            .iter()
            .find(|c| c.id != u && reached[c.id as usize])
            .map(|c| c.id)
            .unwrap_or(graph.entry);
        graph.links[anchor as usize][0].push(u);
        let mut stack = vec![u];
        reached[u as usize] = true;
        while let Some(x) = stack.pop() {
            for &v in graph.neighbors(x, 0) {
                if !reached[v as usize] {
                    reached[v as usize] = true;
                    stack.push(v);
                }
            }
        }
    }
}
