//! Layered small-world proximity graph over pooled embeddings.
//!
//! Construction is fully deterministic: nodes are inserted in entry order,
//! each node's level comes from a hash of `(seed, entry_id)`, and every
//! comparison breaks distance ties by node index. After construction the
//! bottom layer is repaired so every node is reachable from the entry point;
//! a search with `ef_search` at least the corpus size therefore visits the
//! whole corpus and returns the exact answer.
//!
//! `PAI1` layout, little-endian:
//!
//! ```text
//! "PAI1"  u32 version (1)
//! u32 M   u32 ef_construction   u64 seed   u32 dim
//! u64 node count N   u64 entry point   u32 max level
//! [u8; 32] corpus fingerprint
//! N × u64 entry id
//! N × u32 node level
//! per layer 0..=max level:
//!     (N + 1) × u64 offsets into this layer's neighbour list
//!     offsets[N] × u32 neighbour node indices
//! ```

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{squared_distance, EmbeddingTable, Neighbor, PooledEmbedding, Scored};
use crate::binio::{put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PAI1";
pub const VERSION: u32 = 1;
const MAX_LEVEL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnParams {
    /// Degree cap on every layer.
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex {
    params: AnnParams,
    dim: usize,
    ids: Vec<u64>,
    levels: Vec<u8>,
    /// `links[layer][node]`; nodes above their level have empty lists.
    links: Vec<Vec<Vec<u32>>>,
    entry_point: u32,
    fingerprint: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnResult {
    pub neighbors: Vec<Neighbor>,
    /// `k` exceeded the corpus size; every entry was returned.
    pub truncated: bool,
    /// Distance evaluations; a node counts at most once per layer.
    pub visited: usize,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Geometric level with ratio `1/M`, seeded per entry.
fn node_level(seed: u64, entry_id: u64, m: usize) -> usize {
    let h = splitmix64(seed ^ splitmix64(entry_id));
    // uniform in (0, 1]
    let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let ml = 1.0 / (m.max(2) as f64).ln();
    ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
}

/// Visited marks reused across layers, plus a running evaluation count.
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
    count: usize,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            epoch: 0,
            count: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch += 1;
        if self.epoch == u32::MAX {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Returns true the first time a node is seen in this epoch.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            self.count += 1;
            true
        }
    }
}

/// Beam search on one layer of `links`; the result is ascending.
fn search_layer(
    table: &EmbeddingTable,
    links: &[Vec<Vec<u32>>],
    query: &[f32],
    entries: &[u32],
    ef: usize,
    layer: usize,
    visited: &mut Visited,
) -> Vec<Scored> {
    let scored = |node: u32| Scored {
        dist: squared_distance(query, table.vector(node as usize)),
        index: node,
    };
    let mut frontier = BinaryHeap::new();
    let mut best: BinaryHeap<Scored> = BinaryHeap::new();
    for &e in entries {
        if visited.insert(e) {
            let s = scored(e);
            frontier.push(Reverse(s));
            best.push(s);
            if best.len() > ef {
                best.pop();
            }
        }
    }
    while let Some(Reverse(current)) = frontier.pop() {
        if best.len() >= ef && best.peek().is_some_and(|worst| current > *worst) {
            break;
        }
        for &next in &links[layer][current.index as usize] {
            if !visited.insert(next) {
                continue;
            }
            let s = scored(next);
            if best.len() < ef || best.peek().is_some_and(|worst| s < *worst) {
                frontier.push(Reverse(s));
                best.push(s);
                if best.len() > ef {
                    best.pop();
                }
            }
        }
    }
    best.into_sorted_vec()
}

fn reachable(links: &[Vec<u32>], from: u32) -> Vec<bool> {
    let mut seen = vec![false; links.len()];
    let mut queue = VecDeque::from([from]);
    seen[from as usize] = true;
    while let Some(n) = queue.pop_front() {
        for &next in &links[n as usize] {
            if !seen[next as usize] {
                seen[next as usize] = true;
                queue.push_back(next);
            }
        }
    }
    seen
}

struct Builder<'a> {
    table: &'a EmbeddingTable,
    links: Vec<Vec<Vec<u32>>>,
}

impl Builder<'_> {
    fn scored(&self, query: &[f32], node: u32) -> Scored {
        Scored {
            dist: squared_distance(query, self.table.vector(node as usize)),
            index: node,
        }
    }

    /// Keeps a candidate only if it is closer to the base than to every
    /// neighbour already kept. Input must be ascending.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        for c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = self.table.vector(c.index as usize);
            if kept.iter().all(|&k| c.dist < self.scored(cv, k).dist) {
                kept.push(c.index);
            }
        }
        kept
    }

    fn connect(&mut self, node: u32, layer: usize, neighbors: &[u32], m: usize) {
        self.links[layer][node as usize] = neighbors.to_vec();
        for &nb in neighbors {
            self.links[layer][nb as usize].push(node);
            if self.links[layer][nb as usize].len() > m {
                let base = self.table.vector(nb as usize);
                let mut scored: Vec<Scored> = self.links[layer][nb as usize]
                    .iter()
                    .map(|&x| self.scored(base, x))
                    .collect();
                scored.sort();
                self.links[layer][nb as usize] = self.select_neighbors(&scored, m);
            }
        }
    }

    /// Links every node unreachable from `entry` on the bottom layer to its
    /// nearest reachable node, preferring hosts with spare degree.
    fn repair_connectivity(&mut self, entry: u32, m: usize) {
        let n = self.table.len();
        let mut seen = reachable(&self.links[0], entry);
        let mut rounds = 0;
        while let Some(orphan) = seen.iter().position(|s| !s) {
            rounds += 1;
            assert!(rounds <= 4 * n + 4, "bottom-layer repair did not converge");
            let ov = self.table.vector(orphan);
            let mut hosts: Vec<Scored> = (0..n as u32)
                .filter(|&i| seen[i as usize])
                .map(|i| self.scored(ov, i))
                .collect();
            hosts.sort();
            let orphan = orphan as u32;
            if let Some(host) = hosts.iter().find(|h| self.links[0][h.index as usize].len() < m) {
                self.links[0][host.index as usize].push(orphan);
                // everything reachable from the orphan is now reachable too
                let extra = reachable(&self.links[0], orphan);
                for (s, e) in seen.iter_mut().zip(extra) {
                    *s |= e;
                }
            } else {
                // every reachable node is full: replace the host's farthest link
                let host = hosts[0].index as usize;
                let hv = self.table.vector(host);
                let farthest = (0..self.links[0][host].len())
                    .max_by_key(|&i| self.scored(hv, self.links[0][host][i]))
                    .expect("a full host has neighbours");
                self.links[0][host][farthest] = orphan;
                seen = reachable(&self.links[0], entry);
            }
        }
    }
}

/// Builds the graph over `table`, inserting entries in order.
pub fn build_ann(table: &EmbeddingTable, params: AnnParams, fingerprint: [u8; 32]) -> Result<AnnIndex> {
    if table.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if params.m < 2 || params.ef_construction < 1 {
        return Err(Error::Config(format!(
            "graph degree must be at least 2 and ef_construction at least 1, got {params:?}"
        )));
    }
    let n = table.len();
    let levels: Vec<u8> = table
        .ids()
        .iter()
        .map(|&id| node_level(params.seed, id, params.m) as u8)
        .collect();
    let top = *levels.iter().max().unwrap() as usize;
    let mut graph = Builder {
        table,
        links: vec![vec![Vec::new(); n]; top + 1],
    };
    let mut visited = Visited::new(n);
    let mut entry = 0u32;
    let mut max_level = levels[0] as usize;

    for node in 1..n as u32 {
        let level = levels[node as usize] as usize;
        let query = table.vector(node as usize);
        let mut current = vec![entry];
        for layer in (level + 1..=max_level).rev() {
            visited.reset();
            let found = search_layer(table, &graph.links, query, &current, 1, layer, &mut visited);
            current = vec![found[0].index];
        }
        for layer in (0..=level.min(max_level)).rev() {
            visited.reset();
            let found = search_layer(
                table,
                &graph.links,
                query,
                &current,
                params.ef_construction,
                layer,
                &mut visited,
            );
            let chosen = graph.select_neighbors(&found, params.m);
            graph.connect(node, layer, &chosen, params.m);
            current = found.iter().map(|s| s.index).collect();
        }
        if level > max_level {
            max_level = level;
            entry = node;
        }
    }
    graph.repair_connectivity(entry, params.m);

    Ok(AnnIndex {
        params,
        dim: table.dim(),
        ids: table.ids().to_vec(),
        levels,
        links: graph.links,
        entry_point: entry,
        fingerprint,
    })
}

/// Best-effort `k` nearest entries by pooled-embedding distance.
pub fn ann_knn(
    index: &AnnIndex,
    table: &EmbeddingTable,
    query: &PooledEmbedding,
    k: usize,
    ef_search: usize,
) -> Result<AnnResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if ef_search < k {
        return Err(Error::InvalidArgument(format!(
            "ef_search ({ef_search}) must be at least k ({k})"
        )));
    }
    table.check_query(query)?;
    index.check_table(table)?;

    let q = query.vector();
    let mut visited = Visited::new(table.len());
    let mut current = index.entry_point;
    for layer in (1..index.links.len()).rev() {
        visited.reset();
        current = search_layer(table, &index.links, q, &[current], 1, layer, &mut visited)[0].index;
    }
    // The entry point joins the bottom-layer seeds since it reaches every node.
    let mut seeds = vec![current];
    if current != index.entry_point {
        seeds.push(index.entry_point);
    }
    visited.reset();
    let found = search_layer(table, &index.links, q, &seeds, ef_search, 0, &mut visited);
    let neighbors = found
        .iter()
        .take(k)
        .map(|s| Neighbor {
            entry_id: index.ids[s.index as usize],
            coarse_distance: s.dist.sqrt(),
            fine_distance: None,
        })
        .collect();
    Ok(AnnResult {
        neighbors,
        truncated: k > table.len(),
        visited: visited.count,
    })
}

impl AnnIndex {
    pub fn params(&self) -> AnnParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn entry_point(&self) -> u64 {
        self.ids[self.entry_point as usize]
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn max_level(&self) -> usize {
        self.links.len() - 1
    }

    pub fn node_level(&self, node: usize) -> usize {
        self.levels[node] as usize
    }

    /// Neighbour node indices of `node` on `layer`.
    pub fn neighbors(&self, layer: usize, node: usize) -> &[u32] {
        &self.links[layer][node]
    }

    pub fn edge_count(&self) -> usize {
        self.links.iter().flatten().map(Vec::len).sum()
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.ids() != self.ids.as_slice() || table.dim() != self.dim {
            return Err(Error::CorpusIntegrity(
                "index was built over a different set of embeddings".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.ids.len();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.params.m as u32);
        put_u32(&mut out, self.params.ef_construction as u32);
        put_u64(&mut out, self.params.seed);
        put_u32(&mut out, self.dim as u32);
        put_u64(&mut out, n as u64);
        put_u64(&mut out, u64::from(self.entry_point));
        put_u32(&mut out, self.max_level() as u32);
        out.extend_from_slice(&self.fingerprint);
        for &id in &self.ids {
            put_u64(&mut out, id);
        }
        for &l in &self.levels {
            put_u32(&mut out, u32::from(l));
        }
        for layer in &self.links {
            let mut offset = 0u64;
            put_u64(&mut out, 0);
            for list in layer {
                offset += list.len() as u64;
                put_u64(&mut out, offset);
            }
            for list in layer {
                for &nb in list {
                    put_u32(&mut out, nb);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "PAI1 index");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let params = AnnParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            seed: r.u64()?,
        };
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let entry_point = r.u64()?;
        let max_level = r.u32()? as usize;
        if n == 0 || entry_point >= n as u64 || max_level > MAX_LEVEL {
            return r.fail("inconsistent header");
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let levels = (0..n)
            .map(|_| {
                let l = r.u32()?;
                if l as usize > max_level {
                    return r.fail(format!("node level {l} above max level {max_level}"));
                }
                Ok(l as u8)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut links = Vec::with_capacity(max_level + 1);
        for _ in 0..=max_level {
            let offsets = (0..=n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
                return r.fail("adjacency offsets not monotone");
            }
            let mut layer = Vec::with_capacity(n);
            for w in offsets.windows(2) {
                let deg = (w[1] - w[0]) as usize;
                if deg > params.m {
                    return r.fail(format!("degree {deg} exceeds M = {}", params.m));
                }
                let list = (0..deg)
                    .map(|_| {
                        let nb = r.u32()?;
                        if nb as usize >= n {
                            return r.fail(format!("neighbour {nb} out of range"));
                        }
                        Ok(nb)
                    })
                    .collect::<Result<Vec<_>>>()?;
                layer.push(list);
            }
            links.push(layer);
        }
        if !r.is_at_end() {
            return r.fail("trailing bytes");
        }
        Ok(Self {
            params,
            dim,
            ids,
            levels,
            links,
            entry_point: entry_point as u32,
            fingerprint,
        })
    }
}
