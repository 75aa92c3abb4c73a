//! Weighted tag co-occurrence graph and its randomizations.
//!
//! Nodes are the tags used by training questions (sorted by name); an edge
//! joins two tags whose co-occurrence count reaches the support threshold,
//! weighted by that count.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::Exec;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct TagGraph {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    /// Keyed by `(lo, hi)` with `lo < hi`.
    edges: BTreeMap<(NodeId, NodeId), u64>,
    support_threshold: u64,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    support_threshold: u64,
    nodes: Vec<String>,
    edges: Vec<(NodeId, NodeId, u64)>,
}

impl From<TagGraph> for GraphRepr {
    fn from(g: TagGraph) -> Self {
        GraphRepr {
            support_threshold: g.support_threshold,
            edges: g.edges().collect(),
            nodes: g.names,
        }
    }
}

impl TryFrom<GraphRepr> for TagGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        TagGraph::from_edges(r.nodes, r.edges, r.support_threshold)
    }
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl TagGraph {
    /// Builds a graph from explicit nodes and weighted edges, enforcing
    /// simplicity and the support threshold.
    pub fn from_edges(
        names: Vec<String>,
        edges: impl IntoIterator<Item = (NodeId, NodeId, u64)>,
        support_threshold: u64,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate node `{n}`")));
            }
        }
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            if a >= names.len() || b >= names.len() {
                return Err(Error::InvalidInput(format!("edge ({a},{b}) references unknown node")));
            }
            if a == b {
                return Err(Error::InvalidInput(format!("self-loop on `{}`", names[a])));
            }
            if w < support_threshold.max(1) {
                return Err(Error::InvalidInput(format!(
                    "edge weight {w} below support threshold {support_threshold}"
                )));
            }
            if map.insert(key(a, b), w).is_some() {
                return Err(Error::InvalidInput(format!("parallel edge ({a},{b})")));
            }
        }
        Ok(TagGraph {
            names,
            index,
            edges: map,
            support_threshold,
        })
    }

    /// Unweighted graph on `n` anonymous nodes (`n0`, `n1`, ...).
    pub fn from_unweighted(n: usize, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self> {
        let names = (0..n).map(|i| format!("n{i}")).collect();
        Self::from_edges(names, edges.into_iter().map(|(a, b)| (a, b, 1)), 1)
    }

    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn support_threshold(&self) -> u64 {
        self.support_threshold
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    /// Edges as `(lo, hi, weight)` in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, u64)> + '_ {
        self.edges.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<u64> {
        self.edges.get(&key(a, b)).copied()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.edges.contains_key(&key(a, b))
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes()];
        for &(a, b) in self.edges.keys() {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Neighbor lists sorted by node id; edge weight `1.0` when `weighted`
    /// is false.
    pub fn adjacency(&self, weighted: bool) -> Vec<Vec<(NodeId, f64)>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for (&(a, b), &w) in &self.edges {
            let w = if weighted { w as f64 } else { 1.0 };
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
        }
        adj
    }

    /// Writes `tag_a<TAB>tag_b<TAB>weight` lines.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        for (a, b, w) in self.edges() {
            writeln!(out, "{}\t{}\t{}", self.names[a], self.names[b], w)?;
        }
        Ok(())
    }

    /// Reads the edge-list format. Isolated nodes cannot be represented and
    /// are therefore absent from the result.
    pub fn read_edge_list<R: BufRead>(input: R, support_threshold: u64) -> Result<Self> {
        let mut names: BTreeMap<String, ()> = BTreeMap::new();
        let mut raw = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, b, w] = fields[..] else {
                return Err(Error::InvalidInput(format!(
                    "edge list line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            };
            let w: u64 = w.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("edge list line {}: bad weight", lineno + 1))
            })?;
            names.insert(a.to_string(), ());
            names.insert(b.to_string(), ());
            raw.push((a.to_string(), b.to_string(), w));
        }
        let names: Vec<String> = names.into_keys().collect();
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let edges: Vec<_> = raw
            .iter()
            .map(|(a, b, w)| (index[a.as_str()], index[b.as_str()], *w))
            .collect();
        Self::from_edges(names, edges, support_threshold)
    }

    pub fn summary(&self) -> String {
        let isolated = self.degrees().iter().filter(|&&d| d == 0).count();
        let mut s = String::new();
        let _ = writeln!(s, "nodes            {}", self.num_nodes());
        let _ = writeln!(s, "edges            {}", self.num_edges());
        let _ = writeln!(s, "isolated nodes   {isolated}");
        let _ = writeln!(s, "total weight     {}", self.total_weight());
        let _ = write!(s, "support (N_q)    {}", self.support_threshold);
        s
    }
}

/// Builds the co-occurrence graph of `train`: one node per tag used by a
/// question, one edge per tag pair co-occurring on at least `n_q` questions.
pub fn build_tag_graph(train: &Corpus, n_q: u64, exec: Exec) -> Result<TagGraph> {
    if n_q < 1 {
        return Err(Error::Config("support threshold N_q must be >= 1".into()));
    }
    let mut names: Vec<String> = train
        .questions()
        .flat_map(|q| q.tags.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    names.shrink_to_fit();
    let index: HashMap<&str, u32> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as u32))
        .collect();
    let tag_sets: Vec<Vec<u32>> = train
        .questions()
        .map(|q| {
            let mut ids: Vec<u32> = q.tags.iter().map(|t| index[t.as_str()]).collect();
            ids.sort_unstable();
            ids
        })
        .collect();

    const SHARD: usize = 4096;
    let shards: Vec<&[Vec<u32>]> = tag_sets.chunks(SHARD).collect();
    let partial = exec.map(&shards, |chunk| {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for ids in chunk.iter() {
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    *counts.entry((ids[i], ids[j])).or_insert(0) += 1;
                }
            }
        }
        counts
    });
    let mut merged: HashMap<(u32, u32), u64> = HashMap::new();
    for counts in partial {
        for (k, v) in counts {
            *merged.entry(k).or_insert(0) += v;
        }
    }
    let edges = merged
        .into_iter()
        .filter(|&(_, w)| w >= n_q)
        .map(|((a, b), w)| (a as usize, b as usize, w));
    TagGraph::from_edges(names, edges, n_q)
}

/// Result of a degree-preserving randomization.
#[derive(Clone, Debug)]
pub struct RewireOutcome {
    pub graph: TagGraph,
    /// Accepted double-edge swaps.
    pub swaps: usize,
    pub attempts: usize,
    /// Whether every edge took part in at least one accepted swap.
    pub all_swapped: bool,
    /// Set when no swap could be accepted at all; `graph` is then the input.
    pub stalled: bool,
}

/// Randomizes `g` by double-edge swaps, keeping every node's degree.
///
/// Two edges `(a,b)` and `(c,d)` become `(a,d)` and `(c,b)` (with a random
/// orientation of the second edge) unless that would create a self-loop or a
/// parallel edge. Weights follow their edge slot. Swapping continues until
/// every edge has been swapped at least once, or `100·|E|` attempts.
pub fn rewire_random(g: &TagGraph, seed: u64) -> Result<RewireOutcome> {
    let m = g.num_edges();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "degree-preserving rewiring needs at least 2 edges, graph has {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<((NodeId, NodeId), u64)> = g.edges.iter().map(|(&k, &w)| (k, w)).collect();
    let mut present: HashSet<(NodeId, NodeId)> = slots.iter().map(|&(k, _)| k).collect();
    let mut touched = vec![false; m];
    let mut untouched = m;
    let budget = 100 * m;
    let mut attempts = 0;
    let mut swaps = 0;
    while untouched > 0 && attempts < budget {
        attempts += 1;
        let i = rng.gen_range(0..m);
        let mut j = rng.gen_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = slots[i].0;
        let (mut c, mut d) = slots[j].0;
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut c, &mut d);
        }
        if a == d || c == b {
            continue;
        }
        let e1 = key(a, d);
        let e2 = key(c, b);
        if e1 == e2 || present.contains(&e1) || present.contains(&e2) {
            continue;
        }
        present.remove(&slots[i].0);
        present.remove(&slots[j].0);
        present.insert(e1);
        present.insert(e2);
        slots[i].0 = e1;
        slots[j].0 = e2;
        for s in [i, j] {
            if !touched[s] {
                touched[s] = true;
                untouched -= 1;
            }
        }
        swaps += 1;
    }
    if swaps == 0 {
        log::warn!("rewire_random: no valid edge swap found in {attempts} attempts");
        return Ok(RewireOutcome {
            graph: g.clone(),
            swaps,
            attempts,
            all_swapped: false,
            stalled: true,
        });
    }
    let graph = TagGraph {
        names: g.names.clone(),
        index: g.index.clone(),
        edges: slots.into_iter().collect(),
        support_threshold: g.support_threshold,
    };
    Ok(RewireOutcome {
        graph,
        swaps,
        attempts,
        all_swapped: untouched == 0,
        stalled: false,
    })
}

/// Number of edges [`perturb`] replaces at level `p`.
pub fn perturbed_edge_count(num_edges: usize, p: f64) -> usize {
    // The epsilon keeps products like 0.2 * 100 from flooring to 19.
    ((p * num_edges as f64) + 1e-9).floor().min(num_edges as f64) as usize
}

/// Replaces `⌊p·|E|⌋` uniformly chosen edges by uniformly random new edges
/// that are neither self-loops nor present in `g`. Each new edge inherits the
/// weight of one removed edge. If the complement of `g` has fewer free pairs
/// than needed, removed edges are re-added to keep the edge count.
pub fn perturb(g: &TagGraph, p: f64, seed: u64) -> Result<TagGraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("perturbation level {p} outside [0, 1]")));
    }
    let m = g.num_edges();
    let k = perturbed_edge_count(m, p);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<((NodeId, NodeId), u64)> = g.edges.iter().map(|(&k, &w)| (k, w)).collect();
    let mut removed: Vec<usize> = sample(&mut rng, m, k).into_vec();
    removed.sort_unstable();
    let removed_set: HashSet<usize> = removed.iter().copied().collect();

    let n = g.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let free = total_pairs - m;
    let mut added: Vec<(NodeId, NodeId)> = Vec::with_capacity(k);
    if free >= k && free > 4 * k && total_pairs > 64 {
        let mut seen: HashSet<(NodeId, NodeId)> = HashSet::with_capacity(k);
        while added.len() < k {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let e = key(a, b);
            if g.edges.contains_key(&e) || !seen.insert(e) {
                continue;
            }
            added.push(e);
        }
    } else {
        let mut pool: Vec<(NodeId, NodeId)> = Vec::with_capacity(free);
        for a in 0..n {
            for b in a + 1..n {
                if !g.edges.contains_key(&(a, b)) {
                    pool.push((a, b));
                }
            }
        }
        let take = k.min(pool.len());
        for i in sample(&mut rng, pool.len(), take) {
            added.push(pool[i]);
        }
        if take < k {
            let back: Vec<usize> = sample(&mut rng, removed.len(), k - take).into_vec();
            added.extend(back.into_iter().map(|i| slots[removed[i]].0));
        }
    }

    let mut edges: BTreeMap<(NodeId, NodeId), u64> = slots
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed_set.contains(i))
        .map(|(_, &(e, w))| (e, w))
        .collect();
    for (e, &slot) in added.into_iter().zip(&removed) {
        edges.insert(e, slots[slot].1);
    }
    debug_assert_eq!(edges.len(), m);
    Ok(TagGraph {
        names: g.names.clone(),
        index: g.index.clone(),
        edges,
        support_threshold: g.support_threshold,
    })
}
