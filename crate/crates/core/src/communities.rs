//! Topic communities: modularity, Louvain and greedy agglomerative
//! optimization, variation of information, and the perturbation robustness
//! protocol comparing a graph against its degree-preserving null model.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, run_seed};
use crate::tag_graph::{perturb, rewire_random, NodeId, TagGraph};
use crate::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Louvain,
    GreedyModularity,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "louvain" => Ok(Algorithm::Louvain),
            "greedy_modularity" | "greedy" => Ok(Algorithm::GreedyModularity),
            other => Err(Error::Config(format!("unknown community algorithm `{other}`"))),
        }
    }
}

/// Assignment of every graph node to one community, ids dense in `0..C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    num_communities: usize,
    pub modularity: f64,
    /// `None` for partitions supplied from outside (planted, singleton, files).
    pub algorithm: Option<Algorithm>,
    pub weighted: bool,
}

impl Partition {
    /// Relabels arbitrary labels to dense ids in order of first appearance
    /// and evaluates modularity on `g`.
    pub fn from_labels(g: &TagGraph, labels: &[usize], weighted: bool) -> Result<Self> {
        let assignment = relabel(labels);
        let q = modularity(g, &assignment, weighted)?;
        Ok(Self::from_dense(assignment, q, None, weighted))
    }

    /// Every node in its own community.
    pub fn singletons(g: &TagGraph, weighted: bool) -> Self {
        let labels: Vec<usize> = (0..g.num_nodes()).collect();
        Self::from_labels(g, &labels, weighted).expect("labels cover the graph")
    }

    fn from_dense(assignment: Vec<usize>, q: f64, algorithm: Option<Algorithm>, weighted: bool) -> Self {
        let num_communities = assignment.iter().max().map_or(0, |m| m + 1);
        Partition {
            assignment,
            num_communities,
            modularity: q,
            algorithm,
            weighted,
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_of(&self, node: NodeId) -> usize {
        self.assignment[node]
    }

    pub fn num_communities(&self) -> usize {
        self.num_communities
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_communities];
        for &c in &self.assignment {
            s[c] += 1;
        }
        s
    }

    /// Writes `tag<TAB>community_id` lines in node order.
    pub fn write_tsv<W: Write>(&self, g: &TagGraph, mut out: W) -> Result<()> {
        if g.num_nodes() != self.num_nodes() {
            return Err(Error::PartitionMismatch("node counts differ".into()));
        }
        for (node, &c) in self.assignment.iter().enumerate() {
            writeln!(out, "{}\t{}", g.name(node), c)?;
        }
        Ok(())
    }

    /// Reads the `tag<TAB>community_id` format against `g`.
    pub fn read_tsv<R: BufRead>(g: &TagGraph, input: R, weighted: bool) -> Result<Self> {
        let mut labels: Vec<Option<usize>> = vec![None; g.num_nodes()];
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (tag, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidInput(format!("bad partition line `{line}`")))?;
            let node = g
                .node(tag)
                .ok_or_else(|| Error::PartitionMismatch(format!("unknown tag `{tag}`")))?;
            let c: usize = c
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad community id in `{line}`")))?;
            labels[node] = Some(c);
        }
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::PartitionMismatch(format!("tag `{}` unassigned", g.name(i)))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_labels(g, &labels, weighted)
    }
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Newman–Girvan modularity of `assignment` on `g`.
///
/// With `weighted`, the adjacency matrix holds co-occurrence weights, `m` is
/// the total weight and degrees are strengths; otherwise every edge counts 1.
/// A graph without edges has modularity 0 for every partition.
pub fn modularity(g: &TagGraph, assignment: &[usize], weighted: bool) -> Result<f64> {
    if assignment.len() != g.num_nodes() {
        return Err(Error::PartitionMismatch(format!(
            "partition covers {} nodes, graph has {}",
            assignment.len(),
            g.num_nodes()
        )));
    }
    let communities = assignment.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; communities];
    let mut total = vec![0.0; communities];
    let mut two_m = 0.0;
    for (a, b, w) in g.edges() {
        let w = if weighted { w as f64 } else { 1.0 };
        two_m += 2.0 * w;
        total[assignment[a]] += w;
        total[assignment[b]] += w;
        if assignment[a] == assignment[b] {
            internal[assignment[a]] += 2.0 * w;
        }
    }
    if two_m == 0.0 {
        return Ok(0.0);
    }
    Ok(internal
        .iter()
        .zip(&total)
        .map(|(&i, &t)| i / two_m - (t / two_m) * (t / two_m))
        .sum())
}

/// Working graph for one Louvain level. Self-loop weight holds the weight of
/// edges collapsed inside an aggregated node (each counted once).
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
}

impl LevelGraph {
    fn strength(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|&(_, w)| w).sum::<f64>() + 2.0 * self.self_loop[i]
    }

    fn aggregate(&self, comm: &[usize], count: usize) -> LevelGraph {
        let mut self_loop = vec![0.0; count];
        let mut between: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); count];
        for (i, nbrs) in self.adj.iter().enumerate() {
            self_loop[comm[i]] += self.self_loop[i];
            for &(j, w) in nbrs {
                if j < i {
                    continue;
                }
                let (ci, cj) = (comm[i], comm[j]);
                if ci == cj {
                    self_loop[ci] += w;
                } else {
                    *between[ci].entry(cj).or_insert(0.0) += w;
                    *between[cj].entry(ci).or_insert(0.0) += w;
                }
            }
        }
        LevelGraph {
            adj: between.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loop,
        }
    }

    /// Local-moving phase. Returns the community of each node (dense) and
    /// whether any node moved.
    fn local_moves(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize, bool) {
        self.local_moves_from((0..self.adj.len()).collect(), rng)
    }

    /// Local moving starting from an existing assignment.
    fn local_moves_from(&self, mut comm: Vec<usize>, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize, bool) {
        let n = self.adj.len();
        let strength: Vec<f64> = (0..n).map(|i| self.strength(i)).collect();
        let two_m: f64 = strength.iter().sum();
        let mut tot = vec![0.0; n];
        for i in 0..n {
            tot[comm[i]] += strength[i];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let tol = 1e-12 * two_m.max(1.0);
        let mut moved_any = false;
        let mut links: HashMap<usize, f64> = HashMap::new();
        let mut seen: Vec<usize> = Vec::new();
        for _pass in 0..1000 {
            let mut moved = false;
            for &i in &order {
                let k = strength[i];
                if k == 0.0 {
                    continue;
                }
                let own = comm[i];
                links.clear();
                seen.clear();
                for &(j, w) in &self.adj[i] {
                    let c = comm[j];
                    if !links.contains_key(&c) {
                        seen.push(c);
                    }
                    *links.entry(c).or_insert(0.0) += w;
                }
                tot[own] -= k;
                let gain = |c: usize, tot: &[f64]| links.get(&c).copied().unwrap_or(0.0) - tot[c] * k / two_m;
                let mut best = own;
                let mut best_gain = gain(own, &tot);
                for &c in &seen {
                    let g = gain(c, &tot);
                    if g - best_gain > tol {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += k;
                if best != own {
                    comm[i] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            if !moved {
                break;
            }
        }
        let dense = relabel(&comm);
        let count = dense.iter().max().map_or(0, |m| m + 1);
        (dense, count, moved_any)
    }
}

/// Independent Louvain runs per call; the highest-modularity run is kept.
pub const LOUVAIN_RESTARTS: u64 = 8;

/// Louvain modularity optimization: repeated local moving and aggregation
/// until no node changes community. Once aggregation stalls, single tags are
/// moved again on the original graph; if any move, aggregation resumes.
///
/// `LOUVAIN_RESTARTS` runs are made with node visiting orders shuffled from
/// seeds derived from `seed`, and the best partition is returned (earliest
/// run on equal modularity). On equal gains the first community encountered
/// wins.
pub fn louvain(g: &TagGraph, seed: u64, weighted: bool) -> Result<Partition> {
    if g.num_nodes() == 0 {
        return Err(Error::InvalidInput("cannot partition an empty graph".into()));
    }
    let base = LevelGraph {
        adj: g.adjacency(weighted),
        self_loop: vec![0.0; g.num_nodes()],
    };
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..LOUVAIN_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("louvain/{r}")));
        let assignment = louvain_run(&base, &mut rng);
        let q = modularity(g, &assignment, weighted)?;
        if best.as_ref().map_or(true, |(_, bq)| q > *bq + 1e-12) {
            best = Some((assignment, q));
        }
    }
    let (assignment, q) = best.expect("at least one restart");
    Ok(Partition::from_dense(assignment, q, Some(Algorithm::Louvain), weighted))
}

fn louvain_run(base: &LevelGraph, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = base.adj.len();
    let mut membership: Vec<usize> = (0..n).collect();
    for _round in 0..100 {
        let count = membership.iter().max().map_or(0, |m| m + 1);
        let mut level = base.aggregate(&membership, count);
        loop {
            let (comm, count, moved) = level.local_moves(rng);
            if !moved {
                break;
            }
            for m in membership.iter_mut() {
                *m = comm[*m];
            }
            level = level.aggregate(&comm, count);
        }
        let (refined, _, moved) = base.local_moves_from(membership.clone(), rng);
        membership = refined;
        if !moved {
            break;
        }
    }
    relabel(&membership)
}

#[derive(Clone, Copy, Debug)]
struct MergeCandidate {
    gain: f64,
    a: usize,
    b: usize,
    version_a: u64,
    version_b: u64,
}

impl PartialEq for MergeCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for MergeCandidate {}

impl PartialOrd for MergeCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MergeCandidate {
    // Max-heap on gain; among equal gains the smallest (a, b) pair is greatest.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

/// A greedy merge run: the partition plus the modularity gain of each merge.
#[derive(Clone, Debug)]
pub struct GreedyTrace {
    pub partition: Partition,
    pub initial_modularity: f64,
    pub merge_gains: Vec<f64>,
    /// Modularity tracked incrementally through the merges.
    pub tracked_modularity: f64,
}

/// Agglomerative greedy modularity maximization: starting from singletons,
/// repeatedly merge the pair of adjacent communities with the largest
/// positive modularity gain (ties: smallest community-id pair) until no
/// merge improves modularity.
pub fn greedy_modularity(g: &TagGraph, weighted: bool) -> Result<Partition> {
    Ok(greedy_modularity_trace(g, weighted)?.partition)
}

pub fn greedy_modularity_trace(g: &TagGraph, weighted: bool) -> Result<GreedyTrace> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::InvalidInput("cannot partition an empty graph".into()));
    }
    let mut nbrs: Vec<BTreeMap<usize, f64>> = g
        .adjacency(weighted)
        .into_iter()
        .map(|l| l.into_iter().collect())
        .collect();
    let two_m: f64 = nbrs.iter().flat_map(|m| m.values()).sum();
    let singles: Vec<usize> = (0..n).collect();
    if two_m == 0.0 {
        return Ok(GreedyTrace {
            partition: Partition::from_dense(singles, 0.0, Some(Algorithm::GreedyModularity), weighted),
            initial_modularity: 0.0,
            merge_gains: Vec::new(),
            tracked_modularity: 0.0,
        });
    }
    let mut a: Vec<f64> = nbrs.iter().map(|m| m.values().sum::<f64>() / two_m).collect();
    let mut q: f64 = -a.iter().map(|x| x * x).sum::<f64>();
    let initial = q;
    let mut version = vec![0u64; n];
    let mut alive = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let gain = |w: f64, ai: f64, aj: f64| 2.0 * (w / two_m - ai * aj);

    let mut heap = BinaryHeap::new();
    for i in 0..n {
        for (&j, &w) in &nbrs[i] {
            if i < j {
                heap.push(MergeCandidate {
                    gain: gain(w, a[i], a[j]),
                    a: i,
                    b: j,
                    version_a: 0,
                    version_b: 0,
                });
            }
        }
    }
    let mut gains = Vec::new();
    while let Some(top) = heap.pop() {
        let (i, j) = (top.a, top.b);
        if !alive[i] || !alive[j] || version[i] != top.version_a || version[j] != top.version_b {
            continue;
        }
        if top.gain <= 0.0 {
            break;
        }
        // Merge j into i (i < j keeps the smaller id).
        let absorbed = std::mem::take(&mut nbrs[j]);
        for (&k, &w) in &absorbed {
            nbrs[k].remove(&j);
            if k == i {
                continue;
            }
            *nbrs[i].entry(k).or_insert(0.0) += w;
            *nbrs[k].entry(i).or_insert(0.0) += w;
        }
        nbrs[i].remove(&j);
        a[i] += a[j];
        a[j] = 0.0;
        alive[j] = false;
        parent[j] = i;
        version[i] += 1;
        q += top.gain;
        gains.push(top.gain);
        for (&k, &w) in &nbrs[i] {
            let (lo, hi) = if i < k { (i, k) } else { (k, i) };
            heap.push(MergeCandidate {
                gain: gain(w, a[i], a[k]),
                a: lo,
                b: hi,
                version_a: version[lo],
                version_b: version[hi],
            });
        }
    }
    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let labels: Vec<usize> = (0..n).map(root).collect();
    let assignment = relabel(&labels);
    let exact = modularity(g, &assignment, weighted)?;
    Ok(GreedyTrace {
        partition: Partition::from_dense(assignment, exact, Some(Algorithm::GreedyModularity), weighted),
        initial_modularity: initial,
        merge_gains: gains,
        tracked_modularity: q,
    })
}

/// Variation of information between two partitions of the same node set,
/// in nats: `H(C|C') + H(C'|C)`.
pub fn variation_of_information(p1: &Partition, p2: &Partition) -> Result<f64> {
    vi_labels(p1.assignment(), p2.assignment())
}

/// [`variation_of_information`] on raw label vectors.
pub fn vi_labels(x: &[usize], y: &[usize]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::PartitionMismatch(format!(
            "partitions cover {} and {} nodes",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mx: HashMap<usize, usize> = HashMap::new();
    let mut my: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_insert(0) += 1;
        *mx.entry(a).or_insert(0) += 1;
        *my.entry(b).or_insert(0) += 1;
    }
    let nf = n as f64;
    let mut vi = 0.0;
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    for ((a, b), c) in cells {
        let r = c as f64 / nf;
        let pa = mx[&a] as f64 / nf;
        let pb = my[&b] as f64 / nf;
        vi -= r * ((r / pa).ln() + (r / pb).ln());
    }
    Ok(vi.max(0.0))
}

/// A community detection method with its fixed seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detector {
    pub algorithm: Algorithm,
    pub weighted: bool,
    pub seed: u64,
}

impl Detector {
    pub fn louvain(seed: u64) -> Self {
        Detector {
            algorithm: Algorithm::Louvain,
            weighted: true,
            seed,
        }
    }

    pub fn detect(&self, g: &TagGraph) -> Result<Partition> {
        match self.algorithm {
            Algorithm::Louvain => louvain(g, self.seed, self.weighted),
            Algorithm::GreedyModularity => greedy_modularity(g, self.weighted),
        }
    }
}

/// Mean and spread of VI between the reference partition and partitions of
/// perturbed graphs, per perturbation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub p_levels: Vec<f64>,
    pub vi_mean: Vec<f64>,
    pub vi_std: Vec<f64>,
    pub repeats: usize,
    /// Raw VI samples, `samples[level][repeat]`.
    pub samples: Vec<Vec<f64>>,
}

impl RobustnessCurve {
    /// CSV with header `p,vi_mean,vi_std`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "p,vi_mean,vi_std")?;
        for i in 0..self.p_levels.len() {
            writeln!(out, "{},{},{}", self.p_levels[i], self.vi_mean[i], self.vi_std[i])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub original: RobustnessCurve,
    pub random: RobustnessCurve,
    pub modularity_original: f64,
    pub modularity_random: f64,
    pub rewire_swaps: usize,
    pub rewire_complete: bool,
}

/// Twenty evenly spaced levels from 0 to 1 inclusive.
pub fn default_p_levels() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 19.0).collect()
}

/// Partitions `g`, then for each level and repeat perturbs `g`,
/// re-partitions it with the same detector and records the VI against the
/// reference partition. Repeat `r` at level `l` perturbs with seed
/// `seed + l·repeats + r`.
pub fn robustness_curve(
    g: &TagGraph,
    detector: &Detector,
    p_levels: &[f64],
    repeats: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Partition, RobustnessCurve)> {
    if repeats == 0 {
        return Err(Error::Config("robustness needs at least one repeat".into()));
    }
    if p_levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("perturbation levels must be sorted".into()));
    }
    let reference = detector.detect(g)?;
    let runs = p_levels.len() * repeats;
    let samples: Vec<f64> = exec
        .map_range(runs, |idx| -> Result<f64> {
            let p = p_levels[idx / repeats];
            let h = perturb(g, p, run_seed(seed, idx))?;
            let part = detector.detect(&h)?;
            variation_of_information(&reference, &part)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut vi_mean = Vec::with_capacity(p_levels.len());
    let mut vi_std = Vec::with_capacity(p_levels.len());
    let mut grouped = Vec::with_capacity(p_levels.len());
    for chunk in samples.chunks(repeats) {
        let mean = chunk.iter().sum::<f64>() / repeats as f64;
        let var = if repeats > 1 {
            chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64
        } else {
            0.0
        };
        vi_mean.push(mean);
        vi_std.push(var.sqrt());
        grouped.push(chunk.to_vec());
    }
    Ok((
        reference,
        RobustnessCurve {
            p_levels: p_levels.to_vec(),
            vi_mean,
            vi_std,
            repeats,
            samples: grouped,
        },
    ))
}

/// Runs [`robustness_curve`] on `g` and on a degree-preserving random
/// rewiring of `g`, yielding the original and null-model curves.
pub fn robustness_protocol(
    g: &TagGraph,
    detector: &Detector,
    p_levels: &[f64],
    repeats: usize,
    seed: u64,
    exec: Exec,
) -> Result<RobustnessReport> {
    let (ref_org, original) = robustness_curve(g, detector, p_levels, repeats, seed, exec)?;
    let rewired = rewire_random(g, derive_seed(seed, "rewire"))?;
    let (ref_rnd, random) = robustness_curve(
        &rewired.graph,
        detector,
        p_levels,
        repeats,
        derive_seed(seed, "random-perturb"),
        exec,
    )?;
    Ok(RobustnessReport {
        original,
        random,
        modularity_original: ref_org.modularity,
        modularity_random: ref_rnd.modularity,
        rewire_swaps: rewired.swaps,
        rewire_complete: rewired.all_swapped,
    })
}
