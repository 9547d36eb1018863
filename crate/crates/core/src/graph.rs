//! Domain types shared by every stage of the pipeline: node features, the
//! candidate graph with its k-nearest-neighbour neighbourhoods, per-pair edge
//! beliefs, thresholded adjacencies and the MRF parameter vector.
//!
//! Everything that is keyed by "candidate pair" uses the same flat ordering:
//! pairs `(k, l)` with `l ∈ N_k`, sorted by `k` and then by `l`. The position
//! of a pair in that ordering is its *pair index*.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the packed feature vector `[mean; variance]`.
pub const FEATURE_DIM: usize = 14;
/// Number of Gaussian components per node: `x, y, z, r, vx, vy, vz`.
pub const MEAN_DIM: usize = 7;
/// Every stored belief lives in `[BELIEF_CLAMP, 1 - BELIEF_CLAMP]`.
pub const BELIEF_CLAMP: f64 = 1e-7;
/// Neighbourhood size used when a graph file carries no neighbourhoods.
pub const DEFAULT_NEIGHBORS: usize = 10;

pub type Neighborhoods = Vec<Vec<usize>>;

/// Per-node Gaussian feature estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    pub mean: [f64; MEAN_DIM],
    pub var: [f64; MEAN_DIM],
}

impl NodeFeatures {
    pub fn new(mean: [f64; MEAN_DIM], var: [f64; MEAN_DIM]) -> Self {
        Self { mean, var }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.mean[0], self.mean[1], self.mean[2]]
    }

    pub fn radius(&self) -> f64 {
        self.mean[3]
    }

    pub fn orientation(&self) -> [f64; 3] {
        [self.mean[4], self.mean[5], self.mean[6]]
    }

    /// The 14-vector `[mean, var]` used by the linear data terms.
    pub fn packed(&self) -> [f64; FEATURE_DIM] {
        let mut x = [0.0; FEATURE_DIM];
        x[..MEAN_DIM].copy_from_slice(&self.mean);
        x[MEAN_DIM..].copy_from_slice(&self.var);
        x
    }

    pub fn from_packed(x: &[f64; FEATURE_DIM]) -> Self {
        let mut mean = [0.0; MEAN_DIM];
        let mut var = [0.0; MEAN_DIM];
        mean.copy_from_slice(&x[..MEAN_DIM]);
        var.copy_from_slice(&x[MEAN_DIM..]);
        Self { mean, var }
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// For every node, the `min(l, N-1)` nodes nearest by mean position. Ties go
/// to the lower node index. Each neighbourhood is returned sorted by index.
pub fn build_knn_neighborhoods(nodes: &[NodeFeatures], l: usize) -> Result<Neighborhoods> {
    if nodes.len() < 2 {
        return Err(Error::EmptyGraph(nodes.len()));
    }
    if l == 0 {
        return Err(Error::Config("neighbourhood size L must be at least 1".into()));
    }
    let positions: Vec<[f64; 3]> = nodes.iter().map(NodeFeatures::position).collect();
    let take = l.min(nodes.len() - 1);
    let mut out = Vec::with_capacity(nodes.len());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(nodes.len());
    for (k, pk) in positions.iter().enumerate() {
        order.clear();
        order.extend(
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(j, pj)| (squared_distance(pk, pj), j)),
        );
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nk: Vec<usize> = order[..take].iter().map(|&(_, j)| j).collect();
        nk.sort_unstable();
        out.push(nk);
    }
    Ok(out)
}

/// Union closure: `l ∈ N_k` implies `k ∈ N_l`. Idempotent.
pub fn symmetrize_neighborhoods(neighborhoods: &Neighborhoods) -> Neighborhoods {
    let mut sets: Vec<BTreeSet<usize>> = neighborhoods
        .iter()
        .map(|nk| nk.iter().copied().collect())
        .collect();
    for (k, nk) in neighborhoods.iter().enumerate() {
        for &l in nk {
            if l >= sets.len() {
                sets.resize_with(l + 1, BTreeSet::new);
            }
            sets[l].insert(k);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

pub fn is_symmetric(neighborhoods: &Neighborhoods) -> bool {
    neighborhoods.iter().enumerate().all(|(k, nk)| {
        nk.iter()
            .all(|&l| neighborhoods.get(l).is_some_and(|nl| nl.binary_search(&k).is_ok()))
    })
}

/// The over-complete input graph: node features, candidate neighbourhoods
/// and (for training data) the ground-truth tree edges.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGraph {
    nodes: Vec<NodeFeatures>,
    neighborhoods: Neighborhoods,
    offsets: Vec<usize>,
    gt_edges: Option<Vec<(usize, usize)>>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl CandidateGraph {
    /// Neighbourhoods are stored sorted and deduplicated; ground-truth edges
    /// are stored as sorted `(min, max)` pairs.
    pub fn new(
        nodes: Vec<NodeFeatures>,
        mut neighborhoods: Neighborhoods,
        gt_edges: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        if neighborhoods.len() != nodes.len() {
            return Err(Error::Structural(format!(
                "{} neighbourhoods for {} nodes",
                neighborhoods.len(),
                nodes.len()
            )));
        }
        for nk in &mut neighborhoods {
            nk.sort_unstable();
            nk.dedup();
        }
        let gt_edges = gt_edges.map(|edges| {
            let set: BTreeSet<(usize, usize)> =
                edges.into_iter().map(|(i, j)| (i.min(j), i.max(j))).collect();
            set.into_iter().collect()
        });
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        offsets.push(0);
        for nk in &neighborhoods {
            offsets.push(offsets.last().unwrap() + nk.len());
        }
        Ok(Self { nodes, neighborhoods, offsets, gt_edges, meta: Default::default() })
    }

    /// k-NN neighbourhoods over mean positions, union-symmetrized.
    pub fn from_knn(
        nodes: Vec<NodeFeatures>,
        l: usize,
        gt_edges: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let knn = build_knn_neighborhoods(&nodes, l)?;
        Self::new(nodes, symmetrize_neighborhoods(&knn), gt_edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeFeatures] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeFeatures {
        &self.nodes[i]
    }

    pub fn neighborhoods(&self) -> &Neighborhoods {
        &self.neighborhoods
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighborhoods[k]
    }

    pub fn gt_edges(&self) -> Option<&[(usize, usize)]> {
        self.gt_edges.as_deref()
    }

    /// Number of ordered candidate pairs `M`.
    pub fn num_pairs(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Pair indices of row `k`.
    pub fn row(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn pair_index(&self, k: usize, l: usize) -> Option<usize> {
        let nk = self.neighborhoods.get(k)?;
        nk.binary_search(&l).ok().map(|j| self.offsets[k] + j)
    }

    /// All ordered candidate pairs in pair-index order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighborhoods
            .iter()
            .enumerate()
            .flat_map(|(k, nk)| nk.iter().map(move |&l| (k, l)))
    }

    /// Directed ground-truth adjacency over the candidate pairs: `s_kl = 1`
    /// iff `{k, l}` is a ground-truth edge.
    pub fn gt_adjacency(&self) -> Option<AdjacencyEstimate> {
        let gt = self.gt_edges.as_ref()?;
        let set: BTreeSet<(usize, usize)> = gt.iter().copied().collect();
        let bits = self
            .pairs()
            .map(|(k, l)| set.contains(&(k.min(l), k.max(l))))
            .collect();
        Some(AdjacencyEstimate { bits })
    }

    /// Subgraph induced by `keep` (in the given order). Neighbourhoods and
    /// ground truth are restricted to pairs with both ends kept.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = keep.iter().map(|&i| self.nodes[i].clone()).collect();
        let neighborhoods = keep
            .iter()
            .map(|&i| {
                self.neighborhoods[i]
                    .iter()
                    .filter_map(|&l| (remap[l] != usize::MAX).then_some(remap[l]))
                    .collect()
            })
            .collect();
        let gt = self.gt_edges.as_ref().map(|edges| {
            edges
                .iter()
                .filter(|&&(i, j)| remap[i] != usize::MAX && remap[j] != usize::MAX)
                .map(|&(i, j)| (remap[i], remap[j]))
                .collect()
        });
        let mut g = Self::new(nodes, neighborhoods, gt)?;
        g.meta = self.meta.clone();
        Ok(g)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&GraphFile::from(self))?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(s)?;
        file.into_graph()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    mean: [f64; MEAN_DIM],
    var: [f64; MEAN_DIM],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neighbors: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_edges: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

impl From<&CandidateGraph> for GraphFile {
    fn from(g: &CandidateGraph) -> Self {
        let nodes = g
            .nodes
            .iter()
            .zip(&g.neighborhoods)
            .enumerate()
            .map(|(id, (n, nk))| NodeRecord {
                id,
                mean: n.mean,
                var: n.var,
                neighbors: Some(nk.clone()),
            })
            .collect();
        Self {
            nodes,
            gt_edges: g.gt_edges.as_ref().map(|e| e.iter().map(|&(i, j)| [i, j]).collect()),
            meta: g.meta.clone(),
        }
    }
}

impl GraphFile {
    fn into_graph(mut self) -> Result<CandidateGraph> {
        self.nodes.sort_by_key(|n| n.id);
        if self.nodes.iter().enumerate().any(|(i, n)| n.id != i) {
            return Err(Error::Structural("node ids must be exactly 0..N-1".into()));
        }
        let n = self.nodes.len();
        let have_neighbors = self.nodes.iter().filter(|r| r.neighbors.is_some()).count();
        if have_neighbors != 0 && have_neighbors != n {
            return Err(Error::Structural("neighbors given for only some nodes".into()));
        }
        let gt = self.gt_edges.map(|e| e.into_iter().map(|[i, j]| (i, j)).collect::<Vec<_>>());
        if let Some(edges) = &gt {
            if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
                return Err(Error::Structural(format!("gt edge ({i}, {j}) out of range")));
            }
        }
        let mut neighborhoods = Vec::with_capacity(n);
        let mut nodes = Vec::with_capacity(n);
        for r in self.nodes {
            nodes.push(NodeFeatures::new(r.mean, r.var));
            if let Some(nb) = r.neighbors {
                if let Some(&bad) = nb.iter().find(|&&l| l >= n) {
                    return Err(Error::Structural(format!("neighbor {bad} out of range")));
                }
                neighborhoods.push(nb);
            }
        }
        let mut g = if have_neighbors == n {
            CandidateGraph::new(nodes, neighborhoods, gt)?
        } else {
            let l = self
                .meta
                .get("L")
                .and_then(serde_json::Value::as_u64)
                .map_or(DEFAULT_NEIGHBORS, |l| l as usize);
            CandidateGraph::from_knn(nodes, l, gt)?
        };
        g.meta = self.meta;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Issue {
    SelfPair { node: usize },
    NeighborOutOfRange { node: usize, neighbor: usize },
    Asymmetric { k: usize, l: usize },
    UncoveredGtEdge { i: usize, j: usize },
    Radius { node: usize, value: f64 },
    NegativeVariance { node: usize, component: usize },
    NonFiniteFeature { node: usize },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::SelfPair { node } => write!(f, "self-pair at node {node}"),
            Issue::NeighborOutOfRange { node, neighbor } => {
                write!(f, "node {node} lists out-of-range neighbor {neighbor}")
            }
            Issue::Asymmetric { k, l } => write!(f, "asymmetric neighborhoods: {l} in N_{k} but not {k} in N_{l}"),
            Issue::UncoveredGtEdge { i, j } => write!(f, "uncovered gt edge ({i}, {j})"),
            Issue::Radius { node, value } => write!(f, "radius mean {value} at node {node} is not positive"),
            Issue::NegativeVariance { node, component } => {
                write!(f, "negative variance in component {component} at node {node}")
            }
            Issue::NonFiniteFeature { node } => write!(f, "non-finite feature at node {node}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_graph(graph: &CandidateGraph) -> ValidationReport {
    let mut issues = Vec::new();
    let n = graph.num_nodes();
    for (i, node) in graph.nodes().iter().enumerate() {
        if node.mean.iter().chain(&node.var).any(|v| !v.is_finite()) {
            issues.push(Issue::NonFiniteFeature { node: i });
            continue;
        }
        if node.radius() <= 0.0 {
            issues.push(Issue::Radius { node: i, value: node.radius() });
        }
        for (c, v) in node.var.iter().enumerate() {
            if *v < 0.0 {
                issues.push(Issue::NegativeVariance { node: i, component: c });
            }
        }
    }
    for (k, nk) in graph.neighborhoods().iter().enumerate() {
        for &l in nk {
            if l == k {
                issues.push(Issue::SelfPair { node: k });
            } else if l >= n {
                issues.push(Issue::NeighborOutOfRange { node: k, neighbor: l });
            } else if graph.pair_index(l, k).is_none() {
                issues.push(Issue::Asymmetric { k, l });
            }
        }
    }
    if let Some(gt) = graph.gt_edges() {
        for &(i, j) in gt {
            if graph.pair_index(i, j).is_none() && graph.pair_index(j, i).is_none() {
                issues.push(Issue::UncoveredGtEdge { i, j });
            }
        }
    }
    ValidationReport { issues }
}

pub fn clamp_belief(x: f64) -> f64 {
    x.clamp(BELIEF_CLAMP, 1.0 - BELIEF_CLAMP)
}

/// Variational edge probabilities `α_kl`, one per ordered candidate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBeliefs {
    values: Vec<f64>,
    pub layer: usize,
}

impl EdgeBeliefs {
    pub fn uniform(graph: &CandidateGraph, value: f64) -> Self {
        Self { values: vec![clamp_belief(value); graph.num_pairs()], layer: 0 }
    }

    /// Values are clamped into the admissible belief range.
    pub fn from_values(values: Vec<f64>, layer: usize) -> Self {
        Self { values: values.into_iter().map(clamp_belief).collect(), layer }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, pair: usize) -> f64 {
        self.values[pair]
    }

    pub fn set(&mut self, pair: usize, value: f64) {
        self.values[pair] = clamp_belief(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, graph: &CandidateGraph, k: usize, l: usize) -> Option<f64> {
        graph.pair_index(k, l).map(|p| self.values[p])
    }

    pub fn check_keys(&self, graph: &CandidateGraph) -> Result<()> {
        if self.values.len() != graph.num_pairs() {
            return Err(Error::Structural(format!(
                "{} beliefs for {} candidate pairs",
                self.values.len(),
                graph.num_pairs()
            )));
        }
        Ok(())
    }

    /// `s_kl = 1` iff `α_kl > tau` (strict).
    pub fn threshold(&self, tau: f64) -> AdjacencyEstimate {
        AdjacencyEstimate { bits: self.values.iter().map(|&a| a > tau).collect() }
    }
}

/// Binary connectivity `s_kl` per ordered candidate pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyEstimate {
    pub bits: Vec<bool>,
}

impl AdjacencyEstimate {
    pub fn zeros(graph: &CandidateGraph) -> Self {
        Self { bits: vec![false; graph.num_pairs()] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn check_keys(&self, graph: &CandidateGraph) -> Result<()> {
        if self.bits.len() != graph.num_pairs() {
            return Err(Error::Structural(format!(
                "{} adjacency bits for {} candidate pairs",
                self.bits.len(),
                graph.num_pairs()
            )));
        }
        Ok(())
    }

    /// Undirected edges `{k, l}` (as `k < l`) present in both directions.
    pub fn undirected_edges(&self, graph: &CandidateGraph) -> Vec<(usize, usize)> {
        graph
            .pairs()
            .enumerate()
            .filter(|&(p, (k, l))| {
                k < l && self.bits[p] && graph.pair_index(l, k).is_some_and(|r| self.bits[r])
            })
            .map(|(_, e)| e)
            .collect()
    }

    /// Directed view of [`Self::undirected_edges`]: a pair is on iff both of
    /// its directions are on.
    pub fn symmetrized_and(&self, graph: &CandidateGraph) -> Self {
        let bits = graph
            .pairs()
            .enumerate()
            .map(|(p, (k, l))| self.bits[p] && graph.pair_index(l, k).is_some_and(|r| self.bits[r]))
            .collect();
        Self { bits }
    }
}

/// Potential parameters `θ = {β_0, β_1, β_2, λ, a, η, ν}`, shared by every
/// mean-field layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: [f64; 3],
    pub lambda: f64,
    pub a: [f64; FEATURE_DIM],
    pub eta: [f64; FEATURE_DIM],
    pub nu: [f64; FEATURE_DIM],
}

impl ModelParams {
    /// Length of the flat parameter vector.
    pub const LEN: usize = 3 + 1 + 3 * FEATURE_DIM;

    pub fn zeros() -> Self {
        Self {
            beta: [0.0; 3],
            lambda: 0.0,
            a: [0.0; FEATURE_DIM],
            eta: [0.0; FEATURE_DIM],
            nu: [0.0; FEATURE_DIM],
        }
    }

    /// Flat layout: `β_0..β_2, λ, a, η, ν`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.beta);
        v.push(self.lambda);
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.eta);
        v.extend_from_slice(&self.nu);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Structural(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                Self::LEN
            )));
        }
        let mut p = Self::zeros();
        p.beta.copy_from_slice(&v[0..3]);
        p.lambda = v[3];
        p.a.copy_from_slice(&v[4..4 + FEATURE_DIM]);
        p.eta.copy_from_slice(&v[4 + FEATURE_DIM..4 + 2 * FEATURE_DIM]);
        p.nu.copy_from_slice(&v[4 + 2 * FEATURE_DIM..]);
        Ok(p)
    }

    /// Human-readable name of flat component `i`.
    pub fn component_name(i: usize) -> String {
        match i {
            0..=2 => format!("beta[{i}]"),
            3 => "lambda".into(),
            _ => {
                let j = i - 4;
                let field = ["a", "eta", "nu"][j / FEATURE_DIM];
                format!("{field}[{}]", j % FEATURE_DIM)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if !p.is_finite() {
            return Err(Error::Domain("model parameters must be finite".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json_str(&fs::read_to_string(path)?).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
pub(crate) fn cmp_f64(a: &f64, b: &f64) -> std::cmp::Ordering {
    a.total_cmp(b)
}
