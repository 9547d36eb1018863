//! Node and pairwise potentials of the graph-refinement MRF and the
//! unnormalised joint log-density over binary connectivity configurations.
//!
//! The pairwise sum runs over *ordered* candidate pairs, so every unordered
//! pair `{i, j}` contributes `φ_ij` twice. The same convention is used by the
//! ELBO, its derivative and the training loss.

use crate::error::{Error, Result};
use crate::graph::{AdjacencyEstimate, CandidateGraph, ModelParams, NodeFeatures, FEATURE_DIM};

/// Joint features of a node pair: radius-normalised absolute differences and
/// the elementwise product of the packed feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeature {
    pub absdiff: [f64; FEATURE_DIM],
    pub prod: [f64; FEATURE_DIM],
}

/// Components `0..3` of `absdiff` (positions) are divided by `r_i + r_j`.
pub fn pair_feature(xi: &NodeFeatures, xj: &NodeFeatures) -> Result<PairFeature> {
    let rsum = xi.radius() + xj.radius();
    if !(rsum > 0.0) {
        return Err(Error::DegenerateRadius { i: 0, j: 1, sum: rsum });
    }
    let (pi, pj) = (xi.packed(), xj.packed());
    let mut absdiff = [0.0; FEATURE_DIM];
    let mut prod = [0.0; FEATURE_DIM];
    for c in 0..FEATURE_DIM {
        absdiff[c] = (pi[c] - pj[c]).abs();
        prod[c] = pi[c] * pj[c];
    }
    for d in &mut absdiff[..3] {
        *d /= rsum;
    }
    Ok(PairFeature { absdiff, prod })
}

fn dot(a: &[f64; FEATURE_DIM], b: &[f64; FEATURE_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `η·|x_i − x_j| + ν·(x_i x_j)`.
pub fn pair_data_term(pf: &PairFeature, theta: &ModelParams) -> f64 {
    dot(&theta.eta, &pf.absdiff) + dot(&theta.nu, &pf.prod)
}

/// Degree prior `β_deg`; degrees above two carry a flat (zero) prior.
pub fn degree_prior(degree: usize, theta: &ModelParams) -> f64 {
    theta.beta.get(degree).copied().unwrap_or(0.0)
}

pub fn node_potential(s_row: &[bool], x: &NodeFeatures, theta: &ModelParams) -> f64 {
    let degree = s_row.iter().filter(|&&s| s).count();
    degree_prior(degree, theta) + dot(&theta.a, &x.packed()) * degree as f64
}

pub fn pairwise_potential(s_ij: bool, s_ji: bool, pf: &PairFeature, theta: &ModelParams) -> f64 {
    let (a, b) = (s_ij as i32 as f64, s_ji as i32 as f64);
    theta.lambda * (1.0 - 2.0 * (a - b).abs()) + (2.0 * a * b - 1.0) * pair_data_term(pf, theta)
}

/// A candidate graph prepared for inference: reverse-pair lookup and cached
/// pair features. Requires symmetric neighbourhoods without self-pairs.
#[derive(Debug)]
pub struct Mrf<'g> {
    graph: &'g CandidateGraph,
    source: Vec<usize>,
    reverse: Vec<usize>,
    features: Vec<[f64; FEATURE_DIM]>,
    pair_features: Vec<PairFeature>,
}

impl<'g> Mrf<'g> {
    pub fn new(graph: &'g CandidateGraph) -> Result<Self> {
        let m = graph.num_pairs();
        let mut source = Vec::with_capacity(m);
        let mut reverse = Vec::with_capacity(m);
        let mut pair_features = Vec::with_capacity(m);
        for (k, l) in graph.pairs() {
            if k == l {
                return Err(Error::Structural(format!("self-pair at node {k}")));
            }
            let r = graph.pair_index(l, k).ok_or_else(|| {
                Error::Structural(format!("pair ({k}, {l}) has no reverse; symmetrize first"))
            })?;
            let pf = pair_feature(graph.node(k), graph.node(l)).map_err(|e| match e {
                Error::DegenerateRadius { sum, .. } => Error::DegenerateRadius { i: k, j: l, sum },
                e => e,
            })?;
            source.push(k);
            reverse.push(r);
            pair_features.push(pf);
        }
        let features = graph.nodes().iter().map(NodeFeatures::packed).collect();
        Ok(Self { graph, source, reverse, features, pair_features })
    }

    pub fn graph(&self) -> &'g CandidateGraph {
        self.graph
    }

    pub fn num_pairs(&self) -> usize {
        self.reverse.len()
    }

    /// Source node `k` of pair `p = (k, l)`.
    pub fn source(&self, p: usize) -> usize {
        self.source[p]
    }

    /// Index of `(l, k)` for `p = (k, l)`.
    pub fn reverse(&self, p: usize) -> usize {
        self.reverse[p]
    }

    pub fn features(&self, i: usize) -> &[f64; FEATURE_DIM] {
        &self.features[i]
    }

    pub fn pair_feature(&self, p: usize) -> &PairFeature {
        &self.pair_features[p]
    }

    /// Evaluate the parameter-dependent linear terms once per `θ`.
    pub fn data_terms(&self, theta: &ModelParams) -> DataTerms {
        DataTerms {
            node: self.features.iter().map(|x| dot(&theta.a, x)).collect(),
            pair: self.pair_features.iter().map(|pf| pair_data_term(pf, theta)).collect(),
        }
    }

    /// Unnormalised `ln p(S, X) + ln Z` with precomputed data terms.
    pub fn log_density(&self, s: &[bool], theta: &ModelParams, terms: &DataTerms) -> f64 {
        let mut total = 0.0;
        for k in 0..self.graph.num_nodes() {
            let degree = s[self.graph.row(k)].iter().filter(|&&b| b).count();
            total += degree_prior(degree, theta) + terms.node[k] * degree as f64;
        }
        for p in 0..s.len() {
            let (a, b) = (s[p], s[self.reverse[p]]);
            let sym = if a == b { 1.0 } else { -1.0 };
            let data = if a && b { terms.pair[p] } else { -terms.pair[p] };
            total += theta.lambda * sym + data;
        }
        total
    }
}

/// `a·x_k` per node and `η·|x_k − x_l| + ν·(x_k x_l)` per pair.
#[derive(Clone, Debug)]
pub struct DataTerms {
    pub node: Vec<f64>,
    pub pair: Vec<f64>,
}

/// `Σ_i φ_i(s_i) + Σ_(i,j) φ_ij(s_ij, s_ji)` over ordered candidate pairs.
pub fn joint_log_density_unnorm(
    s: &AdjacencyEstimate,
    graph: &CandidateGraph,
    theta: &ModelParams,
) -> Result<f64> {
    s.check_keys(graph)?;
    let mrf = Mrf::new(graph)?;
    Ok(mrf.log_density(&s.bits, theta, &mrf.data_terms(theta)))
}
