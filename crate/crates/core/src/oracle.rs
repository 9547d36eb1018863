//! Brute-force ground truth on instances small enough to enumerate: the
//! partition function, exact edge marginals, degree-indicator expectations,
//! the ELBO as a literal expectation, and finite-difference derivatives.
//!
//! None of this shares code with the analytic paths it checks beyond
//! [`Mrf::log_density`], which is itself checked against the individually
//! evaluated potentials.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{CandidateGraph, EdgeBeliefs, ModelParams, NodeFeatures};
use crate::mfa::elbo;
use crate::mfn::GradientSet;
use crate::potentials::Mrf;

/// Largest number of ordered pairs [`enumerate_posterior`] accepts.
pub const MAX_ENUM_PAIRS: usize = 20;
/// Largest neighbourhood [`brute_degree_expectation`] accepts.
pub const MAX_ENUM_ROW: usize = 10;
/// Configuration probabilities are kept only for graphs this small.
pub const MAX_NODES_WITH_CONFIGS: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct ExactPosterior {
    pub log_partition: f64,
    /// `P(s_kl = 1 | X)` per ordered candidate pair.
    pub marginals: Vec<f64>,
    /// Probability of each configuration, indexed by the bitmask whose bit
    /// `p` is `s_p`. Only for graphs with at most four nodes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub configurations: Option<Vec<f64>>,
}

fn bits_of(mask: u32, m: usize, out: &mut [bool]) {
    for (p, b) in out.iter_mut().enumerate().take(m) {
        *b = mask >> p & 1 == 1;
    }
}

fn check_enumerable(graph: &CandidateGraph) -> Result<usize> {
    let m = graph.num_pairs();
    if m > MAX_ENUM_PAIRS {
        return Err(Error::Size { what: "candidate pair set", got: m, max: MAX_ENUM_PAIRS });
    }
    Ok(m)
}

pub fn enumerate_posterior(graph: &CandidateGraph, theta: &ModelParams) -> Result<ExactPosterior> {
    let m = check_enumerable(graph)?;
    let mrf = Mrf::new(graph)?;
    let terms = mrf.data_terms(theta);
    let count = 1usize << m;
    let mut bits = vec![false; m];
    let mut logp = Vec::with_capacity(count);
    for mask in 0..count as u32 {
        bits_of(mask, m, &mut bits);
        logp.push(mrf.log_density(&bits, theta, &terms));
    }
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z_scaled: f64 = logp.iter().map(|l| (l - max).exp()).sum();
    let log_partition = max + z_scaled.ln();

    let mut marginals = vec![0.0; m];
    let mut probs = Vec::with_capacity(count);
    for (mask, l) in logp.iter().enumerate() {
        let pr = (l - log_partition).exp();
        for (p, mg) in marginals.iter_mut().enumerate() {
            if mask >> p & 1 == 1 {
                *mg += pr;
            }
        }
        probs.push(pr);
    }
    let configurations = (graph.num_nodes() <= MAX_NODES_WITH_CONFIGS).then_some(probs);
    Ok(ExactPosterior { log_partition, marginals, configurations })
}

/// `Σ_rows q(row)·𝕀[deg(row) = v]` over all `2^|row|` binary rows.
pub fn brute_degree_expectation(alpha_row: &[f64], v: usize) -> Result<f64> {
    let n = alpha_row.len();
    if n > MAX_ENUM_ROW {
        return Err(Error::Size { what: "neighbourhood", got: n, max: MAX_ENUM_ROW });
    }
    let mut total = 0.0;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != v {
            continue;
        }
        let q: f64 = alpha_row
            .iter()
            .enumerate()
            .map(|(j, &a)| if mask >> j & 1 == 1 { a } else { 1.0 - a })
            .product();
        total += q;
    }
    Ok(total)
}

/// `Σ_S q(S) [ln p̃(S, X) − ln q(S)]` by enumeration.
pub fn brute_force_elbo(graph: &CandidateGraph, theta: &ModelParams, alpha: &EdgeBeliefs) -> Result<f64> {
    let m = check_enumerable(graph)?;
    alpha.check_keys(graph)?;
    let mrf = Mrf::new(graph)?;
    let terms = mrf.data_terms(theta);
    let mut bits = vec![false; m];
    let mut total = 0.0;
    for mask in 0..(1u32 << m) {
        bits_of(mask, m, &mut bits);
        let q: f64 = alpha
            .values()
            .iter()
            .zip(&bits)
            .map(|(&a, &b)| if b { a } else { 1.0 - a })
            .product();
        if q > 0.0 {
            total += q * (mrf.log_density(&bits, theta, &terms) - q.ln());
        }
    }
    Ok(total)
}

/// Centred difference of the ELBO in `α_kl`.
pub fn numeric_elbo_derivative(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    alpha: &EdgeBeliefs,
    k: usize,
    l: usize,
    h: f64,
) -> Result<f64> {
    let p = mrf
        .graph()
        .pair_index(k, l)
        .ok_or_else(|| Error::Domain(format!("{l} is not a candidate neighbour of {k}")))?;
    let a = alpha.get(p);
    if !(h > 0.0) || a < 2.0 * h || a > 1.0 - 2.0 * h {
        return Err(Error::Precondition(format!(
            "alpha_kl = {a} is within 2h = {} of the boundary",
            2.0 * h
        )));
    }
    let mut plus = alpha.values().to_vec();
    let mut minus = plus.clone();
    plus[p] = a + h;
    minus[p] = a - h;
    // built directly so the clamp cannot move the evaluation points
    let fp = elbo(mrf, theta, &EdgeBeliefs::from_values(plus, 0))?.total;
    let fm = elbo(mrf, theta, &EdgeBeliefs::from_values(minus, 0))?.total;
    Ok((fp - fm) / (2.0 * h))
}

/// Centred differences of `loss` in every parameter component.
pub fn numeric_param_gradient<F>(loss: F, theta: &ModelParams, h: f64) -> Result<GradientSet>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {h}")));
    }
    let base = theta.to_flat();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        let fp = loss(&ModelParams::from_flat(&v)?)?;
        v[i] = base[i] - h;
        let fm = loss(&ModelParams::from_flat(&v)?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(GradientSet(ModelParams::from_flat(&grad)?))
}

/// Mixed relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random node with positions in `[0, 3)^3`, radius in `[0.5, 1.5)`, a
/// unit orientation and variances in `[0, 1)`.
pub fn random_node<R: Rng + ?Sized>(rng: &mut R) -> NodeFeatures {
    let mut mean = [0.0; 7];
    for c in mean.iter_mut().take(3) {
        *c = rng.random_range(0.0..3.0);
    }
    mean[3] = rng.random_range(0.5..1.5);
    let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
    for c in 0..3 {
        mean[4 + c] = v[c] / norm;
    }
    let var = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    NodeFeatures::new(mean, var)
}

/// `n` random nodes with symmetrized `l`-NN neighbourhoods.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, l: usize) -> CandidateGraph {
    let nodes = (0..n).map(|_| random_node(rng)).collect();
    CandidateGraph::from_knn(nodes, l, None).expect("random graphs have at least two nodes")
}

/// Every component uniform in `[-scale, scale)`.
pub fn random_theta<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> ModelParams {
    let v: Vec<f64> = (0..ModelParams::LEN).map(|_| rng.random_range(-scale..scale)).collect();
    ModelParams::from_flat(&v).expect("length matches")
}

pub fn random_beliefs<R: Rng + ?Sized>(rng: &mut R, graph: &CandidateGraph, lo: f64, hi: f64) -> EdgeBeliefs {
    EdgeBeliefs::from_values((0..graph.num_pairs()).map(|_| rng.random_range(lo..hi)).collect(), 0)
}
