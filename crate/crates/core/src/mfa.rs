//! Mean-field inference: the ELBO under the fully factorised edge posterior,
//! its exact coordinate derivative and the fixed-point iterations built on it.
//!
//! The ELBO here is defined as the expectation of
//! [`Mrf::log_density`](crate::potentials::Mrf::log_density) under
//! `q(S) = Π q_kl(s_kl)` plus the entropy of `q`, without `ln Z`. The update
//! argument `γ_kl` is the exact partial derivative of that quantity (minus the
//! entropy part), which differs from the commonly printed closed form in two
//! places:
//!
//! * the degree-2 expectation sums over *unordered* neighbour pairs, so the
//!   `β_2` term of `γ` carries weight 1 rather than 2;
//! * `α_kl` appears in the pairwise terms of both `(k, l)` and `(l, k)`, so
//!   the symmetry and data contributions to `γ_kl` carry a factor 2.
//!
//! Both are checked against brute-force enumeration and finite differences in
//! the tests and in the `oracle` module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{clamp_belief, AdjacencyEstimate, CandidateGraph, EdgeBeliefs, ModelParams};
use crate::potentials::{DataTerms, Mrf};

pub const DEFAULT_ELBO_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_INITIAL_BELIEF: f64 = 0.5;

/// Truncated generating polynomial `z^0..z^2` of a node's degree.
pub(crate) type Poly = [f64; 3];

#[inline]
pub(crate) fn poly_mul(p: &Poly, q: &Poly) -> Poly {
    [p[0] * q[0], p[0] * q[1] + p[1] * q[0], p[0] * q[2] + p[1] * q[1] + p[2] * q[0]]
}

#[inline]
pub(crate) fn poly_factor(alpha: f64) -> Poly {
    [1.0 - alpha, alpha, 0.0]
}

pub(crate) const POLY_ONE: Poly = [1.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub(crate) fn binary_entropy(a: f64) -> f64 {
    -(a * a.ln() + (1.0 - a) * (1.0 - a).ln())
}

/// `[P(deg=0), P(deg=1), P(deg=2), P(deg>2)]` for independent Bernoulli
/// edges with the given probabilities. Equal to `Π(1−α)·e_v(α/(1−α))` for
/// `v ≤ 2`, evaluated as a convolution so no odds ratio is formed.
pub fn degree_distribution(alpha_row: &[f64]) -> [f64; 4] {
    let mut d = [1.0, 0.0, 0.0, 0.0];
    for &a in alpha_row {
        let b = 1.0 - a;
        d = [b * d[0], b * d[1] + a * d[0], b * d[2] + a * d[1], d[3] + a * d[2]];
    }
    d
}

/// `E_q[𝕀[Σ_j s_ij = v]]` for `v ∈ {0, 1, 2}`.
pub fn degree_expectation(alpha_row: &[f64], v: usize) -> Result<f64> {
    if v > 2 {
        return Err(Error::Domain(format!("degree indicator defined for v <= 2, got {v}")));
    }
    Ok(degree_distribution(alpha_row)[v])
}

/// Leave-one-out degree polynomials for every position of a row.
pub(crate) fn leave_one_out(row: &[f64], out: &mut Vec<Poly>) {
    let n = row.len();
    out.clear();
    out.resize(n, POLY_ONE);
    let mut acc = POLY_ONE;
    for (j, &a) in row.iter().enumerate() {
        out[j] = acc;
        acc = poly_mul(&acc, &poly_factor(a));
    }
    acc = POLY_ONE;
    for j in (0..n).rev() {
        out[j] = poly_mul(&out[j], &acc);
        acc = poly_mul(&acc, &poly_factor(row[j]));
    }
}

/// Derivative of `Σ_v β_v P(deg=v)` with respect to one edge of the row,
/// given the degree polynomial `q` of the remaining edges.
#[inline]
pub(crate) fn degree_prior_slope(q: &Poly, theta: &ModelParams) -> f64 {
    let [b0, b1, b2] = theta.beta;
    (b1 - b0) * q[0] + (b2 - b1) * q[1] - b2 * q[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboBreakdown {
    pub node_term: f64,
    pub pairwise_term: f64,
    pub entropy_term: f64,
    pub total: f64,
}

/// `E_q[ln p̃(S, X)] + H(q)`, excluding `ln Z`.
pub fn elbo(mrf: &Mrf<'_>, theta: &ModelParams, alpha: &EdgeBeliefs) -> Result<ElboBreakdown> {
    let graph = mrf.graph();
    alpha.check_keys(graph)?;
    let terms = mrf.data_terms(theta);
    Ok(elbo_with_terms(mrf, theta, &terms, alpha.values()))
}

pub(crate) fn elbo_with_terms(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    terms: &DataTerms,
    alpha: &[f64],
) -> ElboBreakdown {
    let graph = mrf.graph();
    let mut node_term = 0.0;
    for k in 0..graph.num_nodes() {
        let row = &alpha[graph.row(k)];
        let d = degree_distribution(row);
        let expected_degree: f64 = row.iter().sum();
        node_term += theta.beta[0] * d[0]
            + theta.beta[1] * d[1]
            + theta.beta[2] * d[2]
            + terms.node[k] * expected_degree;
    }
    let mut pairwise_term = 0.0;
    let mut entropy_term = 0.0;
    for (p, &a) in alpha.iter().enumerate() {
        let b = alpha[mrf.reverse(p)];
        pairwise_term += theta.lambda * (1.0 - 2.0 * (a + b) + 4.0 * a * b)
            + (2.0 * a * b - 1.0) * terms.pair[p];
        entropy_term += binary_entropy(a);
    }
    ElboBreakdown {
        node_term,
        pairwise_term,
        entropy_term,
        total: node_term + pairwise_term + entropy_term,
    }
}

/// Pairwise part of `γ_p` for `p = (k, l)` given `α_lk`.
#[inline]
pub(crate) fn pairwise_slope(alpha_rev: f64, pair_term: f64, theta: &ModelParams) -> f64 {
    2.0 * ((4.0 * alpha_rev - 2.0) * theta.lambda + 2.0 * alpha_rev * pair_term)
}

/// `γ` for every pair, all computed from the same snapshot of `alpha`.
pub(crate) fn gamma_all(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    terms: &DataTerms,
    alpha: &[f64],
    loo: &mut Vec<Poly>,
    out: &mut Vec<f64>,
) {
    let graph = mrf.graph();
    out.clear();
    out.resize(alpha.len(), 0.0);
    for k in 0..graph.num_nodes() {
        let range = graph.row(k);
        leave_one_out(&alpha[range.clone()], loo);
        for (j, p) in range.enumerate() {
            out[p] = degree_prior_slope(&loo[j], theta)
                + terms.node[k]
                + pairwise_slope(alpha[mrf.reverse(p)], terms.pair[p], theta);
        }
    }
}

fn gamma_pair(mrf: &Mrf<'_>, theta: &ModelParams, terms: &DataTerms, alpha: &[f64], p: usize) -> f64 {
    let k = mrf.source(p);
    let range = mrf.graph().row(k);
    let mut q = POLY_ONE;
    for other in range {
        if other != p {
            q = poly_mul(&q, &poly_factor(alpha[other]));
        }
    }
    degree_prior_slope(&q, theta) + terms.node[k] + pairwise_slope(alpha[mrf.reverse(p)], terms.pair[p], theta)
}

/// `∂ELBO/∂α_kl + logit(α_kl)`: the argument of the sigmoid in the
/// coordinate update. Independent of `α_kl` itself.
pub fn gamma(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    alpha: &EdgeBeliefs,
    k: usize,
    l: usize,
) -> Result<f64> {
    alpha.check_keys(mrf.graph())?;
    let p = mrf
        .graph()
        .pair_index(k, l)
        .ok_or_else(|| Error::Domain(format!("{l} is not a candidate neighbour of {k}")))?;
    Ok(gamma_pair(mrf, theta, &mrf.data_terms(theta), alpha.values(), p))
}

/// Damping factor in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Damping(f64);

impl Damping {
    pub const NONE: Damping = Damping(0.0);

    pub fn new(d: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::Config(format!("damping must be in [0, 1), got {d}")));
        }
        Ok(Self(d))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Damping {
    fn default() -> Self {
        Self::NONE
    }
}

/// All pairs updated simultaneously from `α^(t)`:
/// `α' = (1−d)·σ(γ(α^(t))) + d·α^(t)`, clamped.
pub fn mfa_step_parallel(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    alpha: &EdgeBeliefs,
    damping: Damping,
) -> Result<EdgeBeliefs> {
    alpha.check_keys(mrf.graph())?;
    let terms = mrf.data_terms(theta);
    Ok(step_parallel_with_terms(mrf, theta, &terms, alpha, damping))
}

fn step_parallel_with_terms(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    terms: &DataTerms,
    alpha: &EdgeBeliefs,
    damping: Damping,
) -> EdgeBeliefs {
    let (mut loo, mut gam) = (Vec::new(), Vec::new());
    gamma_all(mrf, theta, terms, alpha.values(), &mut loo, &mut gam);
    let d = damping.value();
    let values = gam
        .iter()
        .zip(alpha.values())
        .map(|(&g, &a)| clamp_belief((1.0 - d) * sigmoid(g) + d * a))
        .collect();
    EdgeBeliefs::from_values(values, alpha.layer + 1)
}

/// One coordinate-ascent sweep over pairs in ascending pair order, each
/// update using the freshest values. Never decreases the ELBO.
pub fn mfa_sweep_sequential(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    alpha: &EdgeBeliefs,
) -> Result<EdgeBeliefs> {
    alpha.check_keys(mrf.graph())?;
    let terms = mrf.data_terms(theta);
    Ok(sweep_with_terms(mrf, theta, &terms, alpha))
}

fn sweep_with_terms(mrf: &Mrf<'_>, theta: &ModelParams, terms: &DataTerms, alpha: &EdgeBeliefs) -> EdgeBeliefs {
    let mut values = alpha.values().to_vec();
    for p in 0..values.len() {
        values[p] = clamp_belief(sigmoid(gamma_pair(mrf, theta, terms, &values, p)));
    }
    EdgeBeliefs::from_values(values, alpha.layer + 1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MfaSchedule {
    pub mode: UpdateMode,
    pub max_iters: usize,
    pub elbo_tolerance: f64,
    pub damping: Damping,
}

impl Default for MfaSchedule {
    fn default() -> Self {
        Self {
            mode: UpdateMode::Parallel,
            max_iters: 10,
            elbo_tolerance: DEFAULT_ELBO_TOLERANCE,
            damping: Damping::NONE,
        }
    }
}

impl MfaSchedule {
    pub fn new(mode: UpdateMode, max_iters: usize, elbo_tolerance: f64, damping: f64) -> Result<Self> {
        if !(elbo_tolerance >= 0.0) {
            return Err(Error::Config(format!("elbo tolerance must be >= 0, got {elbo_tolerance}")));
        }
        Ok(Self { mode, max_iters, elbo_tolerance, damping: Damping::new(damping)? })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryLayer {
    pub layer: usize,
    pub elbo: ElboBreakdown,
    pub alpha: Vec<f64>,
}

/// Beliefs and ELBO of every layer `0..=t_stop`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub layers: Vec<(EdgeBeliefs, ElboBreakdown)>,
    pub converged: bool,
}

impl Trajectory {
    pub fn last(&self) -> &EdgeBeliefs {
        &self.layers.last().expect("trajectory always holds the initial layer").0
    }

    pub fn elbos(&self) -> Vec<f64> {
        self.layers.iter().map(|(_, e)| e.total).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let layers: Vec<TrajectoryLayer> = self
            .layers
            .iter()
            .map(|(a, e)| TrajectoryLayer { layer: a.layer, elbo: *e, alpha: a.values().to_vec() })
            .collect();
        serde_json::json!({ "converged": self.converged, "layers": layers })
    }
}

/// Iterate until `max_iters` layers were produced or the ELBO changes by
/// less than the tolerance between successive layers.
pub fn run_mfa(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    alpha0: &EdgeBeliefs,
    schedule: &MfaSchedule,
) -> Result<Trajectory> {
    alpha0.check_keys(mrf.graph())?;
    let terms = mrf.data_terms(theta);
    let mut current = alpha0.clone();
    current.layer = 0;
    let mut prev_elbo = elbo_with_terms(mrf, theta, &terms, current.values());
    let mut layers = vec![(current.clone(), prev_elbo)];
    let mut converged = false;
    for _ in 0..schedule.max_iters {
        let next = match schedule.mode {
            UpdateMode::Parallel => step_parallel_with_terms(mrf, theta, &terms, &current, schedule.damping),
            UpdateMode::Sequential => sweep_with_terms(mrf, theta, &terms, &current),
        };
        let e = elbo_with_terms(mrf, theta, &terms, next.values());
        layers.push((next.clone(), e));
        current = next;
        if (e.total - prev_elbo.total).abs() < schedule.elbo_tolerance {
            converged = true;
            break;
        }
        prev_elbo = e;
    }
    Ok(Trajectory { layers, converged })
}

/// Thresholded beliefs: the directed estimate and the undirected edge set
/// (an edge needs both directions above the threshold).
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub directed: AdjacencyEstimate,
    pub undirected: Vec<(usize, usize)>,
}

pub fn threshold(graph: &CandidateGraph, alpha: &EdgeBeliefs, tau: f64) -> Result<Thresholded> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("threshold must be in (0, 1), got {tau}")));
    }
    alpha.check_keys(graph)?;
    let directed = alpha.threshold(tau);
    let undirected = directed.undirected_edges(graph);
    Ok(Thresholded { directed, undirected })
}
