//! Mean field network: `T` parallel mean-field updates unrolled into a
//! feed-forward network whose weights are the (shared) potential parameters,
//! trained by reverse-mode differentiation of a binary cross-entropy loss on
//! the final beliefs.
//!
//! The backward pass is written out by hand for the fixed layer structure.
//! Per layer it needs the beliefs entering the layer and the pre-activation
//! `γ`, both of which the [`Tape`] keeps.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{edge_metrics, EdgeMetrics};
use crate::graph::{
    clamp_belief, distance, AdjacencyEstimate, CandidateGraph, EdgeBeliefs, ModelParams,
    BELIEF_CLAMP, FEATURE_DIM,
};
use crate::mfa::{
    gamma_all, leave_one_out, poly_factor,
    poly_mul, run_mfa, sigmoid, Damping, MfaSchedule, Poly, UpdateMode, DEFAULT_INITIAL_BELIEF,
    POLY_ONE,
};
use crate::potentials::Mrf;
use crate::synth::Dataset;

/// Gradient of a scalar loss with respect to every component of
/// [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros() -> Self {
        Self(ModelParams::zeros())
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        let v: Vec<f64> = self.to_flat().iter().zip(other.to_flat()).map(|(a, b)| a + b).collect();
        self.0 = ModelParams::from_flat(&v).expect("same length");
    }

    pub fn scale(&mut self, s: f64) {
        let v: Vec<f64> = self.to_flat().iter().map(|a| a * s).collect();
        self.0 = ModelParams::from_flat(&v).expect("same length");
    }
}

impl Deref for GradientSet {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

/// Everything the backward pass needs from a forward run.
#[derive(Clone, Debug)]
pub struct Tape {
    /// `α^(0) ..= α^(T)`.
    pub alphas: Vec<EdgeBeliefs>,
    /// `γ^(1) ..= γ^(T)`; layer `t` maps `α^(t-1)` to `α^(t) = clamp(σ(γ^(t)))`.
    pub gammas: Vec<Vec<f64>>,
}

impl Tape {
    pub fn layers(&self) -> usize {
        self.gammas.len()
    }

    pub fn output(&self) -> &EdgeBeliefs {
        self.alphas.last().expect("tape holds at least the input layer")
    }

    /// Re-run every recorded layer from `α^(0)`.
    pub fn replay(&self, mrf: &Mrf<'_>, theta: &ModelParams) -> Result<EdgeBeliefs> {
        Ok(forward(mrf, theta, self.layers(), &self.alphas[0])?.0)
    }
}

/// `T` parallel mean-field layers sharing `θ`.
pub fn forward(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    layers: usize,
    alpha0: &EdgeBeliefs,
) -> Result<(EdgeBeliefs, Tape)> {
    if layers == 0 {
        return Err(Error::Config("the network needs at least one layer".into()));
    }
    forward_untied(mrf, &vec![theta.clone(); layers], alpha0)
}

/// Forward pass with a separate parameter set per layer. With all entries
/// equal this is [`forward`]; distinct entries are used to check that shared
/// gradients are the sum of per-layer gradients.
pub fn forward_untied(
    mrf: &Mrf<'_>,
    thetas: &[ModelParams],
    alpha0: &EdgeBeliefs,
) -> Result<(EdgeBeliefs, Tape)> {
    alpha0.check_keys(mrf.graph())?;
    let mut alpha = alpha0.clone();
    alpha.layer = 0;
    let mut alphas = vec![alpha];
    let mut gammas = Vec::with_capacity(thetas.len());
    let mut loo = Vec::new();
    for theta in thetas {
        let terms = mrf.data_terms(theta);
        let mut gam = Vec::new();
        let prev = alphas.last().unwrap();
        gamma_all(mrf, theta, &terms, prev.values(), &mut loo, &mut gam);
        let next = EdgeBeliefs::from_values(gam.iter().map(|&g| sigmoid(g)).collect(), prev.layer + 1);
        gammas.push(gam);
        alphas.push(next);
    }
    let out = alphas.last().unwrap().clone();
    Ok((out, Tape { alphas, gammas }))
}

/// Mean binary cross-entropy over the `M` ordered candidate pairs, with an
/// optional weight on positive pairs.
pub fn bce_loss_weighted(alpha: &EdgeBeliefs, gt: &AdjacencyEstimate, pos_weight: f64) -> Result<f64> {
    if alpha.len() != gt.len() {
        return Err(Error::Structural(format!(
            "{} beliefs against {} ground-truth bits",
            alpha.len(),
            gt.len()
        )));
    }
    if alpha.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = alpha
        .values()
        .iter()
        .zip(&gt.bits)
        .map(|(&a, &s)| if s { -pos_weight * a.ln() } else { -(1.0 - a).ln() })
        .sum();
    Ok(total / alpha.len() as f64)
}

pub fn bce_loss(alpha: &EdgeBeliefs, gt: &AdjacencyEstimate) -> Result<f64> {
    bce_loss_weighted(alpha, gt, 1.0)
}

fn bce_grad(alpha: &EdgeBeliefs, gt: &AdjacencyEstimate, pos_weight: f64) -> Vec<f64> {
    let m = alpha.len().max(1) as f64;
    alpha
        .values()
        .iter()
        .zip(&gt.bits)
        .map(|(&a, &s)| if s { -pos_weight / (a * m) } else { 1.0 / ((1.0 - a) * m) })
        .collect()
}

/// Reverse-mode gradient of the loss of [`forward`] with respect to the
/// shared parameters.
pub fn backward(
    mrf: &Mrf<'_>,
    tape: &Tape,
    theta: &ModelParams,
    gt: &AdjacencyEstimate,
) -> Result<GradientSet> {
    backward_weighted(mrf, tape, theta, gt, 1.0)
}

pub fn backward_weighted(
    mrf: &Mrf<'_>,
    tape: &Tape,
    theta: &ModelParams,
    gt: &AdjacencyEstimate,
    pos_weight: f64,
) -> Result<GradientSet> {
    let per_layer = backward_untied(mrf, tape, &vec![theta.clone(); tape.layers()], gt, pos_weight)?;
    let mut total = GradientSet::zeros();
    for g in &per_layer {
        total.add_assign(g);
    }
    Ok(total)
}

/// Per-layer parameter gradients: entry `t` is the gradient with respect to
/// the parameters used by layer `t + 1`, holding the beliefs it receives
/// fixed and propagating through the layers after it.
pub fn backward_untied(
    mrf: &Mrf<'_>,
    tape: &Tape,
    thetas: &[ModelParams],
    gt: &AdjacencyEstimate,
    pos_weight: f64,
) -> Result<Vec<GradientSet>> {
    let graph = mrf.graph();
    gt.check_keys(graph)?;
    if thetas.len() != tape.layers() {
        return Err(Error::Structural(format!(
            "{} parameter sets for a {}-layer tape",
            thetas.len(),
            tape.layers()
        )));
    }
    let m = mrf.num_pairs();
    let mut grad_alpha = bce_grad(tape.output(), gt, pos_weight);
    let mut out = vec![GradientSet::zeros(); tape.layers()];
    let mut delta = vec![0.0; m];
    let mut prefix: Vec<Poly> = Vec::new();
    let mut suffix: Vec<Poly> = Vec::new();
    let mut loo: Vec<Poly> = Vec::new();

    for t in (1..=tape.layers()).rev() {
        let theta = &thetas[t - 1];
        let gam = &tape.gammas[t - 1];
        let prev = tape.alphas[t - 1].values();
        let terms = mrf.data_terms(theta);

        for p in 0..m {
            let s = sigmoid(gam[p]);
            let inside = s > BELIEF_CLAMP && s < 1.0 - BELIEF_CLAMP;
            delta[p] = if inside { grad_alpha[p] * s * (1.0 - s) } else { 0.0 };
        }

        let g = &mut out[t - 1];
        let need_alpha_grad = t > 1;
        let mut next_grad = vec![0.0; if need_alpha_grad { m } else { 0 }];
        let [b0, b1, b2] = theta.beta;

        for k in 0..graph.num_nodes() {
            let range = graph.row(k);
            let row = &prev[range.clone()];
            let n = row.len();
            leave_one_out(row, &mut loo);
            let xk = mrf.features(k);
            for (j, p) in range.clone().enumerate() {
                let d = delta[p];
                if d == 0.0 {
                    continue;
                }
                let q = &loo[j];
                g.beta[0] -= d * q[0];
                g.beta[1] += d * (q[0] - q[1]);
                g.beta[2] += d * (q[1] - q[2]);
                let ar = prev[mrf.reverse(p)];
                g.lambda += d * 2.0 * (4.0 * ar - 2.0);
                let pf = mrf.pair_feature(p);
                for c in 0..FEATURE_DIM {
                    g.a[c] += d * xk[c];
                    g.eta[c] += d * 4.0 * ar * pf.absdiff[c];
                    g.nu[c] += d * 4.0 * ar * pf.prod[c];
                }
                if need_alpha_grad {
                    next_grad[mrf.reverse(p)] +=
                        d * 2.0 * (4.0 * theta.lambda + 2.0 * terms.pair[p]);
                }
            }
            if !need_alpha_grad || n < 2 {
                continue;
            }
            // cross terms within the row: ∂γ_kl/∂α_km through the degree prior
            prefix.clear();
            prefix.push(POLY_ONE);
            for &a in row {
                let last = *prefix.last().unwrap();
                prefix.push(poly_mul(&last, &poly_factor(a)));
            }
            suffix.clear();
            suffix.resize(n + 1, POLY_ONE);
            for j in (0..n).rev() {
                suffix[j] = poly_mul(&suffix[j + 1], &poly_factor(row[j]));
            }
            let base = range.start;
            for j in 0..n {
                let mut mid = POLY_ONE;
                for mm in j + 1..n {
                    let r = poly_mul(&poly_mul(&prefix[j], &mid), &suffix[mm + 1]);
                    let h = -(b1 - b0) * r[0] + (b2 - b1) * (r[0] - r[1]) - b2 * (r[1] - r[2]);
                    next_grad[base + mm] += delta[base + j] * h;
                    next_grad[base + j] += delta[base + mm] * h;
                    mid = poly_mul(&mid, &poly_factor(row[mm]));
                }
            }
        }
        if need_alpha_grad {
            grad_alpha = next_grad;
        }
    }
    Ok(out)
}

/// Loss of `T` forward layers; convenience for finite-difference checks.
pub fn forward_loss(
    mrf: &Mrf<'_>,
    theta: &ModelParams,
    layers: usize,
    alpha0: &EdgeBeliefs,
    gt: &AdjacencyEstimate,
) -> Result<f64> {
    let (out, _) = forward(mrf, theta, layers, alpha0)?;
    bce_loss(&out, gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub step: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { m: vec![0.0; ModelParams::LEN], v: vec![0.0; ModelParams::LEN], step: 0 }
    }
}

/// One bias-corrected adaptive-moment step at learning rate `lr`.
pub fn adam_step(
    theta: &ModelParams,
    grads: &GradientSet,
    state: &AdamState,
    config: &AdamConfig,
    lr: f64,
) -> (ModelParams, AdamState) {
    let t = state.step + 1;
    let g = grads.to_flat();
    let mut p = theta.to_flat();
    let mut next = AdamState { m: state.m.clone(), v: state.v.clone(), step: t };
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for i in 0..p.len() {
        next.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g[i];
        next.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g[i] * g[i];
        let mhat = next.m[i] / bc1;
        let vhat = next.v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + config.eps);
    }
    (ModelParams::from_flat(&p).expect("same length"), next)
}

/// Every component uniform in `[-scale, scale]`; `scale = 0` gives zeros.
pub fn init_params(seed: u64, scale: f64) -> Result<ModelParams> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("init scale must be >= 0, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(ModelParams::zeros());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..ModelParams::LEN).map(|_| rng.random_range(-scale..=scale)).collect();
    ModelParams::from_flat(&v)
}

/// Split a graph into spatially contiguous node sets of at most
/// `batch_nodes`: each batch starts at a random unassigned node and takes the
/// unassigned nodes nearest to it. Batches carry the induced neighbourhoods
/// and ground truth, and list their source node ids in `meta["source_nodes"]`.
pub fn make_batches(graph: &CandidateGraph, batch_nodes: usize, seed: u64) -> Result<Vec<CandidateGraph>> {
    if batch_nodes < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_nodes}")));
    }
    let n = graph.num_nodes();
    if n <= batch_nodes {
        return Ok(vec![graph.clone()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unassigned: Vec<usize> = (0..n).collect();
    let mut batches = Vec::new();
    while !unassigned.is_empty() {
        let start = unassigned[rng.random_range(0..unassigned.len())];
        let origin = graph.node(start).position();
        let mut by_distance: Vec<(f64, usize)> = unassigned
            .iter()
            .map(|&i| (distance(&origin, &graph.node(i).position()), i))
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = by_distance.iter().take(batch_nodes).map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        unassigned.retain(|i| chosen.binary_search(i).is_err());
        let mut batch = graph.induced_subgraph(&chosen)?;
        batch.meta.insert("source_nodes".into(), serde_json::json!(chosen));
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Unrolled mean-field layers `T`.
    pub layers: usize,
    pub batch_nodes: usize,
    /// Neighbourhood size `L`; graphs built with a different `L` are rebuilt.
    pub neighbors: usize,
    pub epochs: usize,
    /// Base learning rate; epoch `e` uses `lr · lr_decay^e`.
    pub lr: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Batches whose gradients are averaged into one optimizer step.
    pub batches_per_step: usize,
    pub pos_weight: f64,
    pub init_scale: f64,
    pub initial_belief: f64,
    pub seed: u64,
    pub folds: usize,
    /// Fold held out for testing; `None` trains on every fold.
    pub holdout_fold: Option<usize>,
    /// Update mode used for the per-layer ELBO trace in the curves.
    pub elbo_trace_mode: UpdateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            batch_nodes: 500,
            neighbors: 10,
            epochs: 40,
            lr: 1e-2,
            lr_decay: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batches_per_step: 1,
            pos_weight: 1.0,
            init_scale: 0.01,
            initial_belief: DEFAULT_INITIAL_BELIEF,
            seed: 0,
            folds: 4,
            holdout_fold: None,
            elbo_trace_mode: UpdateMode::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("batch_nodes", self.batch_nodes),
            ("neighbors", self.neighbors),
            ("batches_per_step", self.batches_per_step),
            ("folds", self.folds),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) || !(self.pos_weight > 0.0) {
            return Err(Error::Config("lr >= 0, lr_decay > 0 and pos_weight > 0 required".into()));
        }
        if !(self.initial_belief > 0.0 && self.initial_belief < 1.0) {
            return Err(Error::Config("initial belief must be in (0, 1)".into()));
        }
        if let Some(f) = self.holdout_fold {
            if f >= self.folds {
                return Err(Error::Config(format!("holdout fold {f} out of range for {} folds", self.folds)));
            }
        }
        Ok(())
    }

    /// TOML, or JSON when the file ends in `.json`; missing fields take
    /// their defaults.
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let cfg: Self = crate::error::read_config(path.as_ref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// One line of the learning-curve file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub elbo_per_layer: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub final_params: ModelParams,
    pub adam: AdamState,
    /// Record `e` describes the parameters after `e` epochs.
    pub curves: Vec<EpochRecord>,
    pub train_graphs: Vec<usize>,
    pub val_graphs: Vec<usize>,
}

/// Training, validation and test graph indices for a dataset: the holdout
/// fold is the test set and the first graph of every remaining fold is
/// held out for validation.
pub fn split_indices(folds: &[usize], holdout: Option<usize>) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, &f) in folds.iter().enumerate() {
        if Some(f) == holdout {
            test.push(i);
        } else if seen.insert(f) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val, test)
}

struct Batch {
    graph: CandidateGraph,
    gt: AdjacencyEstimate,
}

fn prepare(graph: &CandidateGraph, config: &TrainConfig) -> Result<CandidateGraph> {
    let built_with = graph.meta.get("L").and_then(serde_json::Value::as_u64);
    if built_with == Some(config.neighbors as u64) {
        return Ok(graph.clone());
    }
    let mut g = CandidateGraph::from_knn(graph.nodes().to_vec(), config.neighbors, graph.gt_edges().map(<[_]>::to_vec))?;
    g.meta = graph.meta.clone();
    g.meta.insert("L".into(), serde_json::json!(config.neighbors));
    Ok(g)
}

fn batches_for(graphs: &[&CandidateGraph], config: &TrainConfig, seed: u64) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        let g = prepare(g, config)?;
        for b in make_batches(&g, config.batch_nodes, seed.wrapping_add(i as u64))? {
            if b.num_pairs() == 0 {
                continue;
            }
            let gt = b
                .gt_adjacency()
                .ok_or_else(|| Error::Config("every training graph needs ground-truth edges".into()))?;
            out.push(Batch { graph: b, gt });
        }
    }
    Ok(out)
}

struct BatchEval {
    loss: f64,
    metrics: EdgeMetrics,
}

fn evaluate_batch(batch: &Batch, theta: &ModelParams, config: &TrainConfig) -> Result<BatchEval> {
    let mrf = Mrf::new(&batch.graph)?;
    let a0 = EdgeBeliefs::uniform(&batch.graph, config.initial_belief);
    let (out, _) = forward(&mrf, theta, config.layers, &a0)?;
    let loss = bce_loss_weighted(&out, &batch.gt, config.pos_weight)?;
    let metrics = edge_metrics(&out.threshold(0.5), &batch.gt)?;
    Ok(BatchEval { loss, metrics })
}

fn batch_gradient(batch: &Batch, theta: &ModelParams, config: &TrainConfig) -> Result<GradientSet> {
    let mrf = Mrf::new(&batch.graph)?;
    let a0 = EdgeBeliefs::uniform(&batch.graph, config.initial_belief);
    let (_, tape) = forward(&mrf, theta, config.layers, &a0)?;
    backward_weighted(&mrf, &tape, theta, &batch.gt, config.pos_weight)
}

/// Pair-weighted loss and accuracy over a set of batches.
fn evaluate_set(batches: &[Batch], theta: &ModelParams, config: &TrainConfig) -> Result<(f64, f64)> {
    if batches.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let evals: Vec<BatchEval> = batches
        .par_iter()
        .map(|b| evaluate_batch(b, theta, config))
        .collect::<Result<_>>()?;
    let pairs: usize = batches.iter().map(|b| b.gt.len()).sum();
    let loss = evals
        .iter()
        .zip(batches)
        .map(|(e, b)| e.loss * b.gt.len() as f64)
        .sum::<f64>()
        / pairs as f64;
    let correct: usize = evals.iter().map(|e| e.metrics.tp + e.metrics.tn).sum();
    Ok((loss, correct as f64 / pairs as f64))
}

/// Mean ELBO after each of `1..=T` layers over the given batches.
fn elbo_trace(batches: &[Batch], theta: &ModelParams, config: &TrainConfig) -> Result<Vec<f64>> {
    let schedule = MfaSchedule {
        mode: config.elbo_trace_mode,
        max_iters: config.layers,
        elbo_tolerance: 0.0,
        damping: Damping::NONE,
    };
    let mut sums = vec![0.0; config.layers];
    for b in batches {
        let mrf = Mrf::new(&b.graph)?;
        let a0 = EdgeBeliefs::uniform(&b.graph, config.initial_belief);
        let traj = run_mfa(&mrf, theta, &a0, &schedule)?;
        let elbos = traj.elbos();
        for (t, s) in sums.iter_mut().enumerate() {
            // a run that stopped early keeps its last value
            *s += elbos[(t + 1).min(elbos.len() - 1)];
        }
    }
    let n = batches.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Batched training with Adam. Deterministic for a given dataset, config
/// and seed: batch gradients are computed in parallel but reduced in batch
/// order.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.graphs.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let (train_idx, mut val_idx, _) = split_indices(&dataset.folds, config.holdout_fold);
    let mut train_idx = train_idx;
    if train_idx.is_empty() {
        // too few graphs to hold any out
        train_idx.append(&mut val_idx);
    }
    let train_graphs: Vec<&CandidateGraph> = train_idx.iter().map(|&i| &dataset.graphs[i]).collect();
    let val_graphs: Vec<&CandidateGraph> = val_idx.iter().map(|&i| &dataset.graphs[i]).collect();
    let train_batches = batches_for(&train_graphs, config, config.seed)?;
    let val_batches = batches_for(&val_graphs, config, config.seed ^ 0x5eed)?;
    if train_batches.is_empty() {
        return Err(Error::Config("training set has no candidate pairs".into()));
    }
    let trace_batches: &[Batch] = if val_batches.is_empty() { &train_batches[..1] } else { &val_batches };

    let adam_cfg = config.adam();
    let mut theta = init_params(config.seed, config.init_scale)?;
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));

    let record = |epoch: usize, theta: &ModelParams| -> Result<EpochRecord> {
        let (train_loss, train_acc) = evaluate_set(&train_batches, theta, config)?;
        let (val_loss, val_acc) = evaluate_set(&val_batches, theta, config)?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
            elbo_per_layer: elbo_trace(trace_batches, theta, config)?,
        })
    };

    let mut curves = vec![record(0, &theta)?];
    let score = |r: &EpochRecord| if r.val_loss.is_nan() { r.train_loss } else { r.val_loss };
    let mut best = (score(&curves[0]), 0, theta.clone());
    let mut order: Vec<usize> = (0..train_batches.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = config.lr * config.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        for group in order.chunks(config.batches_per_step) {
            let grads: Vec<GradientSet> = group
                .par_iter()
                .map(|&i| batch_gradient(&train_batches[i], &theta, config))
                .collect::<Result<_>>()?;
            let mut g = GradientSet::zeros();
            for gi in &grads {
                g.add_assign(gi);
            }
            g.scale(1.0 / group.len() as f64);
            let (next, state) = adam_step(&theta, &g, &adam, &adam_cfg, lr);
            theta = next;
            adam = state;
        }
        let r = record(epoch, &theta)?;
        if score(&r) < best.0 {
            best = (score(&r), epoch, theta.clone());
        }
        curves.push(r);
    }

    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        final_params: theta,
        adam,
        curves,
        train_graphs: train_idx,
        val_graphs: val_idx,
    })
}

/// Run the trained network on a whole graph.
pub fn infer(graph: &CandidateGraph, theta: &ModelParams, layers: usize, initial_belief: f64) -> Result<EdgeBeliefs> {
    let mrf = Mrf::new(graph)?;
    let a0 = EdgeBeliefs::uniform(graph, clamp_belief(initial_belief));
    Ok(forward(&mrf, theta, layers, &a0)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeFeatures;
    use crate::oracle::{numeric_param_gradient, random_beliefs, random_graph, random_theta, relative_error};

    fn random_gt(rng: &mut ChaCha8Rng, g: &CandidateGraph) -> AdjacencyEstimate {
        AdjacencyEstimate { bits: (0..g.num_pairs()).map(|_| rng.random_bool(0.3)).collect() }
    }

    fn two_nodes() -> CandidateGraph {
        let nodes = vec![
            NodeFeatures::new([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], [0.0; 7]),
            NodeFeatures::new([1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], [0.0; 7]),
        ];
        CandidateGraph::from_knn(nodes, 1, None).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 6, 3);
        let mrf = Mrf::new(&g).unwrap();
        let a0 = random_beliefs(&mut rng, &g, 0.0, 1.0);
        let (out, tape) = forward(&mrf, &ModelParams::zeros(), 1, &a0).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.5));
        assert_eq!(tape.layers(), 1);
        assert!(forward(&mrf, &ModelParams::zeros(), 0, &a0).is_err());

        let theta = random_theta(&mut rng, 0.5);
        let (out, tape) = forward(&mrf, &theta, 4, &a0).unwrap();
        let replayed = tape.replay(&mrf, &theta).unwrap();
        let bits = |b: &EdgeBeliefs| b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&replayed), bits(&out));
        assert_eq!(tape.output(), &out);
    }

    #[test]
    fn two_node_strong_symmetry_saturates() {
        // with only λ and a shared start the pair stays symmetric and the
        // closed-form recursion is a ← σ(2λ(4a − 2))
        let g = two_nodes();
        let mrf = Mrf::new(&g).unwrap();
        let mut theta = ModelParams::zeros();
        theta.lambda = 5.0;
        let a0 = EdgeBeliefs::uniform(&g, 0.9);
        let mut a = 0.9f64;
        for layers in 1..=6 {
            a = clamp_belief(sigmoid(2.0 * theta.lambda * (4.0 * a - 2.0)));
            let (out, _) = forward(&mrf, &theta, layers, &a0).unwrap();
            assert!((out.get(0) - a).abs() < 1e-15);
            assert_eq!(out.get(0), out.get(1));
        }
        assert_eq!(a, 1.0 - BELIEF_CLAMP);
    }

    #[test]
    fn bce_examples() {
        let g = two_nodes();
        let half = EdgeBeliefs::uniform(&g, 0.5);
        let gt = AdjacencyEstimate { bits: vec![true, false] };
        assert!((bce_loss(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let one = AdjacencyEstimate { bits: vec![true] };
        let a = EdgeBeliefs::from_values(vec![0.9], 0);
        assert!((bce_loss(&a, &one).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        let perfect = EdgeBeliefs::from_values(vec![1.0, 0.0], 0);
        assert!(bce_loss(&perfect, &gt).unwrap() <= -(1.0 - BELIEF_CLAMP).ln() + 1e-18);
        assert!(bce_loss(&perfect, &AdjacencyEstimate { bits: vec![true] }).is_err());
    }

    #[test]
    fn bce_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 6, 3);
        for _ in 0..50 {
            let a = random_beliefs(&mut rng, &g, 0.0, 1.0);
            let gt = random_gt(&mut rng, &g);
            let l = bce_loss(&a, &gt).unwrap();
            assert!(l >= 0.0 && l <= -BELIEF_CLAMP.ln());
        }
        let worst = EdgeBeliefs::from_values(vec![0.0, 1.0], 0);
        let gt = AdjacencyEstimate { bits: vec![true, false] };
        assert!(bce_loss(&worst, &gt).unwrap() <= -BELIEF_CLAMP.ln() + 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..6 {
            let g = random_graph(&mut rng, 6, 3);
            let mrf = Mrf::new(&g).unwrap();
            let theta = random_theta(&mut rng, 0.05);
            let a0 = random_beliefs(&mut rng, &g, 0.2, 0.8);
            let gt = random_gt(&mut rng, &g);
            let layers = 1 + trial % 3;
            let (_, tape) = forward(&mrf, &theta, layers, &a0).unwrap();
            let analytic = backward(&mrf, &tape, &theta, &gt).unwrap();
            let numeric = numeric_param_gradient(|t| forward_loss(&mrf, t, layers, &a0, &gt), &theta, 1e-5).unwrap();
            for (i, (a, b)) in analytic.to_flat().iter().zip(numeric.to_flat()).enumerate() {
                let e = relative_error(*a, b, 1e-6);
                assert!(e < 1e-5, "{} (T={layers}): {a} vs {b}", ModelParams::component_name(i));
            }
        }
    }

    #[test]
    fn single_layer_two_nodes_by_hand() {
        // T = 1 on two nodes: γ_p = (β1 − β0) + a·x_k + 2((4α_r − 2)λ + 2α_r D)
        // since each row has one entry, so ∂L/∂θ = Σ_p ∂L/∂α_p σ'(γ_p) ∂γ_p/∂θ
        let g = two_nodes();
        let mrf = Mrf::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_theta(&mut rng, 0.3);
        let a0 = EdgeBeliefs::from_values(vec![0.3, 0.6], 0);
        let gt = AdjacencyEstimate { bits: vec![true, false] };
        let (out, tape) = forward(&mrf, &theta, 1, &a0).unwrap();
        let grad = backward(&mrf, &tape, &theta, &gt).unwrap();

        let x = [g.node(0).packed(), g.node(1).packed()];
        let pf = crate::potentials::pair_feature(g.node(0), g.node(1)).unwrap();
        let mut expect = GradientSet::zeros();
        for p in 0..2 {
            let a = out.get(p);
            let dl = if gt.bits[p] { -1.0 / (2.0 * a) } else { 1.0 / (2.0 * (1.0 - a)) };
            let d = dl * a * (1.0 - a);
            let ar = a0.get(1 - p);
            expect.beta[0] -= d;
            expect.beta[1] += d;
            expect.lambda += d * 2.0 * (4.0 * ar - 2.0);
            for c in 0..FEATURE_DIM {
                expect.a[c] += d * x[p][c];
                expect.eta[c] += d * 4.0 * ar * pf.absdiff[c];
                expect.nu[c] += d * 4.0 * ar * pf.prod[c];
            }
        }
        for (a, b) in grad.to_flat().iter().zip(expect.to_flat()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn shared_gradient_is_sum_of_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_graph(&mut rng, 5, 3);
        let mrf = Mrf::new(&g).unwrap();
        let thetas = vec![random_theta(&mut rng, 0.05), random_theta(&mut rng, 0.05)];
        let a0 = random_beliefs(&mut rng, &g, 0.2, 0.8);
        let gt = random_gt(&mut rng, &g);
        let (_, tape) = forward_untied(&mrf, &thetas, &a0).unwrap();
        let per_layer = backward_untied(&mrf, &tape, &thetas, &gt, 1.0).unwrap();
        for t in 0..2 {
            let numeric = numeric_param_gradient(
                |th| {
                    let mut ts = thetas.clone();
                    ts[t] = th.clone();
                    bce_loss(&forward_untied(&mrf, &ts, &a0)?.0, &gt)
                },
                &thetas[t],
                1e-5,
            )
            .unwrap();
            for (a, b) in per_layer[t].to_flat().iter().zip(numeric.to_flat()) {
                assert!(relative_error(*a, b, 1e-6) < 1e-5);
            }
        }
        // tied parameters: total equals the per-layer sum
        let shared = thetas[0].clone();
        let (_, tape) = forward(&mrf, &shared, 2, &a0).unwrap();
        let parts = backward_untied(&mrf, &tape, &[shared.clone(), shared.clone()], &gt, 1.0).unwrap();
        let total = backward(&mrf, &tape, &shared, &gt).unwrap();
        for i in 0..ModelParams::LEN {
            let sum = parts[0].to_flat()[i] + parts[1].to_flat()[i];
            assert!((sum - total.to_flat()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_features_give_zero_a_gradient() {
        let nodes = vec![NodeFeatures::new([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0; 7]); 3];
        let mut g = CandidateGraph::from_knn(nodes, 2, None).unwrap();
        // radius stays 1 so pair features exist; the feature vector is not all
        // zero, but the radius component carries the only signal
        g = {
            let mut ns = g.nodes().to_vec();
            for n in &mut ns {
                n.mean[3] = 1.0;
            }
            CandidateGraph::new(ns, g.neighborhoods().clone(), None).unwrap()
        };
        let mrf = Mrf::new(&g).unwrap();
        let gt = AdjacencyEstimate { bits: (0..g.num_pairs()).map(|p| p % 2 == 0).collect() };
        let (_, tape) = forward(&mrf, &ModelParams::zeros(), 2, &EdgeBeliefs::uniform(&g, 0.5)).unwrap();
        let grad = backward(&mrf, &tape, &ModelParams::zeros(), &gt).unwrap();
        // balanced labels at α ≡ 0.5: the loss is stationary in every a
        for (c, v) in grad.a.iter().enumerate() {
            assert!(v.abs() < 1e-15, "a[{c}] = {v}");
        }
    }

    #[test]
    fn adam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = random_theta(&mut rng, 1.0);
        let cfg = AdamConfig::default();
        assert_eq!(cfg, AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        let (same, st) = adam_step(&theta, &GradientSet::zeros(), &AdamState::default(), &cfg, cfg.lr);
        assert_eq!(same, theta);
        assert_eq!(st.step, 1);

        let mut g = GradientSet::zeros();
        g.lambda = 3.0;
        g.beta[0] = -0.2;
        let (next, _) = adam_step(&theta, &g, &AdamState::default(), &cfg, cfg.lr);
        // first step: m̂ = g, v̂ = g², so the move is lr·g/(|g| + eps)
        assert!((next.lambda - (theta.lambda - cfg.lr * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((next.beta[0] - (theta.beta[0] + cfg.lr * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
        assert_eq!(next.a, theta.a);
    }

    #[test]
    fn one_small_step_decreases_loss() {
        let g = two_nodes();
        let mrf = Mrf::new(&g).unwrap();
        let gt = AdjacencyEstimate { bits: vec![true, true] };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = random_theta(&mut rng, 0.1);
        let a0 = EdgeBeliefs::uniform(&g, 0.5);
        let before = forward_loss(&mrf, &theta, 3, &a0, &gt).unwrap();
        let (_, tape) = forward(&mrf, &theta, 3, &a0).unwrap();
        let grad = backward(&mrf, &tape, &theta, &gt).unwrap();
        let (next, _) = adam_step(&theta, &grad, &AdamState::default(), &AdamConfig::default(), 1e-4);
        let after = forward_loss(&mrf, &next, 3, &a0, &gt).unwrap();
        assert!(after < before);
    }

    #[test]
    fn init_params_examples() {
        assert_eq!(init_params(3, 0.01).unwrap(), init_params(3, 0.01).unwrap());
        assert_ne!(init_params(3, 0.01).unwrap(), init_params(4, 0.01).unwrap());
        assert_eq!(init_params(3, 0.0).unwrap(), ModelParams::zeros());
        let p = init_params(9, 0.01).unwrap();
        assert!(p.to_flat().iter().all(|v| v.abs() <= 0.01));
        assert!(init_params(1, -1.0).is_err());
    }

    fn line_graph(n: usize) -> CandidateGraph {
        let nodes = (0..n)
            .map(|i| NodeFeatures::new([i as f64, (i % 7) as f64, 0.0, 1.0, 1.0, 0.0, 0.0], [0.0; 7]))
            .collect();
        let gt = (1..n).map(|i| (i - 1, i)).collect();
        CandidateGraph::from_knn(nodes, 4, Some(gt)).unwrap()
    }

    #[test]
    fn batches_partition_nodes() {
        let g = line_graph(30);
        assert_eq!(make_batches(&g, 50, 0).unwrap(), vec![g.clone()]);
        assert!(make_batches(&g, 1, 0).is_err());

        let big = line_graph(1200);
        let batches = make_batches(&big, 500, 11).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches.iter().map(CandidateGraph::num_nodes).sum::<usize>(), 1200);
        let mut all: Vec<usize> = batches
            .iter()
            .flat_map(|b| {
                b.meta["source_nodes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect::<Vec<_>>()
            })
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1200).collect::<Vec<_>>());
        assert_eq!(make_batches(&big, 500, 11).unwrap(), batches);
        for b in &batches {
            assert!(crate::graph::is_symmetric(b.neighborhoods()));
            let gt = b.gt_edges().unwrap();
            assert!(gt.iter().all(|&(i, j)| i < b.num_nodes() && j < b.num_nodes()));
        }
    }

    #[test]
    fn split_indices_round_robin() {
        let folds: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let (train, val, test) = split_indices(&folds, Some(1));
        assert_eq!(test, vec![1, 5, 9]);
        assert_eq!(val, vec![0, 2, 3]);
        assert_eq!(train.len(), 6);
    }

    fn tiny_dataset() -> Dataset {
        let graphs: Vec<CandidateGraph> = (0..4).map(|i| line_graph(20 + i)).collect();
        Dataset { folds: (0..4).collect(), graphs }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig { epochs: 2, lr: 0.0, layers: 2, neighbors: 4, ..Default::default() };
        let out = train(&tiny_dataset(), &cfg).unwrap();
        let init = init_params(cfg.seed, cfg.init_scale).unwrap();
        assert_eq!(out.final_params, init);
        assert_eq!(out.curves.len(), 3);
        assert_eq!(out.curves[0].train_loss, out.curves[2].train_loss);
        assert_eq!(out.curves[1].elbo_per_layer.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = TrainConfig { epochs: 8, layers: 3, neighbors: 4, lr: 0.005, seed: 3, ..Default::default() };
        let a = train(&tiny_dataset(), &cfg).unwrap();
        let b = train(&tiny_dataset(), &cfg).unwrap();
        assert_eq!(a.final_params.to_json_string().unwrap(), b.final_params.to_json_string().unwrap());
        let lines = |o: &TrainOutcome| o.curves.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        assert!(a.curves.last().unwrap().train_loss < a.curves[0].train_loss);
        assert!(train(&Dataset { graphs: vec![], folds: vec![] }, &cfg).is_err());
    }
}
