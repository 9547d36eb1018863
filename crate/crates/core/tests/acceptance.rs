//! Acceptance criteria. Each test prints one `PASS` or `FAIL` line with the
//! measured quantity and its threshold.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mfn_refine::eval::{
    aggregate, evaluate_beliefs, evaluate_edges, nearest_neighbor_baseline, Aggregate, CenterlineResult, DEFAULT_STEP,
};
use mfn_refine::graph::{AdjacencyEstimate, EdgeBeliefs, ModelParams};
use mfn_refine::mfa::{degree_distribution, degree_expectation, elbo, gamma, logit, mfa_sweep_sequential};
use mfn_refine::mfn::{backward, forward, forward_loss, infer, split_indices, train, TrainConfig, TrainOutcome};
use mfn_refine::oracle::{
    brute_degree_expectation, brute_force_elbo, enumerate_posterior, numeric_elbo_derivative, numeric_param_gradient,
    random_beliefs, random_graph, random_theta, relative_error,
};
use mfn_refine::synth::{self, make_dataset, Dataset, TreeConfig};
use mfn_refine::Mrf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: String) {
    // written to the process stream so the line survives test output capture
    let _ = writeln!(std::io::stderr(), "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

#[test]
fn metric_arithmetic() {
    let start = Instant::now();
    let r = CenterlineResult::from_parts(0.792, 4.807);
    let elapsed = start.elapsed();
    let err = (r.d_err - 2.7995).abs();
    report(
        "metric arithmetic",
        err < 5e-4 && elapsed < Duration::from_millis(1),
        format!("d_err = {:.4} (|Δ| = {err:.1e} < 5e-4), {elapsed:?} < 1 ms", r.d_err),
    );
}

/// Enumerable instances: N ≤ 4, ‖θ‖∞ ≤ 3, random beliefs.
fn enumerable_instances() -> Vec<(mfn_refine::CandidateGraph, ModelParams, EdgeBeliefs)> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    (0..200)
        .map(|_| {
            let n = rng.random_range(2..=4);
            let l = rng.random_range(1..n);
            let g = random_graph(&mut rng, n, l);
            let theta = random_theta(&mut rng, 3.0);
            let alpha = random_beliefs(&mut rng, &g, 0.0, 1.0);
            (g, theta, alpha)
        })
        .collect()
}

#[test]
fn oracle_elbo_bound() {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    for (g, theta, alpha) in enumerable_instances() {
        let log_z = enumerate_posterior(&g, &theta).unwrap().log_partition;
        let bound = elbo(&Mrf::new(&g).unwrap(), &theta, &alpha).unwrap().total;
        worst = worst.max(bound - log_z);
    }
    let elapsed = start.elapsed();
    report(
        "oracle ELBO bound",
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("max(ELBO − ln Z) = {worst:.3e} ≤ 1e-9 over 200 instances, {elapsed:?} < 10 s"),
    );
}

#[test]
fn elbo_consistency() {
    let mut worst = 0.0f64;
    for (g, theta, alpha) in enumerable_instances() {
        let closed = elbo(&Mrf::new(&g).unwrap(), &theta, &alpha).unwrap().total;
        let brute = brute_force_elbo(&g, &theta, &alpha).unwrap();
        worst = worst.max((closed - brute).abs());
    }
    report("ELBO consistency", worst < 1e-10, format!("max |closed − brute| = {worst:.3e} < 1e-10"));
}

#[test]
fn degree_expectations() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(0..=10);
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        for v in 0..=2 {
            let e = (degree_expectation(&row, v).unwrap() - brute_degree_expectation(&row, v).unwrap()).abs();
            worst = worst.max(e);
        }
        let d = degree_distribution(&row);
        worst_sum = worst_sum.max((d[0] + d[1] + d[2] + d[3] - 1.0).abs());
    }
    report(
        "degree expectations",
        worst < 1e-12 && worst_sum < 1e-12,
        format!("max |closed − brute| = {worst:.3e}, max |P(deg≤2) + P(deg>2) − 1| = {worst_sum:.3e}, both < 1e-12"),
    );
}

#[test]
fn analytic_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=8);
        let l = rng.random_range(1..n.min(5));
        let g = random_graph(&mut rng, n, l);
        let mrf = Mrf::new(&g).unwrap();
        let theta = random_theta(&mut rng, 1.0);
        let alpha = random_beliefs(&mut rng, &g, 0.05, 0.95);
        let p = rng.random_range(0..g.num_pairs());
        let (k, l) = g.pairs().nth(p).unwrap();
        let analytic = gamma(&mrf, &theta, &alpha, k, l).unwrap() - logit(alpha.get(p));
        let numeric = numeric_elbo_derivative(&mrf, &theta, &alpha, k, l, 1e-6).unwrap();
        worst = worst.max(relative_error(analytic, numeric, 1e-6));
    }
    report("analytic derivative", worst < 1e-6, format!("max relative error = {worst:.3e} < 1e-6 over 500 draws"));
}

#[test]
fn monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let l = rng.random_range(1..n.min(6));
        let g = random_graph(&mut rng, n, l);
        let mrf = Mrf::new(&g).unwrap();
        let theta = random_theta(&mut rng, 3.0);
        let mut alpha = random_beliefs(&mut rng, &g, 0.0, 1.0);
        let mut prev = elbo(&mrf, &theta, &alpha).unwrap().total;
        for _ in 0..20 {
            alpha = mfa_sweep_sequential(&mrf, &theta, &alpha).unwrap();
            let next = elbo(&mrf, &theta, &alpha).unwrap().total;
            worst = worst.min(next - prev);
            prev = next;
        }
    }
    report(
        "monotonicity",
        worst >= -1e-10,
        format!("min per-sweep ELBO change = {worst:.3e} ≥ -1e-10 over 100 instances × 20 sweeps"),
    );
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let l = rng.random_range(1..n.min(4));
        let g = random_graph(&mut rng, n, l);
        let mrf = Mrf::new(&g).unwrap();
        let theta = random_theta(&mut rng, 0.1);
        let a0 = random_beliefs(&mut rng, &g, 0.2, 0.8);
        let gt = AdjacencyEstimate { bits: (0..g.num_pairs()).map(|_| rng.random_bool(0.3)).collect() };
        for layers in 1..=3 {
            let (_, tape) = forward(&mrf, &theta, layers, &a0).unwrap();
            let analytic = backward(&mrf, &tape, &theta, &gt).unwrap().to_flat();
            let numeric = numeric_param_gradient(|t| forward_loss(&mrf, t, layers, &a0, &gt), &theta, 1e-5)
                .unwrap()
                .to_flat();
            for (a, b) in analytic.iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *b, 1e-6));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "gradient check",
        worst < 1e-5 && elapsed < Duration::from_secs(30),
        format!("max relative error = {worst:.3e} < 1e-5 over 50 instances × T ∈ {{1,2,3}}, {elapsed:?} < 30 s"),
    );
}

struct CrossValidation {
    dataset: Dataset,
    outcomes: Vec<TrainOutcome>,
    ours: Aggregate,
    baseline: Aggregate,
    ours_coarse: Aggregate,
    baseline_coarse: Aggregate,
    slowest_inference: Duration,
    total: Duration,
}

fn cross_validation() -> &'static CrossValidation {
    static CV: OnceLock<CrossValidation> = OnceLock::new();
    CV.get_or_init(|| {
        let start = Instant::now();
        let trees = TreeConfig::default();
        let dataset = make_dataset(32, &trees, 0).unwrap();
        let step = trees.eval_step();
        let (mut ours, mut base, mut ours_c, mut base_c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut outcomes = Vec::new();
        let mut slowest = Duration::ZERO;
        for fold in 0..synth::DEFAULT_FOLDS {
            let config = TrainConfig { holdout_fold: Some(fold), ..Default::default() };
            let outcome = train(&dataset, &config).unwrap();
            let (_, _, test) = split_indices(&dataset.folds, Some(fold));
            for &i in &test {
                let g = &dataset.graphs[i];
                let t0 = Instant::now();
                let alpha = infer(g, &outcome.params, config.layers, config.initial_belief).unwrap();
                slowest = slowest.max(t0.elapsed());
                let nn = nearest_neighbor_baseline(g);
                ours.push(evaluate_beliefs(g, &alpha, 0.5, step).unwrap());
                base.push(evaluate_edges(g, &nn, None, step).unwrap());
                ours_c.push(evaluate_beliefs(g, &alpha, 0.5, DEFAULT_STEP).unwrap());
                base_c.push(evaluate_edges(g, &nn, None, DEFAULT_STEP).unwrap());
            }
            outcomes.push(outcome);
        }
        CrossValidation {
            dataset,
            outcomes,
            ours: aggregate(&ours),
            baseline: aggregate(&base),
            ours_coarse: aggregate(&ours_c),
            baseline_coarse: aggregate(&base_c),
            slowest_inference: slowest,
            total: start.elapsed(),
        }
    })
}

#[test]
fn end_to_end_synthetic() {
    let cv = cross_validation();
    let (o, b) = (&cv.ours, &cv.baseline);
    let f1 = o.undirected_f1.mean;
    let acc = o.binary_accuracy.mean;
    let pass = f1 >= 0.90
        && acc >= 0.97
        && o.d_err.mean < b.d_err.mean
        && cv.ours_coarse.d_err.mean < cv.baseline_coarse.d_err.mean
        && cv.slowest_inference < Duration::from_secs(1)
        && cv.total <= Duration::from_secs(30 * 60);
    report(
        "end-to-end synthetic",
        pass,
        format!(
            "{} graphs, 4 folds: undirected F1 {f1:.4} ≥ 0.90, binary accuracy {acc:.4} ≥ 0.97, \
             d_err {:.3e} < baseline {:.3e} (step {DEFAULT_STEP}: {:.3e} < {:.3e}), \
             slowest inference {:?} < 1 s, total {:?} ≤ 30 min",
            cv.dataset.graphs.len(),
            o.d_err.mean,
            b.d_err.mean,
            cv.ours_coarse.d_err.mean,
            cv.baseline_coarse.d_err.mean,
            cv.slowest_inference,
            cv.total,
        ),
    );
}

#[test]
fn learning_curve_shape() {
    let cv = cross_validation();
    let mut worst_ratio = 0.0f64;
    let mut worst_step = f64::INFINITY;
    for outcome in &cv.outcomes {
        let first = &outcome.curves[0];
        let last = outcome.curves.last().unwrap();
        worst_ratio = worst_ratio.max(last.train_loss / first.train_loss);
        for w in last.elbo_per_layer.windows(2) {
            worst_step = worst_step.min((w[1] - w[0]) / w[0].abs().max(1.0));
        }
    }
    report(
        "learning-curve shape",
        worst_ratio < 0.5 && worst_step >= -1e-10,
        format!(
            "max final/epoch-0 training loss = {worst_ratio:.4} < 0.5, \
             min per-layer ELBO change (relative) = {worst_step:.3e} ≥ -1e-10, over 4 folds"
        ),
    );
}

#[test]
fn determinism() {
    let dataset = make_dataset(8, &TreeConfig { depth: 3, ..Default::default() }, 7).unwrap();
    let config = TrainConfig { epochs: 5, seed: 7, holdout_fold: Some(0), ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let path = dir.path().join(format!("model_{i}.json"));
            train(&dataset, &config).unwrap().params.save(&path).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect();
    report(
        "determinism",
        files[0] == files[1],
        format!("two runs with seed {} wrote {} and {} bytes, identical: {}", config.seed, files[0].len(), files[1].len(), files[0] == files[1]),
    );
}
