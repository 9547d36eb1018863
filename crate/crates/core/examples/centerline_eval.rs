// Score a trained network and the nearest-neighbour linking baseline on
// held-out trees: edge metrics and centerline distance, mean ± std.
//
// ```bash
// cargo run --release --example centerline_eval
// ```

use mfn_refine::eval::{aggregate, evaluate_beliefs, evaluate_edges, nearest_neighbor_baseline, Aggregate};
use mfn_refine::mfn::{infer, split_indices, train, TrainConfig};
use mfn_refine::synth::{make_dataset, TreeConfig};

/// Returns the aggregates for the network and the baseline.
pub fn run_example() -> mfn_refine::Result<(Aggregate, Aggregate)> {
    let trees = TreeConfig { depth: 3, ..Default::default() };
    let dataset = make_dataset(16, &trees, 21)?;
    let config = TrainConfig { holdout_fold: Some(1), ..Default::default() };
    let model = train(&dataset, &config)?.params;

    let step = trees.eval_step();
    let (_, _, test) = split_indices(&dataset.folds, config.holdout_fold);
    let (mut ours, mut base) = (Vec::new(), Vec::new());
    for &i in &test {
        let g = &dataset.graphs[i];
        let alpha = infer(g, &model, config.layers, config.initial_belief)?;
        ours.push(evaluate_beliefs(g, &alpha, 0.5, step)?);
        base.push(evaluate_edges(g, &nearest_neighbor_baseline(g), None, step)?);
    }
    let (a, b) = (aggregate(&ours), aggregate(&base));
    for (name, r) in [("network", &a), ("baseline", &b)] {
        println!(
            "{name:9} F1 {:.3} ± {:.3}  d_FP {:.4}  d_FN {:.4}  d_err {:.4} ± {:.4}",
            r.undirected_f1.mean, r.undirected_f1.std, r.d_fp.mean, r.d_fn.mean, r.d_err.mean, r.d_err.std
        );
    }
    Ok((a, b))
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
