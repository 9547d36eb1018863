// Analytic gradients of the unrolled network against central finite
// differences, component by component.
//
// ```bash
// cargo run --example gradient_check
// ```

use mfn_refine::graph::{AdjacencyEstimate, ModelParams};
use mfn_refine::mfn::{backward, forward, forward_loss};
use mfn_refine::oracle::{numeric_param_gradient, random_beliefs, random_graph, random_theta, relative_error};
use mfn_refine::Mrf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Returns the largest relative error over all components and depths.
pub fn run_example() -> mfn_refine::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let graph = random_graph(&mut rng, 7, 3);
    let mrf = Mrf::new(&graph)?;
    let theta = random_theta(&mut rng, 0.1);
    let alpha0 = random_beliefs(&mut rng, &graph, 0.2, 0.8);
    let gt = AdjacencyEstimate { bits: (0..graph.num_pairs()).map(|_| rng.random_bool(0.3)).collect() };

    let mut worst = 0.0f64;
    for layers in 1..=3 {
        let (_, tape) = forward(&mrf, &theta, layers, &alpha0)?;
        let analytic = backward(&mrf, &tape, &theta, &gt)?;
        let numeric = numeric_param_gradient(|t| forward_loss(&mrf, t, layers, &alpha0, &gt), &theta, 1e-5)?;
        let (a, n) = (analytic.to_flat(), numeric.to_flat());
        let (i, err) = (0..ModelParams::LEN)
            .map(|i| (i, relative_error(a[i], n[i], 1e-6)))
            .fold((0, 0.0), |best, x| if x.1 > best.1 { x } else { best });
        println!("T = {layers}: max relative error {err:.2e} at {} ({:.6e} vs {:.6e})", ModelParams::component_name(i), a[i], n[i]);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
