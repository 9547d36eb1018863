// Train the network on a small synthetic dataset and print the learning
// curves, then save the model file.
//
// ```bash
// cargo run --release --example train_mfn
// ```

use mfn_refine::mfn::{train, TrainConfig, TrainOutcome};
use mfn_refine::synth::{make_dataset, TreeConfig};

pub fn run_example() -> mfn_refine::Result<TrainOutcome> {
    let trees = TreeConfig { depth: 2, ..Default::default() };
    let dataset = make_dataset(8, &trees, 3)?;
    let config = TrainConfig { epochs: 12, holdout_fold: Some(0), seed: 3, ..Default::default() };
    let outcome = train(&dataset, &config)?;

    println!("epoch  train_loss  val_loss  train_acc  val_acc  ELBO(T)");
    for r in &outcome.curves {
        println!(
            "{:5}  {:10.4}  {:8.4}  {:9.4}  {:7.4}  {:.2}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.train_acc,
            r.val_acc,
            r.elbo_per_layer.last().copied().unwrap_or(f64::NAN)
        );
    }
    let path = std::env::temp_dir().join("mfn_refine_example_model.json");
    outcome.params.save(&path)?;
    println!("best epoch {}, model written to {}", outcome.best_epoch, path.display());
    Ok(outcome)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
