//! Command-line front end. Every command that writes files also writes a
//! `manifest.json` into its output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_edges, nearest_neighbor_baseline, GraphReport, DEFAULT_STEP};
use crate::graph::{AdjacencyEstimate, CandidateGraph, EdgeBeliefs, ModelParams};
use crate::mfa::{elbo, threshold};
use crate::mfn::{backward, forward, forward_loss, TrainConfig};
use crate::oracle::{enumerate_posterior, numeric_param_gradient, random_theta, relative_error, MAX_NODES_WITH_CONFIGS};
use crate::potentials::Mrf;
use crate::synth::{make_dataset, Dataset, TreeConfig};

#[derive(Debug, Parser)]
#[command(name = "mfn-refine", version, about = "Refine candidate graphs into trees with unrolled mean-field inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct Common {
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of candidate graphs.
    Generate(GenerateArgs),
    /// Train a mean field network on a dataset directory.
    Train(TrainArgs),
    /// Predict edge beliefs for a graph.
    Infer(InferArgs),
    /// Score predictions (or the nearest-neighbour baseline) against ground truth.
    Eval(EvalArgs),
    /// Exact posterior marginals of a small graph by enumeration.
    Oracle(OracleArgs),
    /// Compare analytic and finite-difference parameter gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Tree configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of trees.
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of graph files.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fold held out for testing.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    initial_belief: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Prediction files, paired in order with `--graph`.
    #[arg(long)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    graph: Vec<PathBuf>,
    /// Score the nearest-neighbour linking baseline instead of predictions.
    #[arg(long)]
    baseline: bool,
    /// Centerline sampling step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Model parameters (default: all zero).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Model parameters (default: random, scale 0.05, from the seed).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[command(flatten)]
    common: Common,
}

/// Output of `infer`: directed beliefs and the thresholded undirected edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub layers: usize,
    pub tau: f64,
    /// `(k, l, α_kl)` for every ordered candidate pair.
    pub alpha: Vec<(usize, usize, f64)>,
    pub edges: Vec<(usize, usize)>,
    pub elbo_per_layer: Vec<f64>,
}

impl Prediction {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data { path: path.to_path_buf(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Data { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Beliefs keyed by the graph's candidate pairs.
    pub fn beliefs(&self, graph: &CandidateGraph) -> Result<EdgeBeliefs> {
        if self.alpha.len() != graph.num_pairs() {
            return Err(Error::Structural(format!("{} predicted pairs for {} candidate pairs", self.alpha.len(), graph.num_pairs())));
        }
        let mut values = vec![0.0; graph.num_pairs()];
        for &(k, l, a) in &self.alpha {
            let p = graph
                .pair_index(k, l)
                .ok_or_else(|| Error::Structural(format!("({k}, {l}) is not a candidate pair")))?;
            values[p] = a;
        }
        Ok(EdgeBeliefs::from_values(values, self.layers))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_s: f64,
}

fn config_hash(config: &Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

struct Run {
    command: &'static str,
    config: Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, seed: u64) -> Self {
        Self { command, config: Value::Null, seed, inputs: Vec::new(), outputs: Vec::new(), started: Instant::now() }
    }

    fn write_manifest(&self, dir: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            config_hash: config_hash(&self.config),
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_s: self.started.elapsed().as_secs_f64(),
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn require_out(common: &Common) -> std::result::Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| Failure::Usage("--out is required for this command".into()))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Write `value` to `--out` (plus a manifest beside it) or to stdout.
fn emit(run: &mut Run, common: &Common, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match &common.out {
        Some(path) => {
            let dir = parent_dir(path);
            fs::create_dir_all(&dir)?;
            fs::write(path, text)?;
            run.outputs.push(path.clone());
            run.write_manifest(&dir)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> std::result::Result<(), Failure> {
    let out = require_out(&args.common)?.to_path_buf();
    let mut run = Run::new("generate", args.common.seed);
    let config = match &args.config {
        Some(p) => {
            run.inputs.push(p.clone());
            TreeConfig::from_file(p)?
        }
        None => TreeConfig::default(),
    };
    run.config = json!({ "tree": config, "n": args.n });
    let dataset = make_dataset(args.n, &config, args.common.seed)?;
    run.outputs = dataset.save(&out)?;
    run.write_manifest(&out)?;
    let coverage: Vec<f64> = dataset
        .graphs
        .iter()
        .map(|g| g.meta.get("gt_coverage").and_then(Value::as_f64).unwrap_or(1.0))
        .collect();
    println!(
        "{}",
        json!({ "graphs": dataset.graphs.len(), "min_gt_coverage": coverage.iter().copied().fold(1.0, f64::min) })
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> std::result::Result<(), Failure> {
    let out = require_out(&args.common)?.to_path_buf();
    let mut run = Run::new("train", args.common.seed);
    run.inputs.push(args.data.clone());
    let mut config = match &args.config {
        Some(p) => {
            run.inputs.push(p.clone());
            TrainConfig::from_file(p)?
        }
        None => TrainConfig::default(),
    };
    config.seed = args.common.seed;
    if let Some(f) = args.folds {
        config.folds = f;
    }
    if args.fold.is_some() {
        config.holdout_fold = args.fold;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(t) = args.layers {
        config.layers = t;
    }
    config.validate()?;
    let dataset = Dataset::load(&args.data, config.folds)?;
    let mut hashed = serde_json::to_value(&config)?;
    hashed["data"] = json!(dataset.graphs.iter().map(|g| g.to_json_string()).collect::<Result<Vec<_>>>()?.iter().map(|s| hex::encode(Sha256::digest(s.as_bytes()))).collect::<Vec<_>>());
    run.config = hashed;

    let outcome = crate::mfn::train(&dataset, &config)?;
    fs::create_dir_all(&out)?;
    let model_path = out.join("model.json");
    outcome.params.save(&model_path)?;
    let curves_path = out.join("curves.jsonl");
    let mut curves = String::new();
    for r in &outcome.curves {
        curves.push_str(&serde_json::to_string(r)?);
        curves.push('\n');
    }
    fs::write(&curves_path, curves)?;
    let state_path = out.join("optimizer.json");
    let state = json!({
        "adam": outcome.adam,
        "final_params": outcome.final_params,
        "best_epoch": outcome.best_epoch,
        "train_graphs": outcome.train_graphs,
        "val_graphs": outcome.val_graphs,
        "config": config,
    });
    fs::write(&state_path, serde_json::to_string(&state)? + "\n")?;
    run.outputs = vec![model_path, curves_path, state_path];
    run.write_manifest(&out)?;
    let last = outcome.curves.last().expect("curves hold the initial record");
    println!("{}", json!({ "best_epoch": outcome.best_epoch, "final": last }));
    Ok(())
}

fn cmd_infer(args: InferArgs) -> std::result::Result<(), Failure> {
    require_out(&args.common)?;
    let mut run = Run::new("infer", args.common.seed);
    run.inputs = vec![args.model.clone(), args.graph.clone()];
    run.config = json!({ "layers": args.layers, "tau": args.tau, "initial_belief": args.initial_belief });
    let theta = ModelParams::load(&args.model)?;
    let graph = CandidateGraph::load(&args.graph)?;
    if !(args.initial_belief > 0.0 && args.initial_belief < 1.0) {
        return Err(Failure::Usage("--initial-belief must be in (0, 1)".into()));
    }
    let mrf = Mrf::new(&graph)?;
    let (alpha, tape) = forward(&mrf, &theta, args.layers, &EdgeBeliefs::uniform(&graph, args.initial_belief))?;
    let elbo_per_layer = tape.alphas[1..]
        .iter()
        .map(|a| elbo(&mrf, &theta, a).map(|e| e.total))
        .collect::<Result<Vec<_>>>()?;
    let t = threshold(&graph, &alpha, args.tau)?;
    let pred = Prediction {
        layers: args.layers,
        tau: args.tau,
        alpha: graph.pairs().zip(alpha.values()).map(|((k, l), &a)| (k, l, a)).collect(),
        edges: t.undirected,
        elbo_per_layer,
    };
    emit(&mut run, &args.common, &serde_json::to_value(&pred)?)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> std::result::Result<(), Failure> {
    if !args.baseline && args.pred.len() != args.graph.len() {
        return Err(Failure::Usage(format!("{} --pred files for {} --graph files", args.pred.len(), args.graph.len())));
    }
    let mut run = Run::new("eval", args.common.seed);
    run.config = json!({ "step": args.step, "baseline": args.baseline });
    let mut reports: Vec<GraphReport> = Vec::new();
    let mut per_graph = Vec::new();
    for (i, gpath) in args.graph.iter().enumerate() {
        let graph = CandidateGraph::load(gpath)?;
        run.inputs.push(gpath.clone());
        let report = if args.baseline {
            evaluate_edges(&graph, &nearest_neighbor_baseline(&graph), None, args.step)?
        } else {
            let ppath = &args.pred[i];
            run.inputs.push(ppath.clone());
            let pred = Prediction::load(ppath)?;
            let alpha = pred.beliefs(&graph)?;
            let directed: AdjacencyEstimate = alpha.threshold(pred.tau);
            evaluate_edges(&graph, &pred.edges, Some(&directed), args.step)?
        };
        per_graph.push(json!({
            "graph": gpath,
            "edge_metrics": report.edge_metrics,
            "undirected": report.undirected,
            "centerline": report.centerline,
        }));
        reports.push(report);
    }
    let value = json!({ "graphs": per_graph, "aggregate": aggregate(&reports) });
    emit(&mut run, &args.common, &value)?;
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> std::result::Result<(), Failure> {
    let mut run = Run::new("oracle", args.common.seed);
    run.inputs.push(args.graph.clone());
    let graph = CandidateGraph::load(&args.graph)?;
    let theta = match &args.model {
        Some(p) => {
            run.inputs.push(p.clone());
            ModelParams::load(p)?
        }
        None => ModelParams::zeros(),
    };
    run.config = json!({ "theta": theta, "max_nodes_with_configurations": MAX_NODES_WITH_CONFIGS });
    let post = enumerate_posterior(&graph, &theta)?;
    let marginals: Vec<Value> = graph.pairs().zip(&post.marginals).map(|((k, l), m)| json!([k, l, m])).collect();
    let value = json!({
        "log_partition": post.log_partition,
        "marginals": marginals,
        "configurations": post.configurations,
    });
    emit(&mut run, &args.common, &value)?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> std::result::Result<(), Failure> {
    let mut run = Run::new("gradcheck", args.common.seed);
    run.inputs.push(args.graph.clone());
    let graph = CandidateGraph::load(&args.graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed);
    let theta = match &args.model {
        Some(p) => {
            run.inputs.push(p.clone());
            ModelParams::load(p)?
        }
        None => random_theta(&mut rng, 0.05),
    };
    let gt = graph
        .gt_adjacency()
        .unwrap_or_else(|| AdjacencyEstimate { bits: (0..graph.num_pairs()).map(|_| rng.random_bool(0.3)).collect() });
    if !(args.h > 0.0) {
        return Err(Failure::Usage("--h must be positive".into()));
    }
    run.config = json!({ "layers": args.layers, "h": args.h, "theta": theta });
    let mrf = Mrf::new(&graph)?;
    let a0 = EdgeBeliefs::uniform(&graph, 0.5);
    let (_, tape) = forward(&mrf, &theta, args.layers, &a0)?;
    let analytic = backward(&mrf, &tape, &theta, &gt)?;
    let numeric = numeric_param_gradient(|t| forward_loss(&mrf, t, args.layers, &a0, &gt), &theta, args.h)?;
    let (mut worst, mut worst_i) = (0.0f64, 0);
    for (i, (a, b)) in analytic.to_flat().iter().zip(numeric.to_flat()).enumerate() {
        let e = relative_error(*a, b, GRADCHECK_FLOOR);
        if e > worst {
            (worst, worst_i) = (e, i);
        }
    }
    let value = json!({
        "max_rel_error": worst,
        "worst_component": ModelParams::component_name(worst_i),
        "layers": args.layers,
        "h": args.h,
        "components": ModelParams::LEN,
    });
    emit(&mut run, &args.common, &value)?;
    Ok(())
}

/// Absolute floor in the relative-error denominator of `gradcheck`.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit status: 0 on success, 2 for usage errors, 1 for data
/// and runtime errors. Errors are one JSON line on stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    eprintln!("{}", error_line("usage", &first));
                    2
                }
            };
        }
    };
    let threads = match &cli.command {
        Command::Generate(a) => a.common.threads,
        Command::Train(a) => a.common.threads,
        Command::Infer(a) => a.common.threads,
        Command::Eval(a) => a.common.threads,
        Command::Oracle(a) => a.common.threads,
        Command::Gradcheck(a) => a.common.threads,
    };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("{}", error_line("usage", "--threads must be positive"));
            return 2;
        }
        // fails only when a pool already exists, e.g. a second call in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("{}", error_line("usage", &m));
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        run_command(std::iter::once("mfn-refine").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(&["generate", "--bogus"]), 2);
        assert_eq!(run(&["frobnicate"]), 2);
        assert_eq!(run(&["generate", "--n", "4"]), 2);
        assert_eq!(run(&["--help"]), 0);
    }

    #[test]
    fn data_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        assert_eq!(run(&["oracle", "--graph", bad.to_str().unwrap()]), 1);
        assert_eq!(run(&["oracle", "--graph", dir.path().join("missing.json").to_str().unwrap()]), 1);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = json!({ "x": 1, "y": [1.5, 2.0] });
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&json!({ "x": 2 })));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
