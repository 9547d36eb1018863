//! Synthetic branching trees with noisy per-node Gaussian features, plus
//! spurious clutter nodes, packaged as candidate graphs with ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_knn_neighborhoods, CandidateGraph, NodeFeatures, DEFAULT_NEIGHBORS, MEAN_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    /// Generations below the root branch; 0 gives a single branch.
    pub depth: usize,
    /// Root branch length range; generation `g` is scaled by `radius_decay^g`.
    pub branch_length: [f64; 2],
    pub root_radius: f64,
    pub radius_decay: f64,
    /// Node spacing as a multiple of the local radius.
    pub spacing: f64,
    /// Angle between a child and its parent direction, in radians.
    pub branch_angle: [f64; 2],
    pub clutter_fraction: f64,
    /// Position noise σ as a fraction of the local radius.
    pub position_noise: f64,
    /// σ of the log-normal radius factor.
    pub radius_noise: f64,
    /// Angular σ added to each tangent component before renormalizing.
    pub orientation_noise: f64,
    pub position_var: [f64; 2],
    pub radius_var: [f64; 2],
    pub orientation_var: [f64; 2],
    /// Neighbourhood size used when building candidate pairs.
    pub neighbors: usize,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            branch_length: [0.8, 1.2],
            root_radius: 0.1,
            radius_decay: 0.8,
            spacing: 1.0,
            branch_angle: [0.4, 0.8],
            clutter_fraction: 0.15,
            position_noise: 0.1,
            radius_noise: 0.05,
            orientation_noise: 0.05,
            position_var: [1e-4, 1e-3],
            radius_var: [1e-5, 1e-4],
            orientation_var: [0.001, 0.05],
            neighbors: DEFAULT_NEIGHBORS,
            seed: 0,
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return bad("radius_decay must be in (0, 1)");
        }
        if !(self.spacing > 0.0) || !(self.root_radius > 0.0) {
            return bad("spacing and root_radius must be positive");
        }
        if !range_ok(self.branch_length) || !(self.branch_length[0] > 0.0) {
            return bad("branch_length must be a positive [min, max] range");
        }
        if !range_ok(self.branch_angle) {
            return bad("branch_angle must be a [min, max] range");
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return bad("clutter_fraction must be in [0, 1)");
        }
        for s in [self.position_noise, self.radius_noise, self.orientation_noise] {
            if !(s >= 0.0) {
                return bad("noise scales must be >= 0");
            }
        }
        for r in [self.position_var, self.radius_var, self.orientation_var] {
            if !range_ok(r) || r[0] < 0.0 {
                return bad("variance ranges must be non-negative [min, max] ranges");
            }
        }
        if self.neighbors == 0 {
            return bad("neighbors must be positive");
        }
        Ok(())
    }

    /// Half the node spacing of the finest generation; a centerline
    /// sampling step matched to the generated geometry.
    pub fn eval_step(&self) -> f64 {
        0.5 * self.spacing * self.root_radius * self.radius_decay.powi(self.depth as i32)
    }

    /// TOML, or JSON when the file ends in `.json`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = crate::error::read_config(path.as_ref())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Two unit vectors completing `d` to an orthonormal frame.
fn frame(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let axis = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(d, axis));
    (u, cross(d, u))
}

fn random_unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            return normalize(v);
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sample_var<R: Rng>(rng: &mut R, cfg: &TreeConfig) -> [f64; MEAN_DIM] {
    let mut v = [0.0; MEAN_DIM];
    for c in 0..3 {
        v[c] = uniform(rng, cfg.position_var);
    }
    v[3] = uniform(rng, cfg.radius_var);
    for c in 4..7 {
        v[c] = uniform(rng, cfg.orientation_var);
    }
    v
}

struct Branch {
    end: [f64; 3],
    dir: [f64; 3],
    last_node: usize,
}

/// A clean tree: node means lie exactly on the branches and ground truth
/// links consecutive nodes and each child's first node to its parent's last.
pub fn generate_tree(config: &TreeConfig) -> Result<CandidateGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nodes: Vec<NodeFeatures> = Vec::new();
    let mut edges = Vec::new();

    let mut grow = |rng: &mut ChaCha8Rng, start: [f64; 3], dir: [f64; 3], gen: usize, parent: Option<usize>| {
        let scale = config.radius_decay.powi(gen as i32);
        let radius = config.root_radius * scale;
        let step = config.spacing * radius;
        let length = uniform(rng, config.branch_length) * scale;
        let count = ((length / step).round() as usize).max(1);
        let first_offset = if parent.is_some() { 1.0 } else { 0.0 };
        let mut prev = parent;
        let mut pos = start;
        for i in 0..count {
            let t = (i as f64 + first_offset) * step;
            pos = [start[0] + t * dir[0], start[1] + t * dir[1], start[2] + t * dir[2]];
            let mean = [pos[0], pos[1], pos[2], radius, dir[0], dir[1], dir[2]];
            let id = nodes.len();
            nodes.push(NodeFeatures::new(mean, sample_var(rng, config)));
            if let Some(p) = prev {
                edges.push((p, id));
            }
            prev = Some(id);
        }
        Branch { end: pos, dir, last_node: prev.expect("at least one node") }
    };

    let root_dir = random_unit(&mut rng);
    let half = 0.25 * (config.branch_length[0] + config.branch_length[1]);
    let start = [-half * root_dir[0], -half * root_dir[1], -half * root_dir[2]];
    let mut frontier = vec![grow(&mut rng, start, root_dir, 0, None)];
    for gen in 1..=config.depth {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for parent in &frontier {
            let (u, v) = frame(parent.dir);
            let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
            for c in 0..2 {
                let phi = phi0 + c as f64 * std::f64::consts::PI;
                let theta = uniform(&mut rng, config.branch_angle);
                let (st, ct) = theta.sin_cos();
                let (sp, cp) = phi.sin_cos();
                let dir = normalize([
                    ct * parent.dir[0] + st * (cp * u[0] + sp * v[0]),
                    ct * parent.dir[1] + st * (cp * u[1] + sp * v[1]),
                    ct * parent.dir[2] + st * (cp * u[2] + sp * v[2]),
                ]);
                next.push(grow(&mut rng, parent.end, dir, gen, Some(parent.last_node)));
            }
        }
        frontier = next;
    }
    drop(grow);

    if nodes.len() < 2 {
        return Err(Error::Degenerate(format!("configuration produced {} node(s)", nodes.len())));
    }
    let n_true = nodes.len();
    let mut g = CandidateGraph::from_knn(nodes, config.neighbors, Some(edges))?;
    g.meta.insert("n_true".into(), serde_json::json!(n_true));
    g.meta.insert("L".into(), serde_json::json!(config.neighbors));
    g.meta.insert("seed".into(), serde_json::json!(config.seed));
    Ok(g)
}

/// Fraction of ground-truth edges that are candidate pairs.
pub fn gt_coverage(graph: &CandidateGraph) -> f64 {
    match graph.gt_edges() {
        Some(edges) if !edges.is_empty() => {
            let covered = edges.iter().filter(|&&(i, j)| graph.pair_index(i, j).is_some()).count();
            covered as f64 / edges.len() as f64
        }
        _ => 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct Corrupted {
    pub graph: CandidateGraph,
    pub coverage: f64,
}

/// Perturb true-node features, append `clutter_fraction · N` clutter nodes
/// drawn uniformly in the bounding box with features from the same ranges,
/// and rebuild the candidate pairs.
pub fn corrupt(graph: &CandidateGraph, config: &TreeConfig) -> Result<Corrupted> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1u64.rotate_right(8));
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n = graph.num_nodes();
    let mut nodes: Vec<NodeFeatures> = Vec::with_capacity(n);
    for node in graph.nodes() {
        let mut m = node.mean;
        let r = m[3];
        for c in 0..3 {
            m[c] += config.position_noise * r * std_normal.sample(&mut rng);
        }
        m[3] = r * (config.radius_noise * std_normal.sample(&mut rng)).exp();
        let mut o = [m[4], m[5], m[6]];
        for c in &mut o {
            *c += config.orientation_noise * std_normal.sample(&mut rng);
        }
        if config.orientation_noise > 0.0 && o.iter().any(|c| *c != 0.0) {
            o = normalize(o);
        }
        m[4..7].copy_from_slice(&o);
        nodes.push(NodeFeatures::new(m, node.var));
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for node in &nodes {
        for c in 0..3 {
            lo[c] = lo[c].min(node.mean[c]);
            hi[c] = hi[c].max(node.mean[c]);
        }
        rmin = rmin.min(node.mean[3]);
        rmax = rmax.max(node.mean[3]);
    }
    let clutter = (config.clutter_fraction * n as f64).round() as usize;
    for _ in 0..clutter {
        let mut m = [0.0; MEAN_DIM];
        for c in 0..3 {
            m[c] = uniform(&mut rng, [lo[c], hi[c]]);
        }
        m[3] = uniform(&mut rng, [rmin, rmax]);
        m[4..7].copy_from_slice(&random_unit(&mut rng));
        let var = sample_var(&mut rng, config);
        nodes.push(NodeFeatures::new(m, var));
    }

    let neighborhoods = crate::graph::symmetrize_neighborhoods(&build_knn_neighborhoods(&nodes, config.neighbors)?);
    let mut out = CandidateGraph::new(nodes, neighborhoods, graph.gt_edges().map(<[_]>::to_vec))?;
    out.meta = graph.meta.clone();
    let n_true = graph.meta.get("n_true").cloned().unwrap_or(serde_json::json!(n));
    out.meta.insert("n_true".into(), n_true);
    out.meta.insert("n_clutter".into(), serde_json::json!(clutter));
    out.meta.insert("L".into(), serde_json::json!(config.neighbors));
    let coverage = gt_coverage(&out);
    out.meta.insert("gt_coverage".into(), serde_json::json!(coverage));
    Ok(Corrupted { graph: out, coverage })
}

/// Graphs with round-robin fold labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<CandidateGraph>,
    pub folds: Vec<usize>,
}

pub const DEFAULT_FOLDS: usize = 4;

/// `n_trees` independent corrupted trees; tree `i` is in fold `i mod 4`.
pub fn make_dataset(n_trees: usize, config: &TreeConfig, seed: u64) -> Result<Dataset> {
    if n_trees < DEFAULT_FOLDS {
        return Err(Error::Config(format!("need at least {DEFAULT_FOLDS} trees, got {n_trees}")));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_trees);
    let mut folds = Vec::with_capacity(n_trees);
    for i in 0..n_trees {
        let cfg = TreeConfig { seed: seeds.random(), ..config.clone() };
        let mut g = corrupt(&generate_tree(&cfg)?, &cfg)?.graph;
        let fold = i % DEFAULT_FOLDS;
        g.meta.insert("fold".into(), serde_json::json!(fold));
        graphs.push(g);
        folds.push(fold);
    }
    Ok(Dataset { graphs, folds })
}

impl Dataset {
    pub fn file_name(i: usize) -> String {
        format!("graph_{i:03}.json")
    }

    /// One graph file per tree; returns the written paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (i, g) in self.graphs.iter().enumerate() {
            let p = dir.join(Self::file_name(i));
            g.save(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }

    /// Every `*.json` graph file in `dir` except `manifest.json`, in name
    /// order. Folds come from `meta.fold` or, when absent, round-robin.
    pub fn load(dir: impl AsRef<Path>, folds: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Data { path: dir.to_path_buf(), reason: e.to_string() })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "manifest.json"))
            .collect();
        paths.sort();
        let mut graphs = Vec::new();
        let mut fold_ids = Vec::new();
        for (i, p) in paths.iter().enumerate() {
            let g = CandidateGraph::load(p)?;
            let f = g.meta.get("fold").and_then(serde_json::Value::as_u64).map_or(i % folds, |f| f as usize % folds);
            fold_ids.push(f);
            graphs.push(g);
        }
        Ok(Self { graphs, folds: fold_ids })
    }
}
