//! Edge classification metrics and the centerline distance between a
//! predicted and a reference tree.

use std::collections::{BTreeSet, HashMap};

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{squared_distance, AdjacencyEstimate, CandidateGraph, EdgeBeliefs};

pub const DEFAULT_STEP: f64 = 0.5;

/// Confusion counts and rates. Precision is 1 when nothing is predicted
/// positive and recall is 1 when nothing is positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub binary_accuracy: f64,
}

impl EdgeMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let binary_accuracy = ratio(tp + tn, tp + fp + fn_ + tn);
        Self { tp, fp, fn_, tn, precision, recall, f1, binary_accuracy }
    }
}

/// Counts over ordered candidate pairs.
pub fn edge_metrics(pred: &AdjacencyEstimate, gt: &AdjacencyEstimate) -> Result<EdgeMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Structural(format!("{} predicted bits against {} ground-truth bits", pred.len(), gt.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(EdgeMetrics::from_counts(tp, fp, fn_, tn))
}

/// Counts over unordered candidate pairs. Ground-truth edges missing from
/// the candidate set count as false negatives.
pub fn undirected_edge_metrics(graph: &CandidateGraph, pred: &[(usize, usize)]) -> Result<EdgeMetrics> {
    let gt: BTreeSet<(usize, usize)> = graph
        .gt_edges()
        .ok_or_else(|| Error::Precondition("graph has no ground-truth edges".into()))?
        .iter()
        .copied()
        .collect();
    let pred: BTreeSet<(usize, usize)> = pred.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    let candidates = graph.pairs().filter(|&(k, l)| k < l).count();
    let tp = pred.intersection(&gt).count();
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    let outside = pred.union(&gt).filter(|&&(i, j)| graph.pair_index(i, j).is_none()).count();
    let tn = (candidates + outside).saturating_sub(tp + fp + fn_);
    Ok(EdgeMetrics::from_counts(tp, fp, fn_, tn))
}

/// Points along each edge between node mean positions, spaced at most
/// `step` apart with both endpoints included. Points closer than `step/10`
/// to an earlier point are dropped.
pub fn sample_centerline_points(graph: &CandidateGraph, edges: &[(usize, usize)], step: f64) -> Result<Vec<[f64; 3]>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!("sampling step must be positive, got {step}")));
    }
    let tol = step / 10.0;
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut points: Vec<[f64; 3]> = Vec::new();
    let cell = |p: &[f64; 3]| [(p[0] / tol).floor() as i64, (p[1] / tol).floor() as i64, (p[2] / tol).floor() as i64];
    let mut push = |p: [f64; 3]| {
        let c = cell(&p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if ids.iter().any(|&i| squared_distance(&points[i], &p) <= tol * tol) {
                            return;
                        }
                    }
                }
            }
        }
        grid.entry(c).or_default().push(points.len());
        points.push(p);
    };
    for &(i, j) in edges {
        if i >= graph.num_nodes() || j >= graph.num_nodes() {
            return Err(Error::Structural(format!("edge ({i}, {j}) out of range")));
        }
        let (a, b) = (graph.node(i).position(), graph.node(j).position());
        let len = squared_distance(&a, &b).sqrt();
        let segments = ((len / step).ceil() as usize).max(1);
        for s in 0..=segments {
            let t = s as f64 / segments as f64;
            push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]);
        }
    }
    Ok(points)
}

/// Nearest-neighbour distances to a fixed point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(points: &[[f64; 3]]) -> Self {
        Self { tree: ImmutableKdTree::new_from_slice(points) }
    }

    pub fn nearest_distance(&self, q: &[f64; 3]) -> f64 {
        self.tree.nearest_one::<SquaredEuclidean>(q).distance.sqrt()
    }
}

fn mean_min_distance(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let index = PointIndex::new(to);
    from.iter().map(|p| index.nearest_distance(p)).sum::<f64>() / from.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterlineResult {
    #[serde(rename = "d_FP")]
    pub d_fp: f64,
    #[serde(rename = "d_FN")]
    pub d_fn: f64,
    pub d_err: f64,
}

impl CenterlineResult {
    pub fn from_parts(d_fp: f64, d_fn: f64) -> Self {
        Self { d_fp, d_fn, d_err: (d_fp + d_fn) / 2.0 }
    }
}

/// `d_FP`: mean distance from predicted points to the reference;
/// `d_FN`: mean distance from reference points to the prediction.
pub fn centerline_distance(pred: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<CenterlineResult> {
    if pred.is_empty() || reference.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "centerline distance needs two non-empty point sets ({} predicted, {} reference)",
            pred.len(),
            reference.len()
        )));
    }
    Ok(CenterlineResult::from_parts(mean_min_distance(pred, reference), mean_min_distance(reference, pred)))
}

/// Reference centerline sampled along the ground-truth edges.
pub fn reference_centerline(graph: &CandidateGraph, step: f64) -> Result<Vec<[f64; 3]>> {
    let gt = graph.gt_edges().ok_or_else(|| Error::Precondition("graph has no ground-truth edges".into()))?;
    sample_centerline_points(graph, gt, step)
}

/// Every node linked to its nearest other node by position; undirected union.
pub fn nearest_neighbor_baseline(graph: &CandidateGraph) -> Vec<(usize, usize)> {
    let n = graph.num_nodes();
    if n < 2 {
        return Vec::new();
    }
    let positions: Vec<[f64; 3]> = graph.nodes().iter().map(|x| x.position()).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&positions);
    let mut edges = BTreeSet::new();
    for (i, p) in positions.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for nn in tree.nearest_n::<SquaredEuclidean>(p, std::num::NonZero::new(n.min(8)).unwrap()) {
            let j = nn.item as usize;
            if j != i && best.is_none_or(|(d, b)| nn.distance < d || (nn.distance == d && j < b)) {
                best = Some((nn.distance, j));
            }
        }
        let j = match best {
            Some((_, j)) => j,
            // more than seven coincident points
            None => (0..n).filter(|&j| j != i).min_by(|&a, &b| {
                squared_distance(p, &positions[a]).total_cmp(&squared_distance(p, &positions[b])).then(a.cmp(&b))
            }).unwrap(),
        };
        edges.insert((i.min(j), i.max(j)));
    }
    edges.into_iter().collect()
}

/// Per-graph evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    /// Over ordered candidate pairs.
    pub edge_metrics: EdgeMetrics,
    /// Over unordered pairs, an edge needing both directions.
    pub undirected: EdgeMetrics,
    /// Absent when the prediction has no edges.
    pub centerline: Option<CenterlineResult>,
    pub num_predicted_edges: usize,
}

fn directed_bits(graph: &CandidateGraph, edges: &[(usize, usize)]) -> AdjacencyEstimate {
    let mut bits = AdjacencyEstimate::zeros(graph);
    for &(i, j) in edges {
        for (a, b) in [(i, j), (j, i)] {
            if let Some(p) = graph.pair_index(a, b) {
                bits.bits[p] = true;
            }
        }
    }
    bits
}

/// Evaluate an undirected edge prediction, and its directed form when
/// given, against the graph's ground truth.
pub fn evaluate_edges(
    graph: &CandidateGraph,
    edges: &[(usize, usize)],
    directed: Option<&AdjacencyEstimate>,
    step: f64,
) -> Result<GraphReport> {
    let gt = graph.gt_adjacency().ok_or_else(|| Error::Precondition("graph has no ground-truth edges".into()))?;
    let directed = directed.cloned().unwrap_or_else(|| directed_bits(graph, edges));
    let edge_metrics = edge_metrics(&directed, &gt)?;
    let undirected = undirected_edge_metrics(graph, edges)?;
    let pred_points = sample_centerline_points(graph, edges, step)?;
    let ref_points = reference_centerline(graph, step)?;
    let centerline = match centerline_distance(&pred_points, &ref_points) {
        Ok(c) => Some(c),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(GraphReport { edge_metrics, undirected, centerline, num_predicted_edges: edges.len() })
}

/// Threshold beliefs at `tau` and evaluate.
pub fn evaluate_beliefs(graph: &CandidateGraph, alpha: &EdgeBeliefs, tau: f64, step: f64) -> Result<GraphReport> {
    let t = crate::mfa::threshold(graph, alpha, tau)?;
    evaluate_edges(graph, &t.undirected, Some(&t.directed), step)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub binary_accuracy: MeanStd,
    pub undirected_f1: MeanStd,
    #[serde(rename = "d_FP")]
    pub d_fp: MeanStd,
    #[serde(rename = "d_FN")]
    pub d_fn: MeanStd,
    pub d_err: MeanStd,
}

/// Mean and standard deviation of each metric across graphs; centerline
/// statistics cover the graphs where the metric is defined.
pub fn aggregate(reports: &[GraphReport]) -> Aggregate {
    let col = |f: &dyn Fn(&GraphReport) -> Option<f64>| MeanStd::of(&reports.iter().filter_map(f).collect::<Vec<_>>());
    Aggregate {
        precision: col(&|r| Some(r.edge_metrics.precision)),
        recall: col(&|r| Some(r.edge_metrics.recall)),
        f1: col(&|r| Some(r.edge_metrics.f1)),
        binary_accuracy: col(&|r| Some(r.edge_metrics.binary_accuracy)),
        undirected_f1: col(&|r| Some(r.undirected.f1)),
        d_fp: col(&|r| r.centerline.map(|c| c.d_fp)),
        d_fn: col(&|r| r.centerline.map(|c| c.d_fn)),
        d_err: col(&|r| r.centerline.map(|c| c.d_err)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeFeatures;
    use proptest::prelude::*;

    fn node_at(p: [f64; 3]) -> NodeFeatures {
        NodeFeatures::new([p[0], p[1], p[2], 1.0, 1.0, 0.0, 0.0], [0.0; 7])
    }

    fn graph_at(points: &[[f64; 3]], gt: Option<Vec<(usize, usize)>>) -> CandidateGraph {
        let l = points.len().saturating_sub(1).max(1);
        CandidateGraph::from_knn(points.iter().map(|&p| node_at(p)).collect(), l, gt).unwrap()
    }

    fn bits(v: &[u8]) -> AdjacencyEstimate {
        AdjacencyEstimate { bits: v.iter().map(|&b| b == 1).collect() }
    }

    #[test]
    fn edge_metric_examples() {
        let gt = bits(&[1, 0, 1, 0, 0]);
        let m = edge_metrics(&gt, &gt).unwrap();
        assert_eq!((m.precision, m.recall, m.binary_accuracy, m.f1), (1.0, 1.0, 1.0, 1.0));

        let m = edge_metrics(&bits(&[0; 5]), &gt).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.binary_accuracy, 3.0 / 5.0);
        assert_eq!(m.f1, 0.0);

        let m = edge_metrics(&bits(&[1, 1, 1, 0, 0]), &bits(&[1, 0, 1, 1, 0])).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 1, 1));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);

        assert!(matches!(edge_metrics(&bits(&[1]), &gt), Err(Error::Structural(_))));
    }

    #[test]
    fn centerline_examples() {
        let r = centerline_distance(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!((r.d_fp, r.d_fn, r.d_err), (5.0, 5.0, 5.0));
        let pts = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(centerline_distance(&pts, &pts).unwrap(), CenterlineResult::from_parts(0.0, 0.0));
        assert!(matches!(centerline_distance(&[], &pts), Err(Error::UndefinedMetric(_))));
        let c = CenterlineResult::from_parts(0.792, 4.807);
        assert!((c.d_err - 2.7995).abs() < 1e-12);
    }

    #[test]
    fn sampling_examples() {
        let g = graph_at(&[[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]], None);
        assert_eq!(sample_centerline_points(&g, &[(0, 1)], 0.5).unwrap().len(), 3);
        assert_eq!(sample_centerline_points(&g, &[], 0.5).unwrap().len(), 0);
        // shared node 1 appears once
        assert_eq!(sample_centerline_points(&g, &[(0, 1), (1, 2)], 0.5).unwrap().len(), 5);
        assert!(sample_centerline_points(&g, &[(0, 1)], 0.0).is_err());

        let same = graph_at(&[[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]], None);
        assert_eq!(sample_centerline_points(&same, &[(0, 1)], 0.5).unwrap(), vec![[2.0, 2.0, 2.0]]);

        // spacing never exceeds the step
        let pts = sample_centerline_points(&g, &[(0, 2)], 0.3).unwrap();
        for w in pts.windows(2) {
            assert!(squared_distance(&w[0], &w[1]).sqrt() <= 0.3 + 1e-12);
        }
    }

    #[test]
    fn undirected_metrics_examples() {
        let g = graph_at(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], Some(vec![(0, 1), (1, 2)]));
        let m = undirected_edge_metrics(&g, &[(1, 0), (2, 1)]).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 0, 0, 1));
        let m = undirected_edge_metrics(&g, &[(0, 2)]).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (0, 1, 2, 0));
    }

    #[test]
    fn baseline_links_nearest() {
        let g = graph_at(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.5, 0.0, 0.0]], None);
        assert_eq!(nearest_neighbor_baseline(&g), vec![(0, 1), (2, 3)]);
        let report = evaluate_edges(
            &graph_at(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], Some(vec![(0, 1), (1, 2)])),
            &[(0, 1), (1, 2)],
            None,
            0.5,
        )
        .unwrap();
        assert_eq!(report.edge_metrics.f1, 1.0);
        assert_eq!(report.centerline.unwrap().d_err, 0.0);
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    fn point() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-10.0f64..10.0)
    }

    proptest! {
        #[test]
        fn kd_index_matches_scan(pts in prop::collection::vec(point(), 1..80), qs in prop::collection::vec(point(), 1..20)) {
            let index = PointIndex::new(&pts);
            for q in &qs {
                let brute = pts.iter().map(|p| squared_distance(p, q)).fold(f64::INFINITY, f64::min).sqrt();
                prop_assert!((index.nearest_distance(q) - brute).abs() < 1e-12);
            }
        }

        #[test]
        fn swap_symmetry(a in prop::collection::vec(point(), 1..30), b in prop::collection::vec(point(), 1..30)) {
            let ab = centerline_distance(&a, &b).unwrap();
            let ba = centerline_distance(&b, &a).unwrap();
            prop_assert_eq!(ab.d_fp, ba.d_fn);
            prop_assert_eq!(ab.d_fn, ba.d_fp);
            prop_assert_eq!(ab.d_err, ba.d_err);
        }

        #[test]
        fn rigid_motion_invariance(a in prop::collection::vec(point(), 1..30), b in prop::collection::vec(point(), 1..30),
                                   angle in 0.0f64..6.28, shift in point()) {
            let (s, c) = angle.sin_cos();
            let move_pt = |p: &[f64; 3]| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1], p[2] + shift[2]];
            let a2: Vec<_> = a.iter().map(move_pt).collect();
            let b2: Vec<_> = b.iter().map(move_pt).collect();
            let before = centerline_distance(&a, &b).unwrap().d_err;
            let after = centerline_distance(&a2, &b2).unwrap().d_err;
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn adding_reference_point_never_raises_d_fp(a in prop::collection::vec(point(), 1..30), b in prop::collection::vec(point(), 1..30), k in 0usize..30) {
            let before = centerline_distance(&a, &b).unwrap().d_fp;
            let mut a2 = a.clone();
            a2.push(b[k % b.len()]);
            prop_assert!(centerline_distance(&a2, &b).unwrap().d_fp <= before + 1e-12);
        }
    }
}
