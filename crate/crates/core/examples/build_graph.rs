// Build a candidate graph from node features, inspect it and round-trip
// it through the JSON file format.
//
// ```bash
// cargo run --example build_graph
// ```

use mfn_refine::graph::{validate_graph, CandidateGraph, NodeFeatures};

/// Returns the number of ordered candidate pairs.
pub fn run_example() -> mfn_refine::Result<usize> {
    // a bent chain of ten nodes, radius 0.1, plus two stray nodes
    let mut nodes = Vec::new();
    for i in 0..10 {
        let t = i as f64 * 0.1;
        let (x, y) = if i < 5 { (t, 0.0) } else { (0.4, t - 0.4) };
        let dir = if i < 5 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        nodes.push(NodeFeatures::new([x, y, 0.0, 0.1, dir[0], dir[1], dir[2]], [1e-4, 1e-4, 1e-4, 1e-5, 0.01, 0.01, 0.01]));
    }
    nodes.push(NodeFeatures::new([0.9, 0.9, 0.3, 0.08, 0.0, 0.0, 1.0], [1e-4, 1e-4, 1e-4, 1e-5, 0.01, 0.01, 0.01]));
    nodes.push(NodeFeatures::new([-0.5, 0.6, -0.2, 0.12, 0.6, 0.8, 0.0], [1e-4, 1e-4, 1e-4, 1e-5, 0.01, 0.01, 0.01]));
    let gt: Vec<(usize, usize)> = (1..10).map(|i| (i - 1, i)).collect();

    let graph = CandidateGraph::from_knn(nodes, 3, Some(gt))?;
    let report = validate_graph(&graph);
    println!("{} nodes, {} ordered candidate pairs, valid: {}", graph.num_nodes(), graph.num_pairs(), report.is_valid());
    for k in [0, 4, 10] {
        println!("  N({k}) = {:?}", graph.neighbors(k));
    }

    let text = graph.to_json_string()?;
    let back = CandidateGraph::from_json_str(&text)?;
    assert_eq!(back.to_json_string()?, text);
    println!("JSON round trip: {} bytes, identical", text.len());
    Ok(graph.num_pairs())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
