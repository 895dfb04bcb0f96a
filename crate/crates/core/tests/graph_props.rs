mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use proptest::prelude::*;
use spdnn_core::arch_ir::{InputShape, NetworkSpec};
use spdnn_core::graph::{
    contract, dump, network_to_graph, parallel_compose, validate_graph, ArchGraph, Endpoint, OpSignature,
};

type Label = (usize, String);
type Owners = BTreeMap<Label, BTreeSet<usize>>;
type LabelEdges = BTreeSet<(String, String)>;

/// Groups layers by (depth, signature) with plain loops: which parents own
/// each label, and which label pairs are joined by an edge.
fn label_oracle(parents: &[NetworkSpec]) -> (Owners, LabelEdges) {
    let mut owners = Owners::new();
    let mut edges = BTreeSet::new();
    for (p, net) in parents.iter().enumerate() {
        let mut prev = "input".to_string();
        for (d, layer) in net.layers().iter().enumerate() {
            let label = (d + 1, OpSignature::of(layer).to_string());
            owners.entry(label.clone()).or_default().insert(p);
            let name = format!("({},{})", label.1, label.0);
            edges.insert((prev, name.clone()));
            prev = name;
        }
        edges.insert((prev, "output".to_string()));
    }
    (owners, edges)
}

fn label_edges(g: &ArchGraph) -> LabelEdges {
    let name = |e: Endpoint| match e {
        Endpoint::Input => "input".to_string(),
        Endpoint::Output => "output".to_string(),
        Endpoint::Node(i) => g.nodes[i].label.to_string(),
    };
    g.edges.iter().map(|&(a, b)| (name(a), name(b))).collect()
}

fn parents_on_one_input() -> impl Strategy<Value = Vec<NetworkSpec>> {
    prop::collection::vec(
        (
            prop::collection::vec(prop::sample::select(vec![1usize, 3, 5, 7]), 1..=6),
            prop::collection::vec(1usize..=5, 1..=3),
        ),
        1..=5,
    )
    .prop_map(|specs| {
        let input = InputShape::new(12, 12, 1);
        specs
            .iter()
            .enumerate()
            .map(|(i, (k, w))| common::conv_parent(&format!("p{i}"), input, k, w, 1))
            .collect()
    })
}

proptest! {
    #[test]
    fn contraction_matches_label_grouping(parents in parents_on_one_input()) {
        let composed = parallel_compose(&parents.iter().map(network_to_graph).collect::<Vec<_>>()).unwrap();
        let total_layers: usize = parents.iter().map(|p| p.layers().len()).sum();
        prop_assert_eq!(composed.nodes.len(), total_layers);
        let g = contract(&composed);
        let (owners, edges) = label_oracle(&parents);
        prop_assert_eq!(g.nodes.len(), owners.len());
        for n in &g.nodes {
            let key = (n.label.depth, n.label.op.to_string());
            prop_assert_eq!(&n.origins, &owners[&key]);
        }
        prop_assert_eq!(label_edges(&g), edges);
        prop_assert!(validate_graph(&g).is_empty());
        prop_assert_eq!(contract(&g), g.clone());
        prop_assert_eq!(g.distinct_labels(), g.nodes.len());
    }
}

#[test]
fn bundled_parents_contract_to_17_nodes() {
    let start = Instant::now();
    let parents = spdnn_core::nets::all();
    let g = contract(&parallel_compose(&parents.iter().map(network_to_graph).collect::<Vec<_>>()).unwrap());
    assert_eq!(g.nodes.len(), 17);
    let shared: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| n.origins.len() > 1)
        .map(|n| n.label.to_string())
        .collect();
    assert_eq!(shared, ["(3C,1)", "(7C,3)"]);
    let (owners, edges) = label_oracle(&parents);
    assert_eq!(owners.len(), 17);
    assert_eq!(label_edges(&g), edges);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn dumps() {
    let parents = spdnn_core::nets::all();
    let single = network_to_graph(&parents[0]);
    assert_eq!(dump(&single), dump(&contract(&single)));
    let twice = parallel_compose(&[single.clone(), single.clone()]).unwrap();
    assert_eq!(dump(&contract(&twice)), dump(&contract(&single)));
    let all = contract(&parallel_compose(&parents.iter().map(network_to_graph).collect::<Vec<_>>()).unwrap());
    let text = dump(&all);
    assert_eq!(text.lines().filter(|l| l.contains("depth=")).count(), 17);
    assert!(text.contains("d3_7C_0 depth=3 origins=net1,net3\n"));
    assert!(text.contains("d1_3C_0 -> d2_5C_0\n"));
}
