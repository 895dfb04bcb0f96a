//! Labeled-DAG view of network architectures and label-equality contraction.
//!
//! Every layer becomes a node labeled `(signature, depth)`, where the
//! signature is `kC` for a `k x k` convolution, `F` for a dense layer and
//! `Pw` for a `w x w` max pool, and depth is the 1-based distance from the
//! input. Several graphs are placed side by side with one shared input and
//! one shared output marker, then all internal nodes carrying the same label
//! are merged into one node that keeps the union of their edges.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::arch_ir::{InputShape, LayerSpec, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("cannot compose an empty list of graphs")]
    EmptyComposition,
    #[error("graphs disagree on input shape: {first:?} vs {other:?}")]
    InputMismatch { first: InputShape, other: InputShape },
}

/// Operation part of a node label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpSignature {
    Conv(usize),
    Dense,
    Pool(usize),
}

impl OpSignature {
    pub fn of(layer: &LayerSpec) -> Self {
        match *layer {
            LayerSpec::Conv { kernel, .. } => OpSignature::Conv(kernel),
            LayerSpec::Dense { .. } => OpSignature::Dense,
            LayerSpec::MaxPool { window } => OpSignature::Pool(window),
        }
    }
}

impl fmt::Display for OpSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpSignature::Conv(k) => write!(f, "{k}C"),
            OpSignature::Dense => f.write_str("F"),
            OpSignature::Pool(w) => write!(f, "P{w}"),
        }
    }
}

impl FromStr for OpSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("`{s}` is not an op signature (kC, F or Pw)");
        let digits = |d: &str| -> Result<usize, String> {
            if d.is_empty() || !d.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            d.parse().map_err(|_| bad())
        };
        if s == "F" {
            Ok(OpSignature::Dense)
        } else if let Some(k) = s.strip_suffix('C') {
            Ok(OpSignature::Conv(digits(k)?))
        } else if let Some(w) = s.strip_prefix('P') {
            Ok(OpSignature::Pool(digits(w)?))
        } else {
            Err(bad())
        }
    }
}

/// `(signature, depth)`. Ordered by depth first, so sorting nodes by label
/// yields a topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeLabel {
    pub depth: usize,
    pub op: OpSignature,
}

impl NodeLabel {
    pub fn new(op: OpSignature, depth: usize) -> Self {
        NodeLabel { depth, op }
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.op, self.depth)
    }
}

/// Edge endpoint: the shared input marker, an internal node, or the shared
/// output marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Input,
    Node(usize),
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub label: NodeLabel,
    /// The layer this node executes. After contraction this is the layer of
    /// the lowest-indexed contributing parent, with batch norm enabled if
    /// any contributor used it.
    pub op: LayerSpec,
    pub out_channels: usize,
    /// Indices of the parent networks that contributed this node.
    pub origins: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchGraph {
    pub input: InputShape,
    /// Names of the parent networks; `origins` index into this list.
    pub parent_names: Vec<String>,
    pub nodes: Vec<GraphNode>,
    pub edges: BTreeSet<(Endpoint, Endpoint)>,
}

impl ArchGraph {
    pub fn parent_count(&self) -> usize {
        self.parent_names.len()
    }

    pub fn predecessors(&self, node: Endpoint) -> Vec<Endpoint> {
        self.edges
            .iter()
            .filter(|(_, to)| *to == node)
            .map(|(from, _)| *from)
            .collect()
    }

    pub fn successors(&self, node: Endpoint) -> Vec<Endpoint> {
        self.edges
            .iter()
            .filter(|(from, _)| *from == node)
            .map(|(_, to)| *to)
            .collect()
    }

    /// Stable identifiers `d<depth>_<sig>_<i>`, where `i` counts nodes that
    /// share a label in index order. After contraction `i` is always 0.
    pub fn node_ids(&self) -> Vec<String> {
        let mut seen: HashMap<NodeLabel, usize> = HashMap::new();
        self.nodes
            .iter()
            .map(|n| {
                let i = seen.entry(n.label).or_default();
                let id = format!("d{}_{}_{}", n.label.depth, n.label.op, i);
                *i += 1;
                id
            })
            .collect()
    }

    fn endpoint_name(&self, ids: &[String], e: Endpoint) -> String {
        match e {
            Endpoint::Input => "input".into(),
            Endpoint::Output => "output".into(),
            Endpoint::Node(i) => ids.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
        }
    }

    /// Number of distinct labels among internal nodes.
    pub fn distinct_labels(&self) -> usize {
        self.nodes.iter().map(|n| n.label).collect::<BTreeSet<_>>().len()
    }

    /// Node order sorted by label then index; topological for valid graphs.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&i| (self.nodes[i].label, i));
        order
    }
}

/// Translates a chain into `input -> L1 -> ... -> Ln -> output`.
pub fn network_to_graph(spec: &NetworkSpec) -> ArchGraph {
    let shapes = spec.shapes().expect("validated network propagates");
    let nodes: Vec<GraphNode> = spec
        .layers()
        .iter()
        .zip(&shapes)
        .enumerate()
        .map(|(i, (layer, shape))| GraphNode {
            label: NodeLabel::new(OpSignature::of(layer), i + 1),
            op: *layer,
            out_channels: shape.channels,
            origins: BTreeSet::from([0]),
        })
        .collect();
    let mut edges = BTreeSet::new();
    let mut prev = Endpoint::Input;
    for i in 0..nodes.len() {
        edges.insert((prev, Endpoint::Node(i)));
        prev = Endpoint::Node(i);
    }
    edges.insert((prev, Endpoint::Output));
    ArchGraph {
        input: spec.input(),
        parent_names: vec![spec.name().to_string()],
        nodes,
        edges,
    }
}

/// Places graphs side by side with a single shared input and output. No
/// internal nodes are merged; origins are renumbered so they stay distinct.
pub fn parallel_compose(graphs: &[ArchGraph]) -> Result<ArchGraph, GraphError> {
    let first = graphs.first().ok_or(GraphError::EmptyComposition)?;
    let mut out = ArchGraph {
        input: first.input,
        parent_names: Vec::new(),
        nodes: Vec::new(),
        edges: BTreeSet::new(),
    };
    for g in graphs {
        if g.input != first.input {
            return Err(GraphError::InputMismatch {
                first: first.input,
                other: g.input,
            });
        }
        let node_offset = out.nodes.len();
        let origin_offset = out.parent_names.len();
        out.parent_names.extend(g.parent_names.iter().cloned());
        out.nodes.extend(g.nodes.iter().map(|n| GraphNode {
            origins: n.origins.iter().map(|o| o + origin_offset).collect(),
            ..n.clone()
        }));
        let shift = |e: Endpoint| match e {
            Endpoint::Node(i) => Endpoint::Node(i + node_offset),
            other => other,
        };
        out.edges.extend(g.edges.iter().map(|&(a, b)| (shift(a), shift(b))));
    }
    Ok(out)
}

/// Merges every class of equal-labeled internal nodes into a single node.
///
/// The result lists nodes sorted by label, so it is canonical: contracting
/// it again returns an identical graph. Edges are the union of the class
/// members' edges with duplicates collapsed.
pub fn contract(g: &ArchGraph) -> ArchGraph {
    let mut classes: BTreeMap<NodeLabel, Vec<usize>> = BTreeMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        classes.entry(n.label).or_default().push(i);
    }
    let mut remap = vec![0usize; g.nodes.len()];
    let mut nodes = Vec::with_capacity(classes.len());
    for (new_index, (label, members)) in classes.into_iter().enumerate() {
        for &m in &members {
            remap[m] = new_index;
        }
        let lead = *members
            .iter()
            .min_by_key(|&&m| (g.nodes[m].origins.iter().next().copied(), m))
            .expect("classes are nonempty");
        let mut op = g.nodes[lead].op;
        if let LayerSpec::Conv { batch_norm, .. } = &mut op {
            *batch_norm = members.iter().any(|&m| g.nodes[m].op.batch_norm());
        }
        nodes.push(GraphNode {
            label,
            op,
            out_channels: members.iter().map(|&m| g.nodes[m].out_channels).max().unwrap_or(1),
            origins: members
                .iter()
                .flat_map(|&m| g.nodes[m].origins.iter().copied())
                .collect(),
        });
    }
    let map = |e: Endpoint| match e {
        Endpoint::Node(i) => Endpoint::Node(remap[i]),
        other => other,
    };
    let edges = g.edges.iter().map(|&(a, b)| (map(a), map(b))).collect();
    ArchGraph {
        input: g.input,
        parent_names: g.parent_names.clone(),
        nodes,
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Edge between internal nodes whose depths do not differ by one, or an
    /// input edge into a node deeper than 1.
    DepthSkip {
        from: String,
        to: String,
    },
    /// Node not on any input-to-output path.
    Unreachable {
        node: String,
    },
    /// Edge leaving the output marker or entering the input marker.
    MarkerDirection {
        from: String,
        to: String,
    },
    /// Edge naming a node index that does not exist.
    DanglingEdge {
        from: String,
        to: String,
    },
    Cycle,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DepthSkip { from, to } => write!(f, "edge {from} -> {to} does not step depth by one"),
            Violation::Unreachable { node } => write!(f, "node {node} is not on an input-to-output path"),
            Violation::MarkerDirection { from, to } => write!(f, "edge {from} -> {to} runs against a marker"),
            Violation::DanglingEdge { from, to } => write!(f, "edge {from} -> {to} names a missing node"),
            Violation::Cycle => f.write_str("graph contains a cycle"),
        }
    }
}

/// Lists every broken invariant; empty means the graph is valid.
pub fn validate_graph(g: &ArchGraph) -> Vec<Violation> {
    let ids = g.node_ids();
    let name = |e| g.endpoint_name(&ids, e);
    let n = g.nodes.len();
    let mut violations = Vec::new();
    let mut good_edges = Vec::new();
    for &(a, b) in &g.edges {
        let dangling = |e: Endpoint| matches!(e, Endpoint::Node(i) if i >= n);
        if dangling(a) || dangling(b) {
            violations.push(Violation::DanglingEdge {
                from: name(a),
                to: name(b),
            });
            continue;
        }
        if a == Endpoint::Output || b == Endpoint::Input {
            violations.push(Violation::MarkerDirection {
                from: name(a),
                to: name(b),
            });
            continue;
        }
        let depth_ok = match (a, b) {
            (Endpoint::Node(u), Endpoint::Node(v)) => g.nodes[v].label.depth == g.nodes[u].label.depth + 1,
            (Endpoint::Input, Endpoint::Node(v)) => g.nodes[v].label.depth == 1,
            _ => true,
        };
        if !depth_ok {
            violations.push(Violation::DepthSkip {
                from: name(a),
                to: name(b),
            });
        }
        good_edges.push((a, b));
    }

    // Kahn's algorithm over all endpoints (input, nodes, output).
    let slot = |e: Endpoint| match e {
        Endpoint::Input => 0,
        Endpoint::Node(i) => i + 1,
        Endpoint::Output => n + 1,
    };
    let mut indegree = vec![0usize; n + 2];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n + 2];
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n + 2];
    for &(a, b) in &good_edges {
        indegree[slot(b)] += 1;
        succ[slot(a)].push(slot(b));
        pred[slot(b)].push(slot(a));
    }
    let mut queue: VecDeque<usize> = (0..n + 2).filter(|&s| indegree[s] == 0).collect();
    let mut visited = 0;
    while let Some(s) = queue.pop_front() {
        visited += 1;
        for &t in &succ[s] {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                queue.push_back(t);
            }
        }
    }
    if visited != n + 2 {
        violations.push(Violation::Cycle);
    }

    let reach = |start: usize, adj: &Vec<Vec<usize>>| {
        let mut seen = vec![false; n + 2];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(s) = stack.pop() {
            for &t in &adj[s] {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    };
    let from_input = reach(0, &succ);
    let to_output = reach(n + 1, &pred);
    for i in 0..n {
        if !(from_input[i + 1] && to_output[i + 1]) {
            violations.push(Violation::Unreachable { node: ids[i].clone() });
        }
    }
    violations
}

/// Debug dump: one `ID depth=D origins=a,b` line per node and one `U -> V`
/// line per edge, each block sorted lexicographically. Origins are printed
/// as parent names, deduplicated.
pub fn dump(g: &ArchGraph) -> String {
    let ids = g.node_ids();
    let mut node_lines: Vec<String> = g
        .nodes
        .iter()
        .zip(&ids)
        .map(|(node, id)| {
            let names: BTreeSet<&str> = node
                .origins
                .iter()
                .filter_map(|&o| g.parent_names.get(o).map(String::as_str))
                .collect();
            let origins: Vec<&str> = names.into_iter().collect();
            format!("{id} depth={} origins={}", node.label.depth, origins.join(","))
        })
        .collect();
    node_lines.sort();
    let mut edge_lines: Vec<String> = g
        .edges
        .iter()
        .map(|&(a, b)| format!("{} -> {}", g.endpoint_name(&ids, a), g.endpoint_name(&ids, b)))
        .collect();
    edge_lines.sort();
    edge_lines.dedup();
    let mut out = String::new();
    for line in node_lines.iter().chain(&edge_lines) {
        out.push_str(line);
        out.push('\n');
    }
    out
}
