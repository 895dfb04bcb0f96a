//! Back-translation of a contracted graph into an executable merged network.
//!
//! Nodes with several feeders concatenate them channel-wise (dense nodes
//! concatenate the flattened feeders, which is the same memory layout) in a
//! fixed order: by lowest contributing parent index, then depth, then id.
//! The nodes that fed the shared output marker are combined by an output
//! merge layer:
//!
//! * image outputs with `p` channels from `N` feeders: a `k x k` convolution
//!   from `N * p` to `p` channels, i.e. a kernel of shape `(k, k, N*p, p)`;
//! * vector outputs of length `p`: a dense map with weights `(p * N, p)`;
//! * a single feeder passes straight through.
//!
//! Both merge layers end in a sigmoid. Channel widths are chosen by
//! [`solve_widths`] so the merged network has roughly as many parameters as
//! its parents.
//!
//! Merged file format, extending the chain format:
//!
//! ```text
//! network spdnn
//! input 32 32 1
//! node d1_3C_0 op=conv k=3 c=13 bn=true act=relu from=input
//! node d2_3C_0 op=conv k=3 c=13 bn=true act=relu from=d1_3C_0
//! outmerge kind=conv k=1 from=d2_3C_0,d5_11C_0
//! ```

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::arch_ir::{
    parse_attrs, parse_header, parse_layer, parse_network, semantic, source_lines, syntax, Activation, FeatureShape,
    InputShape, IrError, LayerSpec, NetworkSpec, ParamCount,
};
use crate::graph::{contract, network_to_graph, parallel_compose, validate_graph, ArchGraph, Endpoint, GraphError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("nothing to merge: no parent networks given")]
    NoParents,
    #[error("parent `{parent}` has {found} output channels, expected {expected}")]
    OutputArityMismatch {
        parent: String,
        expected: usize,
        found: usize,
    },
    #[error("output feeders mix dense and spatial layers; no merge rule applies")]
    MixedOutputs,
    #[error("output feeders disagree on shape ({0})")]
    OutputShapeMismatch(String),
    #[error("no width given for node {node}")]
    MissingWidth { node: String },
    #[error("feeders of node {node} have different spatial sizes")]
    SpatialMismatch { node: String },
    #[error("node {node}: {message}")]
    Bookkeeping { node: String, message: String },
    #[error("graph is not valid: {0}")]
    InvalidGraph(String),
    #[error(
        "cannot reach {target:.0} parameters within {:.4}%: closest achievable is {best}",
        tolerance * 100.0
    )]
    Infeasible { target: f64, best: u64, tolerance: f64 },
    #[error("invalid merge options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeOptions {
    /// Parameter budget for the merged network; 0 means the mean of the
    /// parents' counts.
    pub target_params: u64,
    /// Allowed relative deviation from the target.
    pub parity_tolerance: f64,
    /// Kernel size of the convolutional output merge.
    pub output_merge_kernel: usize,
    /// Keep a sigmoid on branch outputs that feed a conv or dense output
    /// merge. By default those branches emit raw logits and the merge layer
    /// applies the only sigmoid.
    pub keep_branch_sigmoid: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            target_params: 0,
            parity_tolerance: 0.10,
            output_merge_kernel: 1,
            keep_branch_sigmoid: false,
        }
    }
}

impl MergeOptions {
    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.parity_tolerance > 0.0 && self.parity_tolerance < 1.0) {
            return Err(MergeError::InvalidOptions(format!(
                "parity tolerance {} is outside (0, 1)",
                self.parity_tolerance
            )));
        }
        if self.output_merge_kernel == 0 || self.output_merge_kernel.is_multiple_of(2) {
            return Err(MergeError::InvalidOptions(format!(
                "output merge kernel {} must be odd and positive",
                self.output_merge_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feeder {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedNode {
    pub id: String,
    pub op: LayerSpec,
    /// Concatenated in this order.
    pub feeders: Vec<Feeder>,
    /// Sum of the feeders' channel counts.
    pub in_channels: usize,
    /// Shape of the concatenated input. Dense nodes see it flattened as
    /// `(fan_in, 1, 1)`.
    pub in_shape: FeatureShape,
    pub out_shape: FeatureShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMerge {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Dense {
        in_units: usize,
        out_units: usize,
    },
    Passthrough,
}

impl OutputMerge {
    /// Weight shape in the conventional notation: `(k, k, in, out)` for the
    /// convolutional merge, `(in, out)` for the dense merge.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            OutputMerge::Conv {
                kernel,
                in_channels,
                out_channels,
            } => Some(vec![kernel, kernel, in_channels, out_channels]),
            OutputMerge::Dense { in_units, out_units } => Some(vec![in_units, out_units]),
            OutputMerge::Passthrough => None,
        }
    }

    pub fn param_count(&self) -> u64 {
        match *self {
            OutputMerge::Conv {
                kernel,
                in_channels,
                out_channels,
            } => (kernel * kernel * in_channels * out_channels + out_channels) as u64,
            OutputMerge::Dense { in_units, out_units } => (in_units * out_units + out_units) as u64,
            OutputMerge::Passthrough => 0,
        }
    }
}

/// Requested kind of output merge, before channel counts are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    Conv { kernel: usize },
    Dense,
    Pass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedNetworkSpec {
    pub name: String,
    pub input: InputShape,
    /// Topologically ordered.
    pub nodes: Vec<MergedNode>,
    /// Nodes combined by the output merge, in concatenation order.
    pub output_feeders: Vec<usize>,
    pub output_merge: OutputMerge,
    pub output_shape: FeatureShape,
}

/// Unresolved node used to build a [`MergedNetworkSpec`].
#[derive(Debug, Clone)]
pub struct NodeDraft {
    pub id: String,
    pub op: LayerSpec,
    pub feeders: Vec<Feeder>,
}

impl MergedNetworkSpec {
    /// Resolves shapes for a list of nodes and checks every structural rule.
    pub fn assemble(
        name: impl Into<String>,
        input: InputShape,
        drafts: Vec<NodeDraft>,
        output_feeders: Vec<usize>,
        kind: MergeKind,
    ) -> Result<Self, MergeError> {
        let nodes = resolve_nodes(input.feature_shape(), &drafts)?;
        if output_feeders.is_empty() {
            return Err(MergeError::InvalidGraph("nothing feeds the output".into()));
        }
        if let Some(&bad) = output_feeders.iter().find(|&&i| i >= nodes.len()) {
            return Err(MergeError::InvalidGraph(format!("output feeder #{bad} does not exist")));
        }
        let shapes: Vec<FeatureShape> = output_feeders.iter().map(|&i| nodes[i].out_shape).collect();
        let dense: Vec<bool> = output_feeders
            .iter()
            .map(|&i| matches!(nodes[i].op, LayerSpec::Dense { .. }))
            .collect();
        let first = shapes[0];
        let (output_merge, output_shape) = match kind {
            MergeKind::Pass => {
                if output_feeders.len() != 1 {
                    return Err(MergeError::InvalidGraph(format!(
                        "pass-through output needs exactly one feeder, found {}",
                        output_feeders.len()
                    )));
                }
                (OutputMerge::Passthrough, first)
            }
            MergeKind::Conv { kernel } => {
                if dense.iter().any(|&d| d) {
                    return Err(MergeError::MixedOutputs);
                }
                if kernel == 0 || kernel.is_multiple_of(2) {
                    return Err(MergeError::InvalidOptions(format!(
                        "output merge kernel {kernel} must be odd"
                    )));
                }
                if shapes.iter().any(|s| *s != first) {
                    return Err(MergeError::OutputShapeMismatch(format!("{shapes:?}")));
                }
                let p = first.channels;
                (
                    OutputMerge::Conv {
                        kernel,
                        in_channels: p * output_feeders.len(),
                        out_channels: p,
                    },
                    first,
                )
            }
            MergeKind::Dense => {
                if dense.iter().any(|&d| !d) {
                    return Err(MergeError::MixedOutputs);
                }
                if shapes.iter().any(|s| *s != first) {
                    return Err(MergeError::OutputShapeMismatch(format!("{shapes:?}")));
                }
                let p = first.channels;
                (
                    OutputMerge::Dense {
                        in_units: p * output_feeders.len(),
                        out_units: p,
                    },
                    first,
                )
            }
        };
        let spec = MergedNetworkSpec {
            name: name.into(),
            input,
            nodes,
            output_feeders,
            output_merge,
            output_shape,
        };
        spec.check_bookkeeping()?;
        Ok(spec)
    }

    /// The chain itself, with a pass-through output.
    pub fn from_chain(spec: &NetworkSpec) -> Self {
        let drafts = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(i, layer)| NodeDraft {
                id: format!("d{}_{}_0", i + 1, crate::graph::OpSignature::of(layer)),
                op: *layer,
                feeders: vec![if i == 0 { Feeder::Input } else { Feeder::Node(i - 1) }],
            })
            .collect();
        Self::assemble(
            spec.name(),
            spec.input(),
            drafts,
            vec![spec.layers().len() - 1],
            MergeKind::Pass,
        )
        .expect("a validated chain always assembles")
    }

    pub fn merge_kind(&self) -> MergeKind {
        match self.output_merge {
            OutputMerge::Conv { kernel, .. } => MergeKind::Conv { kernel },
            OutputMerge::Dense { .. } => MergeKind::Dense,
            OutputMerge::Passthrough => MergeKind::Pass,
        }
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.op.param_count(n.in_shape)).sum::<u64>() + self.output_merge.param_count()
    }

    /// Structural consistency: topological feeders, channel sums, and
    /// output-merge dimensions.
    pub fn check_bookkeeping(&self) -> Result<(), MergeError> {
        for (i, node) in self.nodes.iter().enumerate() {
            let fail = |message: String| MergeError::Bookkeeping {
                node: node.id.clone(),
                message,
            };
            let mut channels = 0;
            for f in &node.feeders {
                match *f {
                    Feeder::Input => channels += self.input.channels,
                    Feeder::Node(j) if j < i => channels += self.nodes[j].out_shape.channels,
                    Feeder::Node(j) => return Err(fail(format!("feeder #{j} is not earlier in the order"))),
                }
            }
            if channels != node.in_channels {
                return Err(fail(format!(
                    "in_channels {} but feeders supply {channels}",
                    node.in_channels
                )));
            }
        }
        let p = self.output_shape.channels;
        let n = self.output_feeders.len();
        match self.output_merge {
            OutputMerge::Conv {
                in_channels,
                out_channels,
                ..
            } if in_channels != n * p || out_channels != p => Err(MergeError::Bookkeeping {
                node: "outmerge".into(),
                message: format!("conv merge {in_channels}->{out_channels} for {n} feeders of {p}"),
            }),
            OutputMerge::Dense { in_units, out_units } if in_units != p * n || out_units != p => {
                Err(MergeError::Bookkeeping {
                    node: "outmerge".into(),
                    message: format!("dense merge {in_units}->{out_units} for {n} feeders of {p}"),
                })
            }
            _ => Ok(()),
        }
    }

    pub fn serialize(&self) -> String {
        let feeder_name = |f: &Feeder| match *f {
            Feeder::Input => "input".to_string(),
            Feeder::Node(i) => self.nodes[i].id.clone(),
        };
        let mut out = format!(
            "network {}\ninput {} {} {}\n",
            self.name, self.input.height, self.input.width, self.input.channels
        );
        for node in &self.nodes {
            let from: Vec<String> = node.feeders.iter().map(feeder_name).collect();
            out.push_str(&format!("node {} op={} from={}\n", node.id, node.op, from.join(",")));
        }
        let from: Vec<String> = self.output_feeders.iter().map(|&i| self.nodes[i].id.clone()).collect();
        let kind = match self.output_merge {
            OutputMerge::Conv { kernel, .. } => format!("conv k={kernel}"),
            OutputMerge::Dense { .. } => "dense".into(),
            OutputMerge::Passthrough => "pass".into(),
        };
        out.push_str(&format!("outmerge kind={kind} from={}\n", from.join(",")));
        out
    }

    pub fn parse(text: &str) -> Result<Self, MergeError> {
        let mut lines = source_lines(text);
        let (name, input) = parse_header(&mut lines)?;
        let mut drafts: Vec<NodeDraft> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut outmerge: Option<(Vec<usize>, MergeKind)> = None;
        for line in lines {
            let n = line.number;
            if outmerge.is_some() {
                return Err(syntax(n, "nothing may follow the `outmerge` line").into());
            }
            let (from_tok, rest): (Vec<&str>, Vec<&str>) = line.tokens.iter().partition(|t| t.starts_with("from="));
            let from_tok = match from_tok.as_slice() {
                [one] => *one,
                [] => return Err(syntax(n, "missing `from=`").into()),
                _ => return Err(syntax(n, "`from=` given twice").into()),
            };
            let resolve = |name: &str| -> Result<Feeder, MergeError> {
                if name == "input" {
                    return Ok(Feeder::Input);
                }
                index
                    .get(name)
                    .map(|&i| Feeder::Node(i))
                    .ok_or_else(|| semantic(n, name, "unknown or later node").into())
            };
            let feeders = from_tok["from=".len()..]
                .split(',')
                .map(resolve)
                .collect::<Result<Vec<_>, _>>()?;
            match rest.first().copied() {
                Some("node") => {
                    let id = *rest.get(1).ok_or_else(|| syntax(n, "node needs an id"))?;
                    if id == "input" || id == "output" || id == "outmerge" || index.contains_key(id) {
                        return Err(semantic(n, id, "duplicate or reserved node id").into());
                    }
                    let op_tok = rest.get(2).ok_or_else(|| syntax(n, "node needs `op=`"))?;
                    let kind = op_tok
                        .strip_prefix("op=")
                        .ok_or_else(|| syntax(n, format!("expected op=, found `{op_tok}`")))?;
                    let mut layer_tokens = vec![kind];
                    layer_tokens.extend_from_slice(&rest[3..]);
                    let op = parse_layer(n, &layer_tokens)?;
                    index.insert(id.to_string(), drafts.len());
                    drafts.push(NodeDraft {
                        id: id.to_string(),
                        op,
                        feeders,
                    });
                }
                Some("outmerge") => {
                    let attrs = parse_attrs(n, &rest[1..], &["kind", "k"])?;
                    let kind = match attrs.iter().find(|(k, _, _)| *k == "kind") {
                        Some((_, "conv", _)) => {
                            let (_, k, tok) = attrs
                                .iter()
                                .find(|(k, _, _)| *k == "k")
                                .ok_or_else(|| syntax(n, "conv merge needs `k=`"))?;
                            let kernel: usize = k.parse().map_err(|_| syntax(n, format!("bad `{tok}`")))?;
                            if kernel.is_multiple_of(2) {
                                return Err(semantic(n, tok, "kernel size must be odd and positive").into());
                            }
                            MergeKind::Conv { kernel }
                        }
                        Some((_, "dense", _)) => MergeKind::Dense,
                        Some((_, "pass", _)) => MergeKind::Pass,
                        Some((_, _, tok)) => return Err(semantic(n, tok, "expected conv, dense or pass").into()),
                        None => return Err(syntax(n, "outmerge needs `kind=`").into()),
                    };
                    let feeders = feeders
                        .into_iter()
                        .map(|f| match f {
                            Feeder::Node(i) => Ok(i),
                            Feeder::Input => Err(semantic(n, "input", "the input cannot feed the output merge")),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    outmerge = Some((feeders, kind));
                }
                _ => return Err(syntax(n, "expected a `node` or `outmerge` line").into()),
            }
        }
        let (output_feeders, kind) = outmerge.ok_or_else(|| syntax(0, "missing `outmerge` line"))?;
        if drafts.is_empty() {
            return Err(IrError::NoLayers.into());
        }
        Self::assemble(name, input, drafts, output_feeders, kind)
    }
}

impl ParamCount for MergedNetworkSpec {
    fn count_params(&self, input_channels: usize) -> Result<u64, IrError> {
        let input = FeatureShape::new(input_channels, self.input.height, self.input.width);
        let drafts: Vec<NodeDraft> = self
            .nodes
            .iter()
            .map(|n| NodeDraft {
                id: n.id.clone(),
                op: n.op,
                feeders: n.feeders.clone(),
            })
            .collect();
        let nodes = resolve_nodes(input, &drafts).map_err(|e| match e {
            MergeError::Ir(ir) => ir,
            other => IrError::Invalid(other.to_string()),
        })?;
        Ok(nodes.iter().map(|n| n.op.param_count(n.in_shape)).sum::<u64>() + self.output_merge.param_count())
    }
}

fn resolve_nodes(input: FeatureShape, drafts: &[NodeDraft]) -> Result<Vec<MergedNode>, MergeError> {
    let mut nodes: Vec<MergedNode> = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.iter().enumerate() {
        if d.feeders.is_empty() {
            return Err(MergeError::InvalidGraph(format!("node {} has no feeders", d.id)));
        }
        if let Err((token, message)) = d.op.check() {
            return Err(MergeError::Bookkeeping {
                node: d.id.clone(),
                message: format!("`{token}`: {message}"),
            });
        }
        let mut feeds = Vec::with_capacity(d.feeders.len());
        for f in &d.feeders {
            feeds.push(match *f {
                Feeder::Input => input,
                Feeder::Node(j) if j < i => nodes[j].out_shape,
                Feeder::Node(j) => {
                    return Err(MergeError::InvalidGraph(format!(
                        "node {} is fed by #{j}, which is not earlier",
                        d.id
                    )))
                }
            });
        }
        let in_channels = feeds.iter().map(|s| s.channels).sum();
        let in_shape = match d.op {
            LayerSpec::Dense { .. } => FeatureShape::new(feeds.iter().map(FeatureShape::len).sum(), 1, 1),
            _ => {
                let (h, w) = (feeds[0].height, feeds[0].width);
                if feeds.iter().any(|s| s.height != h || s.width != w) {
                    return Err(MergeError::SpatialMismatch { node: d.id.clone() });
                }
                FeatureShape::new(in_channels, h, w)
            }
        };
        let out_shape = d.op.output_shape(in_shape, i + 1)?;
        nodes.push(MergedNode {
            id: d.id.clone(),
            op: d.op,
            feeders: d.feeders.clone(),
            in_channels,
            in_shape,
            out_shape,
        });
    }
    Ok(nodes)
}

/// Output width of each conv/dense node, keyed by graph node index.
pub type WidthMap = BTreeMap<usize, usize>;

fn feeder_key(g: &ArchGraph, ids: &[String], e: Endpoint) -> (usize, usize, String) {
    match e {
        Endpoint::Node(i) => (
            g.nodes[i].origins.iter().next().copied().unwrap_or(usize::MAX),
            g.nodes[i].label.depth,
            ids[i].clone(),
        ),
        Endpoint::Input => (0, 0, String::new()),
        Endpoint::Output => (usize::MAX, usize::MAX, String::new()),
    }
}

/// Translates a contracted graph into a merged network.
pub fn graph_to_network(
    g: &ArchGraph,
    widths: &WidthMap,
    opts: &MergeOptions,
) -> Result<MergedNetworkSpec, MergeError> {
    let violations = validate_graph(g);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(MergeError::InvalidGraph(text.join("; ")));
    }
    let ids = g.node_ids();
    let order = g.topological_order();
    let mut position = vec![0usize; g.nodes.len()];
    for (pos, &v) in order.iter().enumerate() {
        position[v] = pos;
    }
    let sorted_preds = |e: Endpoint| {
        let mut preds = g.predecessors(e);
        preds.sort_by_key(|&p| feeder_key(g, &ids, p));
        preds
    };
    let mut drafts = Vec::with_capacity(order.len());
    for &v in &order {
        let node = &g.nodes[v];
        let op = match node.op.width() {
            Some(_) => {
                let w = *widths
                    .get(&v)
                    .ok_or_else(|| MergeError::MissingWidth { node: ids[v].clone() })?;
                node.op.with_width(w)
            }
            None => node.op,
        };
        let feeders = sorted_preds(Endpoint::Node(v))
            .into_iter()
            .map(|p| match p {
                Endpoint::Node(u) => Feeder::Node(position[u]),
                _ => Feeder::Input,
            })
            .collect();
        drafts.push(NodeDraft {
            id: ids[v].clone(),
            op,
            feeders,
        });
    }
    let out_preds = sorted_preds(Endpoint::Output);
    let output_feeders: Vec<usize> = out_preds
        .iter()
        .filter_map(|p| match *p {
            Endpoint::Node(u) => Some(position[u]),
            _ => None,
        })
        .collect();
    let kind = if output_feeders.len() == 1 {
        MergeKind::Pass
    } else {
        let dense = output_feeders
            .iter()
            .filter(|&&i| matches!(drafts[i].op, LayerSpec::Dense { .. }))
            .count();
        match dense {
            0 => MergeKind::Conv {
                kernel: opts.output_merge_kernel,
            },
            d if d == output_feeders.len() => MergeKind::Dense,
            _ => return Err(MergeError::MixedOutputs),
        }
    };
    if kind != MergeKind::Pass && !opts.keep_branch_sigmoid {
        // Sigmoid feeding sigmoid squashes the logits into (0, 1) and cuts
        // the branch gradient by at least 4x.
        for &p in &out_preds {
            let Endpoint::Node(u) = p else { continue };
            let op = &mut drafts[position[u]].op;
            if g.successors(p) == [Endpoint::Output] && op.activation() == Activation::Sigmoid {
                *op = op.with_activation(Activation::None);
            }
        }
    }
    let mut names: Vec<&str> = g.parent_names.iter().map(String::as_str).collect();
    names.dedup();
    let name = if names.len() == 1 { names[0] } else { "spdnn" };
    MergedNetworkSpec::assemble(name, g.input, drafts, output_feeders, kind)
}

fn output_arity(parents: &[NetworkSpec]) -> Result<usize, MergeError> {
    let first = parents.first().ok_or(MergeError::NoParents)?;
    let p = first.output_shape().channels;
    for parent in parents {
        let found = parent.output_shape().channels;
        if found != p {
            return Err(MergeError::OutputArityMismatch {
                parent: parent.name().to_string(),
                expected: p,
                found,
            });
        }
    }
    Ok(p)
}

fn parity_target(parents: &[NetworkSpec], opts: &MergeOptions) -> f64 {
    if opts.target_params > 0 {
        opts.target_params as f64
    } else {
        parents.iter().map(|p| p.param_count() as f64).sum::<f64>() / parents.len() as f64
    }
}

/// Picks conv/dense widths so the merged parameter count lands within the
/// tolerance of the target.
///
/// Every node starts at the largest width any contributing parent gave it;
/// nodes feeding the output are pinned to the output arity `p`. All other
/// widths are scaled by one common factor and rounded (minimum 1), and the
/// factor is bisected until the count brackets the target and the closer
/// of the two bracketing counts wins. Only if that count is out of
/// tolerance are single widths then moved by one, while each move brings
/// the count closer to the target.
pub fn solve_widths(g: &ArchGraph, parents: &[NetworkSpec], opts: &MergeOptions) -> Result<WidthMap, MergeError> {
    opts.validate()?;
    let p = output_arity(parents)?;
    let target = parity_target(parents, opts);
    let pinned: Vec<bool> = (0..g.nodes.len())
        .map(|v| g.successors(Endpoint::Node(v)).contains(&Endpoint::Output))
        .collect();
    let widths_at = |factor: f64| -> WidthMap {
        g.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.width().is_some())
            .map(|(v, n)| {
                let w = if pinned[v] {
                    p
                } else {
                    ((n.out_channels as f64 * factor).round() as usize).max(1)
                };
                (v, w)
            })
            .collect()
    };
    let count_at =
        |factor: f64| -> Result<u64, MergeError> { Ok(graph_to_network(g, &widths_at(factor), opts)?.param_count()) };
    let max_base = g.nodes.iter().map(|n| n.out_channels).max().unwrap_or(1) as f64;
    let mut lo = (1.0 / 64.0f64).min(0.49 / max_base);
    let mut hi = 64.0f64;
    let (c_lo, c_hi) = (count_at(lo)?, count_at(hi)?);
    let best_factor = if c_lo as f64 >= target {
        lo
    } else if (c_hi as f64) < target {
        hi
    } else {
        // Invariant: count(lo) < target <= count(hi).
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if mid <= lo || mid >= hi {
                break;
            }
            if count_at(mid)? as f64 >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (c_lo, c_hi) = (count_at(lo)?, count_at(hi)?);
        if (c_hi as f64 - target).abs() <= (target - c_lo as f64).abs() {
            hi
        } else {
            lo
        }
    };
    let mut widths = widths_at(best_factor);
    let mut best = count_at(best_factor)?;
    // A pool-only network has nothing to size; its target is zero.
    let within = |count: u64| (count as f64 - target).abs() <= opts.parity_tolerance * target;
    // Rounding a common factor moves in coarse steps on narrow networks. If
    // that misses, nudge single widths by one while each nudge brings the
    // count closer to the target.
    let free: Vec<usize> = widths.keys().copied().filter(|&v| !pinned[v]).collect();
    let rounds = if within(best) { 0 } else { 4 * free.len() + 16 };
    for _ in 0..rounds {
        let mut step: Option<(usize, usize, u64)> = None;
        for &v in &free {
            let w = widths[&v];
            for cand in [w.saturating_sub(1), w + 1] {
                if cand == 0 || cand == w {
                    continue;
                }
                let mut trial = widths.clone();
                trial.insert(v, cand);
                let c = graph_to_network(g, &trial, opts)?.param_count();
                let better = |b: u64| (c as f64 - target).abs() < (b as f64 - target).abs();
                if better(step.map_or(best, |s| s.2)) {
                    step = Some((v, cand, c));
                }
            }
        }
        match step {
            Some((v, w, c)) => {
                widths.insert(v, w);
                best = c;
            }
            None => break,
        }
    }
    if !within(best) {
        return Err(MergeError::Infeasible {
            target,
            best,
            tolerance: opts.parity_tolerance,
        });
    }
    Ok(widths)
}

/// Outcome of a merge, with the numbers a user wants to see.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    pub network: MergedNetworkSpec,
    pub parent_params: Vec<u64>,
    pub target_params: f64,
    pub merged_params: u64,
    pub warnings: Vec<String>,
}

impl MergeReport {
    /// Signed relative deviation of the merged count from the target.
    pub fn parity(&self) -> f64 {
        if self.target_params == 0.0 {
            return 0.0;
        }
        (self.merged_params as f64 - self.target_params) / self.target_params
    }
}

pub fn spdnn_merge(parents: &[NetworkSpec], opts: &MergeOptions) -> Result<MergedNetworkSpec, MergeError> {
    spdnn_merge_report(parents, opts).map(|r| r.network)
}

/// Full pipeline: chains to graphs, parallel composition, contraction,
/// width solving and back-translation.
pub fn spdnn_merge_report(parents: &[NetworkSpec], opts: &MergeOptions) -> Result<MergeReport, MergeError> {
    opts.validate()?;
    if parents.is_empty() {
        return Err(MergeError::NoParents);
    }
    output_arity(parents)?;
    let graphs: Vec<ArchGraph> = parents.iter().map(network_to_graph).collect();
    let contracted = contract(&parallel_compose(&graphs)?);
    let widths = solve_widths(&contracted, parents, opts)?;
    let network = graph_to_network(&contracted, &widths, opts)?;
    let parent_params: Vec<u64> = parents.iter().map(NetworkSpec::param_count).collect();
    let mut warnings = Vec::new();
    let (min, max) = (
        *parent_params.iter().min().unwrap_or(&0),
        *parent_params.iter().max().unwrap_or(&0),
    );
    if min > 0 && (max - min) as f64 / min as f64 > 0.25 {
        warnings.push(format!(
            "parent parameter counts differ by more than 25% ({min} to {max}); parity against their mean is loose"
        ));
    }
    Ok(MergeReport {
        merged_params: network.param_count(),
        target_params: parity_target(parents, opts),
        network,
        parent_params,
        warnings,
    })
}

/// Reads either file format: a plain chain becomes a pass-through merged
/// network.
pub fn parse_any(text: &str) -> Result<MergedNetworkSpec, MergeError> {
    let merged = source_lines(text).any(|l| matches!(l.tokens[0], "node" | "outmerge"));
    if merged {
        MergedNetworkSpec::parse(text)
    } else {
        Ok(MergedNetworkSpec::from_chain(&parse_network(text)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_chain(name: &str, kernels: &[usize], width: usize, p: usize) -> NetworkSpec {
        let mut layers: Vec<LayerSpec> = kernels
            .iter()
            .map(|&k| LayerSpec::conv(k, width, true, Activation::Relu))
            .collect();
        let last = layers.len() - 1;
        layers[last] = LayerSpec::conv(kernels[last], p, false, Activation::Sigmoid);
        NetworkSpec::new(name, InputShape::new(16, 16, 1), layers).unwrap()
    }

    fn dense_chain(name: &str, hidden: usize, p: usize) -> NetworkSpec {
        let mut layers = vec![LayerSpec::conv(3, 2, false, Activation::Relu)];
        for _ in 0..hidden {
            layers.push(LayerSpec::dense(5, Activation::Relu));
        }
        layers.push(LayerSpec::dense(p, Activation::Sigmoid));
        NetworkSpec::new(name, InputShape::new(16, 16, 1), layers).unwrap()
    }

    /// Toy parents are too small to hit 10% parity; structure tests do not care.
    fn loose() -> MergeOptions {
        MergeOptions {
            parity_tolerance: 0.9,
            ..MergeOptions::default()
        }
    }

    #[test]
    fn single_parent_is_passthrough_chain() {
        let net = conv_chain("a", &[3, 3, 5], 4, 1);
        let merged = spdnn_merge(std::slice::from_ref(&net), &MergeOptions::default()).unwrap();
        assert_eq!(merged, MergedNetworkSpec::from_chain(&net));
        assert_eq!(merged.output_merge, OutputMerge::Passthrough);
        assert_eq!(merged.param_count(), net.param_count());
    }

    #[test]
    fn identical_parents_widths_unchanged() {
        let net = conv_chain("a", &[3, 5, 7], 6, 1);
        let g = contract(&parallel_compose(&[network_to_graph(&net), network_to_graph(&net)]).unwrap());
        let widths = solve_widths(&g, &[net.clone(), net.clone()], &MergeOptions::default()).unwrap();
        assert_eq!(widths.values().copied().collect::<Vec<_>>(), vec![6, 6, 1]);
        let report = spdnn_merge_report(&[net.clone(), net.clone()], &MergeOptions::default()).unwrap();
        assert_eq!(report.merged_params, net.param_count());
        assert_eq!(report.parity(), 0.0);
    }

    #[test]
    fn three_conv_parents_get_conv_merge() {
        let parents = [
            conv_chain("a", &[3, 3], 4, 1),
            conv_chain("b", &[5, 5, 5], 4, 1),
            conv_chain("c", &[7], 4, 1),
        ];
        let merged = spdnn_merge(&parents, &loose()).unwrap();
        assert_eq!(
            merged.output_merge,
            OutputMerge::Conv {
                kernel: 1,
                in_channels: 3,
                out_channels: 1
            }
        );
        assert_eq!(merged.output_merge.weight_shape(), Some(vec![1, 1, 3, 1]));
        for &i in &merged.output_feeders {
            assert_eq!(merged.nodes[i].op.activation(), Activation::None);
        }
        let kept = spdnn_merge(
            &parents,
            &MergeOptions {
                keep_branch_sigmoid: true,
                ..loose()
            },
        )
        .unwrap();
        for &i in &kept.output_feeders {
            assert_eq!(kept.nodes[i].op.activation(), Activation::Sigmoid);
        }
        let single = spdnn_merge(&parents[..1], &MergeOptions::default()).unwrap();
        assert_eq!(single.nodes.last().unwrap().op.activation(), Activation::Sigmoid);
    }

    #[test]
    fn two_dense_parents_get_dense_merge() {
        let parents = [dense_chain("a", 0, 4), dense_chain("b", 1, 4)];
        let merged = spdnn_merge(&parents, &MergeOptions::default()).unwrap();
        assert_eq!(
            merged.output_merge,
            OutputMerge::Dense {
                in_units: 8,
                out_units: 4
            }
        );
        assert_eq!(merged.output_merge.weight_shape(), Some(vec![8, 4]));
    }

    #[test]
    fn mixed_outputs_rejected() {
        let parents = [dense_chain("a", 0, 1), conv_chain("b", &[3, 3, 3], 2, 1)];
        let g = contract(&parallel_compose(&parents.iter().map(network_to_graph).collect::<Vec<_>>()).unwrap());
        let widths: WidthMap = g.nodes.iter().enumerate().map(|(i, n)| (i, n.out_channels)).collect();
        assert_eq!(
            graph_to_network(&g, &widths, &MergeOptions::default()),
            Err(MergeError::MixedOutputs)
        );
    }

    #[test]
    fn missing_width_reported() {
        let net = conv_chain("a", &[3, 3], 2, 1);
        let g = network_to_graph(&net);
        let widths = WidthMap::from([(0, 2)]);
        assert_eq!(
            graph_to_network(&g, &widths, &MergeOptions::default()),
            Err(MergeError::MissingWidth { node: "d2_3C_0".into() })
        );
    }

    #[test]
    fn mismatched_arity_rejected() {
        let parents = [conv_chain("a", &[3], 2, 1), conv_chain("b", &[5], 2, 2)];
        assert!(matches!(
            spdnn_merge(&parents, &MergeOptions::default()),
            Err(MergeError::OutputArityMismatch { found: 2, .. })
        ));
        assert_eq!(spdnn_merge(&[], &MergeOptions::default()), Err(MergeError::NoParents));
    }

    #[test]
    fn impossible_tolerance_is_infeasible() {
        let parents = [
            conv_chain("a", &[3, 3, 3], 7, 1),
            conv_chain("b", &[5, 5], 5, 1),
            conv_chain("c", &[3, 9], 3, 1),
        ];
        let opts = MergeOptions {
            parity_tolerance: 1e-9,
            ..MergeOptions::default()
        };
        match spdnn_merge(&parents, &opts) {
            Err(MergeError::Infeasible { best, target, .. }) => {
                assert!(best > 0);
                assert!((best as f64 - target).abs() > 0.0);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn concat_order_follows_origin_then_depth() {
        // (5C,3) is shared, so it is fed by both parents' depth-2 nodes.
        let a = conv_chain("a", &[3, 3, 5, 3], 2, 1);
        let b = conv_chain("b", &[3, 7, 5, 5, 3], 2, 1);
        let merged = spdnn_merge(&[a, b], &loose()).unwrap();
        let idx = merged.node_index("d3_5C_0").unwrap();
        let feeders: Vec<&str> = merged.nodes[idx]
            .feeders
            .iter()
            .map(|f| match f {
                Feeder::Node(i) => merged.nodes[*i].id.as_str(),
                Feeder::Input => "input",
            })
            .collect();
        assert_eq!(feeders, ["d2_3C_0", "d2_7C_0"]);
        let n = &merged.nodes[idx];
        assert_eq!(n.in_channels, n.in_shape.channels);
        merged.check_bookkeeping().unwrap();
    }

    #[test]
    fn merged_text_round_trips() {
        let parents = [conv_chain("a", &[3, 3], 4, 1), conv_chain("b", &[3, 5, 5], 4, 1)];
        let merged = spdnn_merge(&parents, &loose()).unwrap();
        let text = merged.serialize();
        assert_eq!(MergedNetworkSpec::parse(&text).unwrap(), merged);
        assert_eq!(parse_any(&text).unwrap(), merged);
        let chain_text = crate::arch_ir::serialize_network(&parents[0]);
        assert_eq!(
            parse_any(&chain_text).unwrap(),
            MergedNetworkSpec::from_chain(&parents[0])
        );
    }

    #[test]
    fn merged_parse_errors() {
        let bad = "network m\ninput 8 8 1\nnode a op=conv k=3 c=2 from=b\noutmerge kind=pass from=a\n";
        assert!(matches!(
            MergedNetworkSpec::parse(bad),
            Err(MergeError::Ir(IrError::Semantic { line: 3, .. }))
        ));
        let missing = "network m\ninput 8 8 1\nnode a op=conv k=3 c=2 from=input\n";
        assert!(MergedNetworkSpec::parse(missing).is_err());
        let two = "network m\ninput 8 8 1\nnode a op=conv k=3 c=2 from=input\nnode b op=conv k=3 c=2 from=input\noutmerge kind=pass from=a,b\n";
        assert!(matches!(
            MergedNetworkSpec::parse(two),
            Err(MergeError::InvalidGraph(_))
        ));
    }

    #[test]
    fn count_params_tracks_input_channels() {
        let merged = spdnn_merge(
            &[conv_chain("a", &[3, 3], 4, 1), conv_chain("b", &[5], 4, 1)],
            &MergeOptions::default(),
        )
        .unwrap();
        let one = merged.count_params(1).unwrap();
        assert_eq!(one, merged.param_count());
        let first_layers: u64 = merged
            .nodes
            .iter()
            .filter(|n| n.feeders == [Feeder::Input])
            .map(|n| match n.op {
                LayerSpec::Conv {
                    kernel, out_channels, ..
                } => (kernel * kernel * out_channels) as u64,
                _ => 0,
            })
            .sum();
        assert_eq!(merged.count_params(3).unwrap(), one + 2 * first_layers);
    }

    #[test]
    fn invalid_options() {
        let net = conv_chain("a", &[3], 2, 1);
        for opts in [
            MergeOptions {
                parity_tolerance: 0.0,
                ..MergeOptions::default()
            },
            MergeOptions {
                output_merge_kernel: 2,
                ..MergeOptions::default()
            },
        ] {
            assert!(matches!(
                spdnn_merge(std::slice::from_ref(&net), &opts),
                Err(MergeError::InvalidOptions(_))
            ));
        }
    }
}
