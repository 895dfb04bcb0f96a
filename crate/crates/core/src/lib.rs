//! Semi-parallel network merging.
//!
//! Several parent architectures are placed side by side on one shared input,
//! layers with the same `(operation, depth)` label are contracted into one
//! node, and the parent outputs are combined by a final merge layer. The
//! crate also carries a small deterministic CPU engine to train and score
//! the result on binary segmentation data.

pub mod arch_ir;
pub mod engine;
pub mod graph;
pub mod merge;
pub mod metrics;
pub mod synth;
pub mod train;

pub use arch_ir::{parse_network, serialize_network, LayerSpec, NetworkSpec};
pub use graph::{contract, network_to_graph, parallel_compose, ArchGraph};
pub use merge::{spdnn_merge, MergeOptions, MergedNetworkSpec};

/// Bundled example parents for 32x32 single-channel masks, with roughly
/// 20k parameters each.
pub mod nets {
    pub const NET1: &str = include_str!("../nets/net1.net");
    pub const NET2: &str = include_str!("../nets/net2.net");
    pub const NET3: &str = include_str!("../nets/net3.net");

    pub fn all() -> Vec<crate::NetworkSpec> {
        [NET1, NET2, NET3]
            .iter()
            .map(|t| crate::parse_network(t).expect("bundled network parses"))
            .collect()
    }
}
