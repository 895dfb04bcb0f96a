#![allow(dead_code)]

use proptest::prelude::*;
use spdnn_core::arch_ir::{Activation, InputShape, LayerSpec, NetworkSpec};

pub fn activation() -> impl Strategy<Value = Activation> {
    prop::sample::select(vec![Activation::Relu, Activation::Sigmoid, Activation::None])
}

/// A conv layer with kernel in {1,3,5,7}.
pub fn conv_layer() -> impl Strategy<Value = LayerSpec> {
    (
        prop::sample::select(vec![1usize, 3, 5, 7]),
        1usize..=6,
        any::<bool>(),
        activation(),
    )
        .prop_map(|(k, c, bn, act)| LayerSpec::conv(k, c, bn, act))
}

/// Random valid chains on a 16x16 input: convs and 2x2 pools, optionally a
/// dense head.
pub fn network() -> impl Strategy<Value = NetworkSpec> {
    (
        "[a-z][a-z0-9_]{0,6}",
        1usize..=3,
        prop::collection::vec(prop_oneof![4 => conv_layer(), 1 => Just(LayerSpec::max_pool(2))], 1..=6),
        prop::option::of((1usize..=4, activation())),
    )
        .prop_map(|(name, channels, mut layers, head)| {
            // At most two pools fit into 16x16 together with anything else.
            let mut pools = 0;
            layers.retain(|l| {
                if matches!(l, LayerSpec::MaxPool { .. }) {
                    pools += 1;
                    pools <= 2
                } else {
                    true
                }
            });
            if layers.is_empty() {
                layers.push(LayerSpec::conv(3, 2, false, Activation::Relu));
            }
            if let Some((u, act)) = head {
                layers.push(LayerSpec::dense(u, act));
            }
            NetworkSpec::new(name, InputShape::new(16, 16, channels), layers).unwrap()
        })
}

/// Conv-only chain ending in `p` sigmoid channels on a shared input.
pub fn conv_parent(name: &str, input: InputShape, kernels: &[usize], widths: &[usize], p: usize) -> NetworkSpec {
    let last = kernels.len() - 1;
    let layers = kernels
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            if i == last {
                LayerSpec::conv(k, p, false, Activation::Sigmoid)
            } else {
                LayerSpec::conv(k, widths[i % widths.len()], true, Activation::Relu)
            }
        })
        .collect();
    NetworkSpec::new(name, input, layers).unwrap()
}
