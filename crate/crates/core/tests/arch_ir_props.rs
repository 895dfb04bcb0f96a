mod common;

use proptest::prelude::*;
use spdnn_core::arch_ir::{count_params, parse_network, serialize_network, IrError, LayerSpec};

/// Parameter count of one layer from first principles.
fn layer_params(layer: &LayerSpec, in_c: usize, in_len: usize) -> u64 {
    match *layer {
        LayerSpec::Conv {
            kernel,
            out_channels,
            batch_norm,
            ..
        } => {
            let w = kernel * kernel * in_c * out_channels + out_channels;
            (w + if batch_norm { 2 * out_channels } else { 0 }) as u64
        }
        LayerSpec::Dense { units, .. } => (in_len * units + units) as u64,
        LayerSpec::MaxPool { .. } => 0,
    }
}

proptest! {
    #[test]
    fn text_round_trip(net in common::network()) {
        let text = serialize_network(&net);
        let back = parse_network(&text).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(serialize_network(&back), text);
    }

    #[test]
    fn param_count_matches_formula(net in common::network()) {
        let mut c = net.input().channels;
        let (mut h, mut w) = (net.input().height, net.input().width);
        let mut total = 0;
        for layer in net.layers() {
            total += layer_params(layer, c, c * h * w);
            match *layer {
                LayerSpec::Conv { out_channels, .. } => c = out_channels,
                LayerSpec::MaxPool { window } => {
                    h /= window;
                    w /= window;
                }
                LayerSpec::Dense { units, .. } => {
                    c = units;
                    h = 1;
                    w = 1;
                }
            }
        }
        prop_assert_eq!(net.param_count(), total);
        prop_assert_eq!(count_params(&net, net.input().channels).unwrap(), total);
    }
}

#[test]
fn even_kernel_reports_line_and_token() {
    let err = parse_network("network n\ninput 8 8 1\nconv k=4 c=2\n").unwrap_err();
    match err {
        IrError::Semantic { line, token, .. } => {
            assert_eq!(line, 3);
            assert_eq!(token, "k=4");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bundled_networks_parse() {
    let nets = spdnn_core::nets::all();
    let kernels: Vec<Vec<usize>> = nets
        .iter()
        .map(|n| {
            n.layers()
                .iter()
                .map(|l| match l {
                    LayerSpec::Conv { kernel, .. } => *kernel,
                    _ => 0,
                })
                .collect()
        })
        .collect();
    assert_eq!(kernels[0], vec![7; 8]);
    assert_eq!(kernels[1], vec![3; 6]);
    assert_eq!(kernels[2], vec![3, 5, 7, 9, 11]);
    let counts: Vec<u64> = nets.iter().map(|n| n.param_count()).collect();
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    assert!((hi - lo) as f64 / lo as f64 <= 0.10, "{counts:?}");
}
