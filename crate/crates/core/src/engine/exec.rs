//! Forward and backward passes over a merged network.
//!
//! Nodes run in their stored topological order. A node with several
//! feeders sees them concatenated in feeder order; in the backward pass the
//! concatenated gradient is sliced back and added to each feeder's
//! gradient. Parent branches therefore do not interact on the way forward
//! but all receive gradient from the shared merged output.
//!
//! A convolution followed by batch norm skips its bias in train mode: the
//! batch mean subtracts it exactly, so its gradient is identically zero.
//! The bias still enters the running mean and the eval-mode output.

use super::ops::{
    self, activate, activation_backward, batch_norm_backward, batch_norm_forward, concat, conv2d_backward,
    conv2d_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, BnCache, ConvShape, Mode,
};
use super::params::{Gradients, ParameterStore, Slots, MERGE_NODE};
use super::tensor::{Real, Tensor};
use super::EngineError;
use crate::arch_ir::{Activation, LayerSpec, NetworkSpec};
use crate::merge::{Feeder, MergedNetworkSpec, OutputMerge};

#[derive(Debug, Clone)]
pub struct NodeCache<T> {
    /// Concatenated input as the layer saw it.
    pub input: Tensor<T>,
    pub bn: Option<BnCache<T>>,
    pub pool_argmax: Vec<usize>,
    /// Post-activation output.
    pub output: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub mode: Mode,
    pub nodes: Vec<NodeCache<T>>,
    pub merge_input: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

fn spatial_shape(batch: usize, s: crate::arch_ir::FeatureShape) -> [usize; 4] {
    [batch, s.channels, s.height, s.width]
}

fn finite<T: Real>(t: &Tensor<T>, node: &str, what: &'static str) -> Result<(), EngineError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(EngineError::NonFinite {
            node: node.to_string(),
            what,
        })
    }
}

fn param<'a, T: Real>(store: &'a ParameterStore<T>, slot: Option<usize>, node: &str) -> Result<&'a [T], EngineError> {
    store.get(slot).ok_or_else(|| EngineError::Mismatch {
        node: node.to_string(),
        reason: "parameter missing from store".into(),
    })
}

/// Conv (+ batch norm) + activation, or dense + activation, or max pool.
fn layer_forward<T: Real>(
    op: &LayerSpec,
    input: Tensor<T>,
    store: &ParameterStore<T>,
    slots: Slots,
    mode: Mode,
    node: &str,
) -> Result<NodeCache<T>, EngineError> {
    let mut bn = None;
    let mut pool_argmax = Vec::new();
    let output = match *op {
        LayerSpec::Conv {
            kernel,
            out_channels,
            batch_norm,
            activation,
        } => {
            let shape = ConvShape {
                in_channels: input.channels(),
                out_channels,
                kernel,
            };
            let weight = param(store, slots.weight, node)?;
            let bias = param(store, slots.bias, node)?;
            let use_bias = !(batch_norm && mode == Mode::Train);
            let z = conv2d_forward(&input, weight, use_bias.then_some(bias), shape)?;
            let mut y = if batch_norm {
                let scale = param(store, slots.bn_scale, node)?;
                let shift = param(store, slots.bn_shift, node)?;
                let running = match (store.get(slots.running_mean), store.get(slots.running_var)) {
                    (Some(m), Some(v)) => Some((m, v)),
                    _ => None,
                };
                let (y, cache) = batch_norm_forward(&z, scale, shift, running, mode)?;
                bn = Some(cache);
                y
            } else {
                z
            };
            activate(&mut y, activation);
            y
        }
        LayerSpec::Dense { units, activation } => {
            let weight = param(store, slots.weight, node)?;
            let bias = param(store, slots.bias, node)?;
            let mut y = dense_forward(&input, weight, bias, units)?;
            activate(&mut y, activation);
            y
        }
        LayerSpec::MaxPool { window } => {
            let (y, arg) = maxpool_forward(&input, window)?;
            pool_argmax = arg;
            y
        }
    };
    finite(&output, node, "activation")?;
    Ok(NodeCache {
        input,
        bn,
        pool_argmax,
        output,
    })
}

/// Returns `d(input)` and writes parameter gradients into `grads`.
#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Real>(
    op: &LayerSpec,
    cache: &NodeCache<T>,
    mut grad: Tensor<T>,
    store: &ParameterStore<T>,
    slots: Slots,
    grads: &mut Gradients<T>,
    want_input_grad: bool,
    node: &str,
) -> Result<Option<Tensor<T>>, EngineError> {
    let put = |grads: &mut Gradients<T>, slot: Option<usize>, value: Vec<T>| {
        if let Some(i) = slot {
            grads.tensors[i] = value;
        }
    };
    let dinput = match *op {
        LayerSpec::Conv {
            kernel,
            out_channels,
            batch_norm,
            activation,
        } => {
            activation_backward(&mut grad, &cache.output, activation);
            if batch_norm {
                let bn = cache.bn.as_ref().expect("batch-norm cache present");
                let g = batch_norm_backward(&grad, bn, param(store, slots.bn_scale, node)?);
                put(grads, slots.bn_scale, g.scale);
                put(grads, slots.bn_shift, g.shift);
                grad = g.input;
            }
            let shape = ConvShape {
                in_channels: cache.input.channels(),
                out_channels,
                kernel,
            };
            let g = conv2d_backward(
                &cache.input,
                param(store, slots.weight, node)?,
                &grad,
                shape,
                want_input_grad,
            );
            put(grads, slots.weight, g.weight);
            let bias_used = !(batch_norm && cache.bn.as_ref().is_some_and(|b| b.mode == Mode::Train));
            if bias_used {
                put(grads, slots.bias, g.bias);
            }
            g.input
        }
        LayerSpec::Dense { activation, .. } => {
            activation_backward(&mut grad, &cache.output, activation);
            let g = dense_backward(&cache.input, param(store, slots.weight, node)?, &grad);
            put(grads, slots.weight, g.weight);
            put(grads, slots.bias, g.bias);
            want_input_grad.then_some(g.input)
        }
        LayerSpec::MaxPool { .. } => {
            want_input_grad.then(|| maxpool_backward(&grad, &cache.pool_argmax, cache.input.shape()))
        }
    };
    for slot in [slots.weight, slots.bias, slots.bn_scale, slots.bn_shift]
        .into_iter()
        .flatten()
    {
        if grads.tensors[slot].iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite {
                node: node.to_string(),
                what: "gradient",
            });
        }
    }
    Ok(dinput)
}

fn merge_layer(merge: &OutputMerge) -> Option<LayerSpec> {
    match *merge {
        OutputMerge::Conv {
            kernel, out_channels, ..
        } => Some(LayerSpec::conv(kernel, out_channels, false, Activation::Sigmoid)),
        OutputMerge::Dense { out_units, .. } => Some(LayerSpec::dense(out_units, Activation::Sigmoid)),
        OutputMerge::Passthrough => None,
    }
}

fn check_batch<T: Real>(spec: &MergedNetworkSpec, batch: &Tensor<T>) -> Result<(), EngineError> {
    let want = [spec.input.channels, spec.input.height, spec.input.width];
    let [_, c, h, w] = batch.shape();
    if [c, h, w] != want || batch.batch() == 0 {
        return Err(EngineError::Shape(format!(
            "batch {:?} does not match network input (C,H,W) {want:?}",
            batch.shape()
        )));
    }
    Ok(())
}

pub fn run_forward<T: Real>(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, ForwardCache<T>), EngineError> {
    check_batch(spec, batch)?;
    let n = batch.batch();
    let mut caches: Vec<NodeCache<T>> = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        let parts: Vec<&Tensor<T>> = node
            .feeders
            .iter()
            .map(|f| match *f {
                Feeder::Input => batch,
                Feeder::Node(j) => &caches[j].output,
            })
            .collect();
        let input = concat(&parts, spatial_shape(n, node.in_shape));
        let cache = layer_forward(&node.op, input, store, store.slots(i), mode, &node.id)?;
        caches.push(cache);
    }
    let (output, merge_input) = match merge_layer(&spec.output_merge) {
        None => (caches[spec.output_feeders[0]].output.clone(), None),
        Some(op) => {
            let parts: Vec<&Tensor<T>> = spec.output_feeders.iter().map(|&i| &caches[i].output).collect();
            let shape = match spec.output_merge {
                OutputMerge::Dense { in_units, .. } => [n, in_units, 1, 1],
                _ => {
                    let s = spec.output_shape;
                    [n, s.channels * parts.len(), s.height, s.width]
                }
            };
            let input = concat(&parts, shape);
            let c = layer_forward(&op, input, store, store.merge_slots(), mode, MERGE_NODE)?;
            (c.output, Some(c.input))
        }
    };
    Ok((
        output.clone(),
        ForwardCache {
            mode,
            nodes: caches,
            merge_input,
            output,
        },
    ))
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: [usize; 4], data: Vec<T>) {
    match slot {
        None => *slot = Some(Tensor::from_vec(shape, data)),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a = *a + b;
            }
        }
    }
}

/// Backpropagates `d(loss)/d(output)` through the cached forward pass.
pub fn run_backward<T: Real>(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<T>,
    cache: &ForwardCache<T>,
    grad_output: &Tensor<T>,
) -> Result<Gradients<T>, EngineError> {
    if grad_output.shape() != cache.output.shape() {
        return Err(EngineError::Shape(format!(
            "output gradient {:?} vs output {:?}",
            grad_output.shape(),
            cache.output.shape()
        )));
    }
    finite(grad_output, MERGE_NODE, "loss gradient")?;
    let n = grad_output.batch();
    let mut grads = Gradients::zeros_like(store);
    let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; spec.nodes.len()];
    let out_shape = |i: usize| spatial_shape(n, spec.nodes[i].out_shape);

    match merge_layer(&spec.output_merge) {
        None => node_grads[spec.output_feeders[0]] = Some(grad_output.clone()),
        Some(op) => {
            let merge_cache = NodeCache {
                input: cache.merge_input.clone().expect("merge input cached"),
                bn: None,
                pool_argmax: Vec::new(),
                output: cache.output.clone(),
            };
            let dinput = layer_backward(
                &op,
                &merge_cache,
                grad_output.clone(),
                store,
                store.merge_slots(),
                &mut grads,
                true,
                MERGE_NODE,
            )?
            .expect("merge input gradient requested");
            let lens: Vec<usize> = spec
                .output_feeders
                .iter()
                .map(|&i| spec.nodes[i].out_shape.len())
                .collect();
            for (&i, part) in spec.output_feeders.iter().zip(ops::split(&dinput, &lens)) {
                accumulate(&mut node_grads[i], out_shape(i), part);
            }
        }
    }

    for i in (0..spec.nodes.len()).rev() {
        let Some(grad) = node_grads[i].take() else {
            continue;
        };
        let node = &spec.nodes[i];
        let want_input = node.feeders.iter().any(|f| matches!(f, Feeder::Node(_)));
        let dinput = layer_backward(
            &node.op,
            &cache.nodes[i],
            grad,
            store,
            store.slots(i),
            &mut grads,
            want_input,
            &node.id,
        )?;
        let Some(dinput) = dinput else {
            continue;
        };
        finite(&dinput, &node.id, "input gradient")?;
        let lens: Vec<usize> = node
            .feeders
            .iter()
            .map(|f| match *f {
                Feeder::Input => spec.input.feature_shape().len(),
                Feeder::Node(j) => spec.nodes[j].out_shape.len(),
            })
            .collect();
        for (f, part) in node.feeders.iter().zip(ops::split(&dinput, &lens)) {
            if let Feeder::Node(j) = *f {
                accumulate(&mut node_grads[j], out_shape(j), part);
            }
        }
    }
    Ok(grads)
}

impl<T: Real> ParameterStore<T> {
    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics: `running = 0.9 * running + 0.1 * batch`. The running mean
    /// includes the conv bias that train mode skips.
    pub fn update_running_stats(&mut self, spec: &MergedNetworkSpec, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let keep = ops::BN_RUNNING_MOMENTUM;
        for (i, node_cache) in cache.nodes.iter().enumerate() {
            let Some(bn) = node_cache.bn.as_ref() else {
                continue;
            };
            let slots = self.slots(i);
            let bias: Vec<f64> = self
                .get(slots.bias)
                .map(|b| b.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; bn.batch_mean.len()]);
            if let Some(rm) = self.get_mut(slots.running_mean) {
                for ((r, &m), b) in rm.iter_mut().zip(&bn.batch_mean).zip(&bias) {
                    *r = T::of(keep * r.as_f64() + (1.0 - keep) * (m + b));
                }
            }
            if let Some(rv) = self.get_mut(slots.running_var) {
                for (r, &v) in rv.iter_mut().zip(&bn.batch_var) {
                    *r = T::of(keep * r.as_f64() + (1.0 - keep) * v);
                }
            }
        }
        debug_assert_eq!(cache.nodes.len(), spec.nodes.len());
    }
}

/// Evaluates a plain chain layer by layer, reading parameters from a store
/// laid out for [`MergedNetworkSpec::from_chain`]. Used as an independent
/// reference for the DAG executor.
pub fn run_chain<T: Real>(
    spec: &NetworkSpec,
    store: &ParameterStore<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>, EngineError> {
    let mut x = batch.clone();
    let shapes = spec.shapes().map_err(|e| EngineError::Shape(e.to_string()))?;
    for (i, (layer, shape)) in spec.layers().iter().zip(shapes).enumerate() {
        let id = format!("d{}_{}_0", i + 1, crate::graph::OpSignature::of(layer));
        let slot = |kind: &str| store.tensors.iter().position(|t| t.name == format!("{id}.{kind}"));
        let slots = Slots {
            weight: slot("weight"),
            bias: slot("bias"),
            bn_scale: slot("bn_scale"),
            bn_shift: slot("bn_shift"),
            running_mean: slot("running_mean"),
            running_var: slot("running_var"),
        };
        if matches!(layer, LayerSpec::Dense { .. }) {
            let n = x.batch();
            let len = x.item_len();
            x = x.reshaped([n, len, 1, 1]);
        }
        x = layer_forward(layer, x, store, slots, mode, &id)?.output;
        debug_assert_eq!(x.item_len(), shape.len());
    }
    Ok(x)
}
