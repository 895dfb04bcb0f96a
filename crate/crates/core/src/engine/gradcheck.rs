//! Central finite-difference check of the analytic gradients.
//!
//! The loss is the mean binary cross-entropy of a train-mode forward pass.
//! Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::exec::{run_backward, run_forward};
use super::ops::{bce_grad, bce_loss, Mode};
use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor;
use super::EngineError;
use crate::merge::MergedNetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Above this many trainable entries a seeded subsample is checked.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            step: 1e-5,
            max_entries: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeCheck {
    pub node: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl NodeCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub nodes: Vec<NodeCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.nodes.iter().map(|n| n.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.nodes.iter().all(|n| n.passed(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&NodeCheck> {
        self.nodes.iter().filter(|n| !n.passed(self.tolerance)).collect()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn loss(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<f64>,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
) -> Result<f64, EngineError> {
    let (out, _) = run_forward(spec, store, images, Mode::Train)?;
    bce_loss(&out, masks)
}

/// Analytic gradients of the mean BCE loss at the current parameters.
pub fn loss_gradients(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<f64>,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
) -> Result<Gradients<f64>, EngineError> {
    let (out, cache) = run_forward(spec, store, images, Mode::Train)?;
    let dloss = bce_grad(&out, masks)?;
    run_backward(spec, store, &cache, &dloss)
}

pub fn grad_check(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<f64>,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, EngineError> {
    let analytic = loss_gradients(spec, store, images, masks)?;
    grad_check_against(spec, store, images, masks, &analytic, opts)
}

/// Compares supplied gradients against finite differences. Errors come
/// only from the forward pass; gradient disagreement is reported.
pub fn grad_check_against(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<f64>,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
    analytic: &Gradients<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, EngineError> {
    let entries: Vec<(usize, usize)> = store
        .tensors
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind.trainable())
        .flat_map(|(ti, t)| (0..t.data.len()).map(move |j| (ti, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if entries.len() > opts.max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, entries.len(), opts.max_entries).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| entries[i]).collect()
    } else {
        entries
    };

    let mut nodes: Vec<NodeCheck> = Vec::new();
    let mut probe = store.clone();
    for (ti, j) in chosen {
        let original = probe.tensors[ti].data[j];
        probe.tensors[ti].data[j] = original + opts.step;
        let up = loss(spec, &probe, images, masks)?;
        probe.tensors[ti].data[j] = original - opts.step;
        let down = loss(spec, &probe, images, masks)?;
        probe.tensors[ti].data[j] = original;
        let numeric = (up - down) / (2.0 * opts.step);
        let err = relative_error(analytic.tensors[ti][j], numeric);

        let t = &store.tensors[ti];
        let pos = match nodes.iter().position(|n| n.node == t.node) {
            Some(p) => p,
            None => {
                nodes.push(NodeCheck {
                    node: t.node.clone(),
                    entries: 0,
                    max_rel_error: 0.0,
                    worst: None,
                });
                nodes.len() - 1
            }
        };
        let n = &mut nodes[pos];
        n.entries += 1;
        if err > n.max_rel_error || n.worst.is_none() {
            n.max_rel_error = n.max_rel_error.max(err);
            n.worst = Some((t.name.clone(), j));
        }
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        nodes,
    })
}
