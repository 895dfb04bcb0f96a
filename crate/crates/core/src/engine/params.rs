//! Trainable tensors of a merged network, laid out in node order.
//!
//! Names are `<node id>.<kind>`, with `outmerge` standing in for the output
//! merge layer. Conv weights have shape `(out, in, k, k)`, dense weights
//! `(fan_in, units)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::optim::nesterov_update;
use super::tensor::Real;
use super::EngineError;
use crate::arch_ir::LayerSpec;
use crate::merge::{MergedNetworkSpec, OutputMerge};

pub const MERGE_NODE: &str = "outmerge";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub node: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// He fan-in for weights, 0 otherwise.
    pub fan_in: usize,
}

/// Tensor indices owned by one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Slots {
    pub weight: Option<usize>,
    pub bias: Option<usize>,
    pub bn_scale: Option<usize>,
    pub bn_shift: Option<usize>,
    pub running_mean: Option<usize>,
    pub running_var: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    pub tensors: Vec<ParamTensor<T>>,
    velocity: Vec<Vec<T>>,
    slots: Vec<Slots>,
    merge_slots: Slots,
}

/// Gradients aligned index-for-index with [`ParameterStore::tensors`];
/// running statistics always carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParameterStore<T>) -> Self {
        Gradients {
            tensors: store.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

struct Builder<T> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, node: &str, kind: ParamKind, shape: Vec<usize>, fill: f64, fan_in: usize) -> usize {
        let len = shape.iter().product();
        self.tensors.push(ParamTensor {
            name: format!("{node}.{}", kind.suffix()),
            node: node.to_string(),
            kind,
            shape,
            data: vec![T::of(fill); len],
            fan_in,
        });
        self.tensors.len() - 1
    }

    fn layer(&mut self, node: &str, op: &LayerSpec, in_channels: usize, fan_in: usize) -> Slots {
        let mut s = Slots::default();
        match *op {
            LayerSpec::Conv {
                kernel,
                out_channels,
                batch_norm,
                ..
            } => {
                let fan = in_channels * kernel * kernel;
                s.weight = Some(self.push(
                    node,
                    ParamKind::Weight,
                    vec![out_channels, in_channels, kernel, kernel],
                    0.0,
                    fan,
                ));
                s.bias = Some(self.push(node, ParamKind::Bias, vec![out_channels], 0.0, 0));
                if batch_norm {
                    s.bn_scale = Some(self.push(node, ParamKind::BnScale, vec![out_channels], 1.0, 0));
                    s.bn_shift = Some(self.push(node, ParamKind::BnShift, vec![out_channels], 0.0, 0));
                    s.running_mean = Some(self.push(node, ParamKind::RunningMean, vec![out_channels], 0.0, 0));
                    s.running_var = Some(self.push(node, ParamKind::RunningVar, vec![out_channels], 1.0, 0));
                }
            }
            LayerSpec::Dense { units, .. } => {
                s.weight = Some(self.push(node, ParamKind::Weight, vec![fan_in, units], 0.0, fan_in));
                s.bias = Some(self.push(node, ParamKind::Bias, vec![units], 0.0, 0));
            }
            LayerSpec::MaxPool { .. } => {}
        }
        s
    }
}

impl<T: Real> ParameterStore<T> {
    /// Layout with weights zeroed, biases zero, batch-norm scale 1 and
    /// running variance 1.
    pub fn zeros(spec: &MergedNetworkSpec) -> Self {
        let mut b = Builder { tensors: Vec::new() };
        let slots = spec
            .nodes
            .iter()
            .map(|n| b.layer(&n.id, &n.op, n.in_channels, n.in_shape.len()))
            .collect();
        let merge_slots = match spec.output_merge {
            OutputMerge::Conv {
                kernel,
                in_channels,
                out_channels,
            } => b.layer(
                MERGE_NODE,
                &LayerSpec::conv(kernel, out_channels, false, crate::arch_ir::Activation::Sigmoid),
                in_channels,
                0,
            ),
            OutputMerge::Dense { in_units, out_units } => b.layer(
                MERGE_NODE,
                &LayerSpec::dense(out_units, crate::arch_ir::Activation::Sigmoid),
                in_units,
                in_units,
            ),
            OutputMerge::Passthrough => Slots::default(),
        };
        let velocity = b.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        ParameterStore {
            tensors: b.tensors,
            velocity,
            slots,
            merge_slots,
        }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`) drawn from a ChaCha8
    /// stream seeded with `seed`, in tensor order. Samples are drawn in f64
    /// so both precisions start from the same values.
    pub fn init(spec: &MergedNetworkSpec, seed: u64) -> Self {
        let mut store = Self::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut store.tensors {
            if t.kind == ParamKind::Weight {
                let std = (2.0 / t.fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in &mut t.data {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
        }
        store
    }

    pub fn slots(&self, node: usize) -> Slots {
        self.slots[node]
    }

    pub fn merge_slots(&self) -> Slots {
        self.merge_slots
    }

    pub fn get(&self, slot: Option<usize>) -> Option<&[T]> {
        slot.map(|i| self.tensors[i].data.as_slice())
    }

    pub fn get_mut(&mut self, slot: Option<usize>) -> Option<&mut Vec<T>> {
        slot.map(move |i| &mut self.tensors[i].data)
    }

    pub fn find(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn trainable_len(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind.trainable())
            .map(|t| t.data.len())
            .sum()
    }

    /// Copies every tensor whose name and shape match one in `other`.
    /// Returns how many tensors were copied.
    pub fn transplant_from<U: Real>(&mut self, other: &ParameterStore<U>) -> usize {
        let mut copied = 0;
        for t in &mut self.tensors {
            if let Some(src) = other.find(&t.name) {
                if src.shape == t.shape {
                    t.data = src.data.iter().map(|v| T::of(v.as_f64())).collect();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    node: t.node.clone(),
                    kind: t.kind,
                    shape: t.shape.clone(),
                    data: conv(&t.data),
                    fan_in: t.fan_in,
                })
                .collect(),
            velocity: self.velocity.iter().map(conv).collect(),
            slots: self.slots.clone(),
            merge_slots: self.merge_slots,
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// One Nesterov momentum step on every trainable tensor.
    pub fn nesterov_step(
        &mut self,
        grads: &Gradients<T>,
        learning_rate: f64,
        momentum: f64,
    ) -> Result<(), EngineError> {
        let (lr, mu) = (T::of(learning_rate), T::of(momentum));
        for ((t, v), g) in self.tensors.iter_mut().zip(&mut self.velocity).zip(&grads.tensors) {
            if !t.kind.trainable() {
                continue;
            }
            nesterov_update(&mut t.data, v, g, lr, mu).map_err(|_| EngineError::NonFinite {
                node: t.node.clone(),
                what: "gradient",
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_ir::parse_network;

    fn spec() -> MergedNetworkSpec {
        MergedNetworkSpec::from_chain(
            &parse_network("network n\ninput 8 8 2\nconv k=3 c=4 bn=true\nmaxpool w=2\ndense u=3 act=sigmoid").unwrap(),
        )
    }

    #[test]
    fn layout_matches_layers() {
        let store = ParameterStore::<f32>::zeros(&spec());
        let names: Vec<&str> = store.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "d1_3C_0.weight",
                "d1_3C_0.bias",
                "d1_3C_0.bn_scale",
                "d1_3C_0.bn_shift",
                "d1_3C_0.running_mean",
                "d1_3C_0.running_var",
                "d3_F_0.weight",
                "d3_F_0.bias"
            ]
        );
        assert_eq!(store.tensors[0].shape, vec![4, 2, 3, 3]);
        assert_eq!(store.tensors[6].shape, vec![4 * 4 * 4, 3]);
        assert_eq!(store.trainable_len() as u64, spec().param_count());
        assert_eq!(store.slots(1), Slots::default());
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = ParameterStore::<f64>::init(&spec(), 7);
        let b = ParameterStore::<f64>::init(&spec(), 7);
        let c = ParameterStore::<f64>::init(&spec(), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = &a.tensors[6].data;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 64.0).abs() < 0.01, "{var}");
        let f = ParameterStore::<f32>::init(&spec(), 7);
        assert_eq!(f.tensors[0].data[0], a.tensors[0].data[0] as f32);
    }

    #[test]
    fn transplant_by_name() {
        let src = ParameterStore::<f64>::init(&spec(), 1);
        let mut dst = ParameterStore::<f32>::zeros(&spec());
        assert_eq!(dst.transplant_from(&src), src.tensors.len());
        assert_eq!(dst, src.cast::<f32>());
    }
}
