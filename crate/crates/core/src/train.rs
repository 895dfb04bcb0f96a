//! Mini-batch training with Nesterov momentum on mean binary cross-entropy.
//!
//! Per epoch the training indices are shuffled with a ChaCha8 stream seeded
//! from the config seed, then visited in batches. The reported train loss
//! is the sample-weighted mean of the batch losses seen during the epoch;
//! the validation loss is an eval-mode pass after the epoch.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::ops::{bce_grad, bce_loss};
use crate::engine::{run_backward, run_forward, EngineError, Mode, ParameterStore, Real};
use crate::merge::MergedNetworkSpec;
use crate::metrics::{compute_metrics, confusion_from_masks, MetricReport, MetricsError};
use crate::synth::SegmentationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision `{s}` (f32, f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 42,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }
}

impl std::fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "lr={} momentum={} epochs={} batch={} seed={} precision={}",
            self.learning_rate, self.momentum, self.epochs, self.batch_size, self.seed, self.precision
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset does not fit the network: {0}")]
    Shape(String),
    #[error("epoch {epoch}: {source}")]
    Numeric { epoch: usize, source: EngineError },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in history {
        let _ = writeln!(out, "{},{:.8e},{:.8e}", e.epoch, e.train_loss, e.val_loss);
    }
    out
}

/// Checks that the dataset's images and masks fit the network's input and
/// output.
pub fn check_compatible(spec: &MergedNetworkSpec, data: &SegmentationSet) -> Result<(), TrainError> {
    let i = spec.input;
    if (i.height, i.width, i.channels) != (data.height, data.width, 1) {
        return Err(TrainError::Shape(format!(
            "network input is {}x{}x{}, images are {}x{}x1",
            i.height, i.width, i.channels, data.height, data.width
        )));
    }
    let o = spec.output_shape;
    if o.len() != data.pixels() {
        return Err(TrainError::Shape(format!(
            "network output has {} values per sample, masks have {}",
            o.len(),
            data.pixels()
        )));
    }
    Ok(())
}

/// Mean eval-mode loss over `indices`, in batches.
pub fn mean_loss<T: Real>(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<T>,
    data: &SegmentationSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, EngineError> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let (out, _) = run_forward(spec, store, &data.image_batch::<T>(chunk), Mode::Eval)?;
        let target = data.mask_batch::<T>(chunk).reshaped(out.shape());
        total += bce_loss(&out, &target)? * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// One pass over the shuffled training indices. Returns the sample-weighted
/// mean batch loss.
pub fn train_epoch<T: Real>(
    spec: &MergedNetworkSpec,
    store: &mut ParameterStore<T>,
    data: &SegmentationSet,
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, EngineError> {
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let (out, cache) = run_forward(spec, store, &data.image_batch::<T>(chunk), Mode::Train)?;
        let target = data.mask_batch::<T>(chunk).reshaped(out.shape());
        let loss = bce_loss(&out, &target)?;
        if !loss.is_finite() {
            return Err(EngineError::NonFinite {
                node: "loss".into(),
                what: "loss",
            });
        }
        total += loss * chunk.len() as f64;
        let grads = run_backward(spec, store, &cache, &bce_grad(&out, &target)?)?;
        store.update_running_stats(spec, &cache);
        store.nesterov_step(&grads, cfg.learning_rate, cfg.momentum)?;
    }
    Ok(total / order.len() as f64)
}

pub struct TrainOutcome<T> {
    pub store: ParameterStore<T>,
    pub history: Vec<EpochLoss>,
}

/// Trains from a fresh seeded initialization. `on_epoch` sees each epoch's
/// losses as they are produced.
pub fn train<T: Real>(
    spec: &MergedNetworkSpec,
    data: &SegmentationSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    check_compatible(spec, data)?;
    if data.split.train.is_empty() {
        return Err(TrainError::Shape("training split is empty".into()));
    }
    let mut store = ParameterStore::<T>::init(spec, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order = data.split.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let numeric = |source| TrainError::Numeric { epoch, source };
        let train_loss = train_epoch(spec, &mut store, data, &order, cfg).map_err(numeric)?;
        let val_loss = mean_loss(spec, &store, data, &data.split.validation, cfg.batch_size).map_err(numeric)?;
        let e = EpochLoss {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&e);
        history.push(e);
    }
    Ok(TrainOutcome { store, history })
}

/// Eval-mode predictions for `indices`, one flat mask per sample.
pub fn predict<T: Real>(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<T>,
    data: &SegmentationSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, EngineError> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (pred, _) = run_forward(spec, store, &data.image_batch::<T>(chunk), Mode::Eval)?;
        for b in 0..chunk.len() {
            out.push(pred.item(b).iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(out)
}

/// Per-image reports for `indices` at the given threshold.
pub fn evaluate<T: Real>(
    spec: &MergedNetworkSpec,
    store: &ParameterStore<T>,
    data: &SegmentationSet,
    indices: &[usize],
    threshold: f64,
) -> Result<Vec<MetricReport>, TrainError> {
    check_compatible(spec, data)?;
    let preds = predict(spec, store, data, indices, 64)?;
    preds
        .iter()
        .zip(indices)
        .map(|(p, &i)| Ok(compute_metrics(confusion_from_masks(p, &data.masks[i], threshold)?)?))
        .collect()
}
