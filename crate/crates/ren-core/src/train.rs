//! Losses, SGD with momentum and weight decay, the step learning-rate
//! schedule, and the deterministic training loop.
//!
//! The update rule follows the classic momentum convention:
//! `v <- momentum * v - lr * (grad + weight_decay * w); w <- w + v`.
//! Losses average over coordinates and batch, so the learning rate keeps
//! its meaning across batch sizes.

use rayon::prelude::*;

use crate::geometry::{
    crop_patch_with, normalize_labels, segment_and_center, transform_labels, AugmentDraw,
    AugmentRanges, CropExtent, DepthFrame, GeometryError, Pose, Resampling,
};
use crate::nn::{Binding, Mode, Model, ModelError};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, TensorRef};

/// Quadratic-to-linear switch point of the smooth loss, in normalized
/// label units.
pub const SMOOTH_L1_BREAKPOINT: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGradient(String),
    #[error("optimizer state does not match the model: {0}")]
    StateMismatch(String),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SmoothL1,
    L2,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::SmoothL1 => "smooth-l1",
            LossKind::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smooth-l1" => Ok(LossKind::SmoothL1),
            "l2" => Ok(LossKind::L2),
            other => Err(TrainError::BadConfig(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_step_epochs: usize,
    pub lr_factor: f64,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            base_lr: 0.005,
            lr_step_epochs: 20,
            lr_factor: 0.1,
            total_epochs: 80,
            momentum: 0.9,
            weight_decay: 0.0005,
            loss: LossKind::SmoothL1,
            augment: true,
            augment_ranges: AugmentRanges::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_epochs == 0 || self.lr_step_epochs == 0 {
            return Err(TrainError::BadConfig("counts must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("base lr {}", self.base_lr)));
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(TrainError::BadConfig(format!("lr factor {} outside (0, 1)", self.lr_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!("momentum {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Scalar loss between a batch prediction node and its targets.
pub fn loss_node<T: Scalar>(
    g: &mut Graph<T>,
    kind: LossKind,
    pred: TensorRef,
    target: TensorRef,
) -> std::result::Result<TensorRef, TensorError> {
    match kind {
        LossKind::SmoothL1 => g.smooth_l1(pred, target, SMOOTH_L1_BREAKPOINT),
        LossKind::L2 => g.l2_loss(pred, target),
    }
}

/// Mean piecewise smooth-L1 between two flat vectors.
pub fn smooth_l1<T: Scalar>(
    g: &mut Graph<T>,
    pred: TensorRef,
    target: TensorRef,
) -> std::result::Result<TensorRef, TensorError> {
    g.smooth_l1(pred, target, SMOOTH_L1_BREAKPOINT)
}

/// Mean 0.5 x^2 between two flat vectors.
pub fn l2_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: TensorRef,
    target: TensorRef,
) -> std::result::Result<TensorRef, TensorError> {
    g.l2_loss(pred, target)
}

/// Per-parameter velocity buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    velocities: Vec<Vec<T>>,
    pub steps: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        OptimizerState {
            velocities: model.params().iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
            steps: 0,
        }
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocities[index]
    }
}

/// One momentum-SGD update from the gradients stored in `graph` for the
/// bound parameters. Gradients are cleared afterwards.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    graph: &mut Graph<T>,
    binding: &Binding,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocities.len() != model.params().len() {
        return Err(TrainError::StateMismatch(format!(
            "{} velocity buffers for {} parameters",
            state.velocities.len(),
            model.params().len()
        )));
    }
    let lr = T::from_f64(lr);
    let m = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    // collect first so a missing gradient leaves everything untouched
    let mut grads: Vec<&[T]> = Vec::with_capacity(model.params().len());
    for (p, &id) in model.params().iter().zip(binding.ids()) {
        grads.push(graph.grad(id).ok_or_else(|| TrainError::MissingGradient(p.name.clone()))?);
    }
    model
        .params_mut()
        .par_iter_mut()
        .zip(state.velocities.par_iter_mut())
        .zip(grads.par_iter())
        .for_each(|((p, v), g)| {
            for ((w, vel), &grad) in p.values.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vel = m * *vel - lr * (grad + wd * *w);
                *w += *vel;
            }
        });
    state.steps += 1;
    graph.clear_grads();
    Ok(())
}

/// Step schedule: base_lr * lr_factor^(epoch / lr_step_epochs).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(TrainError::EpochOutOfRange { epoch, total: cfg.total_epochs });
    }
    Ok(cfg.base_lr * cfg.lr_factor.powi((epoch / cfg.lr_step_epochs) as i32))
}

/// A frame with its ground truth and precomputed crop center.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub frame: DepthFrame,
    pub pose: Pose,
    pub center: [f64; 3],
}

/// Computes foreground centroids for raw (frame, pose) pairs.
pub fn prepare_samples(
    data: Vec<(DepthFrame, Pose)>,
    near_mm: f64,
    far_mm: f64,
) -> Result<Vec<TrainSample>> {
    data.into_iter()
        .map(|(frame, pose)| {
            let center = segment_and_center(&frame, near_mm, far_mm)?;
            Ok(TrainSample { frame, pose, center })
        })
        .collect()
}

/// One row of the loss history: `epoch,batch,lr,loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,batch,lr,loss";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.batch, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochEvent {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Called after every epoch with the event and the current model state
/// (e.g. for periodic checkpoints).
pub type EpochCallback<'a> = &'a mut dyn FnMut(EpochEvent, &Model<f32>);

// stream tags for the independent randomness consumers
const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_DROPOUT: u64 = 3;

/// Crops one training sample with its per-(epoch, index) augmentation
/// stream. Exposed so evaluation can rebuild the exact training inputs.
pub fn crop_for_training(
    sample: &TrainSample,
    extent: &CropExtent,
    out_size: usize,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
    mirror: Option<&[usize]>,
) -> Result<(Vec<f32>, Vec<f64>)> {
    let draw = if cfg.augment {
        let mut stream = RngStream::new(cfg.seed).derive(TAG_AUGMENT).derive2(epoch as u64, index as u64);
        cfg.augment_ranges.draw(&mut stream)
    } else {
        AugmentDraw::identity()
    };
    let patch =
        crop_patch_with(&sample.frame, sample.center, extent, out_size, &draw, Resampling::Bilinear)?;
    let base = normalize_labels(&sample.pose, sample.center, extent);
    let labels = transform_labels(&base, &draw, out_size, mirror);
    Ok((patch.patch, labels))
}

/// Runs the full schedule of shuffled mini-batches. Per-epoch shuffles,
/// per-sample augmentation, and per-batch dropout all derive from
/// `cfg.seed`, so a rerun reproduces the loss history bit for bit.
pub fn train(
    model: &mut Model<f32>,
    samples: &[TrainSample],
    extent: &CropExtent,
    cfg: &TrainConfig,
    mirror: Option<&[usize]>,
    on_epoch: EpochCallback,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if cfg.augment {
        cfg.augment_ranges
            .validate(model.config().joint_count)
            .map_err(TrainError::Geometry)?;
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out_size = model.config().input_size;
    let odim = model.config().output_dim();
    model.set_mode(Mode::Train);
    let mut state = OptimizerState::new(model);
    let mut history = Vec::new();

    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = RngStream::new(cfg.seed).derive2(TAG_SHUFFLE, epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // crop (and augment) the batch in parallel; order is preserved
            let cropped: Vec<(Vec<f32>, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| crop_for_training(&samples[i], extent, out_size, cfg, epoch, i, mirror))
                .collect::<Result<_>>()?;

            let b = batch.len();
            let mut input = Vec::with_capacity(b * out_size * out_size);
            let mut target = Vec::with_capacity(b * odim);
            for (patch, labels) in &cropped {
                input.extend_from_slice(patch);
                target.extend(labels.iter().map(|&v| v as f32));
            }

            let mut g: Graph<f32> = Graph::new();
            let input_id = g.leaf(input, &[b, 1, out_size, out_size], false)?;
            let target_id = g.leaf(target, &[b, odim], false)?;
            let binding = model.bind(&mut g)?;
            let mut dropout_rng =
                RngStream::new(cfg.seed).derive(TAG_DROPOUT).derive2(epoch as u64, batch_idx as u64);
            let pred = model.forward(&mut g, &binding, input_id, &mut dropout_rng)?;
            let loss_id = loss_node(&mut g, cfg.loss, pred, target_id)?;
            let loss = g.values(loss_id)[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx, lr });
            }
            g.backward(loss_id)?;
            sgd_step(model, &mut state, &mut g, &binding, lr, cfg.momentum, cfg.weight_decay)?;

            history.push(LossRecord { epoch, batch: batch_idx, lr, loss });
            epoch_loss += loss;
            batches += 1;
        }
        on_epoch(EpochEvent { epoch, lr, mean_loss: epoch_loss / batches as f64 }, model);
    }
    Ok(history)
}
