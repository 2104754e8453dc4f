//! Adam, the step learning-rate schedule, and the epoch loop with
//! validation-based model selection.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::autograd::Graph;
use crate::checkpoint;
use crate::data::{preprocess, AugmentConfig, LabeledDataset, Standardize};
use crate::error::{Error, Result};
use crate::metrics::{confusion, per_class_metrics, MetricsReport};
use crate::model::{predict_from_logits, Model};
use crate::ops;
use crate::params::{Mode, ParamStore, BN_MOMENTUM};
use crate::rng;
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub precision: DType,
    pub augment: AugmentConfig,
    /// Batch size used for validation and test inference.
    pub eval_batch_size: usize,
    /// Where the best model is written whenever validation accuracy improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            lr0: 0.001,
            decay_factor: 0.1,
            decay_every: 100,
            seed: 0,
            precision: DType::F32,
            augment: AugmentConfig::default(),
            eval_batch_size: 64,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("epochs and batch sizes must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay interval must be at least 1 epoch"));
        }
        self.augment.validate()
    }
}

/// `lr0 · factor^floor(epoch / every)`, by repeated multiplication so the
/// decayed rates are the exact products (0.001 · 0.1 · 0.1 == 1e-5).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    for _ in 0..epoch / cfg.decay_every {
        lr *= cfg.decay_factor;
    }
    lr
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for every learnable parameter of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.learnable_ids().into_iter().map(|id| store.get(id).zeros_like()).collect();
        AdamState {
            v: zeros.clone(),
            m: zeros,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update of every learnable parameter.
/// `grads` follow `store.learnable_ids()` order. Nothing is modified if any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let ids = store.learnable_ids();
    if grads.len() != ids.len() || state.m.len() != ids.len() {
        return Err(Error::arg(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            ids.len()
        )));
    }
    for (&id, g) in ids.iter().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::shape(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                store.entry(id).name,
                g.shape(),
                store.get(id).shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.entry(id).name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::cast(state.beta1), T::cast(state.beta2));
    let (one, eps) = (T::one(), T::cast(state.eps));
    let c1 = T::cast(1.0 / (1.0 - state.beta1.powi(t)));
    let c2 = T::cast(1.0 / (1.0 - state.beta2.powi(t)));
    let lr = T::cast(lr);
    for (k, (&id, g)) in ids.iter().zip(grads).enumerate() {
        let p = store.get_mut(id).data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] * c1;
            let vhat = v[i] * c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub checkpoint: Option<PathBuf>,
    pub steps: u64,
    pub norm: Standardize,
}

impl RunRecord {
    /// `epoch,lr,train_loss,val_acc`, one row per epoch.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{:.9},{:.6}", e.epoch, e.lr, e.train_loss, e.val_acc);
        }
        s
    }
}

/// Training and validation indices into one dataset.
#[derive(Debug, Clone, Copy)]
pub struct Datasets<'a> {
    pub data: &'a LabeledDataset,
    pub train: &'a [usize],
    pub val: &'a [usize],
}

fn check_compatible<T: Scalar>(model: &Model<T>, data: &LabeledDataset, aug: &AugmentConfig) -> Result<()> {
    let mc = model.config();
    if data.channels() != Some(mc.in_channels) {
        return Err(Error::config(format!(
            "model takes {}-channel input, dataset has {:?} channels",
            mc.in_channels,
            data.channels()
        )));
    }
    if data.num_classes() != mc.num_classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset {}",
            mc.num_classes,
            data.num_classes()
        )));
    }
    if aug.resolution != mc.input_resolution {
        return Err(Error::config(format!(
            "augmentation resolution {} differs from model resolution {}",
            aug.resolution, mc.input_resolution
        )));
    }
    Ok(())
}

fn stack<T: Scalar>(images: &[Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::arg("empty batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("images in a batch differ in shape"));
        }
        data.extend(img.data().iter().map(|&v| T::cast(v as f64)));
    }
    Tensor::new(&shape, data)
}

/// Eval-mode predictions and mean cross-entropy over `data.items()[indices]`.
fn score<T: Scalar>(
    model: &Model<T>,
    data: &LabeledDataset,
    indices: &[usize],
    aug: &AugmentConfig,
    norm: &Standardize,
    batch_size: usize,
) -> Result<(Vec<usize>, f64)> {
    check_compatible(model, data, aug)?;
    let mut unused = rng::stream(0, "eval", &[]);
    let mut preds = Vec::with_capacity(indices.len());
    let mut loss = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| preprocess(&data.items()[i].image, aug, norm, false, &mut unused))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.items()[i].label).collect();
        let logits = model.logits(&stack::<T>(&images)?)?;
        loss += ops::softmax_cross_entropy(&logits, &labels)?.0.widen() * chunk.len() as f64;
        preds.extend(predict_from_logits(&logits)?.classes);
    }
    Ok((preds, loss / indices.len().max(1) as f64))
}

/// Eval-mode predicted classes for `data.items()[indices]`.
pub fn predict_indices<T: Scalar>(
    model: &Model<T>,
    data: &LabeledDataset,
    indices: &[usize],
    aug: &AugmentConfig,
    norm: &Standardize,
    batch_size: usize,
) -> Result<Vec<usize>> {
    Ok(score(model, data, indices, aug, norm, batch_size)?.0)
}

/// Confusion-matrix metrics of the model on `data.items()[indices]`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &LabeledDataset,
    indices: &[usize],
    aug: &AugmentConfig,
    norm: &Standardize,
    batch_size: usize,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::arg("cannot evaluate on zero samples"));
    }
    let preds = predict_indices(model, data, indices, aug, norm, batch_size)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.items()[i].label).collect();
    per_class_metrics(&confusion(&preds, &labels, data.num_classes())?)
}

/// Fraction of `indices` classified correctly.
pub fn accuracy<T: Scalar>(
    model: &Model<T>,
    data: &LabeledDataset,
    indices: &[usize],
    aug: &AugmentConfig,
    norm: &Standardize,
    batch_size: usize,
) -> Result<f64> {
    let preds = predict_indices(model, data, indices, aug, norm, batch_size)?;
    let hits = preds.iter().zip(indices).filter(|(&p, &i)| p == data.items()[i].label).count();
    Ok(hits as f64 / indices.len() as f64)
}

/// Trains `model` in place with Adam on shuffled, augmented mini-batches.
///
/// After every epoch the model is scored on the validation indices. It
/// improves on the best so far with higher accuracy, or equal accuracy and
/// lower validation loss; improvements are snapshotted (and written to
/// `cfg.checkpoint` when set).
/// The best snapshot is restored before returning.
pub fn train<T: Scalar>(model: &mut Model<T>, sets: Datasets<'_>, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if T::DTYPE != cfg.precision {
        return Err(Error::config(format!(
            "model runs in {} but the configuration asks for {}",
            T::DTYPE,
            cfg.precision
        )));
    }
    if sets.train.is_empty() || sets.val.is_empty() {
        return Err(Error::arg("training and validation sets must be non-empty"));
    }
    let data = sets.data;
    check_compatible(model, data, &cfg.augment)?;
    let norm = Standardize::fit(data, sets.train)?;

    let mut adam = AdamState::new(model.params());
    let mut best = model.params().clone();
    let mut record = RunRecord {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
        checkpoint: None,
        steps: 0,
        norm: norm.clone(),
    };
    let mut order = sets.train.to_vec();
    let mut best_val_loss = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.copy_from_slice(sets.train);
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut r = rng::stream(cfg.seed, "augment", &[epoch as u64, i as u64]);
                images.push(preprocess(&data.items()[i].image, &cfg.augment, &norm, true, &mut r)?);
                labels.push(data.items()[i].label);
            }
            let mut g = Graph::new();
            let pass = model.forward(&mut g, stack::<T>(&images)?, Mode::Train)?;
            let loss = g.softmax_cross_entropy(pass.logits, &labels)?;
            let value = g.value(loss).item()?.widen();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            g.backward(loss)?;
            let grads = pass.bindings.learnable_grads(&g, model.params());
            adam_step(model.params_mut(), &grads, &mut adam, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            pass.bindings.apply_running_stats(model.params_mut(), BN_MOMENTUM);
            loss_sum += value * chunk.len() as f64;
        }
        let (preds, val_loss) = score(model, data, sets.val, &cfg.augment, &norm, cfg.eval_batch_size)?;
        let hits = preds.iter().zip(sets.val).filter(|(&p, &i)| p == data.items()[i].label).count();
        let val_acc = hits as f64 / sets.val.len() as f64;
        let train_loss = loss_sum / order.len() as f64;
        log::info!("epoch {epoch}: lr {lr} loss {train_loss:.5} val_acc {val_acc:.4} val_loss {val_loss:.5}");
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_acc,
            val_loss,
        });
        let improved = val_acc > record.best_val_acc || (val_acc == record.best_val_acc && val_loss < best_val_loss);
        if improved {
            record.best_val_acc = val_acc;
            best_val_loss = val_loss;
            record.best_epoch = epoch;
            best.copy_values_from(model.params())?;
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save(model, Some(&norm), path)?;
                record.checkpoint = Some(path.clone());
            }
        }
    }
    model.params_mut().copy_values_from(&best)?;
    record.steps = adam.step();
    Ok(record)
}
