use serde::{Deserialize, Serialize};

use crate::data::{departchify, patchify, patchify_labels, LabelMap, PatchGrid, SegSample};
use crate::error::{Error, Result};
use crate::models::UNet;
use crate::tensorkit::{AdamState, Graph, Mode, RngStream, Scalar, Tensor};

use super::EventLog;

/// Supervised training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-3, batch_size: 32 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

/// Splits every sample into its `patches` tiles and matching label tiles.
pub fn patch_examples<T: Scalar>(data: &[SegSample], patches: usize) -> Result<(Vec<Tensor<T>>, Vec<LabelMap>)> {
    let mut xs = Vec::with_capacity(data.len() * patches);
    let mut ys = Vec::with_capacity(data.len() * patches);
    for s in data {
        xs.extend(patchify(&s.image.cast::<T>(), patches)?.patches);
        ys.extend(patchify_labels(&s.labels, patches)?);
    }
    Ok((xs, ys))
}

/// Mean squared difference between two logit tensors.
pub fn kd_loss<T: Scalar>(z_small: &Tensor<T>, z_large: &Tensor<T>) -> Result<f64> {
    if z_small.shape() != z_large.shape() {
        return Err(Error::shape("kd_loss", format!("{:?} vs {:?}", z_small.shape(), z_large.shape())));
    }
    let sum: f64 = z_small
        .data()
        .iter()
        .zip(z_large.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / z_small.len() as f64)
}

/// Eval-mode logits `[K, H, W]` for a list of same-shaped `[C, H, W]` inputs, run in chunks.
pub fn batched_logits<T: Scalar>(model: &UNet<T>, inputs: &[&Tensor<T>], chunk: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut rng = RngStream::new(0);
    for part in inputs.chunks(chunk.max(1)) {
        let owned: Vec<Tensor<T>> = part.iter().map(|t| (*t).clone()).collect();
        let logits = model.logits(&Tensor::stack(&owned)?, Mode::Eval, &mut rng)?;
        let inner = logits.shape()[1..].to_vec();
        for i in 0..part.len() {
            out.push(logits.batch_item(i).reshape(&inner)?);
        }
    }
    Ok(out)
}

/// Full-resolution logits assembled from a model run on each patch.
pub fn stitched_logits<T: Scalar>(model: &UNet<T>, image: &Tensor<T>, patches: usize) -> Result<Tensor<T>> {
    let grid = patchify(image, patches)?;
    let refs: Vec<&Tensor<T>> = grid.patches.iter().collect();
    let logits = batched_logits(model, &refs, patches)?;
    let k = model.spec.num_classes;
    let (_, h, w) = grid.source;
    departchify(&PatchGrid { patches: logits, grid: grid.grid, source: (k, h, w) })
}

fn labels_u32(ys: &[&LabelMap]) -> Vec<u32> {
    ys.iter().flat_map(|y| y.labels.iter().map(|&l| l as u32)).collect()
}

/// Shared minibatch loop; `targets` adds a `beta`-weighted logit-matching term.
fn fit<T: Scalar>(
    model: &mut UNet<T>,
    xs: &[Tensor<T>],
    ys: &[LabelMap],
    targets: Option<(&[Tensor<T>], f64)>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    stage: &str,
    log: &mut EventLog,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::invalid(format!("{stage}: empty training set")));
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let base = rng.named(stage);
    for epoch in 0..cfg.epochs {
        let mut erng = base.fork(epoch as u64);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        erng.shuffle(&mut order);
        let (mut total, mut kd_total, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(&idx.iter().map(|&i| xs[i].clone()).collect::<Vec<_>>())?;
            let labels = labels_u32(&idx.iter().map(|&i| &ys[i]).collect::<Vec<_>>());
            let target = match targets {
                Some((t, beta)) if beta != 0.0 => {
                    Some((Tensor::stack(&idx.iter().map(|&i| t[i].clone()).collect::<Vec<_>>())?, beta))
                }
                _ => None,
            };
            let (loss, kd, grads) = {
                let mut g = Graph::new(Mode::Train);
                let xv = g.input(x);
                let logits = model.forward(&mut g, xv, &mut erng)?;
                let mut loss = g.cross_entropy(logits, &labels)?;
                let mut kd = 0.0;
                if let Some((t, beta)) = target {
                    let tv = g.input(t);
                    let m = g.mse(logits, tv)?;
                    kd = g.value(m).item().to_f64_lossy();
                    let weighted = g.scale(m, beta);
                    loss = g.add(loss, weighted)?;
                }
                let lv = g.value(loss).item().to_f64_lossy();
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!("{stage}: non-finite loss at epoch {epoch}")));
                }
                (lv, kd, g.backward(loss)?.into_params())
            };
            adam.step(&mut model.params, &grads)?;
            total += loss;
            kd_total += kd;
            batches += 1;
        }
        let mean = total / batches as f64;
        history.push(mean);
        if targets.is_some() {
            log.record(stage, epoch, &[("loss", mean), ("kd", kd_total / batches as f64)]);
        } else {
            log.record(stage, epoch, &[("loss", mean)]);
        }
    }
    Ok(history)
}

/// Trains a large model with per-patch cross-entropy; returns mean loss per epoch.
pub fn pretrain_large<T: Scalar>(
    model: &mut UNet<T>,
    data: &[SegSample],
    patches: usize,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    log: &mut EventLog,
) -> Result<Vec<f64>> {
    let (xs, ys) = patch_examples(data, patches)?;
    fit(model, &xs, &ys, None, cfg, rng, "pretrain", log)
}

/// Per-epoch history of small-model training with distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct KdHistory {
    pub loss: Vec<f64>,
    /// Distillation term averaged over each epoch's batches (empty when `beta = 0`).
    pub kd: Vec<f64>,
}

/// Trains the small model on full images with cross-entropy plus `beta`
/// times the logit MSE against the frozen teacher's patch-stitched logits.
pub fn pretrain_small_kd<T: Scalar>(
    small: &mut UNet<T>,
    teacher: &UNet<T>,
    data: &[SegSample],
    patches: usize,
    beta: f64,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    log: &mut EventLog,
) -> Result<KdHistory> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta {beta} must be non-negative")));
    }
    let xs: Vec<Tensor<T>> = data.iter().map(|s| s.image.cast::<T>()).collect();
    let ys: Vec<LabelMap> = data.iter().map(|s| s.labels.clone()).collect();
    let teacher_logits = if beta > 0.0 {
        Some(xs.iter().map(|x| stitched_logits(teacher, x, patches)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let start = log.events.len();
    let loss = fit(small, &xs, &ys, teacher_logits.as_deref().map(|t| (t, beta)), cfg, rng, "pretrain_kd", log)?;
    let kd = log.events[start..].iter().filter_map(|e| e.metrics.get("kd").copied()).collect();
    Ok(KdHistory { loss, kd })
}
