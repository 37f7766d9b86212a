//! Supervised source-domain training of the initial model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, sample_augs};
use crate::error::{Error, Result};
use crate::net::{build_architecture, forward_recorded, ModelParams, DOWNSAMPLE};
use crate::optim::sgd_step;
use crate::synth::Sample;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub seg_loss_weight: f64,
    /// Chance that a drawn image is replaced by a random augmented view,
    /// with its mask warped alongside.
    pub augment_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 5,
            seed: 0,
            seg_loss_weight: 1.0,
            augment_prob: 0.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.seg_loss_weight >= 0.0 && self.seg_loss_weight.is_finite()) {
            return Err(Error::Config("seg_loss_weight must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::Config(format!(
                "augment_prob must lie in [0, 1], got {}",
                self.augment_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Mean per-image loss over each epoch's subset, measured during the epoch.
    pub epoch_loss: Vec<f64>,
    /// How many times each negative (in dataset order) was drawn.
    pub negative_usage: Vec<usize>,
}

/// 8x8 block max: a block is positive if any of its pixels is.
pub fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = match mask.shape() {
        [h, w] if h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0 => (*h, *w),
        s => {
            return Err(Error::dim(
                "downsample_mask",
                format!("mask {s:?} must be [H, W] with H, W divisible by {DOWNSAMPLE}"),
            ))
        }
    };
    let (sh, sw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
    let d = mask.data();
    Ok(Tensor::from_fn(&[sh, sw], |i| {
        let (by, bx) = (i / sw, i % sw);
        let mut m = 0.0f32;
        for y in by * DOWNSAMPLE..(by + 1) * DOWNSAMPLE {
            for &v in &d[y * w + bx * DOWNSAMPLE..y * w + (bx + 1) * DOWNSAMPLE] {
                m = m.max(v);
            }
        }
        m
    }))
}

/// Cyclic walk over a shuffled negative list so usage counts never differ
/// by more than one.
struct NegativeRotation {
    order: Vec<usize>,
    cursor: usize,
}

impl NegativeRotation {
    fn take(&mut self, k: usize) -> Vec<usize> {
        let n = self.order.len();
        let out = (0..k).map(|j| self.order[(self.cursor + j) % n]).collect();
        self.cursor = (self.cursor + k) % n;
        out
    }
}

/// Loss and gradients for one labelled image.
pub fn sample_loss_and_grads(params: &ModelParams, sample: &Sample, seg_loss_weight: f64) -> Result<(f64, Gradients)> {
    let (label, mask) = match (sample.label, &sample.mask) {
        (Some(l), Some(m)) => (l, m),
        _ => {
            return Err(Error::Data(format!(
                "sample {} needs both a label and a mask for pretraining",
                sample.id
            )))
        }
    };
    let target = downsample_mask(mask)?;
    let (sh, sw) = (target.shape()[0], target.shape()[1]);
    let mut fwd = forward_recorded(params, &sample.image)?;
    let tape = &mut fwd.tape;
    let seg = tape.bce(fwd.seg_prob, target.reshape(&[1, 1, sh, sw])?)?;
    let seg = tape.scale(seg, seg_loss_weight as f32);
    let cls = tape.bce(fwd.cls_prob, Tensor::full(&[1, 1], if label { 1.0 } else { 0.0 }))?;
    let loss = tape.add(seg, cls)?;
    let value = tape.value(loss).data()[0] as f64;
    Ok((value, tape.backward(loss)?))
}

/// `sample` under one randomly drawn augmentation. Spatial kinds move the
/// mask with the image; the label is kept.
fn augmented_view(sample: &Sample, seed: u64) -> Result<Sample> {
    let aug = sample_augs(1, seed)?.remove(0);
    let mut out = sample.clone();
    out.image = apply(&aug, &sample.image)?;
    if aug.is_spatial() {
        if let Some(m) = &sample.mask {
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let moved = apply(&aug, &m.clone().reshape(&[1, h, w])?)?;
            out.mask = Some(moved.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).reshape(&[h, w])?);
        }
    }
    Ok(out)
}

pub fn pretrain(data: &[Sample], cfg: &PretrainConfig) -> Result<ModelParams> {
    pretrain_with_report(data, cfg).map(|(p, _)| p)
}

/// Trains from a seeded initialisation with plain SGD on class-balanced
/// epochs: every positive plus an equal number of negatives.
pub fn pretrain_with_report(data: &[Sample], cfg: &PretrainConfig) -> Result<(ModelParams, PretrainReport)> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Config("pretraining set is empty".into()))?;
    let (h, w) = match first.image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::dim("pretrain", format!("image shape {s:?} is not [1, H, W]"))),
    };
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, s) in data.iter().enumerate() {
        match s.label {
            Some(true) => positives.push(i),
            Some(false) => negatives.push(i),
            None => return Err(Error::Data(format!("sample {} has no label", s.id))),
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Config(
            "pretraining needs at least one positive and one negative sample".into(),
        ));
    }

    let mut params = build_architecture(h, w, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = negatives.clone();
    order.shuffle(&mut rng);
    let mut rotation = NegativeRotation { order, cursor: 0 };
    let mut usage = vec![0usize; data.len()];
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut subset = positives.clone();
        for i in rotation.take(positives.len()) {
            usage[i] += 1;
            subset.push(i);
        }
        subset.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in subset.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let view;
                let sample = if cfg.augment_prob > 0.0 && rng.gen::<f64>() < cfg.augment_prob {
                    view = augmented_view(&data[i], rng.gen())?;
                    &view
                } else {
                    &data[i]
                };
                let (loss, grads) = sample_loss_and_grads(&params, sample, cfg.seg_loss_weight)?;
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss or gradient on sample {}",
                        data[i].id
                    )));
                }
                total += loss;
                let gs = grads.into_entries().into_iter().map(|(_, t)| t);
                acc = Some(match acc {
                    None => gs.collect(),
                    Some(mut a) => {
                        for (dst, g) in a.iter_mut().zip(gs) {
                            for (x, y) in dst.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        a
                    }
                });
            }
            let inv = 1.0 / batch.len() as f32;
            let names = params.entries().iter().map(|(n, _)| n.clone());
            let mean: Vec<(String, Tensor)> = names
                .zip(acc.expect("batches are non-empty"))
                .map(|(n, t)| (n, t.map(|v| v * inv)))
                .collect();
            sgd_step(&mut params, &Gradients::from_entries(mean), cfg.lr)?;
        }
        epoch_loss.push(total / subset.len() as f64);
    }
    let negative_usage = negatives.iter().map(|&i| usage[i]).collect();
    Ok((
        params,
        PretrainReport {
            epoch_loss,
            negative_usage,
        },
    ))
}
