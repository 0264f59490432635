//! SGD training loop: fixed and linear learning-rate schedules, random
//! crop/flip augmentation with coupled image/mask transforms, momentum
//! updates, two-phase fine-tuning, and bit-exact checkpointing.
//!
//! Every stochastic choice of epoch `e` is drawn from a stream derived
//! from `(seed, e)` — shuffle first, then per-sample augmentation draws in
//! batch order — so resuming at an epoch boundary replays identically.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cls::ClassLabel;
use crate::data::dataset::Dataset;
use crate::data::weights::{CheckpointMeta, WeightsFile};
use crate::error::{Error, Result};
use crate::ops::flip::{flip_tensor, FlipKind};
use crate::resnet::{HeadSpec, Mode, Network};
use crate::seg::BinaryMask;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Fixed,
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_epochs: usize,
}

impl ScheduleSpec {
    pub fn fixed(base_lr: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Fixed,
            base_lr,
            total_epochs,
        }
    }

    pub fn linear(base_lr: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            base_lr,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 0-based epoch: fixed schedules return the base rate;
/// linear schedules decay as `base * (1 - epoch/total)`, reaching zero at
/// the final epoch boundary.
pub fn lr_at(schedule: &ScheduleSpec, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    if epoch > schedule.total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    Ok(match schedule.kind {
        ScheduleKind::Fixed => schedule.base_lr,
        ScheduleKind::Linear => {
            schedule.base_lr * (1.0 - epoch as f64 / schedule.total_epochs as f64)
        }
    })
}

/// Classification target mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    /// 3-way labels in the fixed (melanoma, SK, nevus) order.
    Multiclass,
    /// 2-way: the named class is index 1, everything else index 0.
    OneVsRest(ClassLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Segmentation,
    Classification(ClsTarget),
}

/// How training crops arrive at the batch resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropRule {
    /// Use images at their (uniform) native size.
    None,
    /// Crop to this fraction of each side (uniform image sizes required).
    Fraction(f64),
    /// Crop to an exact size (images may vary, each must be large enough).
    Exact(usize, usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub momentum: f64,
    pub seed: u64,
    /// Random crop offsets and 50/50 horizontal/vertical flips. When
    /// disabled, crops are centered and nothing is flipped.
    pub augment: bool,
    pub crop: CropRule,
    /// Weight the classification loss by inverse class frequency.
    pub inverse_frequency_weights: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let CropRule::Fraction(f) = self.crop {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "crop fraction must lie in (0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// The geometric transform one augmentation draw applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentRecord {
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: FlipKind,
}

fn crop_image(image: &Tensor<f32>, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, ih, iw) = match image.shape()[..] {
        [c, ih, iw] => (c, ih, iw),
        _ => {
            return Err(Error::Shape(format!(
                "augment expects C x H x W images, got {:?}",
                image.shape()
            )))
        }
    };
    if y + h > ih || x + w > iw {
        return Err(Error::Config(format!(
            "crop {h}x{w}+{y}+{x} exceeds image {ih}x{iw}"
        )));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for row in y..y + h {
            data.extend_from_slice(&image.data()[(ch * ih + row) * iw + x..(ch * ih + row) * iw + x + w]);
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// One random crop (uniform offset) plus independent 50% horizontal and
/// vertical flips; a mask, when present, receives the identical transform.
/// Draw order: crop_y, crop_x, flip_h, flip_v.
pub fn augment(
    image: &Tensor<f32>,
    mask: Option<&BinaryMask>,
    crop_h: usize,
    crop_w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Option<BinaryMask>, AugmentRecord)> {
    let (h, w) = match image.shape()[..] {
        [_, h, w] => (h, w),
        _ => {
            return Err(Error::Shape(format!(
                "augment expects C x H x W images, got {:?}",
                image.shape()
            )))
        }
    };
    if crop_h > h || crop_w > w {
        return Err(Error::Config(format!(
            "crop {crop_h}x{crop_w} larger than image {h}x{w}"
        )));
    }
    let crop_y = rng.gen_range(0..=h - crop_h);
    let crop_x = rng.gen_range(0..=w - crop_w);
    let flip = FlipKind::from_bits(rng.gen_bool(0.5), rng.gen_bool(0.5));

    let cropped = crop_image(image, crop_y, crop_x, crop_h, crop_w)?;
    let out_image = flip_tensor(&cropped, flip);
    let out_mask = match mask {
        Some(m) => {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {}x{} does not match image {h}x{w}",
                    m.height, m.width
                )));
            }
            Some(m.crop(crop_y, crop_x, crop_h, crop_w)?.flip(flip))
        }
        None => None,
    };
    Ok((
        out_image,
        out_mask,
        AugmentRecord {
            crop_y,
            crop_x,
            flip,
        },
    ))
}

/// Momentum SGD update: `v <- momentum*v + g; w <- w - lr*v`.
pub fn sgd_step<E: Element>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    velocity: &mut Tensor<E>,
    lr: E,
    momentum: E,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape(format!(
            "sgd_step: param {:?} vs grad {:?} vs velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((w, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *w = *w - lr * *v;
    }
    Ok(())
}

/// Momentum buffers, one per trainable parameter, in parameter order.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<(String, Tensor<f32>)>,
}

impl SgdState {
    pub fn new(net: &Network<f32>) -> Self {
        SgdState {
            velocity: net
                .params()
                .iter()
                .filter(|p| p.trainable)
                .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape().to_vec())))
                .collect(),
        }
    }

    fn check_alignment(&self, net: &Network<f32>) -> Result<()> {
        let names: Vec<&str> = net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        if names.len() != self.velocity.len()
            || names
                .iter()
                .zip(&self.velocity)
                .any(|(&n, (vn, _))| n != vn)
        {
            return Err(Error::Config(
                "optimizer state does not match the network's trainable parameters".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    /// Mean batch loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
}

struct PreparedData {
    images: Vec<Tensor<f32>>,
    masks: Vec<Option<BinaryMask>>,
    class_targets: Vec<usize>,
    class_weights: Option<Vec<f32>>,
    crop: (usize, usize),
}

fn resolve_crop(cfg: &TrainConfig, data: &Dataset) -> Result<(usize, usize)> {
    let dims = |s: &crate::data::dataset::Sample| (s.image.shape()[1], s.image.shape()[2]);
    match cfg.crop {
        CropRule::Exact(h, w) => Ok((h, w)),
        CropRule::None | CropRule::Fraction(_) => {
            let (h0, w0) = dims(&data.samples[0]);
            for s in &data.samples {
                if dims(s) != (h0, w0) {
                    return Err(Error::Config(format!(
                        "batched training without an exact crop needs uniform image sizes; {} is {:?} vs {h0}x{w0}",
                        s.id,
                        dims(s)
                    )));
                }
            }
            match cfg.crop {
                CropRule::None => Ok((h0, w0)),
                CropRule::Fraction(f) => Ok((
                    ((h0 as f64 * f).round() as usize).clamp(1, h0),
                    ((w0 as f64 * f).round() as usize).clamp(1, w0),
                )),
                CropRule::Exact(..) => unreachable!(),
            }
        }
    }
}

fn prepare(cfg: &TrainConfig, data: &Dataset, net: &Network<f32>) -> Result<PreparedData> {
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let crop = resolve_crop(cfg, data)?;

    let mut class_targets = Vec::new();
    match cfg.task {
        TaskKind::Segmentation => {
            if net.spec().head != (HeadSpec::Segmentation { score_channels: 2 }) {
                return Err(Error::Config(
                    "segmentation training needs a 2-channel segmentation head".into(),
                ));
            }
            for s in &data.samples {
                if s.mask.is_none() {
                    return Err(Error::Config(format!(
                        "segmentation training needs masks; {} has none",
                        s.id
                    )));
                }
            }
        }
        TaskKind::Classification(target) => {
            let classes = match target {
                ClsTarget::Multiclass => 3,
                ClsTarget::OneVsRest(_) => 2,
            };
            if net.spec().head != (HeadSpec::Classifier { classes }) {
                return Err(Error::Config(format!(
                    "classification training needs a {classes}-way classifier head"
                )));
            }
            for s in &data.samples {
                let label = s.label.ok_or_else(|| {
                    Error::Config(format!("classification training needs labels; {} has none", s.id))
                })?;
                class_targets.push(match target {
                    ClsTarget::Multiclass => label.index(),
                    ClsTarget::OneVsRest(positive) => usize::from(label == positive),
                });
            }
        }
    }

    let class_weights = match (cfg.inverse_frequency_weights, cfg.task) {
        (true, TaskKind::Classification(target)) => {
            let k = match target {
                ClsTarget::Multiclass => 3,
                ClsTarget::OneVsRest(_) => 2,
            };
            let mut counts = vec![0usize; k];
            for &t in &class_targets {
                counts[t] += 1;
            }
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Config(format!(
                    "inverse-frequency weighting needs every class present; class {empty} is empty"
                )));
            }
            let n = class_targets.len() as f64;
            Some(
                counts
                    .iter()
                    .map(|&c| (n / (k as f64 * c as f64)) as f32)
                    .collect(),
            )
        }
        _ => None,
    };

    Ok(PreparedData {
        images: data.samples.iter().map(|s| s.image.clone()).collect(),
        masks: data.samples.iter().map(|s| s.mask.clone()).collect(),
        class_targets,
        class_weights,
        crop,
    })
}

/// Train over `epochs` (a sub-range of the schedule), mutating the network
/// and optimizer state in place. `fit` wraps the full range; resuming from
/// a checkpoint re-enters here at the saved epoch.
pub fn fit_range(
    net: &mut Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: std::ops::Range<usize>,
    state: &mut SgdState,
) -> Result<FitReport> {
    cfg.validate()?;
    state.check_alignment(net)?;
    if epochs.end > cfg.schedule.total_epochs {
        return Err(Error::Config(format!(
            "epoch range {epochs:?} exceeds schedule of {} epochs",
            cfg.schedule.total_epochs
        )));
    }
    let prep = prepare(cfg, data, net)?;
    let (crop_h, crop_w) = prep.crop;
    let n = prep.images.len();

    net.set_mode(Mode::Training);
    let mut report = FitReport::default();

    for epoch in epochs {
        let lr = lr_at(&cfg.schedule, epoch)? as f32;
        let mut rng = crate::rng::epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let b = batch_idx.len();
            let mut x = Tensor::zeros(vec![b, 3, crop_h, crop_w]);
            let mut seg_targets: Vec<usize> = Vec::new();
            let mut batch_labels: Vec<usize> = Vec::with_capacity(b);

            for (slot, &i) in batch_idx.iter().enumerate() {
                let (img, mask) = if cfg.augment {
                    let (img, mask, _) = augment(
                        &prep.images[i],
                        prep.masks[i].as_ref(),
                        crop_h,
                        crop_w,
                        &mut rng,
                    )?;
                    (img, mask)
                } else {
                    let (h, w) = (prep.images[i].shape()[1], prep.images[i].shape()[2]);
                    if crop_h > h || crop_w > w {
                        return Err(Error::Config(format!(
                            "crop {crop_h}x{crop_w} larger than image {h}x{w}"
                        )));
                    }
                    let y0 = (h - crop_h) / 2;
                    let x0 = (w - crop_w) / 2;
                    let img = crop_image(&prep.images[i], y0, x0, crop_h, crop_w)?;
                    let mask = prep.masks[i]
                        .as_ref()
                        .map(|m| m.crop(y0, x0, crop_h, crop_w))
                        .transpose()?;
                    (img, mask)
                };
                let plane = 3 * crop_h * crop_w;
                x.data_mut()[slot * plane..(slot + 1) * plane].copy_from_slice(img.data());
                match cfg.task {
                    TaskKind::Segmentation => {
                        let mask = mask.expect("checked in prepare");
                        seg_targets.extend(mask.pixels.iter().map(|&p| usize::from(p)));
                    }
                    TaskKind::Classification(_) => batch_labels.push(prep.class_targets[i]),
                }
            }

            let mut tape = Tape::new();
            let (nodes, binding) = net.forward(&mut tape, &x)?;
            let loss = match cfg.task {
                TaskKind::Segmentation => tape.cross_entropy_spatial(nodes.output, &seg_targets)?,
                TaskKind::Classification(_) => tape.cross_entropy(
                    nodes.output,
                    &batch_labels,
                    prep.class_weights.as_deref(),
                )?,
            };
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, batch {batches}: {loss_value}"
                )));
            }
            tape.backward(loss)?;

            let momentum = cfg.momentum as f32;
            for (vname, velocity) in state.velocity.iter_mut() {
                let idx = net.params().idx_of(vname)?;
                let grad = binding
                    .id_of(idx)
                    .and_then(|id| tape.grad(id))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no gradient for {vname:?}")))?;
                sgd_step(net.param_mut(vname)?, &grad, velocity, lr, momentum)?;
            }

            loss_sum += loss_value as f64;
            batches += 1;
        }
        report.epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(report)
}

/// Train the full schedule from scratch (fresh optimizer state).
pub fn fit(net: &mut Network<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<FitReport> {
    let mut state = SgdState::new(net);
    fit_range(net, data, cfg, 0..cfg.schedule.total_epochs, &mut state)
}

/// The two-phase fine-tuning recipe: a fixed-rate phase on the first
/// dataset, then a linear-decay phase on the second, parameters carried
/// over (each phase starts its own optimizer state).
pub fn fit_two_phase(
    net: &mut Network<f32>,
    data_phase1: &Dataset,
    data_phase2: &Dataset,
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
) -> Result<(FitReport, FitReport)> {
    let r1 = fit(net, data_phase1, cfg1)?;
    let r2 = fit(net, data_phase2, cfg2)?;
    Ok((r1, r2))
}

/// Velocity tensors ride along in the weights file under this prefix.
pub const VELOCITY_PREFIX: &str = "opt.velocity.";

/// Package network + optimizer state + position into a weights file with a
/// metadata block. Restoring and continuing from an epoch boundary is
/// bit-identical to an uninterrupted run.
pub fn checkpoint_file(
    net: &Network<f32>,
    state: &SgdState,
    epoch: usize,
    phase: u32,
    seed: u64,
) -> WeightsFile {
    let mut tensors = net.named_tensors();
    for (name, v) in &state.velocity {
        tensors.push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
    }
    WeightsFile {
        tensors,
        meta: Some(CheckpointMeta {
            epoch: epoch as u32,
            phase,
            seed,
            spec: net.spec().clone(),
        }),
    }
}

/// Split a checkpoint back into network and optimizer state.
pub fn restore_checkpoint(file: &WeightsFile) -> Result<(Network<f32>, SgdState, CheckpointMeta)> {
    let meta = file
        .meta
        .clone()
        .ok_or_else(|| Error::Format("weights file has no checkpoint metadata".into()))?;
    let mut net_tensors = Vec::new();
    let mut velocity = Vec::new();
    for (name, t) in &file.tensors {
        match name.strip_prefix(VELOCITY_PREFIX) {
            Some(stripped) => velocity.push((stripped.to_string(), t.clone())),
            None => net_tensors.push((name.clone(), t.clone())),
        }
    }
    let net = Network::from_named_tensors(meta.spec.clone(), &net_tensors)?;
    let state = if velocity.is_empty() {
        SgdState::new(&net)
    } else {
        let state = SgdState { velocity };
        state.check_alignment(&net)?;
        state
    };
    Ok((net, state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Sample;
    use crate::resnet::NetworkSpec;
    use crate::rng::derive_rng;

    #[test]
    fn lr_schedule_values() {
        let fixed = ScheduleSpec::fixed(0.0016, 60);
        assert_eq!(lr_at(&fixed, 0).unwrap(), 0.0016);
        assert_eq!(lr_at(&fixed, 37).unwrap(), 0.0016);

        let linear = ScheduleSpec::linear(0.0008, 80);
        assert_eq!(lr_at(&linear, 0).unwrap(), 0.0008);
        assert_eq!(lr_at(&linear, 80).unwrap(), 0.0);

        let linear = ScheduleSpec::linear(0.01, 150);
        assert!((lr_at(&linear, 75).unwrap() - 0.005).abs() < 1e-15);

        assert!(lr_at(&linear, 151).is_err());
        assert!(ScheduleSpec::fixed(0.0, 10).validate().is_err());
    }

    #[test]
    fn lr_linear_is_non_increasing() {
        let linear = ScheduleSpec::linear(0.5, 23);
        let mut prev = f64::INFINITY;
        for e in 0..=23 {
            let lr = lr_at(&linear, e).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_step_examples() {
        // momentum 0: w = 1 - 0.5*2 = 0
        let mut w = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(2.0);
        let mut v = Tensor::scalar(0.0);
        sgd_step(&mut w, &g, &mut v, 0.5, 0.0).unwrap();
        assert_eq!(w.data(), &[0.0]);

        // lr 0 leaves parameters unchanged
        let mut w = Tensor::scalar(3.0f64);
        let mut v = Tensor::scalar(0.0);
        sgd_step(&mut w, &g, &mut v, 0.0, 0.9).unwrap();
        assert_eq!(w.data(), &[3.0]);

        // two steps at momentum 0.9 on a constant gradient, hand-unrolled:
        // v1 = g, w1 = w0 - lr*g; v2 = 0.9g + g, w2 = w1 - lr*1.9g
        let (w0, gv, lr) = (1.0f64, 0.4, 0.1);
        let mut w = Tensor::scalar(w0);
        let g = Tensor::scalar(gv);
        let mut v = Tensor::scalar(0.0);
        sgd_step(&mut w, &g, &mut v, lr, 0.9).unwrap();
        sgd_step(&mut w, &g, &mut v, lr, 0.9).unwrap();
        let want = w0 - lr * gv - lr * (0.9 * gv + gv);
        assert!((w.data()[0] - want).abs() < 1e-15);
    }

    fn coordinate_mask(h: usize, w: usize, y: usize, x: usize) -> BinaryMask {
        let mut pixels = vec![false; h * w];
        pixels[y * w + x] = true;
        BinaryMask::new(h, w, pixels).unwrap()
    }

    #[test]
    fn augment_identity_when_crop_is_full_and_no_flips() {
        let img = Tensor::from_fn(vec![3, 8, 8], |i| i as f32);
        // find a seed whose first draws produce no flips
        for s in 0..64u64 {
            let mut rng = derive_rng(s, "augment-test", 0);
            let (out, _, rec) = augment(&img, None, 8, 8, &mut rng).unwrap();
            if rec.flip == FlipKind::Identity {
                assert_eq!(rec.crop_y, 0);
                assert_eq!(rec.crop_x, 0);
                assert_eq!(out.data(), img.data());
                return;
            }
        }
        panic!("no identity draw in 64 seeds");
    }

    #[test]
    fn mask_transform_tracks_image_transform() {
        // image encodes coordinates; the mask marks one pixel; after
        // augmentation the marked pixel must carry the original coordinate
        let (h, w) = (10usize, 12usize);
        let img = Tensor::from_fn(vec![3, h, w], |i| (i % (h * w)) as f32);
        for trial in 0..20u64 {
            let mut rng = derive_rng(trial, "augment-couple", 0);
            let (src_y, src_x) = (3usize, 7usize);
            let mask = coordinate_mask(h, w, src_y, src_x);
            let (out_img, out_mask, _) = augment(&img, Some(&mask), 6, 5, &mut rng).unwrap();
            let out_mask = out_mask.unwrap();
            if out_mask.count_true() == 0 {
                continue; // pixel cropped away; transform still coupled
            }
            let pos = out_mask.pixels.iter().position(|&p| p).unwrap();
            let coded = out_img.data()[pos];
            assert_eq!(coded, (src_y * w + src_x) as f32);
        }
    }

    #[test]
    fn fixed_seed_reproduces_augmentation_sequence() {
        let img = Tensor::from_fn(vec![3, 9, 9], |i| (i as f32).cos());
        let draws = |seed| {
            let mut rng = derive_rng(seed, "augment-seq", 0);
            (0..5)
                .map(|_| augment(&img, None, 5, 5, &mut rng).unwrap().2)
                .collect::<Vec<_>>()
        };
        assert_eq!(draws(3), draws(3));
        assert_ne!(draws(3), draws(4));
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let img = Tensor::zeros(vec![3, 4, 4]);
        let mut rng = derive_rng(0, "augment-err", 0);
        assert!(augment(&img, None, 5, 4, &mut rng).is_err());
    }

    fn tiny_cls_dataset(n: usize, size: usize) -> Dataset {
        // two linearly separable color classes: dark vs light
        let mut samples = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 {
                ClassLabel::Melanoma
            } else {
                ClassLabel::Nevus
            };
            let mut rng = derive_rng(1000 + i as u64, "toy-cls", 0);
            let base: f32 = if i % 2 == 0 { 0.2 } else { 0.8 };
            let image = Tensor::from_fn(vec![3, size, size], |_| {
                (base + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0)
            });
            samples.push(Sample {
                id: format!("toy{i}"),
                image,
                label: Some(label),
                mask: None,
            });
        }
        Dataset { samples }
    }

    fn toy_cls_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            task: TaskKind::Classification(ClsTarget::OneVsRest(ClassLabel::Melanoma)),
            batch_size: 4,
            schedule: ScheduleSpec::linear(0.05, epochs),
            momentum: 0.9,
            seed,
            augment: true,
            crop: CropRule::None,
            inverse_frequency_weights: false,
        }
    }

    fn toy_net(seed: u64) -> Network<f32> {
        let spec = NetworkSpec {
            name: "toy".into(),
            stem: crate::resnet::StemSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
            },
            stages: vec![crate::resnet::StageSpec {
                blocks: 1,
                width: 4,
                stride: 1,
            }],
            head: HeadSpec::Classifier { classes: 2 },
        };
        Network::build(spec, seed).unwrap()
    }

    #[test]
    fn separable_toy_problem_learns() {
        let data = tiny_cls_dataset(16, 12);
        let mut net = toy_net(5);
        let report = fit(&mut net, &data, &toy_cls_config(8, 42)).unwrap();
        assert_eq!(report.epoch_losses.len(), 8);
        assert!(
            report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap(),
            "{:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn zero_epoch_range_leaves_network_unchanged() {
        let data = tiny_cls_dataset(8, 12);
        let mut net = toy_net(6);
        let before = net.named_tensors();
        let mut state = SgdState::new(&net);
        let report = fit_range(&mut net, &data, &toy_cls_config(4, 1), 0..0, &mut state).unwrap();
        assert!(report.epoch_losses.is_empty());
        for ((n1, t1), (n2, t2)) in net.named_tensors().iter().zip(&before) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn fixed_seed_training_is_bit_deterministic() {
        let data = tiny_cls_dataset(10, 12);
        let run = || {
            let mut net = toy_net(7);
            fit(&mut net, &data, &toy_cls_config(3, 13)).unwrap();
            net.named_tensors()
        };
        let a = run();
        let b = run();
        for ((n1, t1), (n2, t2)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} differs between runs");
        }
    }

    #[test]
    fn batch_equal_to_dataset_size_steps_once_per_epoch() {
        let data = tiny_cls_dataset(6, 12);
        let mut cfg = toy_cls_config(4, 3);
        cfg.batch_size = 6;
        let mut net = toy_net(8);
        let report = fit(&mut net, &data, &cfg).unwrap();
        // one batch per epoch: per-epoch means are single-batch losses
        assert_eq!(report.epoch_losses.len(), 4);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut net = toy_net(9);
        let empty = Dataset::default();
        assert!(fit(&mut net, &empty, &toy_cls_config(1, 0)).is_err());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run_bitwise() {
        let data = tiny_cls_dataset(12, 12);
        let cfg = toy_cls_config(6, 21);

        // uninterrupted
        let mut net_a = toy_net(10);
        let mut state_a = SgdState::new(&net_a);
        fit_range(&mut net_a, &data, &cfg, 0..6, &mut state_a).unwrap();

        // interrupted at epoch 3, checkpointed through the file format
        let mut net_b = toy_net(10);
        let mut state_b = SgdState::new(&net_b);
        fit_range(&mut net_b, &data, &cfg, 0..3, &mut state_b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.lsnw");
        crate::data::weights::save_weights(
            &path,
            &checkpoint_file(&net_b, &state_b, 3, 1, cfg.seed),
        )
        .unwrap();
        let loaded = crate::data::weights::load_weights(&path).unwrap();
        let (mut net_c, mut state_c, meta) = restore_checkpoint(&loaded).unwrap();
        assert_eq!(meta.epoch, 3);
        fit_range(&mut net_c, &data, &cfg, meta.epoch as usize..6, &mut state_c).unwrap();

        for ((n1, t1), (n2, t2)) in net_a.named_tensors().iter().zip(net_c.named_tensors().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} differs after resume");
        }
    }

    #[test]
    fn two_phase_with_empty_second_phase_equals_single_fit() {
        let data = tiny_cls_dataset(8, 12);
        let cfg1 = toy_cls_config(3, 2);

        let mut direct = toy_net(11);
        fit(&mut direct, &data, &cfg1).unwrap();

        // a second phase of zero epochs is expressed as an empty range
        let mut twop = toy_net(11);
        fit(&mut twop, &data, &cfg1).unwrap();
        let mut state = SgdState::new(&twop);
        let cfg2 = toy_cls_config(5, 3);
        fit_range(&mut twop, &data, &cfg2, 0..0, &mut state).unwrap();

        for ((n1, t1), (n2, t2)) in direct.named_tensors().iter().zip(twop.named_tensors().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let data = tiny_cls_dataset(6, 12);
        let mut cfg = toy_cls_config(4, 5);
        cfg.schedule = ScheduleSpec::fixed(1e18, 4); // guaranteed divergence
        let mut net = toy_net(12);
        let err = fit(&mut net, &data, &cfg);
        match err {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected NonFinite abort, got {other:?}"),
        }
    }
}
