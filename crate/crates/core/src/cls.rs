//! Classification pipeline: short-side preprocessing and the three scoring
//! strategies (3-way multiclass, paired one-vs-rest binaries, and their
//! ensemble). Class order is fixed everywhere: melanoma, seborrheic
//! keratosis, nevus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::resize::bilinear_resize_forward;
use crate::ops::softmax_rows_forward;
use crate::resnet::{HeadSpec, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Melanoma,
    SeborrheicKeratosis,
    Nevus,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Melanoma,
        ClassLabel::SeborrheicKeratosis,
        ClassLabel::Nevus,
    ];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Melanoma => 0,
            ClassLabel::SeborrheicKeratosis => 1,
            ClassLabel::Nevus => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Melanoma => "melanoma",
            ClassLabel::SeborrheicKeratosis => "seborrheic_keratosis",
            ClassLabel::Nevus => "nevus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "melanoma" => Ok(ClassLabel::Melanoma),
            "seborrheic_keratosis" => Ok(ClassLabel::SeborrheicKeratosis),
            "nevus" => Ok(ClassLabel::Nevus),
            other => Err(Error::Format(format!(
                "unknown class label {other:?} (expected melanoma, seborrheic_keratosis, or nevus)"
            ))),
        }
    }

    /// Melanoma and nevus derive from melanocytes; SK does not.
    pub fn is_melanocytic(self) -> bool {
        !matches!(self, ClassLabel::SeborrheicKeratosis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Multiclass,
    BinaryPair,
    Ensemble,
}

/// Per-class probabilities from one of the three strategies.
#[derive(Debug, Clone, Copy)]
pub struct ClassScores {
    pub p_melanoma: f64,
    pub p_sk: f64,
    pub p_nevus: f64,
    pub strategy: Strategy,
}

impl ClassScores {
    pub fn get(&self, label: ClassLabel) -> f64 {
        match label {
            ClassLabel::Melanoma => self.p_melanoma,
            ClassLabel::SeborrheicKeratosis => self.p_sk,
            ClassLabel::Nevus => self.p_nevus,
        }
    }
}

/// The two one-vs-rest networks: melanoma-vs-rest and SK-vs-rest, each with
/// a 2-way head whose index 1 is the positive class.
pub struct BinaryPair {
    melanoma: Network<f32>,
    sk: Network<f32>,
}

impl BinaryPair {
    pub fn new(melanoma: Network<f32>, sk: Network<f32>) -> Result<Self> {
        for (name, net) in [("melanoma", &melanoma), ("sk", &sk)] {
            if net.spec().head != (HeadSpec::Classifier { classes: 2 }) {
                return Err(Error::Config(format!(
                    "{name}-vs-rest network must have a 2-way classifier head"
                )));
            }
        }
        Ok(BinaryPair { melanoma, sk })
    }

    pub fn melanoma_net(&self) -> &Network<f32> {
        &self.melanoma
    }

    pub fn sk_net(&self) -> &Network<f32> {
        &self.sk
    }
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected a C x H x W image, got shape {:?}",
            image.shape()
        ))),
    }
}

/// Resize (up or down) so the shorter axis equals `target`, preserving
/// aspect ratio.
pub fn resize_short_side(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    if target == 0 {
        return Err(Error::Config("target short side must be positive".into()));
    }
    let (c, h, w) = image_dims(image)?;
    let short = h.min(w);
    if short == target {
        return Ok(image.clone());
    }
    let scale = target as f64 / short as f64;
    let scaled = |side: usize| (((side as f64 * scale).round() as usize).max(target),);
    let (out_h, out_w) = if h <= w {
        (target, scaled(w).0)
    } else {
        (scaled(h).0, target)
    };
    let batched = image.clone().reshape(vec![1, c, h, w])?;
    bilinear_resize_forward(&batched, out_h, out_w)?.reshape(vec![c, out_h, out_w])
}

/// Short-side resize followed by a center crop to `target x target`.
pub fn preprocess_cls(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let resized = resize_short_side(image, target)?;
    let (c, h, w) = image_dims(&resized)?;
    if (h, w) == (target, target) {
        return Ok(resized);
    }
    let y0 = (h - target) / 2;
    let x0 = (w - target) / 2;
    let mut data = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        for y in y0..y0 + target {
            let row = &resized.data()[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + target];
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![c, target, target], data)
}

fn softmax_of(net: &Network<f32>, image: &Tensor<f32>, classes: usize) -> Result<Vec<f64>> {
    let (c, h, w) = image_dims(image)?;
    let logits = net.infer(&image.clone().reshape(vec![1, c, h, w])?)?;
    if logits.shape() != [1, classes] {
        return Err(Error::Shape(format!(
            "expected [1, {classes}] logits, got {:?}",
            logits.shape()
        )));
    }
    let probs = softmax_rows_forward(&logits)?;
    Ok(probs.data().iter().map(|&p| p as f64).collect())
}

fn require_classes(net: &Network<f32>, k: usize, what: &str) -> Result<()> {
    if net.spec().head != (HeadSpec::Classifier { classes: k }) {
        return Err(Error::Config(format!(
            "{what} needs a {k}-way classifier head, network has {:?}",
            net.spec().head
        )));
    }
    Ok(())
}

/// Softmax over (melanoma, SK, nevus) logits, in that fixed order.
pub fn predict_multiclass(net: &Network<f32>, image: &Tensor<f32>) -> Result<ClassScores> {
    require_classes(net, 3, "multiclass prediction")?;
    let p = softmax_of(net, image, 3)?;
    Ok(ClassScores {
        p_melanoma: p[0],
        p_sk: p[1],
        p_nevus: p[2],
        strategy: Strategy::Multiclass,
    })
}

/// Positive-class probabilities from the two one-vs-rest networks; the
/// nevus score is completed as `(1 - p_mel) * (1 - p_sk)`.
pub fn predict_binary(pair: &BinaryPair, image: &Tensor<f32>) -> Result<ClassScores> {
    let mel = softmax_of(&pair.melanoma, image, 2)?[1];
    let sk = softmax_of(&pair.sk, image, 2)?[1];
    Ok(ClassScores {
        p_melanoma: mel,
        p_sk: sk,
        p_nevus: (1.0 - mel) * (1.0 - sk),
        strategy: Strategy::BinaryPair,
    })
}

/// Per-class arithmetic mean of the multiclass and binary-pair scores.
pub fn predict_ensemble(
    net3: &Network<f32>,
    pair: &BinaryPair,
    image: &Tensor<f32>,
) -> Result<ClassScores> {
    let a = predict_multiclass(net3, image)?;
    let b = predict_binary(pair, image)?;
    Ok(ensemble_scores(&a, &b))
}

/// Combine two strategies' scores by per-class arithmetic mean.
pub fn ensemble_scores(multiclass: &ClassScores, binary: &ClassScores) -> ClassScores {
    ClassScores {
        p_melanoma: 0.5 * (multiclass.p_melanoma + binary.p_melanoma),
        p_sk: 0.5 * (multiclass.p_sk + binary.p_sk),
        p_nevus: 0.5 * (multiclass.p_nevus + binary.p_nevus),
        strategy: Strategy::Ensemble,
    }
}
