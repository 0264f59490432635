//! Segmentation pipeline: long-side preprocessing, score-mask prediction
//! at input resolution, multi-scale flip test-time fusion, binarization.

use crate::error::{Error, Result};
use crate::ops::flip::{flip_plane, flip_tensor, FlipKind};
use crate::ops::resize::bilinear_resize_forward;
use crate::ops::softmax_channels_forward;
use crate::resnet::{HeadSpec, Network};
use crate::tensor::Tensor;

/// Per-pixel boolean lesion mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} wants {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn flip(&self, kind: FlipKind) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            pixels: flip_plane(&self.pixels, self.height, self.width, kind),
        }
    }

    /// Crop `[y, y+h) x [x, x+w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Config(format!(
                "crop {h}x{w}+{y}+{x} exceeds mask {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for row in y..y + h {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + w]);
        }
        BinaryMask::new(h, w, pixels)
    }
}

/// Per-pixel lesion probability in `[0, 1]` at the resolution of the image
/// it was predicted for.
#[derive(Debug, Clone)]
pub struct ScoreMask {
    scores: Tensor<f32>,
}

impl ScoreMask {
    pub fn new(scores: Tensor<f32>) -> Result<Self> {
        if scores.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "score mask must be rank 2, got {:?}",
                scores.shape()
            )));
        }
        if scores
            .data()
            .iter()
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Config(
                "score mask values must lie in [0, 1]".into(),
            ));
        }
        Ok(ScoreMask { scores })
    }

    pub fn scores(&self) -> &Tensor<f32> {
        &self.scores
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// Test-time augmentation: every scale is crossed with the full flip
/// four-group and the probability maps are averaged. The scale list is
/// canonicalized (sorted) so fusion is invariant under permutation.
#[derive(Debug, Clone)]
pub struct TtaConfig {
    pub scales: Vec<f64>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            scales: vec![0.8, 1.0, 1.2],
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("TTA needs at least one scale".into()));
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Config(format!(
                "TTA scales must be positive finite, got {:?}",
                self.scales
            )));
        }
        Ok(())
    }

    fn sorted_scales(&self) -> Vec<f64> {
        let mut s = self.scales.clone();
        s.sort_by(f64::total_cmp);
        s
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

fn resize_image(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    let batched = image.clone().reshape(vec![1, c, h, w])?;
    bilinear_resize_forward(&batched, out_h, out_w)?.reshape(vec![c, out_h, out_w])
}

/// Downsample so the longer axis equals `target_long_side`, preserving
/// aspect ratio (rounded to nearest, at least 1). Images already at or
/// below the target pass through unchanged.
pub fn preprocess_seg(image: &Tensor<f32>, target_long_side: usize) -> Result<Tensor<f32>> {
    if target_long_side == 0 {
        return Err(Error::Config("target long side must be positive".into()));
    }
    let (_, h, w) = image_dims(image)?;
    let long = h.max(w);
    if long <= target_long_side {
        return Ok(image.clone());
    }
    let scale = target_long_side as f64 / long as f64;
    let round_side = |side: usize| ((side as f64 * scale).round() as usize).max(1);
    let (out_h, out_w) = if h >= w {
        (target_long_side, round_side(w))
    } else {
        (round_side(h), target_long_side)
    };
    resize_image(image, out_h, out_w)
}

fn require_seg_head(net: &Network<f32>) -> Result<()> {
    match net.spec().head {
        HeadSpec::Segmentation { score_channels: 2 } => Ok(()),
        HeadSpec::Segmentation { score_channels } => Err(Error::Config(format!(
            "segmentation prediction needs a 2-channel score head, got {score_channels}"
        ))),
        HeadSpec::Classifier { .. } => Err(Error::Config(
            "network has a classifier head, not a segmentation head".into(),
        )),
    }
}

/// Forward pass plus per-pixel two-class softmax; returns the lesion
/// probability plane at the resolution of the given image.
pub fn predict_mask(net: &Network<f32>, image: &Tensor<f32>) -> Result<ScoreMask> {
    require_seg_head(net)?;
    let (c, h, w) = image_dims(image)?;
    let batched = image.clone().reshape(vec![1, c, h, w])?;
    let logits = net.infer(&batched)?;
    let probs = softmax_channels_forward(&logits)?;
    // channel 1 is the lesion class
    let plane = probs.data()[h * w..2 * h * w].to_vec();
    ScoreMask::new(Tensor::new(vec![h, w], plane)?)
}

/// Multi-scale flip fusion: for every scale, resize; for each of the four
/// flips, predict on the flipped image and flip the mask back; resize every
/// mask to the input resolution and average.
pub fn tta_fuse(net: &Network<f32>, image: &Tensor<f32>, cfg: &TtaConfig) -> Result<ScoreMask> {
    cfg.validate()?;
    require_seg_head(net)?;
    let (_, h, w) = image_dims(image)?;
    let mut acc = vec![0.0f64; h * w];
    let mut count = 0usize;
    for scale in cfg.sorted_scales() {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let scaled = resize_image(image, sh, sw)?;
        for kind in FlipKind::GROUP {
            let flipped = flip_tensor(&scaled, kind);
            let mask = predict_mask(net, &flipped)?;
            let realigned = flip_tensor(mask.scores(), kind.inverse());
            let restored = {
                let batched = realigned.reshape(vec![1, 1, sh, sw])?;
                bilinear_resize_forward(&batched, h, w)?
            };
            for (a, &v) in acc.iter_mut().zip(restored.data()) {
                *a += v as f64;
            }
            count += 1;
        }
    }
    let inv = 1.0 / count as f64;
    let fused: Vec<f32> = acc
        .iter()
        .map(|&v| ((v * inv) as f32).clamp(0.0, 1.0))
        .collect();
    ScoreMask::new(Tensor::new(vec![h, w], fused)?)
}

/// Threshold a score mask: lesion wherever `score >= threshold`.
pub fn binarize(mask: &ScoreMask, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarization threshold must lie in (0, 1), got {threshold}"
        )));
    }
    BinaryMask::new(
        mask.height(),
        mask.width(),
        mask.scores()
            .data()
            .iter()
            .map(|&s| s as f64 >= threshold)
            .collect(),
    )
}

/// End-to-end single-image prediction options.
#[derive(Debug, Clone)]
pub struct SegPredictOptions {
    pub target_long_side: usize,
    pub tta: Option<TtaConfig>,
}

impl Default for SegPredictOptions {
    fn default() -> Self {
        SegPredictOptions {
            target_long_side: 500,
            tta: None,
        }
    }
}

/// Preprocess, predict (optionally with TTA), and restore the score mask
/// to the original image resolution.
pub fn segment_image(
    net: &Network<f32>,
    image: &Tensor<f32>,
    opts: &SegPredictOptions,
) -> Result<ScoreMask> {
    let (_, h, w) = image_dims(image)?;
    let pre = preprocess_seg(image, opts.target_long_side)?;
    let mask = match &opts.tta {
        Some(cfg) => tta_fuse(net, &pre, cfg)?,
        None => predict_mask(net, &pre)?,
    };
    if (mask.height(), mask.width()) == (h, w) {
        return Ok(mask);
    }
    let restored = {
        let batched = mask
            .scores()
            .clone()
            .reshape(vec![1, 1, mask.height(), mask.width()])?;
        bilinear_resize_forward(&batched, h, w)?.reshape(vec![h, w])?
    };
    ScoreMask::new(restored.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::NetworkSpec;

    fn seg_net(seed: u64) -> Network<f32> {
        let spec =
            NetworkSpec::preset("tiny-8", HeadSpec::Segmentation { score_channels: 2 }).unwrap();
        Network::build(spec, seed).unwrap()
    }

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(seed, "seg-test", 0);
        Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn preprocess_downsamples_longer_axis_to_target() {
        let img = rand_image(3, 1000, 600, 1);
        let out = preprocess_seg(&img, 500).unwrap();
        assert_eq!(out.shape(), &[3, 500, 300]);
    }

    #[test]
    fn preprocess_leaves_small_images_unchanged() {
        let img = rand_image(3, 300, 200, 2);
        let out = preprocess_seg(&img, 500).unwrap();
        assert_eq!(out.shape(), &[3, 300, 200]);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn preprocess_rounds_aspect_ratio() {
        // 750x500 at target 500: short side 500 * (500/750) = 333.3 -> 333
        let img = rand_image(3, 750, 500, 3);
        let out = preprocess_seg(&img, 500).unwrap();
        assert_eq!(out.shape(), &[3, 500, 333]);

        let wide = rand_image(3, 500, 750, 4);
        let out = preprocess_seg(&wide, 500).unwrap();
        assert_eq!(out.shape(), &[3, 333, 500]);
    }

    #[test]
    fn constant_head_yields_uniform_mask() {
        let mut net = seg_net(5);
        // zero the head: logits become the head biases everywhere
        for name in ["head.score.weight", "head.up.weight"] {
            let t = net.param_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        *net.param_mut("head.up.bias").unwrap() =
            Tensor::new(vec![2], vec![0.5f32, 1.5]).unwrap();
        let img = rand_image(3, 16, 16, 6);
        let mask = predict_mask(&net, &img).unwrap();
        // softmax([0.5, 1.5]) lesion probability
        let want = (1.0f64 / (1.0 + (-1.0f64).exp())) as f32;
        for &v in mask.scores().data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_resolution_tracks_input_resolution() {
        let net = seg_net(7);
        for (h, w) in [(16, 16), (19, 25), (32, 15)] {
            let img = rand_image(3, h, w, (h * w) as u64);
            let mask = predict_mask(&net, &img).unwrap();
            assert_eq!((mask.height(), mask.width()), (h, w));
        }
    }

    #[test]
    fn predict_matches_manual_forward_softmax_composition() {
        let net = seg_net(11);
        let img = rand_image(3, 16, 16, 13);
        let mask = predict_mask(&net, &img).unwrap();

        let logits = net
            .infer(&img.clone().reshape(vec![1, 3, 16, 16]).unwrap())
            .unwrap();
        let probs = softmax_channels_forward(&logits).unwrap();
        let want = &probs.data()[16 * 16..2 * 16 * 16];
        assert_eq!(mask.scores().data(), want);
    }

    #[test]
    fn classifier_network_rejected() {
        let spec = NetworkSpec::preset("tiny-8", HeadSpec::Classifier { classes: 3 }).unwrap();
        let net: Network<f32> = Network::build(spec, 1).unwrap();
        let img = rand_image(3, 16, 16, 1);
        assert!(matches!(
            predict_mask(&net, &img),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_scale_fusion_of_constant_net_is_uniform() {
        let mut net = seg_net(5);
        for name in ["head.score.weight", "head.up.weight"] {
            let t = net.param_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        *net.param_mut("head.up.bias").unwrap() =
            Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap();
        let img = rand_image(3, 16, 16, 21);
        let plain = predict_mask(&net, &img).unwrap();
        let fused = tta_fuse(
            &net,
            &img,
            &TtaConfig {
                scales: vec![1.0],
            },
        )
        .unwrap();
        for (a, b) in fused.scores().data().iter().zip(plain.scores().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_is_invariant_under_scale_permutation() {
        let net = seg_net(17);
        let img = rand_image(3, 20, 20, 23);
        let a = tta_fuse(
            &net,
            &img,
            &TtaConfig {
                scales: vec![0.8, 1.2, 1.0],
            },
        )
        .unwrap();
        let b = tta_fuse(
            &net,
            &img,
            &TtaConfig {
                scales: vec![1.2, 1.0, 0.8],
            },
        )
        .unwrap();
        assert_eq!(a.scores().data(), b.scores().data());
    }

    #[test]
    fn fusion_stays_within_per_pixel_min_max_envelope() {
        let net = seg_net(29);
        let img = rand_image(3, 18, 18, 31);
        let cfg = TtaConfig {
            scales: vec![0.9, 1.0],
        };
        let fused = tta_fuse(&net, &img, &cfg).unwrap();
        // recompute the individual realigned masks
        let (h, w) = (18usize, 18usize);
        let mut mins = vec![f32::INFINITY; h * w];
        let mut maxs = vec![f32::NEG_INFINITY; h * w];
        for scale in [0.9f64, 1.0] {
            let sh = ((h as f64 * scale).round() as usize).max(1);
            let sw = ((w as f64 * scale).round() as usize).max(1);
            let scaled = resize_image(&img, sh, sw).unwrap();
            for kind in FlipKind::GROUP {
                let flipped = flip_tensor(&scaled, kind);
                let mask = predict_mask(&net, &flipped).unwrap();
                let realigned = flip_tensor(mask.scores(), kind);
                let restored = bilinear_resize_forward(
                    &realigned.reshape(vec![1, 1, sh, sw]).unwrap(),
                    h,
                    w,
                )
                .unwrap();
                for (i, &v) in restored.data().iter().enumerate() {
                    mins[i] = mins[i].min(v);
                    maxs[i] = maxs[i].max(v);
                }
            }
        }
        for (i, &v) in fused.scores().data().iter().enumerate() {
            assert!(v >= mins[i] - 1e-6 && v <= maxs[i] + 1e-6);
        }
    }

    #[test]
    fn binarize_thresholds_inclusively() {
        let mask = ScoreMask::new(
            Tensor::new(vec![1, 3], vec![0.4f32, 0.5, 0.6]).unwrap(),
        )
        .unwrap();
        let bin = binarize(&mask, 0.5).unwrap();
        assert_eq!(bin.pixels, vec![false, true, true]);

        let uniform_high = ScoreMask::new(Tensor::full(vec![2, 2], 0.7f32)).unwrap();
        assert_eq!(binarize(&uniform_high, 0.5).unwrap().count_true(), 4);
        let uniform_low = ScoreMask::new(Tensor::full(vec![2, 2], 0.3f32)).unwrap();
        assert_eq!(binarize(&uniform_low, 0.5).unwrap().count_true(), 0);

        assert!(binarize(&uniform_low, 0.0).is_err());
        assert!(binarize(&uniform_low, 1.0).is_err());
    }

    #[test]
    fn segment_image_restores_original_resolution() {
        let net = seg_net(37);
        let img = rand_image(3, 40, 64, 41);
        let opts = SegPredictOptions {
            target_long_side: 32,
            tta: None,
        };
        let mask = segment_image(&net, &img, &opts).unwrap();
        assert_eq!((mask.height(), mask.width()), (40, 64));
    }
}
