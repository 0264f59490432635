//! Desk-scale training calibration: runs the segmentation and
//! classification recipes on synthetic data and prints the metrics.

use std::time::Instant;

use lesionet_core::cls::{predict_multiclass, ClassLabel};
use lesionet_core::data::dataset::Dataset;
use lesionet_core::data::synth::{generate, SyntheticConfig};
use lesionet_core::metrics::{evaluate_cls, evaluate_seg};
use lesionet_core::resnet::{HeadSpec, Network, NetworkSpec};
use lesionet_core::seg::{binarize, predict_mask};
use lesionet_core::train::{
    fit, fit_two_phase, ClsTarget, CropRule, ScheduleSpec, TaskKind, TrainConfig,
};

fn main() {
    seg_run();
    cls_run();
}

fn seg_run() {
    let t0 = Instant::now();
    let cfg = SyntheticConfig::new(240, 64, 1234);
    let samples = generate(&cfg).unwrap();
    let ds = Dataset::from_synthetic(&samples);
    let (train, val) = ds.split(1.0 / 6.0, 7).unwrap();
    println!("[seg] synth+split {}/{} in {:?}", train.len(), val.len(), t0.elapsed());

    let spec = NetworkSpec::preset("tiny-8", HeadSpec::Segmentation { score_channels: 2 }).unwrap();
    let mut net: Network<f32> = Network::build(spec, 99).unwrap();

    let base = TrainConfig {
        task: TaskKind::Segmentation,
        batch_size: 10,
        schedule: ScheduleSpec::fixed(0.0016, 10),
        momentum: 0.9,
        seed: 42,
        augment: true,
        crop: CropRule::Fraction(7.0 / 8.0),
        inverse_frequency_weights: false,
    };
    let cfg2 = TrainConfig {
        schedule: ScheduleSpec::linear(0.0008, 10),
        seed: 43,
        ..base.clone()
    };
    let t1 = Instant::now();
    let (r1, r2) = fit_two_phase(&mut net, &train, &train, &base, &cfg2).unwrap();
    println!("[seg] trained in {:?}", t1.elapsed());
    println!("[seg] phase1 losses: {:?}", r1.epoch_losses);
    println!("[seg] phase2 losses: {:?}", r2.epoch_losses);

    let t2 = Instant::now();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for s in &val.samples {
        let mask = predict_mask(&net, &s.image).unwrap();
        preds.push((s.id.clone(), binarize(&mask, 0.5).unwrap()));
        truths.push((s.id.clone(), s.mask.clone().unwrap()));
    }
    let result = evaluate_seg(&preds, &truths).unwrap();
    println!(
        "[seg] eval in {:?}; mean Jaccard = {:.4} ({}%)",
        t2.elapsed(),
        result.mean_jaccard(),
        result.mean_jaccard_percent()
    );
    let mut worst: Vec<(String, f64)> = result.per_image.clone();
    worst.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    println!("[seg] worst 5: {:?}", &worst[..5.min(worst.len())]);
    println!("[seg] total {:?}", t0.elapsed());
}

fn cls_run() {
    let t0 = Instant::now();
    let cfg = SyntheticConfig::new(300, 64, 4321);
    let samples = generate(&cfg).unwrap();
    let ds = Dataset::from_synthetic(&samples);
    let target_side = 48usize;
    let ds = ds
        .map_images(|img| lesionet_core::cls::resize_short_side(img, target_side))
        .unwrap();
    let (train, val) = ds.split(0.2, 9).unwrap();
    println!("[cls] synth+split {}/{} in {:?}", train.len(), val.len(), t0.elapsed());

    let spec = NetworkSpec::preset("tiny-8", HeadSpec::Classifier { classes: 3 }).unwrap();
    let mut net: Network<f32> = Network::build(spec, 77).unwrap();
    let cfg = TrainConfig {
        task: TaskKind::Classification(ClsTarget::Multiclass),
        batch_size: 30,
        schedule: ScheduleSpec::linear(0.01, 30),
        momentum: 0.9,
        seed: 11,
        augment: true,
        crop: CropRule::Exact(target_side, target_side),
        inverse_frequency_weights: false,
    };
    let t1 = Instant::now();
    let report = fit(&mut net, &train, &cfg).unwrap();
    println!("[cls] multiclass trained in {:?}", t1.elapsed());
    println!(
        "[cls] losses: first {:.4} last {:.4}",
        report.epoch_losses.first().unwrap(),
        report.epoch_losses.last().unwrap()
    );

    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for s in &val.samples {
        let img = lesionet_core::cls::preprocess_cls(&s.image, target_side).unwrap();
        preds.push((s.id.clone(), predict_multiclass(&net, &img).unwrap()));
        truths.push((s.id.clone(), s.label.unwrap()));
    }
    let r = evaluate_cls(&preds, &truths).unwrap();
    println!(
        "[cls] melanoma AUC {:.4}, SK AUC {:.4}, avg {:.4}",
        r.melanoma_auc(),
        r.sk_auc(),
        r.average_auc()
    );
    let _ = ClassLabel::ALL;
    println!("[cls] total {:?}", t0.elapsed());
}
