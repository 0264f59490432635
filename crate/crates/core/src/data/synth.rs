//! Synthetic dermoscopy-style dataset generator: skin-tone backgrounds with
//! one elliptical lesion per image, class-conditioned texture recipes, and
//! optional nuisances (hair strokes, color jitter, fuzzy borders). The mask
//! is exactly the generator's ellipse region; everything is deterministic
//! from the seed, with a per-image stream keyed by (seed, index).
//!
//! Class recipes: melanoma lesions are dark with an irregular, highly
//! eccentric border band; seborrheic keratosis is mid-tone tan with a
//! stippled texture; nevus is a uniform round brown blob.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cls::ClassLabel;
use crate::data::manifest::write_manifest;
use crate::data::pnm::{save_image, save_mask, ImageBuffer};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::seg::BinaryMask;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Fractions of (melanoma, seborrheic keratosis, nevus); must sum to 1.
    pub class_mix: [f64; 3],
    pub seed: u64,
    pub hair: bool,
    pub color_jitter: bool,
    pub fuzzy_borders: bool,
}

impl SyntheticConfig {
    pub fn new(count: usize, image_size: usize, seed: u64) -> Self {
        SyntheticConfig {
            count,
            image_size,
            class_mix: [1.0 / 3.0; 3],
            seed,
            hair: true,
            color_jitter: true,
            fuzzy_borders: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "synthetic image size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.class_mix.iter().any(|&m| m < 0.0) {
            return Err(Error::Config("class mix fractions must be non-negative".into()));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class mix must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct EllipseParams {
    pub center_y: f64,
    pub center_x: f64,
    pub r_major: f64,
    pub r_minor: f64,
    pub angle: f64,
}

impl EllipseParams {
    /// Normalized elliptical distance of a pixel center; `<= 1` is inside.
    pub fn distance(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 + 0.5 - self.center_y;
        let dx = x as f64 + 0.5 - self.center_x;
        let (sin, cos) = self.angle.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        ((u / self.r_major).powi(2) + (v / self.r_minor).powi(2)).sqrt()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.distance(y, x) <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub label: ClassLabel,
    pub image: ImageBuffer,
    pub mask: BinaryMask,
    pub lesion: EllipseParams,
}

/// Deterministic largest-remainder allocation of `count` items to the mix;
/// ties broken by class order.
pub fn class_counts(mix: &[f64; 3], count: usize) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut fracs = [0.0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = mix[i] * count as f64;
        counts[i] = exact.floor() as usize;
        fracs[i] = exact - exact.floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for &i in order.iter().take(count - assigned) {
        counts[i] += 1;
    }
    counts
}

fn jitter(rng: &mut ChaCha8Rng, enabled: bool, amount: f64) -> f64 {
    if enabled {
        rng.gen_range(-amount..amount)
    } else {
        0.0
    }
}

struct Painter {
    size: usize,
    /// Planar RGB in [0, 1].
    planes: Vec<f64>,
}

impl Painter {
    fn new(size: usize) -> Self {
        Painter {
            size,
            planes: vec![0.0; 3 * size * size],
        }
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let hw = self.size * self.size;
        for (c, v) in rgb.iter().enumerate() {
            self.planes[c * hw + y * self.size + x] = *v;
        }
    }

    fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.size * self.size;
        [0, 1, 2].map(|c| self.planes[c * hw + y * self.size + x])
    }

    fn blend(&mut self, y: usize, x: usize, rgb: [f64; 3], alpha: f64) {
        let cur = self.get(y, x);
        self.set(
            y,
            x,
            [0, 1, 2].map(|c| alpha * rgb[c] + (1.0 - alpha) * cur[c]),
        );
    }

    fn quantize(&self) -> ImageBuffer {
        let s = self.size;
        let hw = s * s;
        let mut samples = vec![0u8; hw * 3];
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    let v = self.planes[c * hw + y * s + x].clamp(0.0, 1.0);
                    samples[(y * s + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        ImageBuffer::new(s, s, 3, samples).expect("consistent dims")
    }
}

fn generate_one(cfg: &SyntheticConfig, index: usize, label: ClassLabel) -> SynthSample {
    let s = cfg.image_size;
    let sf = s as f64;
    let mut rng = derive_rng(cfg.seed, "synth", index as u64);

    // Background: skin tone with optional jitter, vertical shading, grain.
    let bg_base = [
        0.80 + jitter(&mut rng, cfg.color_jitter, 0.07),
        0.62 + jitter(&mut rng, cfg.color_jitter, 0.06),
        0.52 + jitter(&mut rng, cfg.color_jitter, 0.06),
    ];
    let grad_amp: f64 = rng.gen_range(-0.04..0.04);

    // Lesion geometry.
    let (major_lo, major_hi, ratio_lo, ratio_hi) = match label {
        ClassLabel::Melanoma => (0.20, 0.30, 0.45, 0.68),
        ClassLabel::SeborrheicKeratosis => (0.18, 0.28, 0.62, 0.85),
        ClassLabel::Nevus => (0.16, 0.26, 0.86, 1.0),
    };
    let r_major = sf * rng.gen_range(major_lo..major_hi);
    let r_minor = r_major * rng.gen_range(ratio_lo..ratio_hi);
    let angle = rng.gen_range(0.0..PI);
    let lesion = EllipseParams {
        center_y: sf / 2.0 + rng.gen_range(-sf / 10.0..sf / 10.0),
        center_x: sf / 2.0 + rng.gen_range(-sf / 10.0..sf / 10.0),
        r_major,
        r_minor,
        angle,
    };

    // Lesion palette.
    let lesion_base = match label {
        ClassLabel::Melanoma => [0.20, 0.12, 0.10],
        ClassLabel::SeborrheicKeratosis => [0.60, 0.47, 0.28],
        ClassLabel::Nevus => [0.45, 0.30, 0.23],
    };
    let lesion_base = [
        lesion_base[0] + jitter(&mut rng, cfg.color_jitter, 0.03),
        lesion_base[1] + jitter(&mut rng, cfg.color_jitter, 0.03),
        lesion_base[2] + jitter(&mut rng, cfg.color_jitter, 0.03),
    ];
    let harmonic_k = rng.gen_range(3..=6) as f64;
    let harmonic_phase = rng.gen_range(0.0..2.0 * PI);

    let border_width = if cfg.fuzzy_borders { 0.06 } else { 0.0 };
    let mut painter = Painter::new(s);
    let mut mask_pixels = Vec::with_capacity(s * s);

    for y in 0..s {
        for x in 0..s {
            let grain: f64 = rng.gen_range(-0.02..0.02);
            let shade = grad_amp * (y as f64 / sf - 0.5);
            let bg = [0, 1, 2].map(|c| bg_base[c] + shade + grain);

            let d = lesion.distance(y, x);
            mask_pixels.push(d <= 1.0);

            if d >= 1.0 + border_width {
                painter.set(y, x, bg);
                continue;
            }
            let texture: f64 = rng.gen_range(-1.0..1.0);
            let color = match label {
                ClassLabel::Melanoma => {
                    let phi = (y as f64 + 0.5 - lesion.center_y)
                        .atan2(x as f64 + 0.5 - lesion.center_x);
                    let irregular = 0.22 * (harmonic_k * phi + harmonic_phase).sin() * d;
                    let factor = 1.0 - 0.30 * (1.0 - d) + irregular + 0.06 * texture;
                    [0, 1, 2].map(|c| lesion_base[c] * factor)
                }
                ClassLabel::SeborrheicKeratosis => {
                    let stipple = if texture < -0.4 { -0.16 } else { 0.04 };
                    [0, 1, 2].map(|c| lesion_base[c] + stipple)
                }
                ClassLabel::Nevus => {
                    let factor = 1.0 - 0.08 * (1.0 - d) + 0.015 * texture;
                    [0, 1, 2].map(|c| lesion_base[c] * factor)
                }
            };
            let alpha = if border_width == 0.0 {
                if d <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            } else if d <= 1.0 - border_width {
                1.0
            } else {
                ((1.0 + border_width - d) / (2.0 * border_width)).clamp(0.0, 1.0)
            };
            painter.set(y, x, [0, 1, 2].map(|c| alpha * color[c] + (1.0 - alpha) * bg[c]));
        }
    }

    if cfg.hair {
        let strokes = rng.gen_range(0..=2);
        for _ in 0..strokes {
            let y0 = rng.gen_range(0.0..sf);
            let x0 = rng.gen_range(0.0..sf);
            let y1 = rng.gen_range(0.0..sf);
            let x1 = rng.gen_range(0.0..sf);
            let cy = (y0 + y1) / 2.0 + rng.gen_range(-sf / 4.0..sf / 4.0);
            let cx = (x0 + x1) / 2.0 + rng.gen_range(-sf / 4.0..sf / 4.0);
            let steps = s * 2;
            for t in 0..=steps {
                let t = t as f64 / steps as f64;
                let omt = 1.0 - t;
                let py = omt * omt * y0 + 2.0 * omt * t * cy + t * t * y1;
                let px = omt * omt * x0 + 2.0 * omt * t * cx + t * t * x1;
                let (iy, ix) = (py.floor(), px.floor());
                if iy >= 0.0 && iy < sf && ix >= 0.0 && ix < sf {
                    painter.blend(iy as usize, ix as usize, [0.10, 0.08, 0.07], 0.7);
                }
            }
        }
    }

    SynthSample {
        id: format!("synth_{index:05}"),
        label,
        image: painter.quantize(),
        mask: BinaryMask::new(s, s, mask_pixels).expect("consistent dims"),
        lesion,
    }
}

/// Generate the whole dataset in memory: label blocks follow the
/// largest-remainder class allocation, in class order.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let counts = class_counts(&cfg.class_mix, cfg.count);
    let mut labels = Vec::with_capacity(cfg.count);
    for (class, &n) in ClassLabel::ALL.iter().zip(&counts) {
        labels.extend(std::iter::repeat(*class).take(n));
    }
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_one(cfg, i, label))
        .collect())
}

/// Generate and persist a dataset: `images/*.ppm`, `masks/*.pgm`, and a
/// manifest with paths relative to the directory. Returns the manifest path.
pub fn write_dataset(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let samples = generate(cfg)?;
    let mut rows = Vec::with_capacity(samples.len());
    for sample in &samples {
        let image_rel = format!("images/{}.ppm", sample.id);
        let mask_rel = format!("masks/{}.pgm", sample.id);
        save_image(dir.join(&image_rel), &sample.image)?;
        save_mask(dir.join(&mask_rel), &sample.mask)?;
        rows.push((
            sample.id.clone(),
            image_rel,
            Some(sample.label),
            Some(mask_rel),
        ));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
