//! In-memory datasets: samples with float image tensors, optional labels,
//! optional masks; loading from manifests; deterministic stratified splits.

use rand::seq::SliceRandom;

use crate::cls::ClassLabel;
use crate::data::manifest::{load_manifest, ManifestRecord};
use crate::data::pnm::{load_image, load_mask};
use crate::data::synth::SynthSample;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::seg::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// C x H x W in [0, 1].
    pub image: Tensor<f32>,
    pub label: Option<ClassLabel>,
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_synthetic(samples: &[SynthSample]) -> Dataset {
        Dataset {
            samples: samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    image: s.image.to_tensor(),
                    label: Some(s.label),
                    mask: Some(s.mask.clone()),
                })
                .collect(),
        }
    }

    /// Load every record of a manifest into memory.
    pub fn load(manifest_path: impl AsRef<std::path::Path>) -> Result<Dataset> {
        let records = load_manifest(manifest_path)?;
        Self::from_records(&records)
    }

    pub fn from_records(records: &[ManifestRecord]) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(records.len());
        for rec in records {
            let image = load_image(&rec.image_path)?.to_tensor();
            let mask = match &rec.mask_path {
                Some(p) => {
                    let m = load_mask(p)?;
                    let (h, w) = (image.shape()[1], image.shape()[2]);
                    if (m.height, m.width) != (h, w) {
                        return Err(Error::Shape(format!(
                            "{}: mask {}x{} does not match image {h}x{w}",
                            rec.image_id, m.height, m.width
                        )));
                    }
                    Some(m)
                }
                None => None,
            };
            samples.push(Sample {
                id: rec.image_id.clone(),
                image,
                label: rec.label,
                mask,
            });
        }
        Ok(Dataset { samples })
    }

    /// Apply a transform to every image (preprocessing).
    pub fn map_images(&self, f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            samples.push(Sample {
                id: s.id.clone(),
                image: f(&s.image)?,
                label: s.label,
                mask: s.mask.clone(),
            });
        }
        Ok(Dataset { samples })
    }

    /// Disjoint, exhaustive, seed-deterministic split. When labels exist
    /// the split is stratified: the overall validation count is
    /// `round(fraction * len)`, distributed over the label groups by
    /// largest remainder.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0, 1), got {validation_fraction}"
            )));
        }
        let n = self.samples.len();
        let total_val = (validation_fraction * n as f64).round() as usize;
        if total_val == 0 || total_val == n {
            return Err(Error::Config(format!(
                "split of {n} samples at fraction {validation_fraction} leaves one side empty"
            )));
        }

        // group indices: one group per present label, one for unlabeled
        let group_of = |s: &Sample| s.label.map(|l| l.index()).unwrap_or(3);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 4];
        for (i, s) in self.samples.iter().enumerate() {
            groups[group_of(s)].push(i);
        }

        // largest-remainder allocation of total_val over the groups
        let mut quotas = [0usize; 4];
        let mut fracs = [0.0f64; 4];
        let mut assigned = 0usize;
        for g in 0..4 {
            let exact = validation_fraction * groups[g].len() as f64;
            quotas[g] = (exact.floor() as usize).min(groups[g].len());
            fracs[g] = exact - exact.floor();
            assigned += quotas[g];
        }
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
        let mut remaining = total_val.saturating_sub(assigned);
        for &g in order.iter() {
            while remaining > 0 && quotas[g] < groups[g].len() {
                quotas[g] += 1;
                remaining -= 1;
                break;
            }
        }
        // if some group saturated, spill into any group with room
        while remaining > 0 {
            let mut progressed = false;
            for g in 0..4 {
                if remaining > 0 && quotas[g] < groups[g].len() {
                    quotas[g] += 1;
                    remaining -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        let mut is_val = vec![false; n];
        for g in 0..4 {
            let mut idx = groups[g].clone();
            let mut rng = derive_rng(seed, "split", g as u64);
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(quotas[g]) {
                is_val[i] = true;
            }
        }

        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if is_val[i] {
                val.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((Dataset { samples: train }, Dataset { samples: val }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticConfig};

    fn labeled_dataset(counts: [usize; 3]) -> Dataset {
        let mut samples = Vec::new();
        for (class, &cnt) in ClassLabel::ALL.iter().zip(&counts) {
            for i in 0..cnt {
                samples.push(Sample {
                    id: format!("{}_{i}", class.as_str()),
                    image: Tensor::full(vec![3, 4, 4], 0.5),
                    label: Some(*class),
                    mask: None,
                });
            }
        }
        Dataset { samples }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_sized() {
        let ds = labeled_dataset([34, 33, 33]);
        let (train, val) = ds.split(0.2, 9).unwrap();
        assert_eq!(train.len() + val.len(), 100);
        assert_eq!(val.len(), 20);
        let mut ids: Vec<&str> = train
            .samples
            .iter()
            .chain(&val.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn split_is_stratified() {
        let ds = labeled_dataset([30, 30, 40]);
        let (_, val) = ds.split(0.1, 3).unwrap();
        let count_of = |l: ClassLabel| {
            val.samples
                .iter()
                .filter(|s| s.label == Some(l))
                .count()
        };
        assert_eq!(count_of(ClassLabel::Melanoma), 3);
        assert_eq!(count_of(ClassLabel::SeborrheicKeratosis), 3);
        assert_eq!(count_of(ClassLabel::Nevus), 4);
    }

    #[test]
    fn split_240_at_one_sixth_gives_200_40() {
        let ds = labeled_dataset([80, 80, 80]);
        let (train, val) = ds.split(1.0 / 6.0, 11).unwrap();
        assert_eq!((train.len(), val.len()), (200, 40));
    }

    #[test]
    fn same_seed_same_split() {
        let ds = labeled_dataset([20, 20, 20]);
        let (t1, v1) = ds.split(0.25, 5).unwrap();
        let (t2, v2) = ds.split(0.25, 5).unwrap();
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&t1), ids(&t2));
        assert_eq!(ids(&v1), ids(&v2));
        let (_, v3) = ds.split(0.25, 6).unwrap();
        assert_ne!(ids(&v1), ids(&v3));
    }

    #[test]
    fn degenerate_splits_rejected() {
        let ds = labeled_dataset([2, 2, 2]);
        assert!(ds.split(0.0, 1).is_err());
        assert!(ds.split(1.0, 1).is_err());
        assert!(ds.split(0.01, 1).is_err()); // rounds to zero validation
    }

    #[test]
    fn synthetic_roundtrip_into_dataset() {
        let samples = generate(&SyntheticConfig::new(6, 32, 3)).unwrap();
        let ds = Dataset::from_synthetic(&samples);
        assert_eq!(ds.len(), 6);
        assert!(ds.samples.iter().all(|s| s.mask.is_some() && s.label.is_some()));
        assert_eq!(ds.samples[0].image.shape(), &[3, 32, 32]);
    }
}
