//! Labelled RGB image sets: the synthetic toy classes, directory-per-class
//! image folders, stratified splits and deterministic batching.

mod folder;
mod toy;

pub use folder::{load_image_folder, read_image, save_image_folder, write_png, LoadReport, MANIFEST_FILE};
pub use toy::{make_toy_dataset, TOY_CLASS_NAMES};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::Tensor;
use crate::rng::{stream, Purpose};

/// One image in the model domain `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[H, W, 3]`.
    pub pixels: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    pub image_size: usize,
}

/// Description stored next to an image folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub normalization: String,
    pub split_seed: u64,
    pub split_fractions: Vec<f64>,
}

pub const NORMALIZATION: &str = "x / 127.5 - 1";

/// 8-bit level to model domain.
pub fn to_model_domain(level: u8) -> f64 {
    level as f64 / 127.5 - 1.0
}

/// Model domain to 8-bit level, clamping to `[-1, 1]` first.
pub fn to_level(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for im in &self.images {
            c[im.label] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|im| im.label).collect()
    }

    /// Stacks the selected images into `[B, H, W, 3]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s * 3);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let im = self.images.get(i).ok_or(Error::OutOfRange {
                what: "dataset",
                index: i,
                size: self.len(),
            })?;
            data.extend_from_slice(im.pixels.data());
            labels.push(im.label);
        }
        Ok((Tensor::new(&[indices.len(), s, s, 3], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            class_names: self.class_names.clone(),
            image_size: self.image_size,
        }
    }

    pub fn manifest(&self, split_seed: u64, split_fractions: &[f64]) -> DatasetManifest {
        DatasetManifest {
            class_names: self.class_names.clone(),
            counts: self.counts(),
            image_size: self.image_size,
            normalization: NORMALIZATION.into(),
            split_seed,
            split_fractions: split_fractions.to_vec(),
        }
    }
}

/// Stratified split: within each class, indices are shuffled from `seed` and
/// cut at the cumulative fractions (rounded). Returns one index list per
/// fraction, each sorted.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::invalid("split fractions must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, not 1")));
    }
    let mut parts = vec![Vec::new(); fractions.len()];
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.images[i].label == class)
            .collect();
        let mut rng = stream(seed, Purpose::Split, class as u64);
        members.shuffle(&mut rng);
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, f) in fractions.iter().enumerate() {
            cum += f;
            let end = if k + 1 == fractions.len() {
                n
            } else {
                ((cum * n as f64).round() as usize).min(n)
            };
            if end <= start && *f > 0.0 {
                return Err(Error::invalid(format!(
                    "class `{}` has no items in split {k}",
                    dataset.class_names[class]
                )));
            }
            parts[k].extend_from_slice(&members[start..end.max(start)]);
            start = end.max(start);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Batches of one epoch over `indices`, shuffled from `(seed, epoch)`. The
/// final partial batch is kept.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut rng = stream(seed, Purpose::Epoch, epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// The batch used at global training step `step` (0-based) when iterating
/// epochs of [`epoch_batches`] back to back.
pub fn batch_for_step(indices: &[usize], batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = indices.len().div_ceil(batch_size.max(1)).max(1) as u64;
    let epoch = step / per_epoch;
    let k = (step % per_epoch) as usize;
    epoch_batches(indices, batch_size, seed, epoch).swap_remove(k)
}
