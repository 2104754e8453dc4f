//! Datasets, split rules, preprocessing, and the synthetic generator.

mod augment;
mod io;
mod split;
mod synth;

pub use augment::{preprocess, AugmentConfig, Standardize};
pub use io::{load_image_dir, save_image_dir};
pub use split::{kfold_split, split_dataset, stratified_kfold_split, ClassSplit, SplitSpec};
pub use synth::{synth_dataset, SYNTH_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image (C×H×W, values nominally in `[0, 1]`) with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    items: Vec<Sample>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(items: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        if k == 0 {
            return Err(Error::arg("dataset needs at least one class"));
        }
        let mut channels = None;
        for (i, s) in items.iter().enumerate() {
            if s.label >= k {
                return Err(Error::arg(format!("item {i} has label {} but only {k} classes", s.label)));
            }
            if s.image.rank() != 3 {
                return Err(Error::shape(format!("item {i}: expected C×H×W image, got {:?}", s.image.shape())));
            }
            let c = s.image.shape()[0];
            match channels {
                None => channels = Some(c),
                Some(prev) if prev != c => {
                    return Err(Error::shape(format!("item {i} has {c} channels, others have {prev}")));
                }
                _ => {}
            }
        }
        Ok(LabeledDataset { items, class_names })
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> Option<usize> {
        self.items.first().map(|s| s.image.shape()[0])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|s| s.label).collect()
    }

    /// Dataset indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.items.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::arg(format!("index {i} outside dataset of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            items,
            class_names: self.class_names.clone(),
        })
    }

    /// Replicates single-channel images to `channels` (1 or 3).
    pub fn with_channels(&self, channels: usize) -> Result<LabeledDataset> {
        let current = self.channels().unwrap_or(channels);
        if current == channels {
            return Ok(self.clone());
        }
        if current != 1 {
            return Err(Error::arg(format!("cannot convert {current}-channel images to {channels}")));
        }
        let items = self
            .items
            .iter()
            .map(|s| {
                let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
                let mut data = Vec::with_capacity(channels * h * w);
                for _ in 0..channels {
                    data.extend_from_slice(s.image.data());
                }
                Ok(Sample {
                    image: Tensor::new(&[channels, h, w], data)?,
                    label: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            items,
            class_names: self.class_names.clone(),
        })
    }
}
