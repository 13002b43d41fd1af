//! Datasets, the `DIMG` container, synthetic transfer tasks and augmentation.

mod augment;
mod format;
mod synthetic;

pub use augment::{
    augment, bilinear_resize, center_crop, crop, eval_view, hflip, resize_shorter_edge, ten_crop, ten_crop_views,
    AugmentSpec,
};
pub use format::{load_dataset, read_dimg, save_dataset, write_dimg};
pub use synthetic::{make_synthetic_transfer_pair, SyntheticSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::binio::sha256;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A `(C, H, W)` image in `[0, 1]` and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// Labeled images sharing one shape, with a content hash over shapes,
/// pixels and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    split: Split,
    hash: [u8; 32],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, split: Split) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "a dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(first) = samples.first() {
            if first.image.ndim() != 3 {
                return Err(Error::Validation(format!(
                    "images must be (C, H, W), got {:?}",
                    first.image.shape()
                )));
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::Validation(format!(
                    "sample {i} has label {} outside [0, {num_classes})",
                    s.label
                )));
            }
            if s.image.shape() != samples[0].image.shape() {
                return Err(Error::Validation(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    s.image.shape(),
                    samples[0].image.shape()
                )));
            }
            s.image.check_finite("image")?;
        }
        let hash = content_hash(&samples, num_classes);
        Ok(Self {
            samples,
            num_classes,
            split,
            hash,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Index(format!("sample {i} outside {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.num_classes, self.split)
    }

    /// Splits off the first `per_class` samples of every class (in dataset
    /// order) as a test set; the rest is the training set.
    pub fn split_per_class(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut seen = vec![0; self.num_classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if seen[s.label] < per_class {
                test.push(i);
            } else {
                train.push(i);
            }
            seen[s.label] += 1;
        }
        Ok((
            self.subset(&train)?.with_split(Split::Train),
            self.subset(&test)?.with_split(Split::Test),
        ))
    }

    /// Mean of each channel over all pixels of all samples.
    pub fn channel_means(&self) -> Vec<f64> {
        let Some(shape) = self.image_shape() else {
            return Vec::new();
        };
        let (c, area) = (shape[0], shape[1] * shape[2]);
        let mut sums = vec![0.0; c];
        for s in &self.samples {
            for (ch, plane) in s.image.data().chunks(area).enumerate() {
                sums[ch] += plane.iter().sum::<f64>();
            }
        }
        let n = (self.samples.len() * area) as f64;
        sums.into_iter().map(|v| v / n).collect()
    }

    /// Per-channel population variance over all pixels of all samples.
    pub fn channel_variances(&self) -> Vec<f64> {
        let means = self.channel_means();
        let Some(shape) = self.image_shape() else {
            return Vec::new();
        };
        let area = shape[1] * shape[2];
        let mut acc = vec![0.0; means.len()];
        for s in &self.samples {
            for (ch, plane) in s.image.data().chunks(area).enumerate() {
                acc[ch] += plane.iter().map(|v| (v - means[ch]).powi(2)).sum::<f64>();
            }
        }
        let n = (self.samples.len() * area) as f64;
        acc.into_iter().map(|v| v / n).collect()
    }

    /// Stacks already-prepared images into a `(B, C, H, W)` batch.
    pub fn stack(images: &[Tensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
        let mut shape = vec![images.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(images.len() * first.numel());
        for im in images {
            if im.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "batch mixes shapes {:?} and {:?}",
                    first.shape(),
                    im.shape()
                )));
            }
            data.extend_from_slice(im.data());
        }
        Tensor::new(shape, data)
    }

    /// Index lists per class, in dataset order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }
}

fn content_hash(samples: &[Sample], num_classes: usize) -> [u8; 32] {
    let mut buf = Vec::with_capacity(16 + samples.iter().map(|s| 16 + s.image.numel() * 8).sum::<usize>());
    buf.extend_from_slice(&(num_classes as u64).to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        for &d in s.image.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let samples = (0..6)
            .map(|i| Sample {
                image: Tensor::full(&[2, 2, 2], i as f64 / 10.0),
                label: i % 3,
            })
            .collect();
        Dataset::new(samples, 3, Split::Train).unwrap()
    }

    #[test]
    fn validation_rejects_bad_labels_and_shapes() {
        let bad_label = vec![Sample {
            image: Tensor::zeros(&[1, 2, 2]),
            label: 2,
        }];
        assert!(matches!(
            Dataset::new(bad_label, 2, Split::Train),
            Err(Error::Validation(_))
        ));
        let mixed = vec![
            Sample {
                image: Tensor::zeros(&[1, 2, 2]),
                label: 0,
            },
            Sample {
                image: Tensor::zeros(&[1, 3, 2]),
                label: 1,
            },
        ];
        assert!(Dataset::new(mixed, 2, Split::Train).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = tiny();
        let mut samples = a.samples().to_vec();
        samples[0].label = 1;
        let b = Dataset::new(samples, 3, Split::Train).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), tiny().hash());
    }

    #[test]
    fn split_per_class_partitions() {
        let (train, test) = tiny().split_per_class(1).unwrap();
        assert_eq!(test.class_counts(), vec![1, 1, 1]);
        assert_eq!(train.class_counts(), vec![1, 1, 1]);
        assert_eq!(test.split(), Split::Test);
    }

    #[test]
    fn channel_statistics() {
        let d = tiny();
        let m = d.channel_means();
        assert!((m[0] - 0.25).abs() < 1e-12 && (m[1] - 0.25).abs() < 1e-12);
    }
}
