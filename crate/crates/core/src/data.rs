//! Labelled datasets and the synthetic generators used by the reference scenarios.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Tensor};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Input(format!("{} inputs for {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Batch of the given sample indices, in order.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Batch::new(self.inputs.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Synthetic data families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian clusters in `dim` dimensions, one per class.
    GaussianBlobs {
        num_classes: usize,
        dim: usize,
        train_size: usize,
        test_size: usize,
        /// Distance of class centres from the origin.
        separation: f64,
        noise: f64,
    },
    /// `channels x size x size` images: each class is a fixed random pattern
    /// of Gaussian bumps; samples scale it and add pixel noise.
    BlobImages {
        num_classes: usize,
        channels: usize,
        size: usize,
        train_size: usize,
        test_size: usize,
        bumps: usize,
        noise: f64,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::GaussianBlobs { num_classes, .. } | DatasetSpec::BlobImages { num_classes, .. } => *num_classes,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            DatasetSpec::GaussianBlobs { dim, .. } => vec![dim],
            DatasetSpec::BlobImages { channels, size, .. } => vec![channels, size, size],
        }
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<(String, String)>> {
        let mut errs = Vec::new();
        let (c, train, test, noise) = match *self {
            DatasetSpec::GaussianBlobs {
                num_classes,
                dim,
                train_size,
                test_size,
                separation,
                noise,
            } => {
                if dim == 0 {
                    errs.push(("dataset.dim".into(), "must be >= 1".into()));
                }
                if !(separation.is_finite() && separation >= 0.0) {
                    errs.push(("dataset.separation".into(), "must be finite and >= 0".into()));
                }
                (num_classes, train_size, test_size, noise)
            }
            DatasetSpec::BlobImages {
                num_classes,
                channels,
                size,
                train_size,
                test_size,
                bumps,
                noise,
            } => {
                if channels == 0 || size == 0 || bumps == 0 {
                    errs.push(("dataset".into(), "channels, size and bumps must be >= 1".into()));
                }
                (num_classes, train_size, test_size, noise)
            }
        };
        if c < 2 {
            errs.push(("dataset.num_classes".into(), "must be >= 2".into()));
        }
        if train == 0 || test == 0 {
            errs.push(("dataset.train_size".into(), "train_size and test_size must be >= 1".into()));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            errs.push(("dataset.noise".into(), "must be finite and >= 0".into()));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Deterministic (train, test) split.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match *self {
            DatasetSpec::GaussianBlobs {
                num_classes,
                dim,
                train_size,
                test_size,
                separation,
                noise,
            } => {
                let mut rng = stream_rng(seed, Stream::Dataset, &[0]);
                let std = Normal::new(0.0, 1.0).expect("unit normal");
                let centres: Vec<Vec<f64>> = (0..num_classes)
                    .map(|_| {
                        let v: Vec<f64> = (0..dim).map(|_| std.sample(&mut rng)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.into_iter().map(|x| separation * x / n).collect()
                    })
                    .collect();
                let draw = |count: usize, split: u64| -> Result<Dataset> {
                    let mut rng = stream_rng(seed, Stream::Dataset, &[1, split]);
                    let mut data = Vec::with_capacity(count * dim);
                    let mut labels = Vec::with_capacity(count);
                    for i in 0..count {
                        let c = i % num_classes;
                        labels.push(c);
                        data.extend(centres[c].iter().map(|&m| m + noise * std.sample(&mut rng)));
                    }
                    Dataset::new(Tensor::new(vec![count, dim], data)?, labels, num_classes)
                };
                Ok((draw(train_size, 0)?, draw(test_size, 1)?))
            }
            DatasetSpec::BlobImages {
                num_classes,
                channels,
                size,
                train_size,
                test_size,
                bumps,
                noise,
            } => {
                let mut rng = stream_rng(seed, Stream::Dataset, &[0]);
                let plane = size * size;
                let templates: Vec<Vec<f64>> = (0..num_classes)
                    .map(|_| {
                        let mut t = vec![0.0; channels * plane];
                        for _ in 0..bumps {
                            let ch = rng.random_range(0..channels);
                            let (cy, cx) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
                            let width = rng.random_range(0.8..2.0);
                            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            for y in 0..size {
                                for x in 0..size {
                                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                    t[ch * plane + y * size + x] += sign * (-d2 / (2.0 * width * width)).exp();
                                }
                            }
                        }
                        t
                    })
                    .collect();
                let std = Normal::new(0.0, 1.0).expect("unit normal");
                let draw = |count: usize, split: u64| -> Result<Dataset> {
                    let mut rng = stream_rng(seed, Stream::Dataset, &[1, split]);
                    let mut data = Vec::with_capacity(count * channels * plane);
                    let mut labels = Vec::with_capacity(count);
                    for i in 0..count {
                        let c = i % num_classes;
                        labels.push(c);
                        let amp = rng.random_range(0.7..1.3);
                        data.extend(templates[c].iter().map(|&v| amp * v + noise * std.sample(&mut rng)));
                    }
                    Dataset::new(Tensor::new(vec![count, channels, size, size], data)?, labels, num_classes)
                };
                Ok((draw(train_size, 0)?, draw(test_size, 1)?))
            }
        }
    }
}
