//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), preprocessing and a small
//! synthetic 2-D set.

mod cifar;
mod idx;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use cifar::{cifar10_files, load_cifar10, parse_cifar_records, CIFAR_RECORD};
pub use idx::{load_mnist, mnist_files, parse_idx_images, parse_idx_labels};

use crate::autobuild::DatasetId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images (`[N, ...sample shape]`) and labels of one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: DatasetId,
    pub split: Split,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from raw bytes scaled into `[0, 1]`.
    pub fn from_bytes(
        id: DatasetId,
        split: Split,
        sample_shape: &[usize],
        pixels: &[u8],
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(Error::Input(format!(
                "{} pixel bytes for {} labels of shape {sample_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(sample_shape);
        let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self {
            id,
            split,
            images: Tensor::new(shape, data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered from a valid tensor"), labels)
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            id: self.id,
            split: self.split,
            images,
            labels,
        }
    }

    /// A class-agnostic random subset of `n` samples, in shuffled order.
    pub fn sample(&self, n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        let (images, labels) = self.batch(&idx);
        Self {
            id: self.id,
            split: self.split,
            images,
            labels,
        }
    }
}

/// Per-channel standardization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population mean and standard deviation of every channel.
    pub fn fit(ds: &Dataset) -> Self {
        let shape = ds.sample_shape();
        let channels = if shape.len() == 3 { shape[0] } else { 1 };
        let plane: usize = if shape.len() == 3 {
            shape[1] * shape[2]
        } else {
            shape.iter().product()
        };
        let count = (ds.len() * plane) as f64;
        let per_channel = |f: &dyn Fn(usize, &[f64]) -> f64| -> Vec<f64> {
            let mut acc = vec![0.0; channels];
            for sample in ds.images.data().chunks_exact(channels * plane) {
                for (c, p) in sample.chunks_exact(plane).enumerate() {
                    acc[c] += f(c, p);
                }
            }
            acc.iter().map(|a| a / count).collect()
        };
        let mean = per_channel(&|_, p| p.iter().sum());
        let std = per_channel(&|c, p| p.iter().map(|v| (v - mean[c]).powi(2)).sum())
            .into_iter()
            .map(|v| v.sqrt().max(1e-12))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let shape = ds.sample_shape();
        let channels = self.mean.len();
        let plane: usize = shape.iter().product::<usize>() / channels;
        let mut data = ds.images.to_vec();
        for sample in data.chunks_exact_mut(channels * plane) {
            for (c, p) in sample.chunks_exact_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
            }
        }
        Dataset {
            images: Tensor::new(ds.images.shape().to_vec(), data).expect("finite standardized values"),
            ..ds.clone()
        }
    }
}

/// Train and test splits standardized with the training statistics.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

impl DataBundle {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        let normalization = Normalization::fit(&train);
        Self {
            train: normalization.apply(&train),
            test: normalization.apply(&test),
            normalization,
        }
    }
}

/// Files the loader for `id` reads from `dir`; none for generated sets.
pub fn source_files(id: DatasetId, dir: &Path) -> Vec<PathBuf> {
    match id {
        DatasetId::Mnist => mnist_files(dir).to_vec(),
        DatasetId::Cifar10 => cifar10_files(dir),
        DatasetId::Points2d => Vec::new(),
    }
}

/// Raw (unstandardized) train and test splits.
pub fn load_raw(id: DatasetId, dir: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    match id {
        DatasetId::Mnist => load_mnist(dir),
        DatasetId::Cifar10 => load_cifar10(dir),
        DatasetId::Points2d => Ok((
            points2d(512, seed, Split::Train),
            points2d(256, seed ^ 0x5eed, Split::Test),
        )),
    }
}

/// Loads the dataset named by `id` from `dir` and standardizes it.
/// `points2d` is generated and ignores `dir`.
pub fn load(id: DatasetId, dir: &Path, seed: u64) -> Result<DataBundle> {
    let (train, test) = load_raw(id, dir, seed)?;
    Ok(DataBundle::new(train, test))
}

/// Two Gaussian blobs around `(-1.5, -1.5)` and `(1.5, 1.5)`, kept at least
/// 0.3 away from the separating line `x + y = 0`.
pub fn points2d(n: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.6).expect("valid std");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let label = rng.random_range(0..2usize);
        let c = if label == 0 { -1.5 } else { 1.5 };
        let (x, y) = (c + noise.sample(&mut rng), c + noise.sample(&mut rng));
        let side = if label == 0 { -(x + y) } else { x + y };
        if side / std::f64::consts::SQRT_2 >= 0.3 {
            data.extend([x, y]);
            labels.push(label);
        }
    }
    Dataset {
        id: DatasetId::Points2d,
        split,
        images: Tensor::new([n, 2], data).expect("finite samples"),
        labels,
    }
}
