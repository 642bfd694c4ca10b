use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::idx::read_idx;
use super::DataError;
use crate::autodiff::Tensor;

/// Distance of each class mean from the origin in [`gen_synthetic`], in units
/// of the per-class standard deviation.
pub const SYNTHETIC_SEPARATION: f64 = 5.0;

const TRAIN_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self, DataError> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(DataError::SizeMismatch { expected: labels.len(), found: inputs.shape().first().copied().unwrap_or(0) });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Label { label: bad, classes: num_classes });
        }
        Ok(Self { inputs, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `indices` as a `len x dim` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::matrix(indices.len(), d, data).expect("row-aligned"), labels)
    }

    /// The first `n` examples (all of them if `n` is 0 or too large).
    pub fn take(&self, n: usize) -> Dataset {
        let n = if n == 0 { self.len() } else { n.min(self.len()) };
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.batch(&idx);
        Dataset { inputs, labels, num_classes: self.num_classes, split: self.split }
    }
}

/// Mean pooling over non-overlapping `factor x factor` windows of an
/// `n x h x w` stack.
pub fn downsample(images: &Tensor, factor: usize) -> Result<Tensor, DataError> {
    let s = images.shape();
    if s.len() != 3 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(DataError::Indivisible { shape: s.to_vec(), factor });
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let src = images.data();
    let mut out = vec![0.0; n * oh * ow];
    for img in 0..n {
        for r in 0..h {
            for c in 0..w {
                out[(img * oh + r / factor) * ow + c / factor] += src[(img * h + r) * w + c];
            }
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    Ok(Tensor::new(vec![n, oh, ow], out)?)
}

/// Isotropic unit-variance blobs, one per class, with class `c` centred on
/// `SYNTHETIC_SEPARATION * (1 + c / dim) * e_(c mod dim)`.
///
/// Labels cycle through the classes so every class gets the same count (up
/// to one), the rows are shuffled, min-max scaled to `[0, 1]` and the first
/// 80% become the training split.
pub fn gen_synthetic(num_points: usize, num_classes: usize, dim: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if num_points == 0 || num_classes == 0 || dim == 0 {
        return Err(DataError::EmptySynthetic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..num_points).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(num_points * dim);
    for &y in &labels {
        let axis = y % dim;
        let radius = SYNTHETIC_SEPARATION * (1 + y / dim) as f64;
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x.push(noise + if j == axis { radius } else { 0.0 });
        }
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut x {
        *v = (*v - lo) / span;
    }
    let n_train = (num_points as f64 * TRAIN_SHARE).floor() as usize;
    let all = Tensor::matrix(num_points, dim, x)?;
    let full = Dataset { inputs: all, labels, num_classes, split: Split::Train };
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..num_points).collect();
    let (xtr, ytr) = full.batch(&train_idx);
    let (xte, yte) = full.batch(&test_idx);
    Ok((
        Dataset { inputs: xtr, labels: ytr, num_classes, split: Split::Train },
        Dataset { inputs: xte, labels: yte, num_classes, split: Split::Test },
    ))
}

fn load_split(images: &Path, labels: &Path, factor: usize, split: Split) -> Result<Dataset, DataError> {
    let imgs = downsample(&read_idx(images)?, factor)?;
    let labs = read_idx(labels)?;
    let n = imgs.shape()[0];
    let d = imgs.shape()[1] * imgs.shape()[2];
    let labels: Vec<usize> = labs.data().iter().map(|&v| v as usize).collect();
    Dataset::new(Tensor::matrix(n, d, imgs.into_data())?, labels, 10, split)
}

fn find(dir: &Path, stem: &str) -> Result<std::path::PathBuf, DataError> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
        .ok_or_else(|| DataError::Missing(dir.join(stem)))
}

/// Loads the standard four MNIST IDX files (plain or `.gz`) from `dir`,
/// flattening each image after `factor`-fold mean pooling.
pub fn load_mnist(dir: &Path, factor: usize) -> Result<(Dataset, Dataset), DataError> {
    let train = load_split(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
        factor,
        Split::Train,
    )?;
    let test = load_split(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
        factor,
        Split::Test,
    )?;
    Ok((train, test))
}
