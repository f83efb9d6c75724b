//! Labelled image datasets: IDX ingestion, synthetic blobs, seeded splits and batching.

mod idx;
mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Scalar, Tensor};

pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IdxError,
    IdxImages, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use synth::synth_blobs;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("image buffer holds {actual} values, expected {expected}")]
    ImageLength { expected: usize, actual: usize },
    #[error("invalid split fractions {0:?}: each must be > 0 and they must sum to <= 1")]
    InvalidFractions(Vec<f64>),
    #[error("split part {part} would be empty")]
    EmptySplit { part: usize },
    #[error("invalid blob parameters: {0}")]
    InvalidBlobs(String),
    #[error("could not place {classes} centers {separation} apart in {dims} dimensions")]
    InfeasibleSeparation {
        classes: usize,
        dims: usize,
        separation: f64,
    },
    #[error("class {class} not present in a {classes}-class dataset")]
    UnknownClass { class: usize, classes: usize },
}

/// Images `[N, C, H, W]` scaled to `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    images: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        images: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(DataError::ImageLength {
                expected: per * labels.len(),
                actual: images.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelRange {
                index,
                label,
                classes,
            });
        }
        Ok(Self {
            sample_shape,
            images,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let per = self.images.len() / self.labels.len();
        &self.images[index * per..(index + 1) * per]
    }

    /// Stacks the selected samples into an `[n, ..sample_shape]` tensor.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Tensor<F> {
        let per = self.images.len() / self.labels.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| F::from_f64(v as f64)));
        }
        let shape = std::iter::once(indices.len())
            .chain(self.sample_shape.iter().copied())
            .collect();
        Tensor::new(shape, data).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let per = self.images.len() / self.labels.len();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            images.extend_from_slice(self.sample(i));
        }
        Dataset::new(
            self.sample_shape.clone(),
            images,
            self.batch_labels(indices),
            self.classes,
            self.provenance.clone(),
        )
    }

    /// Keeps the listed classes and relabels them `0..classes.len()` in list order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Dataset, DataError> {
        if let Some(&class) = classes.iter().find(|&&c| c >= self.classes) {
            return Err(DataError::UnknownClass {
                class,
                classes: self.classes,
            });
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&keep)?;
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("kept class");
        }
        out.classes = classes.len();
        out.provenance = format!("{}[classes {:?}]", self.provenance, classes);
        Ok(out)
    }

    /// Raises the class count, e.g. to match a test split that contains a label absent here.
    pub fn with_classes(mut self, classes: usize) -> Result<Dataset, DataError> {
        if classes < self.classes {
            return Err(DataError::UnknownClass {
                class: self.classes - 1,
                classes,
            });
        }
        self.classes = classes;
        Ok(self)
    }

    /// Splits into disjoint parts; see [`split_indices`].
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>, DataError> {
        split_indices(self.len(), fractions, seed)?
            .iter()
            .map(|idx| self.subset(idx))
            .collect()
    }
}

/// Seeded permutation of `0..n` sliced into contiguous parts of `floor(f * n)` items.
/// When the fractions sum to 1 the last part also takes the rounding remainder.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.iter().any(|f| !(*f > 0.0 && f.is_finite()))
        || total > 1.0 + 1e-9
    {
        return Err(DataError::InvalidFractions(fractions.to_vec()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * n as f64) + 1e-9).floor() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    if (total - 1.0).abs() <= 1e-9 && used < n {
        *sizes.last_mut().expect("non-empty") += n - used;
    }
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (part, size) in sizes.into_iter().enumerate() {
        if size == 0 {
            return Err(DataError::EmptySplit { part });
        }
        parts.push(perm[start..start + size].to_vec());
        start += size;
    }
    Ok(parts)
}

/// Shuffled mini-batches of `0..n` for one epoch. The order depends only on `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
