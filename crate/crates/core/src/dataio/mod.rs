//! Datasets: MNIST IDX files, seeded Gaussian blobs, standardisation and
//! the `key = value` training config.

mod config;
mod idx;

pub use config::{parse_config, parse_config_str, serialize_config, ConfigError};
pub use idx::{load_mnist_idx, read_idx_images, read_idx_labels, write_mnist_idx};

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::diff::Tensor;
use crate::etf::{EtfClassifier, EtfError};
use crate::rng::{derive, seeded};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Etf(#[from] EtfError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x d`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub standardized: bool,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, DataError> {
        let (n, _) = features
            .dims2()
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        if n == 0 {
            return Err(DataError::Invalid("empty dataset".into()));
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {bad} with {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
            standardized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub radius: f64,
    pub sigma: f64,
}

/// Class means `r * m_k` on a seeded simplex ETF.
pub fn blob_means(spec: &BlobSpec, seed: u64) -> Result<Tensor, DataError> {
    let etf = EtfClassifier::new(spec.classes, spec.dim, derive(seed, 0xb10b))?;
    Ok(etf.matrix().scale(spec.radius))
}

/// Balanced isotropic Gaussian clusters; sample `i` has label `i mod K`.
/// Train and test splits share the means but draw independent noise.
pub fn synth_blobs(spec: &BlobSpec, seed: u64, split: Split) -> Result<Dataset, DataError> {
    if !(spec.sigma >= 0.0) || !spec.radius.is_finite() {
        return Err(DataError::Invalid(format!(
            "blob radius {} / sigma {}",
            spec.radius, spec.sigma
        )));
    }
    if spec.per_class == 0 {
        return Err(DataError::Invalid("zero samples per class".into()));
    }
    let means = blob_means(spec, seed)?;
    let n = spec.classes * spec.per_class;
    let mut rng = seeded(derive(seed, split as u64 + 1));
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.classes;
        labels.push(y);
        for &m in means.row(y) {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + spec.sigma * z);
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dim, data), labels, spec.classes, split)
}

/// Per-feature statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation; zero-variance features get
    /// `std = 1`.
    pub fn fit(data: &Dataset) -> Result<Self, DataError> {
        let (n, d) = (data.len(), data.dim());
        if n < 2 {
            return Err(DataError::Invalid("standardisation needs at least two rows".into()));
        }
        let x = &data.features;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<(), DataError> {
        let d = data.dim();
        if d != self.mean.len() {
            return Err(DataError::Invalid(format!(
                "standardiser fitted on {} features, data has {d}",
                self.mean.len()
            )));
        }
        for (i, v) in data.features.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        data.standardized = true;
        Ok(())
    }
}

/// Fits on `train` and transforms both splits with the training statistics.
pub fn standardize(train: &mut Dataset, test: Option<&mut Dataset>) -> Result<Standardizer, DataError> {
    let s = Standardizer::fit(train)?;
    s.apply(train)?;
    if let Some(t) = test {
        s.apply(t)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(r: f64, sigma: f64) -> BlobSpec {
        BlobSpec {
            classes: 10,
            dim: 16,
            per_class: 20,
            radius: r,
            sigma,
        }
    }

    #[test]
    fn noiseless_blobs_sit_on_means() {
        let s = spec(2.0, 0.0);
        let d = synth_blobs(&s, 3, Split::Train).unwrap();
        let m = blob_means(&s, 3).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.features.row(i), m.row(d.labels[i]));
        }
        let counts = (0..10).map(|k| d.labels.iter().filter(|&&y| y == k).count());
        assert!(counts.into_iter().all(|c| c == 20));
    }

    #[test]
    fn blobs_are_seeded() {
        let a = synth_blobs(&spec(3.0, 1.0), 5, Split::Train).unwrap();
        let b = synth_blobs(&spec(3.0, 1.0), 5, Split::Train).unwrap();
        assert_eq!(a, b);
        let t = synth_blobs(&spec(3.0, 1.0), 5, Split::Test).unwrap();
        assert_ne!(a.features, t.features);
    }

    #[test]
    fn well_separated_blobs_are_nearest_mean_separable() {
        let s = spec(10.0, 1.0);
        let d = synth_blobs(&s, 8, Split::Test).unwrap();
        let m = blob_means(&s, 8).unwrap();
        for i in 0..d.len() {
            let best = (0..10)
                .min_by(|&a, &b| {
                    let da: f64 = d.features.row(i).iter().zip(m.row(a)).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = d.features.row(i).iter().zip(m.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best, d.labels[i]);
        }
    }

    #[test]
    fn blob_means_have_scaled_etf_gram() {
        let s = spec(3.0, 1.0);
        let m = blob_means(&s, 1).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let g: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 9.0 } else { -1.0 };
                assert!((g - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardisation() {
        let mut tr = synth_blobs(&spec(3.0, 1.0), 2, Split::Train).unwrap();
        // make feature 0 constant
        for i in 0..tr.len() {
            tr.features.data_mut()[i * 16] = 4.0;
        }
        let mut te = synth_blobs(&spec(3.0, 1.0), 2, Split::Test).unwrap();
        let st = standardize(&mut tr, Some(&mut te)).unwrap();
        assert_eq!(st.std[0], 1.0);
        assert!(tr.standardized && te.standardized);
        let again = Standardizer::fit(&tr).unwrap();
        for j in 0..16 {
            assert!(again.mean[j].abs() < 1e-10);
            if j > 0 {
                assert!((again.std[j] - 1.0).abs() < 1e-10);
            }
        }
        let before = tr.clone();
        again.apply(&mut tr).unwrap();
        for (a, b) in before.features.data().iter().zip(tr.features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut one = Dataset::new(Tensor::zeros(&[1, 3]), vec![0], 2, Split::Train).unwrap();
        assert!(standardize(&mut one, None).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0, 2], 2, Split::Train).is_err());
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0], 2, Split::Train).is_err());
        assert!(synth_blobs(&spec(1.0, -1.0), 0, Split::Train).is_err());
        let mut s = spec(1.0, 1.0);
        s.dim = 5;
        assert!(synth_blobs(&s, 0, Split::Train).is_err());
    }
}
