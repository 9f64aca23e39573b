//! MNIST IDX files: big-endian `u32` magic and dimensions, then `u8` data.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::diff::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            need: at + 4,
            have: bytes.len(),
        })
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8], DataError> {
    bytes.get(start..start + len).ok_or(DataError::Truncated {
        need: start + len,
        have: bytes.len(),
    })
}

/// Returns `(count, rows * cols, pixels scaled to [0, 1])`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let d = be_u32(bytes, 8)? as usize * be_u32(bytes, 12)? as usize;
    let px = payload(bytes, 16, n * d)?;
    Ok((n, d, px.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair; the class count is `max label + 1`
/// (at least 10, the MNIST convention).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (n, d, px) = read_idx_images(&read_file(images)?)?;
    let ys = read_idx_labels(&read_file(labels)?)?;
    if ys.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ys.len(),
        });
    }
    let classes = ys.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    Dataset::new(Tensor::matrix(n, d, px), ys, classes, Split::Train)
}

/// Writes a dataset as an IDX pair with `rows x cols` images. Features are
/// mapped back to bytes by `round(255 x)`, so values must lie in `[0, 1]`.
pub fn write_mnist_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images: &Path,
    labels: &Path,
) -> Result<(), DataError> {
    if rows * cols != data.dim() {
        return Err(DataError::Invalid(format!(
            "{rows}x{cols} images for {} features",
            data.dim()
        )));
    }
    if data.features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DataError::Invalid("pixel outside [0, 1]".into()));
    }
    if data.labels.iter().any(|&y| y > 255) {
        return Err(DataError::Invalid("label does not fit in a byte".into()));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.features.len());
    for v in [IMAGE_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.features.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + data.len());
    for v in [LABEL_MAGIC, n] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(data.labels.iter().map(|&y| y as u8));
    for (path, bytes) in [(images, img), (labels, lbl)] {
        fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
