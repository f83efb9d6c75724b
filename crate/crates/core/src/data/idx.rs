use std::path::Path;

use thiserror::Error;

use super::{DataError, Dataset};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic 0x{found:08x} at offset 0, expected 0x{expected:08x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("zero-sized dimension {dim} in header at offset {offset}")]
    ZeroDimension { dim: usize, offset: usize },
}

/// Raw unsigned-byte IDX3 image payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            offset,
            needed: 4,
            len: bytes.len(),
        })
}

fn header(bytes: &[u8], expected: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(IdxError::BadMagic {
            found: magic,
            expected,
        });
    }
    (0..dims)
        .map(|d| {
            let offset = 4 + 4 * d;
            match be_u32(bytes, offset)? {
                0 => Err(IdxError::ZeroDimension { dim: d, offset }),
                v => Ok(v as usize),
            }
        })
        .collect()
}

fn payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], IdxError> {
    let end = offset
        .checked_add(needed)
        .filter(|&e| e <= bytes.len())
        .ok_or(IdxError::Truncated {
            offset,
            needed,
            len: bytes.len(),
        })?;
    if end < bytes.len() {
        return Err(IdxError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    Ok(&bytes[offset..end])
}

/// Parses a big-endian IDX3 unsigned-byte image file (`N, H, W`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let dims = header(bytes, IMAGES_MAGIC, 3)?;
    let needed = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(IdxError::Truncated {
            offset: 16,
            needed: usize::MAX,
            len: bytes.len(),
        })?;
    let pixels = payload(bytes, 16, needed)?.to_vec();
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels,
    })
}

/// Parses a big-endian IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let dims = header(bytes, LABELS_MAGIC, 1)?;
    Ok(payload(bytes, 8, dims[0])?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image/label IDX pair. Pixels are scaled by 1/255; the class
/// count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read(images_path)?).map_err(|source| DataError::Idx {
        path: images_path.to_path_buf(),
        source,
    })?;
    let labels = parse_idx_labels(&read(labels_path)?).map_err(|source| DataError::Idx {
        path: labels_path.to_path_buf(),
        source,
    })?;
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Dataset::new(
        vec![1, images.rows, images.cols],
        images.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        classes,
        images_path.display().to_string(),
    )
}

/// Serializes single-channel images back to IDX3 (values rounded from `[0, 1]` to bytes).
pub fn encode_idx_images(dataset: &Dataset) -> Vec<u8> {
    let s = dataset.sample_shape();
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(16 + dataset.images().len());
    for v in [IMAGES_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        dataset
            .images()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + dataset.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend(dataset.labels().iter().map(|&l| l as u8));
    out
}
