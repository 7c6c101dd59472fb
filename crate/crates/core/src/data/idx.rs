//! MNIST IDX files: big-endian header, then unsigned bytes.

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::autobuild::DatasetId;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Ingest {
            file: file.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("truncated header: need {} bytes", offset + 4),
        })
}

/// Parses an image file; returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Ingest {
            file: file.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Ingest {
            file: file.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("truncated: header declares {n}x{rows}x{cols} images, need {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Ingest {
            file: file.to_path_buf(),
            offset: need as u64,
            msg: format!("{} trailing bytes after the declared data", bytes.len() - need),
        });
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses a label file; every label must be a digit class `0..=9`.
pub fn parse_idx_labels(bytes: &[u8], file: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Ingest {
            file: file.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let need = 8 + n;
    if bytes.len() != need {
        return Err(Error::Ingest {
            file: file.to_path_buf(),
            offset: bytes.len().min(need) as u64,
            msg: format!(
                "header declares {n} labels ({need} bytes), file has {} bytes",
                bytes.len()
            ),
        });
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l > 9 {
                Err(Error::Ingest {
                    file: file.to_path_buf(),
                    offset: (8 + i) as u64,
                    msg: format!("label {l} is not a digit class"),
                })
            } else {
                Ok(l as usize)
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// The four MNIST files: train images, train labels, test images, test labels.
pub fn mnist_files(dir: &Path) -> [PathBuf; 4] {
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .map(|f| dir.join(f))
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_idx_images(&read(&img_path)?, &img_path)?;
    if (rows, cols) != (28, 28) {
        return Err(Error::Ingest {
            file: img_path,
            offset: 8,
            msg: format!("expected 28x28 images, header declares {rows}x{cols}"),
        });
    }
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::Ingest {
            file: lbl_path,
            offset: 4,
            msg: format!("{} labels for {n} images in {}", labels.len(), img_path.display()),
        });
    }
    Dataset::from_bytes(DatasetId::Mnist, split, &[1, 28, 28], &pixels, labels)
}

/// Reads the four uncompressed MNIST files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_split(dir, "train", Split::Train)?,
        load_split(dir, "t10k", Split::Test)?,
    ))
}
