//! CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes
//! (1024 red, then green, then blue, row-major).

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::autobuild::DatasetId;
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
const RECORDS_PER_FILE: usize = 10_000;

/// Splits a batch file into labels and pixel bytes.
pub fn parse_cifar_records(bytes: &[u8], file: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Ingest {
            file: file.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!(
                "truncated record: file length {} is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    if n != RECORDS_PER_FILE {
        log::warn!(
            "{}: {n} records (official batches hold {RECORDS_PER_FILE})",
            file.display()
        );
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Ingest {
                file: file.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label {} is not a class index", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn load_files(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        let (l, p) = parse_cifar_records(&bytes, f)?;
        labels.extend(l);
        pixels.extend(p);
    }
    Dataset::from_bytes(DatasetId::Cifar10, split, &[3, 32, 32], &pixels, labels)
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir` or from its
/// `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut files = cifar10_files(dir);
    let test = files.pop().expect("test batch");
    Ok((load_files(&files, Split::Train)?, load_files(&[test], Split::Test)?))
}

/// The five training batches followed by the test batch.
pub fn cifar10_files(dir: &Path) -> Vec<PathBuf> {
    let d = batch_dir(dir);
    (1..=5)
        .map(|i| d.join(format!("data_batch_{i}.bin")))
        .chain(std::iter::once(d.join("test_batch.bin")))
        .collect()
}
