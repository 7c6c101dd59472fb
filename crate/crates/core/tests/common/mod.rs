//! Synthetic dataset files and a reference reader written independently of
//! the library's parsers.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn idx_images(n: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x803u32, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend((0..n * rows * cols).map(|_| rng.random::<u8>()));
    out
}

pub fn idx_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x801u32.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend((0..n).map(|_| rng.random_range(0..10u8)));
    out
}

/// Writes the four MNIST files with `n_train` and `n_test` random samples.
pub fn write_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            idx_images(n, 28, 28, &mut rng),
        )
        .unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(n, &mut rng)).unwrap();
    }
}

pub fn cifar_records(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * 3073);
    for _ in 0..n {
        out.push(rng.random_range(0..10u8));
        out.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    out
}

/// Writes five training batches and a test batch of `per_file` records.
pub fn write_cifar(dir: &Path, per_file: usize, seed: u64) -> Vec<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (1..=5)
        .map(|i| format!("data_batch_{i}.bin"))
        .chain(["test_batch.bin".to_string()])
        .collect();
    names
        .iter()
        .map(|name| {
            let p = dir.join(name);
            fs::write(&p, cifar_records(per_file, &mut rng)).unwrap();
            p
        })
        .collect()
}

/// One sample: label and raw pixel bytes.
pub type Record = (u8, Vec<u8>);

fn be(b: &[u8], at: usize) -> usize {
    ((b[at] as usize) << 24) | ((b[at + 1] as usize) << 16) | ((b[at + 2] as usize) << 8) | b[at + 3] as usize
}

/// Reads the first `k` records of an IDX image/label pair.
pub fn reference_idx(images: &Path, labels: &Path, k: usize) -> Vec<Record> {
    let img = fs::read(images).unwrap();
    let lbl = fs::read(labels).unwrap();
    assert_eq!(be(&img, 0), 2051);
    assert_eq!(be(&lbl, 0), 2049);
    let per = be(&img, 8) * be(&img, 12);
    (0..k.min(be(&img, 4)))
        .map(|i| (lbl[8 + i], img[16 + i * per..16 + (i + 1) * per].to_vec()))
        .collect()
}

/// Reads the first `k` records of a CIFAR-10 batch file.
pub fn reference_cifar(file: &Path, k: usize) -> Vec<Record> {
    let b = fs::read(file).unwrap();
    b.chunks(3073).take(k).map(|r| (r[0], r[1..].to_vec())).collect()
}

/// Raw bytes recovered from a dataset scaled by 1/255.
pub fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v * 255.0).round() as u8).collect()
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config(name: &str) -> quadra::autobuild::ModelConfig {
    let path = workspace_root().join("configs").join(format!("{name}.cfg"));
    quadra::autobuild::parse_config(&fs::read_to_string(&path).unwrap()).unwrap()
}

/// Real MNIST location: `QUADRA_MNIST_DIR` or `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("QUADRA_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}
