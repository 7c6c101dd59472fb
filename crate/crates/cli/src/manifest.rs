//! Run manifest written before training starts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use quadra::autobuild::ModelConfig;
use quadra::data::{self, DataBundle};
use quadra::trainer::BackpropMode;
use quadra::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: String,
    pub seed: u64,
    pub mode: String,
    pub dataset: String,
    /// File name to sha256 hex digest.
    pub dataset_checksums: BTreeMap<String, String>,
    pub sample_limit: Option<usize>,
    pub normalization_mean: Vec<f64>,
    pub normalization_std: Vec<f64>,
    pub output_dir: String,
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::open(path).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(
        cfg: &ModelConfig,
        mode: BackpropMode,
        data_dir: &Path,
        data: &DataBundle,
        out: &Path,
        limit: Option<usize>,
    ) -> Result<Self, Error> {
        let mut checksums = BTreeMap::new();
        for f in data::source_files(cfg.train.dataset, data_dir) {
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            checksums.insert(name, sha256_file(&f)?);
        }
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.to_string(),
            seed: cfg.train.seed,
            mode: mode.tag().to_string(),
            dataset: cfg.train.dataset.tag().to_string(),
            dataset_checksums: checksums,
            sample_limit: limit,
            normalization_mean: data.normalization.mean.clone(),
            normalization_std: data.normalization.std.clone(),
            output_dir: out.display().to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
