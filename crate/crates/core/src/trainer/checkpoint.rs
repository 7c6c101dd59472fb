//! Checkpoints: `config.txt`, `params.bin` (per tensor a little-endian `u64`
//! element count followed by the `f64` values) and `manifest.csv` listing
//! `layer, role, shape, offset` for every blob.

use std::fs;
use std::path::Path;

use super::model::{BackpropMode, Model};
use crate::autobuild::parse_config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Layer index, or `head`.
    pub layer: String,
    pub role: String,
    pub shape: Vec<usize>,
    /// Byte offset of the blob's length prefix.
    pub offset: u64,
}

fn unit_name(model: &Model, i: usize) -> String {
    if i == model.layers.len() {
        "head".into()
    } else {
        i.to_string()
    }
}

/// Tensors of every unit in a fixed order: slot values, then running
/// batch-norm mean and variance.
fn entries(model: &Model) -> Vec<(String, String, Tensor)> {
    let mut out = Vec::new();
    for i in 0..model.units() {
        let unit = model.unit(i);
        let name = unit_name(model, i);
        for (slot, t) in unit.slots().into_iter().zip(unit.values()) {
            out.push((name.clone(), slot.name().to_string(), t));
        }
        if let Some(bn) = &unit.bn {
            let c = bn.running.mean.len();
            let mean = Tensor::new([c], bn.running.mean.clone()).expect("finite running mean");
            let var = Tensor::new([c], bn.running.var.clone()).expect("finite running variance");
            out.push((name.clone(), "bn_running_mean".into(), mean));
            out.push((name, "bn_running_var".into(), var));
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut manifest = Vec::new();
    for (layer, role, t) in entries(model) {
        manifest.push(ManifestEntry {
            layer,
            role,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        blob.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, model.config.to_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let bin_path = dir.join(PARAMS_FILE);
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&man_path).map_err(|e| csv_error(&man_path, e))?;
    w.write_record(["layer", "role", "shape", "offset"])
        .map_err(|e| csv_error(&man_path, e))?;
    for m in &manifest {
        let shape = m.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        w.write_record([m.layer.as_str(), m.role.as_str(), shape.as_str(), &m.offset.to_string()])
            .map_err(|e| csv_error(&man_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |msg: &str| Error::Integrity(format!("{} row {}: {msg}", path.display(), i + 1));
        if rec.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let shape = rec[2]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("malformed shape"))?;
        out.push(ManifestEntry {
            layer: rec[0].to_string(),
            role: rec[1].to_string(),
            shape,
            offset: rec[3].parse().map_err(|_| bad("malformed offset"))?,
        });
    }
    Ok(out)
}

/// Loads a checkpoint; every blob must match the manifest and the model the
/// stored config describes.
pub fn load_checkpoint(dir: &Path, mode: BackpropMode) -> Result<Model> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = parse_config(&text)?;
    let bin_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut model = Model::new(&cfg, mode)?;
    let expected = entries(&model);
    if expected.len() != manifest.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.len(),
            expected.len()
        )));
    }
    let mut cursor = 0u64;
    let mut loaded = Vec::with_capacity(expected.len());
    for ((layer, role, t), m) in expected.iter().zip(&manifest) {
        if (&m.layer, &m.role, m.shape.as_slice()) != (layer, role, t.shape()) {
            return Err(Error::Integrity(format!(
                "manifest entry {}/{} {:?} does not match the config's {layer}/{role} {:?}",
                m.layer,
                m.role,
                m.shape,
                t.shape()
            )));
        }
        if m.offset != cursor {
            return Err(Error::Integrity(format!(
                "{layer}/{role}: manifest offset {} but blob starts at {cursor}",
                m.offset
            )));
        }
        let start = cursor as usize;
        let prefix = blob
            .get(start..start + 8)
            .ok_or_else(|| Error::Integrity(format!("{layer}/{role}: blob truncated at {start}")))?;
        let n = u64::from_le_bytes(prefix.try_into().expect("8 bytes")) as usize;
        if n != t.len() {
            return Err(Error::Integrity(format!(
                "{layer}/{role}: blob holds {n} values, shape needs {}",
                t.len()
            )));
        }
        let body = blob
            .get(start + 8..start + 8 + 8 * n)
            .ok_or_else(|| Error::Integrity(format!("{layer}/{role}: blob truncated")))?;
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push(Tensor::new(t.shape().to_vec(), data)?);
        cursor += 8 + 8 * n as u64;
    }
    if cursor as usize != blob.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last blob",
            blob.len() - cursor as usize
        )));
    }
    let mut it = loaded.into_iter();
    for i in 0..model.units() {
        let unit = model.unit_mut(i);
        let n = unit.slots().len();
        unit.set_values(it.by_ref().take(n).collect());
        if let Some(bn) = &mut unit.bn {
            bn.running.mean = it.next().expect("running mean").to_vec();
            bn.running.var = it.next().expect("running var").to_vec();
        }
    }
    Ok(model)
}
