//! Gradient statistics, activation attention maps, and CSV/PGM emitters.

mod pgm;

use std::fs;
use std::path::{Path, PathBuf};

pub use pgm::{emit_pgm, parse_pgm, Pgm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::Model;

/// Entries with magnitude below this count as vanished.
pub const NEAR_ZERO: f64 = 1e-8;

/// Role name of the per-layer aggregate over all non-batch-norm parameters.
pub const ALL_ROLES: &str = "all";

/// Summary of one gradient tensor (or a concatenation of several).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStats {
    pub epoch: usize,
    pub layer: usize,
    pub role: String,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max_abs: f64,
    pub l2_norm: f64,
    pub near_zero_fraction: f64,
}

impl GradientStats {
    pub const HEADER: [&'static str; 9] = [
        "epoch",
        "layer",
        "role",
        "count",
        "mean",
        "std",
        "max_abs",
        "l2_norm",
        "near_zero_fraction",
    ];

    pub fn compute<'a>(epoch: usize, layer: usize, role: &str, values: impl IntoIterator<Item = &'a f64>) -> Self {
        let mut count = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        let mut ssq = 1.0;
        let mut zeros = 0usize;
        for &v in values {
            count += 1;
            let d = v - mean;
            mean += d / count as f64;
            m2 += d * (v - mean);
            let a = v.abs();
            max_abs = max_abs.max(a);
            if a < NEAR_ZERO {
                zeros += 1;
            }
            // Scaled sum of squares: tiny gradients neither underflow nor
            // lose precision.
            if a > 0.0 {
                if scale < a {
                    ssq = 1.0 + ssq * (scale / a) * (scale / a);
                    scale = a;
                } else {
                    ssq += (a / scale) * (a / scale);
                }
            }
        }
        let n = count.max(1) as f64;
        Self {
            epoch,
            layer,
            role: role.to_string(),
            count,
            mean,
            std: (m2 / n).max(0.0).sqrt(),
            max_abs,
            l2_norm: scale * ssq.sqrt(),
            near_zero_fraction: zeros as f64 / n,
        }
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.layer.to_string(),
            self.role.clone(),
            self.count.to_string(),
            format!("{:e}", self.mean),
            format!("{:e}", self.std),
            format!("{:e}", self.max_abs),
            format!("{:e}", self.l2_norm),
            self.near_zero_fraction.to_string(),
        ]
    }
}

/// Statistics of every parameter gradient of every unit (layers, then the
/// head), plus an [`ALL_ROLES`] row per unit aggregating its non-batch-norm
/// parameters.
pub fn collect_gradient_stats(model: &Model, grads: &[Vec<Tensor>], epoch: usize) -> Vec<GradientStats> {
    let mut rows = Vec::new();
    for (i, unit_grads) in grads.iter().enumerate().take(model.units()) {
        let slots = model.unit(i).slots();
        for (slot, g) in slots.iter().zip(unit_grads) {
            rows.push(GradientStats::compute(epoch, i, slot.name(), g.data()));
        }
        let all = slots
            .iter()
            .zip(unit_grads)
            .filter(|(s, _)| !s.is_batchnorm())
            .flat_map(|(_, g)| g.data().iter());
        rows.push(GradientStats::compute(epoch, i, ALL_ROLES, all));
    }
    rows
}

/// Writes a header row and data rows with RFC 4180 quoting.
pub fn emit_csv<I, R>(header: &[&str], rows: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let wrap = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one `<epoch>_<layer>_<role>.csv` file per statistics row.
pub fn emit_gradient_stats(rows: &[GradientStats], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(rows.len());
    for r in rows {
        let path = dir.join(format!("{}_{}_{}.csv", r.epoch, r.layer, r.role));
        emit_csv(&GradientStats::HEADER, [r.record()], &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Per-pixel activation magnitude of one layer, scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub layer: usize,
    pub image: usize,
}

impl AttentionMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0f64, f64::max)
    }

    /// Divides by the maximum; an all-zero map is left unchanged.
    pub fn normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
        self
    }

    pub fn file_name(&self) -> String {
        format!("attn_{}_{}.pgm", self.image, self.layer)
    }
}

/// Channel mean of `|activation|` over a `[C, H, W]` activation.
pub fn channel_mean_abs(act: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane];
    for c in 0..channels {
        for (o, v) in out.iter_mut().zip(&act[c * plane..(c + 1) * plane]) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= channels as f64);
    out
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Attention map of a spatial layer for one `[C, H, W]` (or `[1, C, H, W]`)
/// image, resized to the image's spatial size.
pub fn activation_attention(model: &Model, image: &Tensor, layer: usize, image_id: usize) -> Result<AttentionMap> {
    if layer >= model.layers.len() {
        return Err(Error::Input(format!(
            "layer index {layer} out of range (model has {} layers)",
            model.layers.len()
        )));
    }
    let x = match image.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            image.reshape(&s)?
        }
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(Error::Input(format!(
                "attention needs one [C, H, W] image, got {:?}",
                image.shape()
            )))
        }
    };
    let act = model.forward_until(&x, layer)?;
    if act.rank() != 4 {
        return Err(Error::Input(format!(
            "layer {layer} produces non-spatial activations of shape {:?}",
            act.shape()
        )));
    }
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let map = channel_mean_abs(act.data(), c, h * w);
    let (out_h, out_w) = (x.shape()[2], x.shape()[3]);
    Ok(AttentionMap {
        height: out_h,
        width: out_w,
        values: bilinear_resize(&map, h, w, out_h, out_w),
        layer,
        image: image_id,
    }
    .normalized())
}
