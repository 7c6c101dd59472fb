//! Model configurations, first-order to quadratic conversion and RI-guided
//! layer reduction.

mod config;
mod reduce;

pub use config::{parse_config, serialize_config, DatasetId, HeadSpec, ModelConfig, TrainSpec};
pub use reduce::{
    ablate, ablate_model, compute_ri, exhaustive_ablation, reduce, removable_layers, Ablation, ReduceOptions,
    ReduceOutcome, Removal,
};

use crate::error::{Error, Result};
use crate::quadneuron::{count_macs, count_params, LayerKind, NeuronFamily};

/// Clamp for non-positive accuracy drops in the RI denominator.
pub const EPS_ACC: f64 = 1e-4;

/// Re-tags every layer with `family`, keeping dimensions and spatial
/// hyperparameters. Quadratic layers get batch-norm; the head is untouched.
pub fn replace_layers(cfg: &ModelConfig, family: NeuronFamily) -> Result<ModelConfig> {
    if let Some((i, l)) = cfg.layers.iter().enumerate().find(|(_, l)| l.family.is_quadratic()) {
        return Err(Error::Config(format!(
            "layer {i} is already {}; conversion needs a first-order config",
            l.family
        )));
    }
    if family.is_t1() && cfg.layers.iter().any(|l| l.kind != LayerKind::Fc) {
        return Err(Error::Config(format!(
            "{family} neurons need a full-rank quadratic weight and are only supported in fc layers"
        )));
    }
    let mut out = cfg.clone();
    for l in &mut out.layers {
        l.family = family;
        if family.is_quadratic() {
            l.batchnorm = true;
        }
    }
    Ok(out)
}

/// `P_Mpar · P_Tlat / max(ΔAcc, EPS_ACC)`.
pub fn ri(p_mpar: f64, p_tlat: f64, delta_acc: f64) -> f64 {
    p_mpar * p_tlat / delta_acc.max(EPS_ACC)
}

/// One row of an RI report.
#[derive(Debug, Clone, PartialEq)]
pub struct RiRow {
    pub layer: usize,
    pub p_mpar: f64,
    pub p_tlat: f64,
    pub delta_acc: f64,
    pub ri: f64,
    /// 1 for the most removable layer.
    pub rank: usize,
}

/// Parameter and MAC shares of every layer, head included in the totals.
pub fn layer_shares(cfg: &ModelConfig) -> Result<Vec<(f64, f64)>> {
    let inputs = cfg.layer_inputs()?;
    let mut params: Vec<f64> = cfg.layers.iter().map(|l| count_params(l).total() as f64).collect();
    let mut macs = Vec::with_capacity(cfg.layers.len());
    for (l, shape) in cfg.layers.iter().zip(&inputs) {
        macs.push(count_macs(l, shape)? as f64);
    }
    let head = cfg.head.as_layer();
    let total_p = params.iter().sum::<f64>() + count_params(&head).total() as f64;
    let total_m = macs.iter().sum::<f64>() + count_macs(&head, &[cfg.head.inputs])? as f64;
    params.iter_mut().for_each(|p| *p /= total_p);
    Ok(params.into_iter().zip(macs.into_iter().map(|m| m / total_m)).collect())
}

/// Builds RI rows from shares and measured accuracy drops, then ranks them:
/// highest RI first, the deeper layer first on ties.
pub fn rank_layers(entries: &[(usize, f64, f64, f64)]) -> Vec<RiRow> {
    let mut rows: Vec<RiRow> = entries
        .iter()
        .map(|&(layer, p_mpar, p_tlat, delta_acc)| RiRow {
            layer,
            p_mpar,
            p_tlat,
            delta_acc,
            ri: ri(p_mpar, p_tlat, delta_acc),
            rank: 0,
        })
        .collect();
    rows.sort_by(|a, b| b.ri.total_cmp(&a.ri).then(b.layer.cmp(&a.layer)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}
