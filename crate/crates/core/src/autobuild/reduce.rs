//! Layer ablation and the greedy RI-guided reduction loop.

use super::{layer_shares, rank_layers, ModelConfig, RiRow};
use crate::data::DataBundle;
use crate::error::{Error, Result};
use crate::quadneuron::{LayerKind, NeuronFamily, QuadraticLayerSpec};
use crate::trainer::{fit, Model, TrainOptions};

#[derive(Debug, Clone)]
pub struct ReduceOptions {
    /// Fine-tune epochs after each removal.
    pub finetune_epochs: usize,
    /// Fine-tune learning rate as a fraction of the config's.
    pub finetune_lr_scale: f64,
    /// Largest tolerated accuracy drop from the starting model.
    pub budget: f64,
    pub train: TrainOptions,
}

impl Default for ReduceOptions {
    fn default() -> Self {
        Self {
            finetune_epochs: 2,
            finetune_lr_scale: 0.1,
            budget: 0.01,
            train: TrainOptions {
                gradient_stats: false,
                ..TrainOptions::default()
            },
        }
    }
}

/// Removes layer `layer` from `cfg`. When the layer changes the shape of its
/// input, a first-order adapter (1×1 conv or fc) with the removed layer's
/// stride, batch-norm and activation takes its place.
pub fn ablate(cfg: &ModelConfig, layer: usize) -> Result<ModelConfig> {
    if layer >= cfg.layers.len() {
        return Err(Error::Input(format!(
            "layer {layer} is not removable: the model has {} layers before its head",
            cfg.layers.len()
        )));
    }
    if cfg.layers.len() == 1 {
        return Err(Error::Input(format!(
            "layer {layer} is the sole layer and cannot be removed"
        )));
    }
    let shapes = cfg.layer_inputs()?;
    let removed = cfg.layers[layer];
    let mut out = cfg.clone();
    out.layers.remove(layer);
    if shapes[layer] != shapes[layer + 1] {
        let adapter = match removed.kind {
            LayerKind::Fc => QuadraticLayerSpec::fc(NeuronFamily::FirstOrder, removed.inputs, removed.outputs),
            LayerKind::Conv | LayerKind::DepthwiseConv => QuadraticLayerSpec::conv(
                NeuronFamily::FirstOrder,
                removed.inputs,
                removed.outputs,
                1,
                removed.stride,
                0,
            ),
        }
        .with_batchnorm(removed.batchnorm)
        .with_activation(removed.activation);
        out.layers.insert(layer, adapter);
    }
    out.validate()
        .map_err(|e| Error::Input(format!("layer {layer} cannot be spliced out: {e}")))?;
    Ok(out)
}

/// Layers whose ablation is valid and actually changes the model.
pub fn removable_layers(cfg: &ModelConfig) -> Vec<usize> {
    (0..cfg.layers.len())
        .filter(|&i| ablate(cfg, i).is_ok_and(|a| a != *cfg))
        .collect()
}

/// Ablated model keeping every surviving layer's trained state; an adapter
/// starts from its own fresh initialization.
pub fn ablate_model(model: &Model, layer: usize) -> Result<Model> {
    let cfg = ablate(&model.config, layer)?;
    let mut out = Model::new(&cfg, crate::trainer::BackpropMode::Auto)?;
    let adapter = cfg.layers.len() == model.config.layers.len();
    for (i, state) in model.layers.iter().enumerate() {
        let target = match i.cmp(&layer) {
            std::cmp::Ordering::Less => i,
            std::cmp::Ordering::Equal => continue,
            std::cmp::Ordering::Greater if adapter => i,
            std::cmp::Ordering::Greater => i - 1,
        };
        out.layers[target] = state.clone();
    }
    out.head = model.head.clone();
    Ok(out)
}

fn accuracy(model: &Model, data: &DataBundle, opts: &ReduceOptions) -> Result<f64> {
    model.accuracy(&data.test.images, &data.test.labels, opts.train.eval_batch)
}

/// Ablates `layer`, fine-tunes, and returns the tuned model with its
/// held-out accuracy.
fn ablate_and_tune(model: &Model, data: &DataBundle, layer: usize, opts: &ReduceOptions) -> Result<(f64, Model)> {
    let ablated = ablate_model(model, layer)?;
    let lr = model.config.train.lr * opts.finetune_lr_scale;
    let out = fit(ablated, data, opts.finetune_epochs, lr, &opts.train)?;
    if let Some(e) = out.diverged {
        return Err(e);
    }
    Ok((accuracy(&out.model, data, opts)?, out.model))
}

/// RI row of one layer of a trained model (rank left at 0).
pub fn compute_ri(model: &Model, data: &DataBundle, layer: usize, opts: &ReduceOptions) -> Result<RiRow> {
    if !removable_layers(&model.config).contains(&layer) {
        return Err(Error::Input(format!("layer {layer} is not removable")));
    }
    let full = accuracy(model, data, opts)?;
    let (acc, _) = ablate_and_tune(model, data, layer, opts)?;
    let (p_mpar, p_tlat) = layer_shares(&model.config)?[layer];
    let mut row = rank_layers(&[(layer, p_mpar, p_tlat, full - acc)]).remove(0);
    row.rank = 0;
    Ok(row)
}

/// Outcome of removing one layer in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub layer: usize,
    pub accuracy: f64,
    pub delta_acc: f64,
}

/// Ablates and fine-tunes every removable layer independently.
pub fn exhaustive_ablation(model: &Model, data: &DataBundle, opts: &ReduceOptions) -> Result<Vec<Ablation>> {
    let full = accuracy(model, data, opts)?;
    removable_layers(&model.config)
        .into_iter()
        .map(|layer| {
            let (acc, _) = ablate_and_tune(model, data, layer, opts)?;
            Ok(Ablation {
                layer,
                accuracy: acc,
                delta_acc: full - acc,
            })
        })
        .collect()
}

/// One accepted removal.
#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub iteration: usize,
    /// Index in the config the removal was applied to.
    pub layer: usize,
    pub ri: f64,
    pub delta_acc: f64,
    /// Drop from the starting accuracy after this removal.
    pub cumulative_drop: f64,
    pub accuracy: f64,
    pub layers_after: usize,
}

impl Removal {
    pub const HEADER: [&'static str; 7] = [
        "iteration",
        "layer",
        "ri",
        "delta_acc",
        "cumulative_drop",
        "accuracy",
        "layers_after",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.layer.to_string(),
            self.ri.to_string(),
            self.delta_acc.to_string(),
            self.cumulative_drop.to_string(),
            self.accuracy.to_string(),
            self.layers_after.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ReduceOutcome {
    pub config: ModelConfig,
    pub model: Model,
    pub removals: Vec<Removal>,
    /// Ranked RI report of every iteration, including the one that stopped.
    pub reports: Vec<Vec<RiRow>>,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
}

/// Greedy reduction: rank all removable layers by RI, remove the top one
/// (keeping its fine-tuned model), and stop once the cumulative accuracy
/// drop would exceed the budget or nothing is removable.
pub fn reduce(model: &Model, data: &DataBundle, opts: &ReduceOptions) -> Result<ReduceOutcome> {
    if opts.budget.is_nan() || opts.budget < 0.0 {
        return Err(Error::Input(format!(
            "accuracy budget {} must be non-negative",
            opts.budget
        )));
    }
    let base = accuracy(model, data, opts)?;
    let mut cur = model.clone();
    let mut cur_acc = base;
    let mut removals = Vec::new();
    let mut reports = Vec::new();
    for iteration in 0.. {
        let candidates = removable_layers(&cur.config);
        if candidates.is_empty() {
            log::info!("reduce: no removable layers left");
            break;
        }
        let shares = layer_shares(&cur.config)?;
        let mut entries = Vec::with_capacity(candidates.len());
        let mut tuned = Vec::with_capacity(candidates.len());
        for &layer in &candidates {
            let (acc, m) = ablate_and_tune(&cur, data, layer, opts)?;
            entries.push((layer, shares[layer].0, shares[layer].1, cur_acc - acc));
            tuned.push((layer, acc, m));
        }
        let rows = rank_layers(&entries);
        reports.push(rows.clone());
        let best = &rows[0];
        let (_, acc, m) = tuned
            .into_iter()
            .find(|t| t.0 == best.layer)
            .expect("ranked layer was tuned");
        let drop = base - acc;
        if drop > opts.budget {
            log::info!(
                "reduce: stopping; removing layer {} would drop accuracy by {drop:.4} (budget {:.4})",
                best.layer,
                opts.budget
            );
            break;
        }
        log::info!(
            "reduce: iteration {iteration}: removed layer {} (RI {:.4e}, delta {:.4}), accuracy {acc:.4}",
            best.layer,
            best.ri,
            best.delta_acc
        );
        removals.push(Removal {
            iteration,
            layer: best.layer,
            ri: best.ri,
            delta_acc: best.delta_acc,
            cumulative_drop: drop,
            accuracy: acc,
            layers_after: m.layers.len(),
        });
        cur = m;
        cur_acc = acc;
    }
    Ok(ReduceOutcome {
        config: cur.config.clone(),
        model: cur,
        removals,
        reports,
        base_accuracy: base,
        final_accuracy: cur_acc,
    })
}
