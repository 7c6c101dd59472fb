//! SGD training with cosine annealing, AUTO/HYBRID back-propagation, memory
//! ledgers and checkpoints.

mod checkpoint;
mod memory;
mod model;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, ManifestEntry, CONFIG_FILE, MANIFEST_FILE, PARAMS_FILE,
};
pub use memory::{measure_memory, profile_memory, MemoryLedger, ModeMemory};
pub use model::{layer_seed, BackpropMode, BatchNormState, LayerState, Model, Recorded, Slot, StepResult};
pub use optim::{cosine_lr, sgd_update, unit_label, OptimizerState};

use crate::autobuild::ModelConfig;
use crate::data::{DataBundle, Dataset};
use crate::diagnostics::{collect_gradient_stats, emit_csv, GradientStats};
use crate::error::{Error, Result};

/// Knobs not carried by the model configuration.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: BackpropMode,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
    /// Learning-rate multiplier for parameters of second-order terms.
    pub quadratic_lr_scale: f64,
    /// Samples per evaluation chunk.
    pub eval_batch: usize,
    /// Record gradient statistics from the last step of every epoch.
    pub gradient_stats: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            mode: BackpropMode::Hybrid,
            momentum: 0.9,
            weight_decay: 5e-4,
            eta_min: 0.0,
            quadratic_lr_scale: 1.0,
            eval_batch: 1000,
            gradient_stats: true,
        }
    }
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub peak_cached_bytes: usize,
}

impl EpochMetrics {
    pub const HEADER: [&'static str; 6] = [
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "test_acc",
        "peak_cached_bytes",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.train_loss.to_string(),
            self.train_acc.to_string(),
            self.test_acc.to_string(),
            self.peak_cached_bytes.to_string(),
        ]
    }

    /// Largest absolute difference over the numeric fields.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        [
            (self.epoch as f64 - other.epoch as f64),
            self.lr - other.lr,
            self.train_loss - other.train_loss,
            self.train_acc - other.train_acc,
            self.test_acc - other.test_acc,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    emit_csv(&EpochMetrics::HEADER, history.iter().map(EpochMetrics::record), path)
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Trained model; after a divergence, the model before the failing step.
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub stats: Vec<GradientStats>,
    /// Set when training halted on a non-finite loss or gradient.
    pub diverged: Option<Error>,
}

/// Trains a fresh model for `cfg` with the config's epochs, batch size,
/// learning rate and seed.
pub fn train(cfg: &ModelConfig, data: &DataBundle, opts: &TrainOptions) -> Result<TrainOutcome> {
    let model = Model::new(cfg, opts.mode)?;
    fit(model, data, cfg.train.epochs, cfg.train.lr, opts)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (epoch as u64).wrapping_add(0x51_7CC1_B727_220A)
}

fn check_data(model: &Model, ds: &Dataset) -> Result<()> {
    let want = model.config.train.dataset.input_shape();
    if ds.sample_shape() != want.as_slice() {
        return Err(Error::Input(format!(
            "{} samples have shape {:?}, config expects {want:?}",
            ds.id.tag(),
            ds.sample_shape()
        )));
    }
    Ok(())
}

/// Continues training `model` for `epochs` epochs from learning rate `lr0`.
/// Shuffling uses the model config's seed.
pub fn fit(mut model: Model, data: &DataBundle, epochs: usize, lr0: f64, opts: &TrainOptions) -> Result<TrainOutcome> {
    check_data(&model, &data.train)?;
    check_data(&model, &data.test)?;
    model.set_mode(opts.mode);
    let batch = model.config.train.batch.max(1);
    let seed = model.config.train.seed;
    let mut opt = OptimizerState::new(&model, lr0, epochs);
    opt.momentum = opts.momentum;
    opt.weight_decay = opts.weight_decay;
    opt.eta_min = opts.eta_min;
    opt.quadratic_lr_scale = opts.quadratic_lr_scale;
    let mut history = Vec::with_capacity(epochs);
    let mut stats = Vec::new();
    let n = data.train.len();
    for epoch in 0..epochs {
        let lr = opt.lr(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
        // A trailing batch of one sample has no batch statistics.
        let batches: Vec<&[usize]> = order.chunks(batch).filter(|c| c.len() > 1 || batch == 1).collect();
        let (mut loss_sum, mut correct, mut seen, mut peak) = (0.0, 0usize, 0usize, 0usize);
        let mut last_grads = None;
        for (step, idx) in batches.iter().enumerate() {
            let (x, labels) = data.train.batch(idx);
            let last_good = model.clone();
            let result = model.step(x, &labels)?;
            let halt = |e: Error,
                        model: Model,
                        history: Vec<EpochMetrics>,
                        stats: Vec<GradientStats>|
             -> Result<TrainOutcome> {
                log::error!("halting: {e}");
                Ok(TrainOutcome {
                    model,
                    history,
                    stats,
                    diverged: Some(e),
                })
            };
            if !result.loss.is_finite() {
                let e = Error::Divergence {
                    epoch,
                    step,
                    loss: result.loss,
                };
                return halt(e, last_good, history, stats);
            }
            if let Err(e) = opt.step(&mut model, &result.grads, lr) {
                return halt(e, last_good, history, stats);
            }
            loss_sum += result.loss * labels.len() as f64;
            correct += result.correct;
            seen += labels.len();
            peak = peak.max(result.memory.peak_bytes);
            last_grads = Some(result.grads);
        }
        if opts.gradient_stats {
            if let Some(g) = &last_grads {
                stats.extend(collect_gradient_stats(&model, g, epoch));
            }
        }
        let test_acc = model.accuracy(&data.test.images, &data.test.labels, opts.eval_batch)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            peak_cached_bytes: peak,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.4} loss {:.4} train {:.4} test {:.4}",
            m.train_loss,
            m.train_acc,
            m.test_acc
        );
        history.push(m);
    }
    Ok(TrainOutcome {
        model,
        history,
        stats,
        diverged: None,
    })
}
