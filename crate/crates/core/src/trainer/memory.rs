//! Cached-byte ledgers: measured from a real tape, or projected analytically
//! by replaying the same caching rules over shapes alone.

use std::collections::HashSet;

use super::model::{BackpropMode, Model};
use crate::autobuild::ModelConfig;
use crate::error::Result;
use crate::quadneuron::{Activation, LayerKind, NeuronFamily, QuadraticLayerSpec};
use crate::tensor::{Mode, TapeMemory, Tensor};

const F64: usize = std::mem::size_of::<f64>();

/// Cached bytes of one backward-propagation mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeMemory {
    /// Bytes charged while recording each unit (layers, then the head).
    pub per_layer: Vec<usize>,
    /// Bytes charged by the loss.
    pub loss_bytes: usize,
    pub peak_bytes: usize,
    /// `(event, bytes held afterwards)`, forward then backward.
    pub timeline: Vec<(String, usize)>,
    /// Cached bytes still held after the backward pass.
    pub residual_bytes: usize,
}

impl ModeMemory {
    fn from_tape(mem: &TapeMemory, units: usize) -> Self {
        Self {
            per_layer: (0..units)
                .map(|i| mem.per_layer.get(&i).copied().unwrap_or(0))
                .collect(),
            loss_bytes: mem.untagged,
            peak_bytes: mem.peak_bytes,
            timeline: mem.timeline.clone(),
            residual_bytes: mem.current_bytes,
        }
    }

    /// Bytes cached by the hidden layers, head and loss excluded.
    pub fn layer_bytes(&self) -> usize {
        self.per_layer.iter().rev().skip(1).sum()
    }

    /// Bytes held after each charge of the forward pass.
    pub fn forward_curve(&self) -> Vec<usize> {
        self.timeline
            .iter()
            .take_while(|(e, _)| e.starts_with("cache"))
            .map(|(_, b)| *b)
            .collect()
    }
}

/// AUTO and HYBRID cached bytes for one model and batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLedger {
    pub batch: usize,
    pub auto: ModeMemory,
    pub hybrid: ModeMemory,
    /// HYBRID with symbolic layers keeping only `{X, B}` and recomputing
    /// `A`; only available from the analytic projection.
    pub hybrid_xb: Option<ModeMemory>,
    /// Parameter bytes (gradients take the same amount).
    pub param_bytes: usize,
    /// Bytes that do not scale with the batch (batch-norm inverse
    /// deviations and the scalar loss).
    pub batch_independent_bytes: usize,
    pub budget: Option<usize>,
}

impl MemoryLedger {
    /// Fraction of the AUTO peak saved by HYBRID.
    pub fn saving(&self) -> f64 {
        if self.auto.peak_bytes == 0 {
            0.0
        } else {
            1.0 - self.hybrid.peak_bytes as f64 / self.auto.peak_bytes as f64
        }
    }

    /// Whether the given mode's peak exceeds the budget.
    pub fn over_budget(&self, mode: BackpropMode) -> bool {
        let peak = match mode {
            BackpropMode::Auto => self.auto.peak_bytes,
            BackpropMode::Hybrid => self.hybrid.peak_bytes,
        };
        self.budget.is_some_and(|b| peak > b)
    }

    pub fn with_budget(mut self, budget: Option<usize>) -> Self {
        self.budget = budget;
        self
    }
}

fn param_bytes(cfg: &ModelConfig) -> usize {
    let params: usize = cfg
        .layers
        .iter()
        .chain(std::iter::once(&cfg.head.as_layer()))
        .map(|l| crate::quadneuron::count_params(l).total() + if l.batchnorm { 2 * l.outputs } else { 0 })
        .sum();
    params * F64
}

fn batch_independent_bytes(cfg: &ModelConfig) -> usize {
    cfg.layers
        .iter()
        .filter(|l| l.batchnorm)
        .map(|l| l.outputs * F64)
        .sum::<usize>()
        + F64
}

/// Runs one forward/backward pass in each mode on `(x, labels)` and reads
/// the tape's accounting.
pub fn measure_memory(model: &Model, x: &Tensor, labels: &[usize]) -> Result<MemoryLedger> {
    let run = |mode: BackpropMode| -> Result<ModeMemory> {
        let mut m = model.clone();
        m.set_mode(mode);
        let step = m.step(x.clone(), labels)?;
        Ok(ModeMemory::from_tape(&step.memory, model.units()))
    };
    Ok(MemoryLedger {
        batch: labels.len(),
        auto: run(BackpropMode::Auto)?,
        hybrid: run(BackpropMode::Hybrid)?,
        hybrid_xb: None,
        param_bytes: param_bytes(&model.config),
        batch_independent_bytes: batch_independent_bytes(&model.config),
        budget: None,
    })
}

/// Analytic projection of cached bytes for `cfg` at `batch`, without
/// allocating or computing any tensor.
pub fn profile_memory(cfg: &ModelConfig, batch: usize) -> Result<MemoryLedger> {
    let shapes = cfg.layer_inputs()?;
    let run = |mode: BackpropMode, keep_a: bool| -> Result<ModeMemory> {
        let mut sim = Sim::default();
        let mut x = sim.leaf();
        let mut units: Vec<QuadraticLayerSpec> = cfg.layers.clone();
        units.push(cfg.head.as_layer());
        for (i, (spec, shape)) in units.iter().zip(&shapes).enumerate() {
            sim.layer = Some(i);
            let in_elems: usize = shape.iter().product();
            if spec.kind == LayerKind::Fc && shape.len() > 1 {
                sim.node("reshape", &[x]);
            }
            let mode = if i < cfg.layers.len() {
                mode.layer_mode(spec.family)
            } else {
                Mode::Auto
            };
            x = sim.layer(spec, shape, batch, batch * in_elems * F64, x, mode, keep_a)?;
            let out_elems: usize = spec.output_shape(shape)?.iter().product();
            let o = batch * out_elems * F64;
            if spec.batchnorm {
                let y = sim.fresh(o);
                let x_hat = sim.fresh(o);
                let inv_std = sim.fresh(spec.outputs * F64);
                sim.node("batchnorm", &[y, x_hat, inv_std]);
                x = y;
            }
            if spec.activation == Activation::Relu {
                x = sim.fresh(o);
                sim.node("relu", &[x]);
            }
        }
        sim.layer = None;
        let loss = sim.fresh(F64);
        let probs = sim.fresh(batch * cfg.head.classes * F64);
        sim.node("softmax_cross_entropy", &[loss, probs]);
        Ok(sim.finish(units.len()))
    };
    Ok(MemoryLedger {
        batch,
        auto: run(BackpropMode::Auto, true)?,
        hybrid: run(BackpropMode::Hybrid, true)?,
        hybrid_xb: Some(run(BackpropMode::Hybrid, false)?),
        param_bytes: param_bytes(cfg),
        batch_independent_bytes: batch_independent_bytes(cfg),
        budget: None,
    })
}

#[derive(Debug, Clone, Copy)]
struct Buf {
    id: usize,
    bytes: usize,
}

/// Mirror of the tape's charging rules over abstract buffers.
#[derive(Default)]
struct Sim {
    next: usize,
    seen: HashSet<usize>,
    layer: Option<usize>,
    mem: TapeMemory,
    charges: Vec<(String, usize)>,
}

impl Sim {
    fn fresh(&mut self, bytes: usize) -> Buf {
        self.next += 1;
        Buf { id: self.next, bytes }
    }

    fn leaf(&mut self) -> Buf {
        let b = self.fresh(0);
        self.seen.insert(b.id);
        b
    }

    fn node(&mut self, name: &str, retained: &[Buf]) {
        let mut charged = 0;
        for b in retained {
            if self.seen.insert(b.id) {
                charged += b.bytes;
            }
        }
        self.mem.current_bytes += charged;
        self.mem.peak_bytes = self.mem.peak_bytes.max(self.mem.current_bytes);
        match self.layer {
            Some(l) => *self.mem.per_layer.entry(l).or_default() += charged,
            None => self.mem.untagged += charged,
        }
        if charged > 0 {
            self.mem
                .timeline
                .push((format!("cache {name}"), self.mem.current_bytes));
        }
        self.charges.push((name.to_string(), charged));
    }

    fn finish(mut self, units: usize) -> ModeMemory {
        for (name, charged) in self.charges.iter().rev() {
            if *charged > 0 {
                self.mem.current_bytes -= charged;
                self.mem
                    .timeline
                    .push((format!("release {name}"), self.mem.current_bytes));
            }
        }
        ModeMemory::from_tape(&self.mem, units)
    }

    /// One weight application to `input`; returns its output.
    fn apply(&mut self, spec: &QuadraticLayerSpec, shape: &[usize], batch: usize, input: Buf, o: usize) -> Result<Buf> {
        let out = self.fresh(o);
        if spec.kind.is_conv() {
            let geom = spec.geometry(shape[1], shape[2])?;
            let cols = self.fresh(geom.cols_shape(batch).iter().product::<usize>() * F64);
            self.node("conv2d", &[out, cols]);
        } else {
            self.node("linear", &[out, input]);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        spec: &QuadraticLayerSpec,
        shape: &[usize],
        batch: usize,
        in_bytes: usize,
        x: Buf,
        mode: Mode,
        keep_a: bool,
    ) -> Result<Buf> {
        let o = batch * spec.output_shape(shape)?.iter().product::<usize>() * F64;
        let hadamard = matches!(
            spec.family,
            NeuronFamily::T4 | NeuronFamily::T2And4 | NeuronFamily::Proposed
        );
        if mode == Mode::Symbolic {
            let name = format!("{}[symbolic]", spec.family);
            let mut kept = vec![x];
            if hadamard {
                let a = self.fresh(o);
                let b = self.fresh(o);
                if keep_a {
                    kept.push(a);
                }
                kept.push(b);
            }
            self.node(&name, &kept);
            return Ok(self.fresh(o));
        }
        let outer = batch * spec.inputs * spec.inputs * F64;
        let binary = |sim: &mut Sim, name: &str, l: Buf, r: Buf, save: bool| {
            let out = sim.fresh(o);
            if save {
                sim.node(name, &[out, l, r]);
            } else {
                sim.node(name, &[out]);
            }
            out
        };
        Ok(match spec.family {
            NeuronFamily::FirstOrder => self.apply(spec, shape, batch, x, o)?,
            NeuronFamily::Proposed | NeuronFamily::T4 | NeuronFamily::T2And4 => {
                let a = self.apply(spec, shape, batch, x, o)?;
                let b = self.apply(spec, shape, batch, x, o)?;
                let prod = binary(self, "hadamard", a, b, true);
                let c = match spec.family {
                    NeuronFamily::T4 => return Ok(prod),
                    NeuronFamily::Proposed => self.apply(spec, shape, batch, x, o)?,
                    _ => {
                        let s = self.fresh(in_bytes);
                        self.node("square", &[s, x]);
                        self.apply(spec, shape, batch, s, o)?
                    }
                };
                binary(self, "add", prod, c, false)
            }
            NeuronFamily::T3 => {
                let a = self.apply(spec, shape, batch, x, o)?;
                let y = self.fresh(o);
                self.node("square", &[y, a]);
                y
            }
            NeuronFamily::T2 => {
                let s = self.fresh(in_bytes);
                self.node("square", &[s, x]);
                self.apply(spec, shape, batch, s, o)?
            }
            NeuronFamily::T1Pure | NeuronFamily::T1Full | NeuronFamily::T1And2 => {
                let z = self.fresh(outer);
                self.node("row_outer", &[z, x]);
                let q = self.fresh(o);
                self.node("linear", &[q, z]);
                if spec.family == NeuronFamily::T1Pure {
                    return Ok(q);
                }
                let lin_in = if spec.family == NeuronFamily::T1And2 {
                    let s = self.fresh(in_bytes);
                    self.node("square", &[s, x]);
                    s
                } else {
                    x
                };
                let l = self.apply(spec, shape, batch, lin_in, o)?;
                binary(self, "add", q, l, false)
            }
        })
    }
}
