use std::fmt;
use std::str::FromStr;

use crate::autobuild::ModelConfig;
use crate::error::{Error, Result};
use crate::quadneuron::{
    self, init_params, record_layer, Activation, LayerKind, LayerParams, NeuronFamily, ParamRole, QuadraticLayerSpec,
};
use crate::tensor::{
    self, BatchNormOutput, BnStats, Mode, RunningStats, Tape, TapeMemory, Tensor, Var, BN_EPS, BN_MOMENTUM,
};

/// How quadratic layers are differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackpropMode {
    /// Every layer expanded into primitive tape nodes.
    Auto,
    /// Quadratic layers use their closed-form backward; everything else is taped.
    Hybrid,
}

impl BackpropMode {
    pub fn tag(self) -> &'static str {
        match self {
            BackpropMode::Auto => "auto",
            BackpropMode::Hybrid => "hybrid",
        }
    }

    /// Default mode for a layer of `family`.
    pub fn layer_mode(self, family: NeuronFamily) -> Mode {
        match self {
            BackpropMode::Hybrid if family.has_symbolic() => Mode::Symbolic,
            _ => Mode::Auto,
        }
    }
}

impl fmt::Display for BackpropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BackpropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(BackpropMode::Auto),
            "hybrid" => Ok(BackpropMode::Hybrid),
            other => Err(Error::Config(format!(
                "unknown backprop mode {other:?} (expected auto or hybrid)"
            ))),
        }
    }
}

/// Trainable slot of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Param(ParamRole),
    BnGamma,
    BnBeta,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Param(r) => r.name(),
            Slot::BnGamma => "bn_gamma",
            Slot::BnBeta => "bn_beta",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "bn_gamma" => Some(Slot::BnGamma),
            "bn_beta" => Some(Slot::BnBeta),
            _ => ParamRole::from_name(s).map(Slot::Param),
        }
    }

    pub fn is_batchnorm(self) -> bool {
        !matches!(self, Slot::Param(_))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
        }
    }
}

/// One layer with its parameters and differentiation mode.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub spec: QuadraticLayerSpec,
    pub params: LayerParams,
    pub bn: Option<BatchNormState>,
    pub mode: Mode,
}

impl LayerState {
    pub fn slots(&self) -> Vec<Slot> {
        let mut v: Vec<Slot> = self.spec.family.roles().iter().map(|&r| Slot::Param(r)).collect();
        if self.bn.is_some() {
            v.extend([Slot::BnGamma, Slot::BnBeta]);
        }
        v
    }

    /// Current values in [`slots`](Self::slots) order.
    pub fn values(&self) -> Vec<Tensor> {
        let mut v = self.params.tensors();
        if let Some(bn) = &self.bn {
            v.extend([bn.gamma.clone(), bn.beta.clone()]);
        }
        v
    }

    /// Replaces the values in [`slots`](Self::slots) order.
    pub fn set_values(&mut self, values: Vec<Tensor>) {
        let n = self.spec.family.roles().len();
        let mut it = values.into_iter();
        self.params = self.params.replace(it.by_ref().take(n).collect());
        if let Some(bn) = &mut self.bn {
            bn.gamma = it.next().expect("gamma value");
            bn.beta = it.next().expect("beta value");
        }
    }

    /// Eager inference forward using running batch-norm statistics.
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let x = flatten_for(&self.spec, x)?;
        let (mut y, _) = quadneuron::forward(&self.spec, &self.params, &x)?;
        if let Some(bn) = &self.bn {
            let stats = BnStats::Running {
                mean: &bn.running.mean,
                var: &bn.running.var,
            };
            y = tensor::batchnorm(&y, &bn.gamma, &bn.beta, BN_EPS, stats)?.y;
        }
        if self.spec.activation == Activation::Relu {
            y = tensor::relu(&y);
        }
        Ok(y)
    }
}

fn flatten_for(spec: &QuadraticLayerSpec, x: &Tensor) -> Result<Tensor> {
    if spec.kind == LayerKind::Fc && x.rank() > 2 {
        let n = x.shape()[0];
        Ok(x.reshape(&[n, x.len() / n.max(1)])?)
    } else {
        Ok(x.clone())
    }
}

/// Seed of the parameters of layer `index`.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A network built from a [`ModelConfig`]; the head is a first-order fc layer
/// and is always taped.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerState>,
    pub head: LayerState,
}

/// Values produced by a recorded training forward pass.
pub struct Recorded {
    pub loss: Var,
    pub logits: Tensor,
    /// Variables in slot order, per unit (layers, then the head).
    pub vars: Vec<Vec<Var>>,
    pub bn: Vec<Option<BatchNormOutput>>,
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub correct: usize,
    /// Gradients in slot order, per unit (layers, then the head).
    pub grads: Vec<Vec<Tensor>>,
    pub memory: TapeMemory,
}

impl Model {
    /// Freshly initialized model; layer modes follow `mode`.
    pub fn new(config: &ModelConfig, mode: BackpropMode) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, spec) in config.layers.iter().enumerate() {
            layers.push(LayerState {
                spec: *spec,
                params: init_params(spec, layer_seed(seed, i))?,
                bn: spec.batchnorm.then(|| BatchNormState::new(spec.outputs)),
                mode: mode.layer_mode(spec.family),
            });
        }
        let head_spec = config.head.as_layer();
        let head = LayerState {
            spec: head_spec,
            params: init_params(&head_spec, layer_seed(seed, config.layers.len()))?,
            bn: None,
            mode: Mode::Auto,
        };
        Ok(Self {
            config: config.clone(),
            layers,
            head,
        })
    }

    /// Number of units including the head.
    pub fn units(&self) -> usize {
        self.layers.len() + 1
    }

    /// Layer `i`, or the head when `i == layers.len()`.
    pub fn unit(&self, i: usize) -> &LayerState {
        self.layers.get(i).unwrap_or(&self.head)
    }

    pub fn unit_mut(&mut self, i: usize) -> &mut LayerState {
        if i < self.layers.len() {
            &mut self.layers[i]
        } else {
            &mut self.head
        }
    }

    /// Overrides the differentiation mode of one layer.
    pub fn set_layer_mode(&mut self, layer: usize, mode: Mode) -> Result<()> {
        let state = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Input(format!("no layer {layer}")))?;
        if mode == Mode::Symbolic && !state.spec.family.has_symbolic() {
            return Err(Error::Config(format!(
                "layer {layer} ({}) has no closed-form backward; it must stay auto",
                state.spec.family
            )));
        }
        state.mode = mode;
        Ok(())
    }

    /// Switches every layer to the default mode of `mode`.
    pub fn set_mode(&mut self, mode: BackpropMode) {
        for l in &mut self.layers {
            l.mode = mode.layer_mode(l.spec.family);
        }
    }

    /// Records the training forward pass and the loss on `tape`.
    pub fn record(&self, tape: &mut Tape, x: Tensor, labels: &[usize]) -> Result<Recorded> {
        let mut cur = tape.leaf(x);
        let mut vars = Vec::with_capacity(self.units());
        let mut bn_out = Vec::with_capacity(self.units());
        for i in 0..self.units() {
            let unit = self.unit(i);
            tape.set_layer(Some(i));
            let params: Vec<Var> = unit.params.tensors().into_iter().map(|t| tape.leaf(t)).collect();
            if unit.spec.kind == LayerKind::Fc && cur.value().rank() > 2 {
                let n = cur.shape()[0];
                let flat = cur.value().len() / n.max(1);
                cur = tape.reshape(&cur, &[n, flat])?;
            }
            cur = record_layer(tape, &unit.spec, &params, &cur, unit.mode)?;
            let mut unit_vars = params;
            let mut stats = None;
            if let Some(bn) = &unit.bn {
                let gamma = tape.leaf(bn.gamma.clone());
                let beta = tape.leaf(bn.beta.clone());
                let (y, out) = tape.batchnorm(&cur, &gamma, &beta, BN_EPS)?;
                cur = y;
                stats = Some(out);
                unit_vars.extend([gamma, beta]);
            }
            if unit.spec.activation == Activation::Relu {
                cur = tape.relu(&cur);
            }
            vars.push(unit_vars);
            bn_out.push(stats);
        }
        tape.set_layer(None);
        let loss = tape.softmax_cross_entropy(&cur, labels)?;
        Ok(Recorded {
            loss,
            logits: cur.value().clone(),
            vars,
            bn: bn_out,
        })
    }

    /// Forward and backward on one batch. Running batch-norm statistics are
    /// updated; parameters are not.
    pub fn step(&mut self, x: Tensor, labels: &[usize]) -> Result<StepResult> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, labels)?;
        let loss = rec.loss.value().item().unwrap_or(f64::NAN);
        let correct = tensor::argmax_rows(&rec.logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let wrt: Vec<&Var> = rec.vars.iter().flatten().collect();
        let mut g = tape.backward(&rec.loss, &wrt)?;
        let grads = rec
            .vars
            .iter()
            .map(|unit| unit.iter().map(|v| g.take(v).expect("requested gradient")).collect())
            .collect();
        for (i, out) in rec.bn.iter().enumerate() {
            if let (Some(out), Some(bn)) = (out, self.unit_mut(i).bn.as_mut()) {
                bn.running.update(out, BN_MOMENTUM);
            }
        }
        Ok(StepResult {
            loss,
            correct,
            grads,
            memory: tape.memory().clone(),
        })
    }

    /// Output of layer `upto` (after batch-norm and activation) in inference
    /// mode; `upto == layers.len()` gives the logits.
    pub fn forward_until(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        if upto >= self.units() {
            return Err(Error::Input(format!(
                "layer index {upto} out of range (model has {} layers and a head)",
                self.layers.len()
            )));
        }
        let mut cur = x.clone();
        for i in 0..=upto {
            cur = self.unit(i).infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_until(x, self.layers.len())
    }

    /// Classification accuracy over `(images, labels)`, evaluated in chunks.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize], chunk: usize) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let per = images.len() / labels.len();
        let sample_shape = &images.shape()[1..];
        let mut correct = 0;
        for start in (0..labels.len()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(labels.len());
            let mut shape = vec![end - start];
            shape.extend_from_slice(sample_shape);
            let x = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let pred = tensor::argmax_rows(&self.predict(&x)?);
            correct += pred.iter().zip(&labels[start..end]).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Parameter count excluding batch-norm.
    pub fn param_count(&self) -> usize {
        (0..self.units())
            .map(|i| quadneuron::count_params(&self.unit(i).spec).total())
            .sum()
    }
}
