//! Reverse-mode tape.
//!
//! Every recorded operation becomes a node. AUTO nodes keep their output and
//! whatever their derivative needs; SYMBOLIC nodes delegate both to a
//! [`SymbolicRule`] and keep only the rule's cache. The tape accounts for the
//! bytes it keeps alive: each buffer is charged to the first node that retains
//! it and released when the reverse sweep passes that node.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use super::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_from_cols, im2col, ConvGeometry};
use super::ops::{self, BatchNormOutput, BnStats};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Auto,
    Symbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Handle to a recorded value.
#[derive(Debug, Clone)]
pub struct Var {
    id: NodeId,
    value: Tensor,
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Closed-form derivative of a composite operation.
pub trait SymbolicRule: Send + Sync {
    fn name(&self) -> &str;

    /// Buffers the rule holds until its backward pass runs.
    fn cached(&self) -> Vec<Tensor>;

    /// Gradients for each input, in the order the inputs were recorded.
    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Matmul,
    Linear { bias: bool },
    Conv { geom: ConvGeometry, bias: bool },
    Add,
    Sub,
    Hadamard,
    Square,
    Scale(f64),
    AddChannelBias,
    RowOuter,
    Relu,
    Reshape,
    Sum,
    BatchNorm,
    SoftmaxCrossEntropy { labels: Arc<Vec<usize>> },
    Symbolic(Arc<dyn SymbolicRule>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv { .. } => "conv2d",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Hadamard => "hadamard",
            Op::Square => "square",
            Op::Scale(_) => "scale",
            Op::AddChannelBias => "add_channel_bias",
            Op::RowOuter => "row_outer",
            Op::Relu => "relu",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::BatchNorm => "batchnorm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Symbolic(rule) => rule.name(),
        }
    }
}

struct Node {
    op: Op,
    mode: Mode,
    inputs: Vec<NodeId>,
    input_shapes: Vec<Vec<usize>>,
    layer: Option<usize>,
    /// Output kept for AUTO nodes; dropped once the sweep passes the node.
    output: Option<Tensor>,
    /// Tensors the derivative reads.
    saved: Vec<Tensor>,
    /// Bytes first charged at this node, released with it.
    charged: usize,
}

/// Live accounting of bytes the tape keeps for the backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapeMemory {
    pub current_bytes: usize,
    pub peak_bytes: usize,
    /// Bytes charged per layer tag at record time.
    pub per_layer: BTreeMap<usize, usize>,
    /// Bytes charged to nodes without a layer tag.
    pub untagged: usize,
    /// `(event, bytes held afterwards)` for every charge and release.
    pub timeline: Vec<(String, usize)>,
}

pub struct Tape {
    nodes: Vec<Node>,
    seen: HashSet<usize>,
    memory: TapeMemory,
    layer: Option<usize>,
    swept: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("memory", &self.memory)
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.grads.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            seen: HashSet::new(),
            memory: TapeMemory::default(),
            layer: None,
            swept: false,
        }
    }

    /// Tags subsequently recorded nodes with a layer index.
    pub fn set_layer(&mut self, layer: Option<usize>) {
        self.layer = layer;
    }

    pub fn memory(&self) -> &TapeMemory {
        &self.memory
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes recorded in each mode.
    pub fn mode_counts(&self) -> (usize, usize) {
        let sym = self.nodes.iter().filter(|n| n.mode == Mode::Symbolic).count();
        let leaves = self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count();
        (self.nodes.len() - sym - leaves, sym)
    }

    /// Names of the recorded non-leaf operations, in order.
    pub fn op_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name().to_string())
            .collect()
    }

    /// Operations recorded under a layer tag, with their modes.
    pub fn layer_ops(&self, layer: usize) -> Vec<(String, Mode)> {
        self.nodes
            .iter()
            .filter(|n| n.layer == Some(layer) && !matches!(n.op, Op::Leaf))
            .map(|n| (n.op.name().to_string(), n.mode))
            .collect()
    }

    /// Registers an input or parameter. Leaf buffers are never charged.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.seen.insert(value.buffer_id());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            mode: Mode::Auto,
            inputs: Vec::new(),
            input_shapes: Vec::new(),
            layer: self.layer,
            output: None,
            saved: Vec::new(),
            charged: 0,
        });
        Var { id, value }
    }

    fn push(&mut self, op: Op, mode: Mode, inputs: &[&Var], output: Tensor, saved: Vec<Tensor>) -> Var {
        let retained = if mode == Mode::Auto { Some(output.clone()) } else { None };
        let mut charged = 0;
        for t in retained.iter().chain(&saved) {
            if self.seen.insert(t.buffer_id()) {
                charged += t.byte_size();
            }
        }
        self.memory.current_bytes += charged;
        self.memory.peak_bytes = self.memory.peak_bytes.max(self.memory.current_bytes);
        match self.layer {
            Some(l) => *self.memory.per_layer.entry(l).or_default() += charged,
            None => self.memory.untagged += charged,
        }
        if charged > 0 {
            self.memory
                .timeline
                .push((format!("cache {}", op.name()), self.memory.current_bytes));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            mode,
            inputs: inputs.iter().map(|v| v.id).collect(),
            input_shapes: inputs.iter().map(|v| v.shape().to_vec()).collect(),
            layer: self.layer,
            output: retained,
            saved,
            charged,
        });
        Var { id, value: output }
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::matmul(&a.value, &b.value)?;
        let saved = vec![a.value.clone(), b.value.clone()];
        Ok(self.push(Op::Matmul, Mode::Auto, &[a, b], out, saved))
    }

    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let out = ops::linear(&x.value, &w.value, b.map(|b| &b.value))?;
        let saved = vec![x.value.clone(), w.value.clone()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { bias: b.is_some() }, Mode::Auto, &inputs, out, saved))
    }

    /// Convolution; the unfolded columns are saved for the weight gradient.
    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: &ConvGeometry) -> Result<Var> {
        let cols = im2col(&x.value, geom)?;
        let out = conv2d_from_cols(&cols, &w.value, b.map(|b| &b.value), geom)?;
        let saved = vec![cols, w.value.clone()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Op::Conv {
                geom: *geom,
                bias: b.is_some(),
            },
            Mode::Auto,
            &inputs,
            out,
            saved,
        ))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(&a.value, &b.value)?;
        Ok(self.push(Op::Add, Mode::Auto, &[a, b], out, Vec::new()))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::sub(&a.value, &b.value)?;
        Ok(self.push(Op::Sub, Mode::Auto, &[a, b], out, Vec::new()))
    }

    pub fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::hadamard(&a.value, &b.value)?;
        let saved = vec![a.value.clone(), b.value.clone()];
        Ok(self.push(Op::Hadamard, Mode::Auto, &[a, b], out, saved))
    }

    pub fn square(&mut self, x: &Var) -> Var {
        let out = ops::square(&x.value);
        let saved = vec![x.value.clone()];
        self.push(Op::Square, Mode::Auto, &[x], out, saved)
    }

    pub fn scale(&mut self, x: &Var, s: f64) -> Var {
        let out = ops::scale(&x.value, s);
        self.push(Op::Scale(s), Mode::Auto, &[x], out, Vec::new())
    }

    pub fn add_channel_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let out = ops::add_channel_bias(&x.value, &b.value)?;
        Ok(self.push(Op::AddChannelBias, Mode::Auto, &[x, b], out, Vec::new()))
    }

    pub fn row_outer(&mut self, x: &Var) -> Result<Var> {
        let out = ops::row_outer(&x.value)?;
        let saved = vec![x.value.clone()];
        Ok(self.push(Op::RowOuter, Mode::Auto, &[x], out, saved))
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        let out = ops::relu(&x.value);
        let saved = vec![out.clone()];
        self.push(Op::Relu, Mode::Auto, &[x], out, saved)
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value.reshape(shape)?;
        Ok(self.push(Op::Reshape, Mode::Auto, &[x], out, Vec::new()))
    }

    pub fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(x.value.sum());
        self.push(Op::Sum, Mode::Auto, &[x], out, Vec::new())
    }

    /// Training-mode batch-norm; the statistics are returned for the caller's
    /// running-average update.
    pub fn batchnorm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<(Var, BatchNormOutput)> {
        let out = ops::batchnorm(&x.value, &gamma.value, &beta.value, eps, BnStats::Batch)?;
        let saved = vec![out.x_hat.clone(), out.inv_std.clone(), gamma.value.clone()];
        let v = self.push(Op::BatchNorm, Mode::Auto, &[x, gamma, beta], out.y.clone(), saved);
        Ok((v, out))
    }

    /// Mean softmax cross-entropy; the result is a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(&logits.value, labels)?;
        let op = Op::SoftmaxCrossEntropy {
            labels: Arc::new(labels.to_vec()),
        };
        Ok(self.push(op, Mode::Auto, &[logits], Tensor::scalar(loss), vec![probs]))
    }

    /// Records a composite whose forward was computed by the caller.
    pub fn symbolic(&mut self, inputs: &[&Var], output: Tensor, rule: Arc<dyn SymbolicRule>) -> Var {
        let saved = rule.cached();
        self.push(Op::Symbolic(rule), Mode::Symbolic, inputs, output, saved)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for `wrt`.
    ///
    /// Buffers are released node by node as the sweep passes them, so the
    /// tape can only be swept once. A `wrt` variable the loss does not depend
    /// on receives a zero gradient and a warning.
    pub fn backward(&mut self, loss: &Var, wrt: &[&Var]) -> Result<Gradients> {
        if self.swept {
            return Err(TensorError::Input {
                op: "backward",
                msg: "tape was already swept".into(),
            });
        }
        if loss.value.len() != 1 {
            return Err(TensorError::Input {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", loss.value.shape()),
            });
        }
        let root = loss.id.0;
        if root >= self.nodes.len() {
            return Err(TensorError::Input {
                op: "backward",
                msg: "loss does not belong to this tape".into(),
            });
        }
        self.swept = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for idx in (0..=root).rev() {
            let node = &mut self.nodes[idx];
            let g = if matches!(node.op, Op::Leaf) {
                None
            } else {
                grads[idx].take()
            };
            let inputs = std::mem::take(&mut node.inputs);
            let contributions = match g {
                Some(g) => node_backward(node, &g)?,
                None => Vec::new(),
            };
            node.output = None;
            node.saved.clear();
            if node.charged > 0 {
                self.memory.current_bytes -= node.charged;
                node.charged = 0;
                let event = format!("release {}", node.op.name());
                self.memory.timeline.push((event, self.memory.current_bytes));
            }
            for (input, contribution) in inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                let slot = &mut grads[input.0];
                *slot = Some(match slot.take() {
                    None => c,
                    Some(prev) => {
                        let mut acc = prev.into_vec();
                        ops::accumulate(&mut acc, &c);
                        Tensor::from_parts(c.shape().to_vec(), acc)
                    }
                });
            }
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        for node in &mut self.nodes[root + 1..] {
            node.output = None;
            node.saved.clear();
            if node.charged > 0 {
                self.memory.current_bytes -= node.charged;
                node.charged = 0;
                let event = format!("release {}", node.op.name());
                self.memory.timeline.push((event, self.memory.current_bytes));
            }
        }
        let mut out = Gradients::default();
        for v in wrt {
            let g = grads.get_mut(v.id.0).and_then(Option::take);
            let g = match g {
                Some(g) => g,
                None => {
                    log::warn!(
                        "no gradient reaches node {} of shape {:?}; using zeros",
                        v.id.0,
                        v.shape()
                    );
                    Tensor::zeros(v.shape())
                }
            };
            out.grads.insert(v.id, g);
        }
        Ok(out)
    }
}

fn node_backward(node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let s = &node.saved;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Matmul => {
            let (da, db) = ops::matmul_backward(&s[0], &s[1], g);
            vec![Some(da), Some(db)]
        }
        Op::Linear { bias } => {
            let mut v = vec![
                Some(ops::linear_grad_input(g, &s[1])),
                Some(ops::linear_grad_weight(g, &s[0])),
            ];
            if *bias {
                v.push(Some(ops::channel_sums(g)));
            }
            v
        }
        Op::Conv { geom, bias } => {
            let mut v = vec![
                Some(conv2d_backward_input(g, &s[1], geom)?),
                Some(conv2d_backward_weight(&s[0], g, geom)?),
            ];
            if *bias {
                v.push(Some(ops::channel_sums(g)));
            }
            v
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(ops::scale(g, -1.0))],
        Op::Hadamard => vec![Some(ops::hadamard(g, &s[1])?), Some(ops::hadamard(g, &s[0])?)],
        Op::Square => vec![Some(square_backward(&s[0], g))],
        Op::Scale(k) => vec![Some(ops::scale(g, *k))],
        Op::AddChannelBias => vec![Some(g.clone()), Some(ops::channel_sums(g))],
        Op::RowOuter => vec![Some(ops::row_outer_backward(&s[0], g))],
        Op::Relu => vec![Some(ops::relu_backward(&s[0], g))],
        Op::Reshape => vec![Some(g.reshape(&node.input_shapes[0])?)],
        Op::Sum => {
            let gv = g.item().unwrap_or(0.0);
            vec![Some(Tensor::full(&node.input_shapes[0], gv))]
        }
        Op::BatchNorm => {
            let (dx, dgamma, dbeta) = ops::batchnorm_backward(g, &s[0], &s[1], &s[2]);
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let up = g.item().unwrap_or(0.0);
            vec![Some(ops::softmax_cross_entropy_backward(&s[0], labels, up))]
        }
        Op::Symbolic(rule) => {
            let grads = rule.backward(g)?;
            if grads.len() != node.input_shapes.len() {
                return Err(TensorError::Input {
                    op: "backward",
                    msg: format!(
                        "symbolic rule {} returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        node.input_shapes.len()
                    ),
                });
            }
            grads.into_iter().map(Some).collect()
        }
    })
}

/// `2·x·g`, the derivative of [`ops::square`].
pub fn square_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x.data().iter().zip(g.data()).map(|(&x, &g)| 2.0 * x * g).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}
