//! Eager forward pass and closed-form backward pass.
//!
//! The backward pass performs the same kernel calls, in the same order, as
//! the reverse sweep over the equivalent AUTO expansion in `record.rs`, so
//! both produce bit-identical gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{LayerKind, LayerParams, NeuronFamily, ParamRole, QuadraticLayerSpec};
use crate::error::{Error, Result};
use crate::tensor::tape::square_backward;
use crate::tensor::{
    self, channel_sums, conv2d_backward_input, conv2d_backward_weight, conv2d_from_cols, im2col, ConvGeometry, Tensor,
};

/// How a weight set is applied to its input.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Lowering {
    Fc,
    Conv(ConvGeometry),
}

impl Lowering {
    pub(crate) fn for_input(spec: &QuadraticLayerSpec, x: &Tensor) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            LayerKind::Fc => {
                if x.rank() != 2 || x.shape()[1] != spec.inputs {
                    return Err(Error::Config(format!(
                        "fc layer expects [N, {}], got {:?}",
                        spec.inputs,
                        x.shape()
                    )));
                }
                Ok(Lowering::Fc)
            }
            _ => {
                if x.rank() != 4 || x.shape()[1] != spec.inputs {
                    return Err(Error::Config(format!(
                        "conv layer expects [N, {}, H, W], got {:?}",
                        spec.inputs,
                        x.shape()
                    )));
                }
                Ok(Lowering::Conv(spec.geometry(x.shape()[2], x.shape()[3])?))
            }
        }
    }

    fn lower(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Lowering::Fc => x.clone(),
            Lowering::Conv(g) => im2col(x, g)?,
        })
    }

    fn apply(&self, lowered: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        Ok(match self {
            Lowering::Fc => tensor::linear(lowered, w, b)?,
            Lowering::Conv(g) => conv2d_from_cols(lowered, w, b, g)?,
        })
    }

    fn grad_input(&self, g: &Tensor, w: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Lowering::Fc => tensor::linear_grad_input(g, w),
            Lowering::Conv(geo) => conv2d_backward_input(g, w, geo)?,
        })
    }

    fn grad_weight(&self, g: &Tensor, lowered: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Lowering::Fc => tensor::linear_grad_weight(g, lowered),
            Lowering::Conv(geo) => conv2d_backward_weight(lowered, g, geo)?,
        })
    }
}

/// Values retained by a symbolic layer for its backward pass.
///
/// Families built on a Hadamard product keep `{X, A, B}`; the others keep
/// only `X` and recompute the rest.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub family: NeuronFamily,
    pub kind: LayerKind,
    pub x: Tensor,
    pub a: Option<Tensor>,
    pub b: Option<Tensor>,
    fingerprint: u64,
}

impl LayerCache {
    /// Tensors the cache holds.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut v = vec![self.x.clone()];
        v.extend(self.a.clone());
        v.extend(self.b.clone());
        v
    }

    pub fn byte_size(&self) -> usize {
        self.tensors().iter().map(Tensor::byte_size).sum()
    }
}

fn fingerprint(spec: &QuadraticLayerSpec, params: &LayerParams) -> u64 {
    let mut h = DefaultHasher::new();
    spec.hash(&mut h);
    for (role, t) in params.iter() {
        role.hash(&mut h);
        t.shape().hash(&mut h);
        t.buffer_id().hash(&mut h);
        for v in t.data().iter().step_by((t.len() / 16).max(1)) {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Parameter and input gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dx: Tensor,
    /// Ordered as `family.roles()`.
    pub params: Vec<(ParamRole, Tensor)>,
}

impl LayerGrads {
    pub fn get(&self, role: ParamRole) -> Option<&Tensor> {
        self.params.iter().find(|(r, _)| *r == role).map(|(_, t)| t)
    }
}

fn accumulate(acc: Tensor, t: &Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let mut v = acc.into_vec();
    tensor::ops::accumulate(&mut v, t);
    Tensor::from_parts(shape, v)
}

/// Evaluates the layer and returns its output with the symbolic cache.
pub fn forward(spec: &QuadraticLayerSpec, params: &LayerParams, x: &Tensor) -> Result<(Tensor, LayerCache)> {
    let low = Lowering::for_input(spec, x)?;
    let p = |r| params.get(r);
    use ParamRole::*;
    let mut a_keep = None;
    let mut b_keep = None;
    let y = match spec.family {
        NeuronFamily::FirstOrder => low.apply(&low.lower(x)?, p(W), Some(p(B)))?,
        NeuronFamily::Proposed => {
            let lx = low.lower(x)?;
            let a = low.apply(&lx, p(Wa), Some(p(Ba)))?;
            let b = low.apply(&lx, p(Wb), Some(p(Bb)))?;
            let prod = tensor::hadamard(&a, &b)?;
            let c = low.apply(&lx, p(Wc), Some(p(Bc)))?;
            a_keep = Some(a);
            b_keep = Some(b);
            tensor::add(&prod, &c)?
        }
        NeuronFamily::T4 => {
            let lx = low.lower(x)?;
            let a = low.apply(&lx, p(Wa), Some(p(Ba)))?;
            let b = low.apply(&lx, p(Wb), Some(p(Bb)))?;
            let y = tensor::hadamard(&a, &b)?;
            a_keep = Some(a);
            b_keep = Some(b);
            y
        }
        NeuronFamily::T2And4 => {
            let lx = low.lower(x)?;
            let a = low.apply(&lx, p(Wa), Some(p(Ba)))?;
            let b = low.apply(&lx, p(Wb), Some(p(Bb)))?;
            let prod = tensor::hadamard(&a, &b)?;
            let s = tensor::square(x);
            let c = low.apply(&low.lower(&s)?, p(Wc), Some(p(Bc)))?;
            a_keep = Some(a);
            b_keep = Some(b);
            tensor::add(&prod, &c)?
        }
        NeuronFamily::T3 => {
            let a = low.apply(&low.lower(x)?, p(Wa), Some(p(Ba)))?;
            tensor::square(&a)
        }
        NeuronFamily::T2 => {
            let s = tensor::square(x);
            low.apply(&low.lower(&s)?, p(Wa), Some(p(Ba)))?
        }
        NeuronFamily::T1Pure => {
            let z = tensor::row_outer(x)?;
            tensor::linear(&z, p(Wq), Some(p(B)))?
        }
        NeuronFamily::T1Full => {
            let z = tensor::row_outer(x)?;
            let q = tensor::linear(&z, p(Wq), None)?;
            let l = tensor::linear(x, p(Wb), Some(p(B)))?;
            tensor::add(&q, &l)?
        }
        NeuronFamily::T1And2 => {
            let z = tensor::row_outer(x)?;
            let q = tensor::linear(&z, p(Wq), None)?;
            let s = tensor::square(x);
            let l = tensor::linear(&s, p(Wb), Some(p(B)))?;
            tensor::add(&q, &l)?
        }
    };
    let cache = LayerCache {
        family: spec.family,
        kind: spec.kind,
        x: x.clone(),
        a: a_keep,
        b: b_keep,
        fingerprint: fingerprint(spec, params),
    };
    Ok((y, cache))
}

/// Closed-form gradients from a cache produced by [`forward`] with the same
/// spec and parameters.
pub fn symbolic_backward(
    spec: &QuadraticLayerSpec,
    params: &LayerParams,
    cache: &LayerCache,
    dy: &Tensor,
) -> Result<LayerGrads> {
    if !spec.family.has_symbolic() {
        return Err(Error::Config(format!(
            "no closed-form backward registered for {}",
            spec.family
        )));
    }
    if cache.family != spec.family || cache.kind != spec.kind || cache.fingerprint != fingerprint(spec, params) {
        return Err(Error::Integrity(format!(
            "cache was produced by a different {} layer or different parameters",
            cache.family
        )));
    }
    let x = &cache.x;
    let low = Lowering::for_input(spec, x)?;
    let p = |r| params.get(r);
    use ParamRole::*;
    let need = |t: &Option<Tensor>| {
        t.clone()
            .ok_or_else(|| Error::Integrity(format!("{} cache lacks a branch output", spec.family)))
    };
    let g = dy;
    let (dx, grads): (Tensor, Vec<(ParamRole, Tensor)>) = match spec.family {
        NeuronFamily::FirstOrder => unreachable!("checked above"),
        NeuronFamily::Proposed => {
            let (a, b) = (need(&cache.a)?, need(&cache.b)?);
            let lx = low.lower(x)?;
            let dx = low.grad_input(g, p(Wc))?;
            let dwc = low.grad_weight(g, &lx)?;
            let dbc = channel_sums(g);
            let ga = tensor::hadamard(g, &b)?;
            let gb = tensor::hadamard(g, &a)?;
            let dx = accumulate(dx, &low.grad_input(&gb, p(Wb))?);
            let dwb = low.grad_weight(&gb, &lx)?;
            let dbb = channel_sums(&gb);
            let dx = accumulate(dx, &low.grad_input(&ga, p(Wa))?);
            let dwa = low.grad_weight(&ga, &lx)?;
            let dba = channel_sums(&ga);
            (
                dx,
                vec![(Wa, dwa), (Ba, dba), (Wb, dwb), (Bb, dbb), (Wc, dwc), (Bc, dbc)],
            )
        }
        NeuronFamily::T4 => {
            let (a, b) = (need(&cache.a)?, need(&cache.b)?);
            let lx = low.lower(x)?;
            let ga = tensor::hadamard(g, &b)?;
            let gb = tensor::hadamard(g, &a)?;
            let dx = low.grad_input(&gb, p(Wb))?;
            let dwb = low.grad_weight(&gb, &lx)?;
            let dbb = channel_sums(&gb);
            let dx = accumulate(dx, &low.grad_input(&ga, p(Wa))?);
            let dwa = low.grad_weight(&ga, &lx)?;
            let dba = channel_sums(&ga);
            (dx, vec![(Wa, dwa), (Ba, dba), (Wb, dwb), (Bb, dbb)])
        }
        NeuronFamily::T2And4 => {
            let (a, b) = (need(&cache.a)?, need(&cache.b)?);
            let s = tensor::square(x);
            let ls = low.lower(&s)?;
            let ds = low.grad_input(g, p(Wc))?;
            let dwc = low.grad_weight(g, &ls)?;
            let dbc = channel_sums(g);
            let dx = square_backward(x, &ds);
            let lx = low.lower(x)?;
            let ga = tensor::hadamard(g, &b)?;
            let gb = tensor::hadamard(g, &a)?;
            let dx = accumulate(dx, &low.grad_input(&gb, p(Wb))?);
            let dwb = low.grad_weight(&gb, &lx)?;
            let dbb = channel_sums(&gb);
            let dx = accumulate(dx, &low.grad_input(&ga, p(Wa))?);
            let dwa = low.grad_weight(&ga, &lx)?;
            let dba = channel_sums(&ga);
            (
                dx,
                vec![(Wa, dwa), (Ba, dba), (Wb, dwb), (Bb, dbb), (Wc, dwc), (Bc, dbc)],
            )
        }
        NeuronFamily::T3 => {
            let lx = low.lower(x)?;
            let a = low.apply(&lx, p(Wa), Some(p(Ba)))?;
            let ga = square_backward(&a, g);
            let dx = low.grad_input(&ga, p(Wa))?;
            let dwa = low.grad_weight(&ga, &lx)?;
            let dba = channel_sums(&ga);
            (dx, vec![(Wa, dwa), (Ba, dba)])
        }
        NeuronFamily::T2 => {
            let s = tensor::square(x);
            let ls = low.lower(&s)?;
            let ds = low.grad_input(g, p(Wa))?;
            let dwa = low.grad_weight(g, &ls)?;
            let dba = channel_sums(g);
            (square_backward(x, &ds), vec![(Wa, dwa), (Ba, dba)])
        }
        NeuronFamily::T1Pure => {
            let z = tensor::row_outer(x)?;
            let dz = tensor::linear_grad_input(g, p(Wq));
            let dwq = tensor::linear_grad_weight(g, &z);
            let db = channel_sums(g);
            (tensor::row_outer_backward(x, &dz), vec![(Wq, dwq), (B, db)])
        }
        NeuronFamily::T1Full => {
            let dx = tensor::linear_grad_input(g, p(Wb));
            let dwb = tensor::linear_grad_weight(g, x);
            let db = channel_sums(g);
            let z = tensor::row_outer(x)?;
            let dz = tensor::linear_grad_input(g, p(Wq));
            let dwq = tensor::linear_grad_weight(g, &z);
            let dx = accumulate(dx, &tensor::row_outer_backward(x, &dz));
            (dx, vec![(Wq, dwq), (Wb, dwb), (B, db)])
        }
        NeuronFamily::T1And2 => {
            let s = tensor::square(x);
            let ds = tensor::linear_grad_input(g, p(Wb));
            let dwb = tensor::linear_grad_weight(g, &s);
            let db = channel_sums(g);
            let dx = square_backward(x, &ds);
            let z = tensor::row_outer(x)?;
            let dz = tensor::linear_grad_input(g, p(Wq));
            let dwq = tensor::linear_grad_weight(g, &z);
            let dx = accumulate(dx, &tensor::row_outer_backward(x, &dz));
            (dx, vec![(Wq, dwq), (Wb, dwb), (B, db)])
        }
    };
    Ok(LayerGrads { dx, params: grads })
}
