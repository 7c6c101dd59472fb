//! Recording a layer on the tape, either expanded into primitive AUTO nodes or
//! as a single SYMBOLIC node.

use std::sync::Arc;

use super::forward::{forward, symbolic_backward, LayerCache, Lowering};
use super::{LayerParams, NeuronFamily, ParamRole, QuadraticLayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{self, Mode, SymbolicRule, Tape, Tensor, TensorError, Var};

/// Symbolic backward of one layer, bound to its cache.
pub struct LayerRule {
    spec: QuadraticLayerSpec,
    params: LayerParams,
    cache: LayerCache,
    name: String,
}

impl LayerRule {
    pub fn cache(&self) -> &LayerCache {
        &self.cache
    }
}

impl SymbolicRule for LayerRule {
    fn name(&self) -> &str {
        &self.name
    }

    fn cached(&self) -> Vec<Tensor> {
        self.cache.tensors()
    }

    fn backward(&self, upstream: &Tensor) -> tensor::Result<Vec<Tensor>> {
        let grads = symbolic_backward(&self.spec, &self.params, &self.cache, upstream).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Input {
                op: "symbolic backward",
                msg: other.to_string(),
            },
        })?;
        let mut out = vec![grads.dx];
        out.extend(grads.params.into_iter().map(|(_, t)| t));
        Ok(out)
    }
}

/// Records `spec` applied to `x`. `params` holds one variable per role, in
/// `spec.family.roles()` order.
pub fn record_layer(tape: &mut Tape, spec: &QuadraticLayerSpec, params: &[Var], x: &Var, mode: Mode) -> Result<Var> {
    let roles = spec.family.roles();
    if params.len() != roles.len() {
        return Err(Error::Config(format!(
            "{} layer needs {} parameters, got {}",
            spec.family,
            roles.len(),
            params.len()
        )));
    }
    match mode {
        Mode::Symbolic => {
            if !spec.family.has_symbolic() {
                return Err(Error::Config(format!(
                    "no closed-form backward registered for {} layers",
                    spec.family
                )));
            }
            let values = LayerParams::new(
                spec,
                roles.iter().zip(params).map(|(r, v)| (*r, v.value().clone())).collect(),
            )?;
            let (y, cache) = forward(spec, &values, x.value())?;
            let rule = LayerRule {
                spec: *spec,
                params: values,
                cache,
                name: format!("{}[symbolic]", spec.family),
            };
            let mut inputs = vec![x];
            inputs.extend(params.iter());
            Ok(tape.symbolic(&inputs, y, Arc::new(rule)))
        }
        Mode::Auto => record_auto(tape, spec, params, x),
    }
}

fn record_auto(tape: &mut Tape, spec: &QuadraticLayerSpec, params: &[Var], x: &Var) -> Result<Var> {
    let low = Lowering::for_input(spec, x.value())?;
    let roles = spec.family.roles();
    let p = |role: ParamRole| &params[roles.iter().position(|r| *r == role).expect("role of family")];
    let apply = |tape: &mut Tape, input: &Var, w: &Var, b: Option<&Var>| -> Result<Var> {
        Ok(match &low {
            Lowering::Fc => tape.linear(input, w, b)?,
            Lowering::Conv(g) => tape.conv2d(input, w, b, g)?,
        })
    };
    use ParamRole::*;
    let y = match spec.family {
        NeuronFamily::FirstOrder => apply(tape, x, p(W), Some(p(B)))?,
        NeuronFamily::Proposed => {
            let a = apply(tape, x, p(Wa), Some(p(Ba)))?;
            let b = apply(tape, x, p(Wb), Some(p(Bb)))?;
            let prod = tape.hadamard(&a, &b)?;
            let c = apply(tape, x, p(Wc), Some(p(Bc)))?;
            tape.add(&prod, &c)?
        }
        NeuronFamily::T4 => {
            let a = apply(tape, x, p(Wa), Some(p(Ba)))?;
            let b = apply(tape, x, p(Wb), Some(p(Bb)))?;
            tape.hadamard(&a, &b)?
        }
        NeuronFamily::T2And4 => {
            let a = apply(tape, x, p(Wa), Some(p(Ba)))?;
            let b = apply(tape, x, p(Wb), Some(p(Bb)))?;
            let prod = tape.hadamard(&a, &b)?;
            let s = tape.square(x);
            let c = apply(tape, &s, p(Wc), Some(p(Bc)))?;
            tape.add(&prod, &c)?
        }
        NeuronFamily::T3 => {
            let a = apply(tape, x, p(Wa), Some(p(Ba)))?;
            tape.square(&a)
        }
        NeuronFamily::T2 => {
            let s = tape.square(x);
            apply(tape, &s, p(Wa), Some(p(Ba)))?
        }
        NeuronFamily::T1Pure => {
            let z = tape.row_outer(x)?;
            tape.linear(&z, p(Wq), Some(p(B)))?
        }
        NeuronFamily::T1Full => {
            let z = tape.row_outer(x)?;
            let q = tape.linear(&z, p(Wq), None)?;
            let l = tape.linear(x, p(Wb), Some(p(B)))?;
            tape.add(&q, &l)?
        }
        NeuronFamily::T1And2 => {
            let z = tape.row_outer(x)?;
            let q = tape.linear(&z, p(Wq), None)?;
            let s = tape.square(x);
            let l = tape.linear(&s, p(Wb), Some(p(B)))?;
            tape.add(&q, &l)?
        }
    };
    Ok(y)
}
