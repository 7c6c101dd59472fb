//! Quadratic neuron families in fully connected and convolutional form.
//!
//! | family        | output                               |
//! |---------------|--------------------------------------|
//! | `FirstOrder`  | `W·X + b`                            |
//! | `T1Full`      | `Xᵀ·Wq·X + Wb·X + b`                 |
//! | `T1Pure`      | `Xᵀ·Wq·X + b`                        |
//! | `T2`          | `Wa·(X∘X) + ba`                      |
//! | `T3`          | `(Wa·X + ba)∘(Wa·X + ba)`            |
//! | `T4`          | `(Wa·X + ba)∘(Wb·X + bb)`            |
//! | `T1And2`      | `Xᵀ·Wq·X + Wb·(X∘X) + b`             |
//! | `T2And4`      | `(Wa·X + ba)∘(Wb·X + bb) + Wc·(X∘X) + bc` |
//! | `Proposed`    | `(Wa·X + ba)∘(Wb·X + bb) + Wc·X + bc` |
//!
//! The `Xᵀ·Wq·X` term is evaluated as a linear map of the row-wise outer
//! product `X⊗X`, so `Wq` is stored as `[out, in²]`.

mod forward;
mod probe;
mod record;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

pub use forward::{forward, symbolic_backward, LayerCache, LayerGrads};
pub use probe::{polynomial_degree_probe, PolyFit, PROBE_TOLERANCE};
pub use record::{record_layer, LayerRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NeuronFamily {
    FirstOrder,
    T1Full,
    T1Pure,
    T2,
    T3,
    T4,
    T1And2,
    T2And4,
    Proposed,
}

impl NeuronFamily {
    pub const ALL: [NeuronFamily; 9] = [
        NeuronFamily::FirstOrder,
        NeuronFamily::T1Full,
        NeuronFamily::T1Pure,
        NeuronFamily::T2,
        NeuronFamily::T3,
        NeuronFamily::T4,
        NeuronFamily::T1And2,
        NeuronFamily::T2And4,
        NeuronFamily::Proposed,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            NeuronFamily::FirstOrder => "first_order",
            NeuronFamily::T1Full => "t1_full",
            NeuronFamily::T1Pure => "t1_pure",
            NeuronFamily::T2 => "t2",
            NeuronFamily::T3 => "t3",
            NeuronFamily::T4 => "t4",
            NeuronFamily::T1And2 => "t1and2",
            NeuronFamily::T2And4 => "t2and4",
            NeuronFamily::Proposed => "proposed",
        }
    }

    /// Parameter roles, in the order gradients and checkpoints list them.
    pub fn roles(self) -> &'static [ParamRole] {
        use ParamRole::*;
        match self {
            NeuronFamily::FirstOrder => &[W, B],
            NeuronFamily::T1Full => &[Wq, Wb, B],
            NeuronFamily::T1Pure => &[Wq, B],
            NeuronFamily::T2 | NeuronFamily::T3 => &[Wa, Ba],
            NeuronFamily::T4 => &[Wa, Ba, Wb, Bb],
            NeuronFamily::T1And2 => &[Wq, Wb, B],
            NeuronFamily::T2And4 | NeuronFamily::Proposed => &[Wa, Ba, Wb, Bb, Wc, Bc],
        }
    }

    pub fn is_quadratic(self) -> bool {
        self != NeuronFamily::FirstOrder
    }

    pub fn is_t1(self) -> bool {
        matches!(self, NeuronFamily::T1Full | NeuronFamily::T1Pure | NeuronFamily::T1And2)
    }

    /// Whether a closed-form backward is registered for this family.
    pub fn has_symbolic(self) -> bool {
        self.is_quadratic()
    }
}

impl fmt::Display for NeuronFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for NeuronFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        if lower == "t1" {
            return Ok(NeuronFamily::T1Full);
        }
        NeuronFamily::ALL
            .into_iter()
            .find(|f| f.tag() == lower)
            .ok_or_else(|| format!("unknown neuron family `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Fc,
    Conv,
    DepthwiseConv,
}

impl LayerKind {
    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::Fc => "fc",
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "dwconv",
        }
    }

    pub fn is_conv(self) -> bool {
        self != LayerKind::Fc
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fc" => Ok(LayerKind::Fc),
            "conv" => Ok(LayerKind::Conv),
            "dwconv" => Ok(LayerKind::DepthwiseConv),
            _ => Err(format!("unknown layer kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    W,
    B,
    Wq,
    Wa,
    Ba,
    Wb,
    Bb,
    Wc,
    Bc,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::W => "w",
            ParamRole::B => "b",
            ParamRole::Wq => "wq",
            ParamRole::Wa => "wa",
            ParamRole::Ba => "ba",
            ParamRole::Wb => "wb",
            ParamRole::Bb => "bb",
            ParamRole::Wc => "wc",
            ParamRole::Bc => "bc",
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::B | ParamRole::Ba | ParamRole::Bb | ParamRole::Bc)
    }

    pub fn from_name(s: &str) -> Option<Self> {
        use ParamRole::*;
        [W, B, Wq, Wa, Ba, Wb, Bb, Wc, Bc].into_iter().find(|r| r.name() == s)
    }
}

/// Parameters that belong to a multiplicative (second-order) term of `family`.
pub fn is_second_order(family: NeuronFamily, role: ParamRole) -> bool {
    use ParamRole::*;
    match family {
        NeuronFamily::FirstOrder => false,
        NeuronFamily::T1Full => role == Wq,
        NeuronFamily::T1Pure | NeuronFamily::T1And2 => role != B,
        NeuronFamily::T2 | NeuronFamily::T3 | NeuronFamily::T4 => true,
        NeuronFamily::T2And4 => true,
        NeuronFamily::Proposed => matches!(role, Wa | Ba | Wb | Bb),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuadraticLayerSpec {
    pub family: NeuronFamily,
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batchnorm: bool,
    pub activation: Activation,
}

impl QuadraticLayerSpec {
    pub fn fc(family: NeuronFamily, inputs: usize, outputs: usize) -> Self {
        Self {
            family,
            kind: LayerKind::Fc,
            inputs,
            outputs,
            kernel: 1,
            stride: 1,
            padding: 0,
            batchnorm: false,
            activation: Activation::None,
        }
    }

    pub fn conv(
        family: NeuronFamily,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            family,
            kind: LayerKind::Conv,
            inputs,
            outputs,
            kernel,
            stride,
            padding,
            batchnorm: false,
            activation: Activation::None,
        }
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err(Error::Config(format!(
                "layer has zero width: {} -> {}",
                self.inputs, self.outputs
            )));
        }
        if self.family.is_t1() && self.kind != LayerKind::Fc {
            return Err(Error::Config(format!(
                "{} neurons need a full-rank quadratic weight and are only supported in fc layers",
                self.family
            )));
        }
        if self.kind == LayerKind::DepthwiseConv && self.inputs != self.outputs {
            return Err(Error::Config(format!(
                "depthwise layer needs equal in/out channels, got {} -> {}",
                self.inputs, self.outputs
            )));
        }
        if self.kind.is_conv() && (self.kernel == 0 || self.stride == 0) {
            return Err(Error::Config("conv layer needs kernel >= 1 and stride >= 1".into()));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        match self.kind {
            LayerKind::DepthwiseConv => self.inputs,
            _ => 1,
        }
    }

    /// Convolution geometry for a per-sample input of `[C, H, W]`.
    pub fn geometry(&self, height: usize, width: usize) -> Result<ConvGeometry> {
        Ok(ConvGeometry::new(
            self.inputs,
            self.outputs,
            height,
            width,
            self.kernel,
            self.stride,
            self.padding,
            self.groups(),
        )?)
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Fc => {
                let n: usize = input.iter().product();
                if n != self.inputs {
                    return Err(Error::Config(format!(
                        "fc layer expects {} features, got input {input:?}",
                        self.inputs
                    )));
                }
                Ok(vec![self.outputs])
            }
            _ => {
                if input.len() != 3 || input[0] != self.inputs {
                    return Err(Error::Config(format!(
                        "conv layer expects [{}, H, W], got {input:?}",
                        self.inputs
                    )));
                }
                let g = self.geometry(input[1], input[2])?;
                Ok(vec![self.outputs, g.out_height(), g.out_width()])
            }
        }
    }

    /// Shape of the tensor for `role`.
    pub fn param_shape(&self, role: ParamRole) -> Vec<usize> {
        if role.is_bias() {
            return vec![self.outputs];
        }
        match self.kind {
            LayerKind::Fc if role == ParamRole::Wq => vec![self.outputs, self.inputs * self.inputs],
            LayerKind::Fc => vec![self.outputs, self.inputs],
            _ => vec![self.outputs, self.inputs / self.groups(), self.kernel, self.kernel],
        }
    }

    fn fan_in(&self, role: ParamRole) -> usize {
        self.param_shape(role)[1..].iter().product()
    }
}

/// Named parameter tensors of one layer, ordered as `family.roles()`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    tensors: Vec<(ParamRole, Tensor)>,
}

impl LayerParams {
    /// Builds a parameter set after checking roles and shapes against `spec`.
    pub fn new(spec: &QuadraticLayerSpec, tensors: Vec<(ParamRole, Tensor)>) -> Result<Self> {
        let roles = spec.family.roles();
        if tensors.len() != roles.len() {
            return Err(Error::Config(format!(
                "{} expects roles {:?}, got {} tensors",
                spec.family,
                roles.iter().map(|r| r.name()).collect::<Vec<_>>(),
                tensors.len()
            )));
        }
        let mut ordered = Vec::with_capacity(roles.len());
        for &role in roles {
            let t = tensors
                .iter()
                .find(|(r, _)| *r == role)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("{} is missing parameter {}", spec.family, role.name())))?;
            let want = spec.param_shape(role);
            if t.shape() != want.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {want:?}",
                    role.name(),
                    t.shape()
                )));
            }
            ordered.push((role, t));
        }
        Ok(Self { tensors: ordered })
    }

    pub fn get(&self, role: ParamRole) -> &Tensor {
        &self
            .tensors
            .iter()
            .find(|(r, _)| *r == role)
            .unwrap_or_else(|| panic!("no parameter {}", role.name()))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRole, &Tensor)> {
        self.tensors.iter().map(|(r, t)| (*r, t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn byte_size(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.byte_size()).sum()
    }

    /// Replaces the tensors in role order; shapes must be unchanged.
    pub fn replace(&self, tensors: Vec<Tensor>) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        let tensors = self
            .tensors
            .iter()
            .zip(tensors)
            .map(|((r, old), new)| {
                assert_eq!(old.shape(), new.shape(), "shape of {} changed", r.name());
                (*r, new)
            })
            .collect();
        Self { tensors }
    }
}

/// Draws initial parameters.
///
/// Weights are Kaiming-normal, `N(0, 2/fan_in)`. The second factor `Wb` of a
/// Hadamard product is additionally scaled by 0.1. Biases start at zero.
pub fn init_params(spec: &QuadraticLayerSpec, seed: u64) -> Result<LayerParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for &role in spec.family.roles() {
        let shape = spec.param_shape(role);
        let t = if role.is_bias() {
            Tensor::zeros(&shape)
        } else {
            let mut std = (2.0 / spec.fan_in(role) as f64).sqrt();
            let hadamard_factor = matches!(
                spec.family,
                NeuronFamily::T4 | NeuronFamily::T2And4 | NeuronFamily::Proposed
            );
            if role == ParamRole::Wb && hadamard_factor {
                std *= 0.1;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
        };
        tensors.push((role, t));
    }
    LayerParams::new(spec, tensors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

pub fn count_params(spec: &QuadraticLayerSpec) -> ParamCount {
    let mut c = ParamCount::default();
    for &role in spec.family.roles() {
        let n: usize = spec.param_shape(role).iter().product();
        if role.is_bias() {
            c.biases += n;
        } else {
            c.weights += n;
        }
    }
    c
}

/// Multiply-accumulates per sample.
///
/// Every weight application costs one MAC per weight use; each elementwise
/// product (Hadamard or squaring) costs one per element. Bias and branch
/// additions are free.
pub fn count_macs(spec: &QuadraticLayerSpec, input: &[usize]) -> Result<u64> {
    let out_shape = spec.output_shape(input)?;
    let in_elems: u64 = input.iter().product::<usize>() as u64;
    let out_elems: u64 = out_shape.iter().product::<usize>() as u64;
    let n = spec.inputs as u64;
    let per_branch = match spec.kind {
        LayerKind::Fc => n * spec.outputs as u64,
        _ => out_elems * (spec.inputs / spec.groups() * spec.kernel * spec.kernel) as u64,
    };
    let outer = n * n + spec.outputs as u64 * n * n;
    Ok(match spec.family {
        NeuronFamily::FirstOrder => per_branch,
        NeuronFamily::T1Pure => outer,
        NeuronFamily::T1Full => outer + per_branch,
        NeuronFamily::T2 => in_elems + per_branch,
        NeuronFamily::T3 => per_branch + out_elems,
        NeuronFamily::T4 => 2 * per_branch + out_elems,
        NeuronFamily::T1And2 => outer + in_elems + per_branch,
        NeuronFamily::T2And4 => 3 * per_branch + out_elems + in_elems,
        NeuronFamily::Proposed => 3 * per_branch + out_elems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_tags_round_trip() {
        for f in NeuronFamily::ALL {
            assert_eq!(f.tag().parse::<NeuronFamily>().unwrap(), f);
        }
        assert!("t5".parse::<NeuronFamily>().is_err());
    }

    #[test]
    fn weight_sets_per_family() {
        let weights = |f: NeuronFamily| f.roles().iter().filter(|r| !r.is_bias()).count();
        assert_eq!(weights(NeuronFamily::T2), 1);
        assert_eq!(weights(NeuronFamily::T3), 1);
        assert_eq!(weights(NeuronFamily::T4), 2);
        assert_eq!(weights(NeuronFamily::Proposed), 3);
        assert_eq!(weights(NeuronFamily::T2And4), 3);
    }

    #[test]
    fn t1_conv_is_rejected() {
        let spec = QuadraticLayerSpec::conv(NeuronFamily::T1Pure, 3, 8, 3, 1, 1);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_needs_equal_channels() {
        let mut spec = QuadraticLayerSpec::conv(NeuronFamily::Proposed, 3, 8, 3, 1, 1);
        spec.kind = LayerKind::DepthwiseConv;
        assert!(spec.validate().is_err());
        spec.outputs = 3;
        spec.validate().unwrap();
        assert_eq!(spec.param_shape(ParamRole::Wa), vec![3, 1, 3, 3]);
    }

    #[test]
    fn counts_from_definition() {
        let fo = count_params(&QuadraticLayerSpec::fc(NeuronFamily::FirstOrder, 10, 10));
        assert_eq!(fo.weights, 100);
        let p = count_params(&QuadraticLayerSpec::fc(NeuronFamily::Proposed, 10, 10));
        assert_eq!((p.weights, p.biases), (300, 30));
        let t1 = count_params(&QuadraticLayerSpec::fc(NeuronFamily::T1Pure, 10, 1));
        assert_eq!(t1.weights, 100);
        let conv = count_params(&QuadraticLayerSpec::conv(NeuronFamily::Proposed, 3, 8, 3, 1, 1));
        assert_eq!(conv.weights, 648);
    }

    #[test]
    fn init_is_seeded() {
        let spec = QuadraticLayerSpec::fc(NeuronFamily::Proposed, 4, 3);
        assert_eq!(init_params(&spec, 7).unwrap(), init_params(&spec, 7).unwrap());
        assert_ne!(init_params(&spec, 7).unwrap(), init_params(&spec, 8).unwrap());
        let p = init_params(&spec, 7).unwrap();
        assert!(p.get(ParamRole::Ba).data().iter().all(|&v| v == 0.0));
    }
}
