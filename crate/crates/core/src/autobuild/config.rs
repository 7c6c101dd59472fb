//! Line-oriented model configuration format.
//!
//! ```text
//! model mnist-small
//! layer conv family=proposed in=1 out=16 k=3 s=1 p=1 bn=1 act=relu
//! layer fc family=first_order in=12544 out=64 k=1 s=1 p=0 bn=1 act=relu
//! head fc in=64 classes=10
//! train epochs=3 batch=64 lr=0.05 seed=1 dataset=mnist
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. A conv layer feeding
//! an fc layer is flattened implicitly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quadneuron::{Activation, LayerKind, NeuronFamily, QuadraticLayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Mnist,
    Cifar10,
    /// Two Gaussian blobs in the plane; a linearly separable toy set.
    Points2d,
}

impl DatasetId {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Points2d => "points2d",
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(self) -> Vec<usize> {
        match self {
            DatasetId::Mnist => vec![1, 28, 28],
            DatasetId::Cifar10 => vec![3, 32, 32],
            DatasetId::Points2d => vec![2],
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetId::Points2d => 2,
            _ => 10,
        }
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "points2d" => Ok(DatasetId::Points2d),
            _ => Err(format!("unknown dataset `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub inputs: usize,
    pub classes: usize,
}

impl HeadSpec {
    /// The head as a first-order fc layer.
    pub fn as_layer(&self) -> QuadraticLayerSpec {
        QuadraticLayerSpec::fc(NeuronFamily::FirstOrder, self.inputs, self.classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub dataset: DatasetId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub layers: Vec<QuadraticLayerSpec>,
    pub head: HeadSpec,
    pub train: TrainSpec,
}

impl ModelConfig {
    /// Per-sample input shape of every layer followed by that of the head.
    pub fn layer_inputs(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.train.dataset.input_shape();
        for (i, spec) in self.layers.iter().enumerate() {
            spec.validate().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            if spec.kind.is_conv() && cur.len() != 3 {
                return Err(Error::Config(format!(
                    "layer {i} is a conv layer but receives flat input {cur:?}"
                )));
            }
            shapes.push(cur.clone());
            cur = spec.output_shape(&cur).map_err(|_| self.chain_error(i, &cur))?;
        }
        let flat: usize = cur.iter().product();
        if flat != self.head.inputs {
            return Err(Error::Config(format!(
                "{} produces {flat} features but head expects in={}",
                self.describe_prev(self.layers.len()),
                self.head.inputs
            )));
        }
        if self.head.classes != self.train.dataset.classes() {
            return Err(Error::Config(format!(
                "head has {} classes but {} has {}",
                self.head.classes,
                self.train.dataset.tag(),
                self.train.dataset.classes()
            )));
        }
        shapes.push(cur);
        Ok(shapes)
    }

    fn describe_prev(&self, i: usize) -> String {
        if i == 0 {
            format!("{} input", self.train.dataset.tag())
        } else {
            let p = &self.layers[i - 1];
            format!("layer {} ({} out={})", i - 1, p.kind.tag(), p.outputs)
        }
    }

    fn chain_error(&self, i: usize, cur: &[usize]) -> Error {
        let spec = &self.layers[i];
        Error::Config(format!(
            "{} with output shape {cur:?} does not chain into layer {i} ({} in={})",
            self.describe_prev(i),
            spec.kind.tag(),
            spec.inputs
        ))
    }

    /// Checks the shape chain from the dataset input through the head.
    pub fn validate(&self) -> Result<()> {
        self.layer_inputs().map(|_| ())
    }
}

fn bool_flag(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {}", self.name)?;
        for l in &self.layers {
            writeln!(
                f,
                "layer {} family={} in={} out={} k={} s={} p={} bn={} act={}",
                l.kind.tag(),
                l.family.tag(),
                l.inputs,
                l.outputs,
                l.kernel,
                l.stride,
                l.padding,
                bool_flag(l.batchnorm),
                l.activation.tag()
            )?;
        }
        writeln!(f, "head fc in={} classes={}", self.head.inputs, self.head.classes)?;
        writeln!(
            f,
            "train epochs={} batch={} lr={} seed={} dataset={}",
            self.train.epochs,
            self.train.batch,
            self.train.lr,
            self.train.seed,
            self.train.dataset.tag()
        )
    }
}

pub fn serialize_config(cfg: &ModelConfig) -> String {
    cfg.to_string()
}

struct Fields<'a> {
    line: usize,
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    /// `allowed` keys are required unless listed in `optional`.
    fn parse(line: usize, tokens: &[&'a str], allowed: &[&str], optional: &[&str]) -> Result<Self> {
        let mut map = HashMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected key=value, found `{tok}`"),
            })?;
            if !allowed.contains(&k) {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key `{k}`"),
                });
            }
            if map.insert(k, v).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        for k in allowed {
            if !map.contains_key(k) && !optional.contains(k) {
                return Err(Error::Parse {
                    line,
                    msg: format!("missing key `{k}`"),
                });
            }
        }
        Ok(Self { line, map })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get_or(key, None)
    }

    fn get_or<T: FromStr>(&self, key: &str, default: Option<T>) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let Some(&raw) = self.map.get(key) else {
            return default.ok_or_else(|| Error::Parse {
                line: self.line,
                msg: format!("missing key `{key}`"),
            });
        };
        raw.parse::<T>().map_err(|e| Error::Parse {
            line: self.line,
            msg: format!("bad value `{raw}` for `{key}`: {e}"),
        })
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.map[key] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse {
                line: self.line,
                msg: format!("`{key}` must be 0 or 1, found `{other}`"),
            }),
        }
    }
}

/// Parses and validates a configuration; errors carry 1-based line numbers.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut name = None;
    let mut layers = Vec::new();
    let mut layer_lines = Vec::new();
    let mut head: Option<(HeadSpec, usize)> = None;
    let mut train: Option<TrainSpec> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let err = |msg: String| Error::Parse { line, msg };
        match tokens[0] {
            "model" => {
                if name.is_some() {
                    return Err(err("duplicate `model` line".into()));
                }
                if tokens.len() != 2 {
                    return Err(err("expected `model <name>`".into()));
                }
                name = Some(tokens[1].to_string());
            }
            "layer" => {
                if head.is_some() {
                    return Err(err("layer after head; the head must be the last layer".into()));
                }
                let kind: LayerKind = tokens
                    .get(1)
                    .ok_or_else(|| err("missing layer kind".into()))?
                    .parse()
                    .map_err(err)?;
                let f = Fields::parse(
                    line,
                    &tokens[2..],
                    &["family", "in", "out", "k", "s", "p", "bn", "act"],
                    if kind == LayerKind::Fc { &["k", "s", "p"] } else { &[] },
                )?;
                let spec = QuadraticLayerSpec {
                    family: f.get::<NeuronFamily>("family")?,
                    kind,
                    inputs: f.get("in")?,
                    outputs: f.get("out")?,
                    kernel: f.get_or("k", Some(1))?,
                    stride: f.get_or("s", Some(1))?,
                    padding: f.get_or("p", Some(0))?,
                    batchnorm: f.flag("bn")?,
                    activation: f.get::<Activation>("act")?,
                };
                spec.validate().map_err(|e| err(e.to_string()))?;
                layers.push(spec);
                layer_lines.push(line);
            }
            "head" => {
                if head.is_some() {
                    return Err(err("duplicate head".into()));
                }
                if tokens.get(1) != Some(&"fc") {
                    return Err(err("expected `head fc ...`".into()));
                }
                let f = Fields::parse(line, &tokens[2..], &["in", "classes"], &[])?;
                head = Some((
                    HeadSpec {
                        inputs: f.get("in")?,
                        classes: f.get("classes")?,
                    },
                    line,
                ));
            }
            "train" => {
                if train.is_some() {
                    return Err(err("duplicate `train` line".into()));
                }
                let f = Fields::parse(line, &tokens[1..], &["epochs", "batch", "lr", "seed", "dataset"], &[])?;
                let t = TrainSpec {
                    epochs: f.get("epochs")?,
                    batch: f.get("batch")?,
                    lr: f.get("lr")?,
                    seed: f.get("seed")?,
                    dataset: f.get::<DatasetId>("dataset")?,
                };
                if t.batch == 0 || !(t.lr.is_finite() && t.lr > 0.0) {
                    return Err(err("batch must be positive and lr a positive number".into()));
                }
                train = Some(t);
            }
            other => return Err(err(format!("unknown directive `{other}`"))),
        }
    }
    let last = text.lines().count().max(1);
    let name = name.ok_or(Error::Parse {
        line: 1,
        msg: "missing `model <name>` line".into(),
    })?;
    let (head, head_line) = head.ok_or(Error::Parse {
        line: last,
        msg: "missing head".into(),
    })?;
    let train = train.ok_or(Error::Parse {
        line: last,
        msg: "missing `train` line".into(),
    })?;
    let cfg = ModelConfig {
        name,
        layers,
        head,
        train,
    };
    // re-run the chain check layer by layer to attach a line number
    let mut cur = cfg.train.dataset.input_shape();
    for (i, spec) in cfg.layers.iter().enumerate() {
        let bad = || Error::Parse {
            line: layer_lines[i],
            msg: match cfg.chain_error(i, &cur) {
                Error::Config(m) => m,
                other => other.to_string(),
            },
        };
        if spec.kind.is_conv() && cur.len() != 3 {
            return Err(bad());
        }
        cur = spec.output_shape(&cur).map_err(|_| bad())?;
    }
    cfg.validate().map_err(|e| Error::Parse {
        line: head_line,
        msg: match e {
            Error::Config(m) => m,
            other => other.to_string(),
        },
    })?;
    Ok(cfg)
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_config(s)
    }
}
