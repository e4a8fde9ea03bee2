//! Network architecture descriptors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d { out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool2d { k: usize },
    Flatten,
    Dense { out: usize },
    /// `relu(x + conv(relu(conv(x))))` with two 3x3, padding-1 convolutions.
    Residual { ch: usize },
}

/// Activation shape between layers (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input (height, width, channels).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

/// A layer with its resolved shapes and parameter slice.
#[derive(Debug, Clone, Copy)]
pub struct LayerPlan {
    pub layer: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub offset: usize,
    pub n_params: usize,
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    k * k * cin * cout + cout
}

impl NetworkSpec {
    /// conv(16,3)-relu-pool-conv(32,3)-relu-pool-flatten-dense(classes).
    pub fn victim(h: usize, w: usize, c: usize, classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input: (h, w, c),
            layers: vec![
                Conv2d { out_ch: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool2d { k: 2 },
                Conv2d { out_ch: 32, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool2d { k: 2 },
                Flatten,
                Dense { out: classes },
            ],
            classes,
        }
    }

    /// The victim backbone with two residual blocks after the second pooling stage.
    pub fn attributor(h: usize, w: usize, c: usize, classes: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input: (h, w, c),
            layers: vec![
                Conv2d { out_ch: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool2d { k: 2 },
                Conv2d { out_ch: 32, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool2d { k: 2 },
                Residual { ch: 32 },
                Residual { ch: 32 },
                Flatten,
                Dense { out: classes },
            ],
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Resolve every layer's shapes, checking that they compose.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 || self.classes == 0 {
            return Err(Error::invalid("network input dims and class count must be positive"));
        }
        let mut shape = Shape::Spatial { h, w, c };
        let mut offset = 0;
        let mut plans = Vec::with_capacity(self.layers.len());
        for (i, &layer) in self.layers.iter().enumerate() {
            let bad = |msg: &str| Error::invalid(format!("layer {i} ({layer}): {msg}"));
            let (output, n_params) = match (layer, shape) {
                (LayerSpec::Conv2d { out_ch, kernel, stride, pad }, Shape::Spatial { h, w, c }) => {
                    if out_ch == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("zero-sized convolution"));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(bad("kernel larger than padded input"));
                    }
                    let oh = (h + 2 * pad - kernel) / stride + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    (Shape::Spatial { h: oh, w: ow, c: out_ch }, conv_params(c, out_ch, kernel))
                }
                (LayerSpec::Relu, s) => (s, 0),
                (LayerSpec::MaxPool2d { k }, Shape::Spatial { h, w, c }) => {
                    if k == 0 || h < k || w < k {
                        return Err(bad("pool window does not fit"));
                    }
                    (Shape::Spatial { h: h / k, w: w / k, c }, 0)
                }
                (LayerSpec::Flatten, s) => (Shape::Flat(s.len()), 0),
                (LayerSpec::Dense { out }, Shape::Flat(d)) => {
                    if out == 0 {
                        return Err(bad("zero-width dense layer"));
                    }
                    (Shape::Flat(out), d * out + out)
                }
                (LayerSpec::Residual { ch }, Shape::Spatial { h, w, c }) => {
                    if c != ch {
                        return Err(bad("residual block channel count differs from its input"));
                    }
                    (Shape::Spatial { h, w, c }, 2 * conv_params(ch, ch, 3))
                }
                (_, Shape::Flat(_)) => return Err(bad("needs a spatial input")),
                (_, Shape::Spatial { .. }) => return Err(bad("needs a flattened input")),
            };
            plans.push(LayerPlan { layer, input: shape, output, offset, n_params });
            offset += n_params;
            shape = output;
        }
        if shape != Shape::Flat(self.classes) {
            return Err(Error::invalid(format!(
                "final layer output {shape:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(plans)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.plan()?.iter().map(|p| p.n_params).sum())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { out_ch, kernel, stride, pad } => {
                write!(f, "conv2d({out_ch},{kernel},{stride},{pad})")
            }
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool2d { k } => write!(f, "maxpool2d({k})"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense { out } => write!(f, "dense({out})"),
            LayerSpec::Residual { ch } => write!(f, "residual({ch})"),
        }
    }
}

/// Descriptor form: `in=28x28x1;conv2d(16,3,1,1);relu;...;dense(10);classes=10`.
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, w, c) = self.input;
        write!(f, "in={h}x{w}x{c}")?;
        for l in &self.layers {
            write!(f, ";{l}")?;
        }
        write!(f, ";classes={}", self.classes)
    }
}

fn parse_args(s: &str, name: &str, n: usize) -> Result<Vec<usize>> {
    let inner = s
        .strip_prefix(name)
        .and_then(|r| r.strip_prefix('('))
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| Error::invalid(format!("malformed layer `{s}`")))?;
    let args = inner
        .split(',')
        .map(|a| a.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::invalid(format!("bad integer in `{s}`")))?;
    if args.len() != n {
        return Err(Error::invalid(format!("`{name}` takes {n} arguments, got `{s}`")));
    }
    Ok(args)
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let name = s.split('(').next().unwrap_or("");
        Ok(match name {
            "conv2d" => {
                let a = parse_args(s, name, 4)?;
                LayerSpec::Conv2d { out_ch: a[0], kernel: a[1], stride: a[2], pad: a[3] }
            }
            "relu" if s == "relu" => LayerSpec::Relu,
            "flatten" if s == "flatten" => LayerSpec::Flatten,
            "maxpool2d" => LayerSpec::MaxPool2d { k: parse_args(s, name, 1)?[0] },
            "dense" => LayerSpec::Dense { out: parse_args(s, name, 1)?[0] },
            "residual" => LayerSpec::Residual { ch: parse_args(s, name, 1)?[0] },
            _ => return Err(Error::invalid(format!("unknown layer `{s}`"))),
        })
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(';').map(str::trim).collect();
        let (first, rest) = parts.split_first().ok_or_else(|| Error::invalid("empty descriptor"))?;
        let (last, middle) = rest
            .split_last()
            .ok_or_else(|| Error::invalid("descriptor lacks a class count"))?;
        let dims: Vec<usize> = first
            .strip_prefix("in=")
            .ok_or_else(|| Error::invalid("descriptor must start with `in=`"))?
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad input dims `{first}`")))?;
        if dims.len() != 3 {
            return Err(Error::invalid(format!("input must be HxWxC, got `{first}`")));
        }
        let classes = last
            .strip_prefix("classes=")
            .and_then(|c| c.parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("bad class count `{last}`")))?;
        let layers = middle.iter().map(|l| l.parse()).collect::<Result<Vec<LayerSpec>>>()?;
        let spec = NetworkSpec { input: (dims[0], dims[1], dims[2]), layers, classes };
        spec.plan()?;
        Ok(spec)
    }
}
