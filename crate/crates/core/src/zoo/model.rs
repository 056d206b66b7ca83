use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Toy architectures. Tags round-trip through `Display`/`FromStr`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// `mlp-{depth}x{width}`: `depth` hidden ReLU layers of `width` units.
    /// `mlp-0x0` is a single linear layer.
    Mlp { depth: usize, width: usize },
    /// `cnn-2conv-2fc`: two stride-2 3×3 convolutions (8 and 16 channels)
    /// followed by a 64-unit hidden layer and the classifier.
    Cnn2Conv2Fc,
}

impl Architecture {
    pub const MLP_3X256: Architecture = Architecture::Mlp { depth: 3, width: 256 };
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { depth, width } => write!(f, "mlp-{depth}x{width}"),
            Architecture::Cnn2Conv2Fc => f.write_str("cnn-2conv-2fc"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cnn-2conv-2fc" {
            return Ok(Architecture::Cnn2Conv2Fc);
        }
        let parsed = s.strip_prefix("mlp-").and_then(|rest| {
            let (d, w) = rest.split_once('x')?;
            Some((d.parse().ok()?, w.parse().ok()?))
        });
        match parsed {
            Some((depth, width)) if (depth == 0) == (width == 0) => {
                Ok(Architecture::Mlp { depth, width })
            }
            _ => Err(Error::Config(format!("unknown architecture tag `{s}`"))),
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    /// Weight is stored `inputs × outputs`.
    Dense { inputs: usize, outputs: usize },
    /// Weight is stored `c_out × c_in × k × k`.
    Conv { c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
            LayerKind::Conv { c_in, c_out, kernel, .. } => vec![c_out, c_in, kernel, kernel],
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { c_out, .. } => c_out,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { c_in, kernel, .. } => c_in * kernel * kernel,
        }
    }
}

/// Layer list and geometry of a toy network. ReLU follows every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<(String, LayerKind)>,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input: InputShape, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut layers = Vec::new();
        match arch {
            Architecture::Mlp { depth, width } => {
                let mut inputs = input.numel();
                for i in 0..depth {
                    layers.push((format!("fc{}", i + 1), LayerKind::Dense { inputs, outputs: width }));
                    inputs = width;
                }
                layers.push((format!("fc{}", depth + 1), LayerKind::Dense { inputs, outputs: classes }));
            }
            Architecture::Cnn2Conv2Fc => {
                let conv = |c_in, c_out| LayerKind::Conv { c_in, c_out, kernel: 3, stride: 2, padding: 1 };
                let down = |x: usize| (x + 2 - 3) / 2 + 1;
                let (h, w) = (down(down(input.height)), down(down(input.width)));
                if input.height < 2 || input.width < 2 {
                    return Err(Error::Config("cnn-2conv-2fc needs at least 2x2 inputs".into()));
                }
                layers.push(("conv1".into(), conv(input.channels, 8)));
                layers.push(("conv2".into(), conv(8, 16)));
                layers.push(("fc1".into(), LayerKind::Dense { inputs: 16 * h * w, outputs: 64 }));
                layers.push(("fc2".into(), LayerKind::Dense { inputs: 64, outputs: classes }));
            }
        }
        Ok(Self { arch, input, classes, layers })
    }
}

/// Affine input normalization `(x/255 − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<Layer>,
    norm: Normalization,
}

impl Network {
    /// He-normal weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|(name, kind)| {
                let shape = kind.weight_shape();
                let std = (2.0 / kind.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Layer {
                    name: name.clone(),
                    kind: *kind,
                    weight: Tensor::from_parts(shape, data),
                    bias: Tensor::zeros(&[kind.outputs()]),
                }
            })
            .collect();
        Self { spec, layers, norm: Normalization::default() }
    }

    /// Assembles a network from explicit parameters, checking shapes against `spec`.
    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer>, norm: Normalization) -> Result<Self> {
        if layers.len() != spec.layers.len() {
            return Err(Error::Format(format!(
                "{} layers for an architecture with {}",
                layers.len(),
                spec.layers.len()
            )));
        }
        for (l, (name, kind)) in layers.iter().zip(&spec.layers) {
            if l.weight.shape() != kind.weight_shape().as_slice() || l.bias.shape() != [kind.outputs()]
            {
                return Err(Error::Format(format!("layer {name} has mismatched parameter shapes")));
            }
        }
        Ok(Self { spec, layers, norm })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) {
        self.norm = norm;
    }

    /// Sparsifiable element count per layer (weights only, biases excluded).
    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.len()).collect()
    }

    /// Builds the forward pass on `g` from flat `B × D` inputs.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, weights: &[Var], biases: &[Var]) -> Result<Var> {
        let batch = g.value(x).shape()[0];
        let input = self.spec.input;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    if g.value(h).ndim() == 2 {
                        h = g.reshape(h, &[batch, input.channels, input.height, input.width])?;
                    }
                    g.conv2d(h, weights[i], Some(biases[i]), stride, padding)?
                }
                LayerKind::Dense { inputs, .. } => {
                    if g.value(h).ndim() != 2 {
                        h = g.reshape(h, &[batch, inputs])?;
                    }
                    let z = g.matmul(h, weights[i])?;
                    g.add(z, biases[i])?
                }
            };
            if i != last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Logits for `x` (`B × D`, already normalized) using substitute weights.
    pub fn forward_with(&self, x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
        if weights.len() != self.layers.len() {
            return Err(Error::Contract("one weight tensor per layer required".into()));
        }
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv: Vec<Var> = weights.iter().map(|w| g.constant(w.clone())).collect();
        let bv: Vec<Var> = self.layers.iter().map(|l| g.constant(l.bias.clone())).collect();
        let out = self.forward_graph(&mut g, xv, &wv, &bv)?;
        Ok(g.value(out).clone())
    }

    /// Dense logits for normalized inputs `x` (`B × D`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let weights: Vec<Tensor> = self.layers.iter().map(|l| l.weight.clone()).collect();
        self.forward_with(x, &weights)
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [_, d] if *d == self.spec.input.numel() => Ok(()),
            s => Err(Error::Dimension(format!(
                "network expects B x {} inputs, got {s:?}",
                self.spec.input.numel()
            ))),
        }
    }
}
