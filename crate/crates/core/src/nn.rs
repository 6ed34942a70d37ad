//! Layers and models built on the autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Square kernel, stride 1, "same" zero padding (`kernel / 2`).
    Conv { out_channels: usize, kernel: usize },
    Linear { units: usize },
    Relu,
    Sigmoid,
    MaxPool,
    GlobalAvgPool,
    Flatten,
}

/// What the final layer produces for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Class logits of length `C`.
    Classes(usize),
    /// `(cx, cy, w, h)` as image fractions.
    Box,
    /// One channel of per-pixel mask logits.
    Mask,
    /// A dense map with the given channel count at input resolution.
    Dense(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

/// Per-sample activation shape while walking the layer chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Map(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    /// Conv(3x3)+ReLU blocks with 2x max-pooling between consecutive blocks,
    /// followed by a head. Mask heads keep full resolution and skip pooling.
    pub fn backbone(
        in_channels: usize,
        height: usize,
        width: usize,
        widths: &[usize],
        head: Head,
    ) -> Self {
        let mut layers = Vec::new();
        let pool = !matches!(head, Head::Mask | Head::Dense(_));
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 && pool {
                layers.push(LayerSpec::MaxPool);
            }
            layers.push(LayerSpec::Conv {
                out_channels: w,
                kernel: 3,
            });
            layers.push(LayerSpec::Relu);
        }
        match head {
            Head::Classes(c) => {
                // Not pooled: a position-aware head can memorize small sets.
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Linear { units: c });
            }
            Head::Box => {
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Linear { units: 32 });
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::Linear { units: 4 });
                layers.push(LayerSpec::Sigmoid);
            }
            Head::Mask => layers.push(LayerSpec::Conv {
                out_channels: 1,
                kernel: 3,
            }),
            Head::Dense(c) => layers.push(LayerSpec::Conv {
                out_channels: c,
                kernel: 3,
            }),
        }
        Self {
            in_channels,
            height,
            width,
            layers,
            head,
        }
    }

    /// Same spec with a different input channel count.
    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        Self {
            in_channels,
            ..self.clone()
        }
    }

    /// Checks the layer chain and returns each layer's input shape.
    fn walk(&self) -> Result<Vec<Act>> {
        let bad = |msg: String| Error::InvalidConfig(format!("model spec: {msg}"));
        if self.layers.is_empty() {
            return Err(bad("no layers".into()));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(bad("zero input extent".into()));
        }
        let mut act = Act::Map(self.in_channels, self.height, self.width);
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(act);
            act = match (layer, act) {
                (LayerSpec::Conv { out_channels, kernel }, Act::Map(_, h, w)) => {
                    if *kernel % 2 == 0 || *out_channels == 0 {
                        return Err(bad(format!("layer {i}: conv needs odd kernel, >0 channels")));
                    }
                    Act::Map(*out_channels, h, w)
                }
                (LayerSpec::Linear { units }, Act::Flat(_)) if *units > 0 => Act::Flat(*units),
                (LayerSpec::Relu | LayerSpec::Sigmoid, a) => a,
                (LayerSpec::MaxPool, Act::Map(c, h, w)) if h >= 2 && w >= 2 => {
                    Act::Map(c, h / 2, w / 2)
                }
                (LayerSpec::GlobalAvgPool, Act::Map(c, _, _)) => Act::Flat(c),
                (LayerSpec::Flatten, Act::Map(c, h, w)) => Act::Flat(c * h * w),
                (l, a) => return Err(bad(format!("layer {i}: {l:?} cannot follow {a:?}"))),
            };
        }
        let expected = match self.head {
            Head::Classes(c) if c >= 2 => Act::Flat(c),
            Head::Classes(c) => return Err(bad(format!("{c} classes"))),
            Head::Box => Act::Flat(4),
            Head::Mask => Act::Map(1, self.height, self.width),
            Head::Dense(c) => Act::Map(c, self.height, self.width),
        };
        if act != expected {
            return Err(bad(format!("output {act:?} does not match head {:?}", self.head)));
        }
        Ok(inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        padding: usize,
    },
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    Sigmoid,
    MaxPool,
    GlobalAvgPool,
    Flatten,
}

/// An ordered stack of layers with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

/// Graph handles for a model's parameters, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Parameter handles in `Model::params` order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Model {
    /// He-initialized weights (`N(0, 2 / fan_in)`) and zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let inputs = spec.walk()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (ls, act) in spec.layers.iter().zip(inputs) {
            let layer = match (ls, act) {
                (LayerSpec::Conv { out_channels, kernel }, Act::Map(c, _, _)) => {
                    let fan_in = c * kernel * kernel;
                    Layer::Conv {
                        weight: he_normal([*out_channels, c, *kernel, *kernel], fan_in, rng),
                        bias: Tensor::zeros([*out_channels]),
                        padding: kernel / 2,
                    }
                }
                (LayerSpec::Linear { units }, Act::Flat(n)) => Layer::Linear {
                    weight: he_normal([n, *units], n, rng),
                    bias: Tensor::zeros([1, *units]),
                },
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::Sigmoid, _) => Layer::Sigmoid,
                (LayerSpec::MaxPool, _) => Layer::MaxPool,
                (LayerSpec::GlobalAvgPool, _) => Layer::GlobalAvgPool,
                (LayerSpec::Flatten, _) => Layer::Flatten,
                _ => unreachable!("walk() validated the chain"),
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
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

    /// Parameters with stable names (`"<layer>.weight"`, `"<layer>.bias"`).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } = layer {
                out.push((format!("{i}.weight"), weight));
                out.push((format!("{i}.bias"), bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } = layer {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places the parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        BoundParams { vars }
    }

    /// Runs the layer stack on a batch `(n, c, h, w)`.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        let expect = [self.spec.in_channels, self.spec.height, self.spec.width];
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != expect[0] {
            return Err(Error::ShapeMismatch {
                op: "model.forward",
                detail: format!("input {shape:?}, model expects (n, {}, h, w)", expect[0]),
            });
        }
        let mut h = x;
        let mut p = params.vars.iter();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { padding, .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    g.conv2d(h, w, Some(b), *padding)?
                }
                Layer::Linear { .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    let y = g.matmul(h, w)?;
                    g.add(y, b)?
                }
                Layer::Relu => g.relu(h)?,
                Layer::Sigmoid => g.sigmoid(h)?,
                Layer::MaxPool => g.max_pool2(h)?,
                Layer::GlobalAvgPool => {
                    let s = g.shape(h).to_vec();
                    let flat = g.reshape(h, [s[0], s[1], s[2] * s[3]])?;
                    let summed = g.sum_axis(flat, 2)?;
                    let pooled = g.reshape(summed, [s[0], s[1]])?;
                    g.scale(pooled, 1.0 / (s[2] * s[3]) as f64)?
                }
                Layer::Flatten => {
                    let s = g.shape(h).to_vec();
                    g.reshape(h, [s[0], s[1..].iter().product::<usize>()])?
                }
            };
        }
        Ok(h)
    }

    /// Forward pass with frozen parameters on a fresh graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

fn he_normal<const N: usize>(shape: [usize; N], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc_spec() -> ModelSpec {
        ModelSpec::backbone(1, 48, 48, &[8, 8, 16, 16], Head::Box)
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::init(&loc_spec(), &mut Rng::new(3, 0)).unwrap();
        let b = Model::init(&loc_spec(), &mut Rng::new(3, 0)).unwrap();
        assert_eq!(a, b);
        let c = Model::init(&loc_spec(), &mut Rng::new(4, 0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_layer_spec_is_rejected() {
        let spec = ModelSpec {
            in_channels: 1,
            height: 8,
            width: 8,
            layers: vec![],
            head: Head::Box,
        };
        assert!(Model::init(&spec, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let spec = ModelSpec {
            in_channels: 1,
            height: 8,
            width: 8,
            layers: vec![LayerSpec::Linear { units: 4 }],
            head: Head::Box,
        };
        assert!(Model::init(&spec, &mut Rng::new(0, 0)).is_err());
        let wrong_head = ModelSpec {
            head: Head::Classes(3),
            ..loc_spec()
        };
        assert!(Model::init(&wrong_head, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn he_std_for_3x3_fan_in_27() {
        let spec = ModelSpec {
            in_channels: 3,
            height: 4,
            width: 4,
            layers: vec![LayerSpec::Conv {
                out_channels: 400,
                kernel: 3,
            }],
            head: Head::Dense(400),
        };
        let m = Model::init(&spec, &mut Rng::new(1, 0)).unwrap();
        let (_, w) = &m.params()[0];
        assert!(w.numel() >= 10_000);
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / 27.0).sqrt();
        assert!((var.sqrt() - target).abs() < 0.2 * target);
        assert!(m.params()[1].1.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn output_shapes_follow_heads() {
        let mut rng = Rng::new(0, 0);
        let x = Tensor::full([2, 1, 48, 48], 0.5);
        let loc = Model::init(&loc_spec(), &mut rng).unwrap();
        assert_eq!(loc.predict(&x).unwrap().shape(), &[2, 4]);
        let cls = Model::init(
            &ModelSpec::backbone(1, 48, 48, &[4, 4], Head::Classes(5)),
            &mut rng,
        )
        .unwrap();
        assert_eq!(cls.predict(&x).unwrap().shape(), &[2, 5]);
        let seg = Model::init(&ModelSpec::backbone(1, 48, 48, &[4], Head::Mask), &mut rng).unwrap();
        assert_eq!(seg.predict(&x).unwrap().shape(), &[2, 1, 48, 48]);
    }
}
