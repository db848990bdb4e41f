//! Parameterized networks: layer lists, named parameters, feature taps.

mod arch;
mod ntl;
mod paraphraser;
mod resnet;

use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use arch::{Arch, NtlStyle};
pub use ntl::build_ntl;
pub use paraphraser::{build_paraphraser, build_translator, factor_channels, Paraphraser};
pub use resnet::{build_resnet, resnet_param_count};

/// Running-statistic momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Name of the tap holding the last convolutional map before pooling.
pub const FINAL_TAP: &str = "final";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        name: String,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
    },
    Relu,
    /// Two 3x3 conv/BN pairs with a parameter-free shortcut.
    BasicBlock {
        name: String,
        stride: usize,
        out_channels: usize,
    },
    /// Records the current activation under this name.
    Tap(String),
    GlobalAvgPool,
    Linear {
        name: String,
    },
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Logits for classifiers, the transformed map for adapters.
    pub output: Var,
    pub taps: IndexMap<String, Var>,
}

impl ForwardOutput {
    pub fn logits(&self) -> Var {
        self.output
    }

    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("network has no tap named {name:?}")))
    }

    pub fn final_tap(&self) -> Result<Var> {
        self.tap(FINAL_TAP)
    }

    /// Group taps in declaration order, `"final"` excluded.
    pub fn groups(&self) -> Vec<(&str, Var)> {
        self.taps
            .iter()
            .filter(|(k, _)| k.as_str() != FINAL_TAP)
            .map(|(k, v)| (k.as_str(), *v))
            .collect()
    }

    /// Copies the values out of the graph.
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> ForwardValues<S> {
        ForwardValues {
            output: g.value(self.output).detached(),
            taps: self
                .taps
                .iter()
                .map(|(k, v)| (k.clone(), g.value(*v).detached()))
                .collect(),
        }
    }
}

/// Graph-free counterpart of [`ForwardOutput`], e.g. a frozen teacher's.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues<S: Scalar> {
    pub output: Tensor<S>,
    pub taps: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ForwardValues<S> {
    pub fn tap(&self, name: &str) -> Result<&Tensor<S>> {
        self.taps
            .get(name)
            .ok_or_else(|| Error::Config(format!("output has no tap named {name:?}")))
    }

    pub fn final_tap(&self) -> Result<&Tensor<S>> {
        self.tap(FINAL_TAP)
    }

    /// Inserts every value as a constant of `g`.
    pub fn to_graph(&self, g: &mut Graph<S>) -> ForwardOutput {
        ForwardOutput {
            output: g.constant(self.output.clone()),
            taps: self
                .taps
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

/// Anything that maps a feature map to another inside a graph.
pub trait FeatureTransform<S: Scalar> {
    fn transform(&mut self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<Var>;
}

/// The identity map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<S: Scalar> FeatureTransform<S> for Identity {
    fn transform(&mut self, _g: &mut Graph<S>, x: Var, _mode: Mode) -> Result<Var> {
        Ok(x)
    }
}

impl<S: Scalar> FeatureTransform<S> for Network<S> {
    fn transform(&mut self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward(g, x, mode)?.output)
    }
}

/// A differentiable layer list with named parameters and buffers.
#[derive(Clone, Debug)]
pub struct Network<S: Scalar> {
    arch: Arch,
    layers: Vec<Layer>,
    params: IndexMap<String, Tensor<S>>,
    buffers: IndexMap<String, Tensor<S>>,
    frozen: bool,
    bound: Vec<(String, Var)>,
}

impl<S: Scalar> fmt::Display for Network<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} parameters)", self.arch, self.count_params())
    }
}

struct Forward<S: Scalar> {
    out: ForwardOutput,
    bound: Vec<(String, Var)>,
    stats: Vec<(String, BatchStats<S>)>,
}

impl<S: Scalar> Network<S> {
    /// Builds the architecture a descriptor names, initialized from `seed`.
    pub fn build(arch: &Arch, seed: u64) -> Result<Self> {
        arch.build(seed)
    }

    pub(crate) fn empty(arch: Arch) -> Self {
        Self {
            arch,
            layers: Vec::new(),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            frozen: false,
            bound: Vec::new(),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Trainable parameters in construction order.
    pub fn params(&self) -> &IndexMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> &IndexMap<String, Tensor<S>> {
        &self.buffers
    }

    /// Parameters then buffers, as persisted in checkpoints.
    pub fn state(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Mutable access to any parameter or buffer by name.
    pub fn state_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        match self.params.get_mut(name) {
            Some(t) => Some(t),
            None => self.buffers.get_mut(name),
        }
    }

    /// Number of trainable scalars; running statistics are not counted.
    pub fn count_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen network contributes no gradient-carrying leaves to any graph.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in self.params.values_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub(crate) fn push_layer(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub(crate) fn add_param(&mut self, name: String, t: Tensor<S>) {
        let prev = self.params.insert(name.clone(), t.with_requires_grad());
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub(crate) fn add_buffer(&mut self, name: String, t: Tensor<S>) {
        let prev = self.buffers.insert(name.clone(), t);
        debug_assert!(prev.is_none(), "duplicate buffer {name}");
    }

    pub(crate) fn add_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
    ) {
        let fan_in = (cin * 9) as f64;
        let w = Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), rng);
        self.add_param(format!("{name}.weight"), w);
        if bias {
            self.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
        self.push_layer(Layer::Conv {
            name: name.to_string(),
            stride,
            pad: 1,
            bias,
        });
    }

    pub(crate) fn add_bn(&mut self, name: &str, channels: usize) {
        self.add_param(format!("{name}.weight"), Tensor::ones(&[channels]));
        self.add_param(format!("{name}.bias"), Tensor::zeros(&[channels]));
        self.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]));
        self.push_layer(Layer::BatchNorm {
            name: name.to_string(),
        });
    }

    pub(crate) fn add_linear(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) {
        let w = Tensor::randn(&[outputs, inputs], (1.0 / inputs as f64).sqrt(), rng);
        self.add_param(format!("{name}.weight"), w);
        self.add_param(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        self.push_layer(Layer::Linear {
            name: name.to_string(),
        });
    }

    pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if let Some(expected) = self.arch.input_channels() {
            if shape.len() != 4 || shape[1] != expected {
                return Err(Error::Dimension(format!(
                    "{} expects [N,{expected},H,W] input, got {shape:?}",
                    self.arch
                )));
            }
        }
        if let Arch::ResNet { .. } = self.arch {
            let (h, w) = (shape[2], shape[3]);
            if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
                return Err(Error::Dimension(format!(
                    "{} needs spatial extents that are positive multiples of 4, got {h}x{w}",
                    self.arch
                )));
            }
        }
        Ok(())
    }

    fn param(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("{}: missing parameter {name}", self.arch)))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor<S>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("{}: missing buffer {name}", self.arch)))
    }

    fn run(&self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<Forward<S>> {
        self.check_input(g.shape(x))?;
        let mut fw = Forward {
            out: ForwardOutput {
                output: x,
                taps: IndexMap::new(),
            },
            bound: Vec::new(),
            stats: Vec::new(),
        };
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv {
                    name,
                    stride,
                    pad,
                    bias,
                } => self.conv(g, &mut fw, h, name, *stride, *pad, *bias)?,
                Layer::BatchNorm { name } => self.bn(g, &mut fw, h, name, mode)?,
                Layer::Relu => g.relu(h),
                Layer::BasicBlock {
                    name,
                    stride,
                    out_channels,
                } => {
                    let a =
                        self.conv(g, &mut fw, h, &format!("{name}.conv1"), *stride, 1, false)?;
                    let a = self.bn(g, &mut fw, a, &format!("{name}.bn1"), mode)?;
                    let a = g.relu(a);
                    let a = self.conv(g, &mut fw, a, &format!("{name}.conv2"), 1, 1, false)?;
                    let a = self.bn(g, &mut fw, a, &format!("{name}.bn2"), mode)?;
                    let short = if *stride != 1 || g.shape(h)[1] != *out_channels {
                        g.shortcut_pad(h, *stride, *out_channels)?
                    } else {
                        h
                    };
                    let sum = g.add(a, short)?;
                    g.relu(sum)
                }
                Layer::Tap(name) => {
                    fw.out.taps.insert(name.clone(), h);
                    h
                }
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Linear { name } => {
                    let w = self.bind(g, &mut fw, &format!("{name}.weight"))?;
                    let b = self.bind(g, &mut fw, &format!("{name}.bias"))?;
                    g.linear(h, w, Some(b))?
                }
            };
        }
        fw.out.output = h;
        Ok(fw)
    }

    fn bind(&self, g: &mut Graph<S>, fw: &mut Forward<S>, name: &str) -> Result<Var> {
        let p = self.param(name)?;
        let mut t = p.detached();
        t.set_requires_grad(!self.frozen);
        let v = g.leaf(t);
        if g.requires_grad(v) {
            fw.bound.push((name.to_string(), v));
        }
        Ok(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        g: &mut Graph<S>,
        fw: &mut Forward<S>,
        x: Var,
        name: &str,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Var> {
        let w = self.bind(g, fw, &format!("{name}.weight"))?;
        let b = if bias {
            Some(self.bind(g, fw, &format!("{name}.bias"))?)
        } else {
            None
        };
        g.conv2d(x, w, b, stride, pad)
    }

    fn bn(
        &self,
        g: &mut Graph<S>,
        fw: &mut Forward<S>,
        x: Var,
        name: &str,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = self.bind(g, fw, &format!("{name}.weight"))?;
        let beta = self.bind(g, fw, &format!("{name}.bias"))?;
        let eps = S::of(BN_EPS);
        let (y, stats) = match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, BnMode::Train { eps })?,
            Mode::Eval => {
                let mean = self.buffer(&format!("{name}.running_mean"))?.data();
                let var = self.buffer(&format!("{name}.running_var"))?.data();
                g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var, eps })?
            }
        };
        if let Some(stats) = stats {
            fw.stats.push((name.to_string(), stats));
        }
        Ok(y)
    }

    /// Records a forward pass on `g`.
    ///
    /// Train mode normalizes with batch moments and folds them into the
    /// running statistics. Parameters of a non-frozen network become
    /// gradient leaves; [`Network::collect_grads`] pulls their gradients
    /// back after `backward`.
    pub fn forward(&mut self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let fw = self.run(g, x, mode)?;
        let m = S::of(BN_MOMENTUM);
        for (name, stats) in &fw.stats {
            let rm = self
                .buffers
                .get_mut(&format!("{name}.running_mean"))
                .expect("bn buffers exist");
            for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (S::one() - m) * *r + m * b;
            }
            let rv = self
                .buffers
                .get_mut(&format!("{name}.running_var"))
                .expect("bn buffers exist");
            for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = (S::one() - m) * *r + m * b;
            }
        }
        self.bound.extend(fw.bound);
        Ok(fw.out)
    }

    /// Eval-mode forward that leaves the network untouched.
    pub fn forward_eval(&self, g: &mut Graph<S>, x: Var) -> Result<ForwardOutput> {
        Ok(self.run(g, x, Mode::Eval)?.out)
    }

    /// Eval-mode inference without recording a graph; safe to call from
    /// several threads on a shared network.
    pub fn infer(&self, x: &Tensor<S>) -> Result<ForwardValues<S>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let out = self.forward_eval(&mut g, xv)?;
        Ok(out.values(&g))
    }

    /// Adds the gradients `g` holds for parameters bound by earlier
    /// [`Network::forward`] calls into the parameter buffers.
    pub fn collect_grads(&mut self, g: &Graph<S>) -> Result<()> {
        for (name, v) in std::mem::take(&mut self.bound) {
            if let Some(gr) = g.grad(v) {
                self.params
                    .get_mut(&name)
                    .expect("bound names are parameters")
                    .accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    /// Drops bindings from a graph that will not be back-propagated.
    pub fn clear_bindings(&mut self) {
        self.bound.clear();
    }

    /// Copies every parameter and buffer of `other` into `self`; names and
    /// shapes must agree exactly.
    pub fn load_state_from(&mut self, other: &Network<S>) -> Result<()> {
        for (name, t) in other.state() {
            let dst = self
                .state_mut(name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            if dst.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {name}: {:?} vs {:?}",
                    dst.shape(),
                    t.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
