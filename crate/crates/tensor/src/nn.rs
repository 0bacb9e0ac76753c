//! Parameterised layers on top of [`Graph`](crate::Graph).

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::kernels::Window;
use crate::store::{EntryKind, ParamId, ParamStore};
use crate::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Registers parameters under dotted names and draws their initial values.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Builder { store, rng }
    }

    /// He-normal tensor: `N(0, 2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.store.register(name, shape, EntryKind::Parameter, data)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], kind: EntryKind, value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.store.register(name, shape, kind, vec![value; n])
    }
}

/// Kernel geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    /// `None` pads so that a unit-stride convolution preserves the spatial size.
    pub padding: Option<(usize, usize)>,
    pub bias: bool,
}

impl ConvSpec {
    pub fn square(k: usize) -> Self {
        Self::rect(k, k)
    }

    pub fn rect(kh: usize, kw: usize) -> Self {
        ConvSpec { kernel: (kh, kw), stride: 1, dilation: 1, padding: None, bias: false }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = Some((ph, pw));
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    fn window(&self) -> Window {
        let padding = self.padding.unwrap_or((self.dilation * (self.kernel.0 - 1) / 2, self.dilation * (self.kernel.1 - 1) / 2));
        Window { kernel: self.kernel, stride: (self.stride, self.stride), padding, dilation: (self.dilation, self.dilation) }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub window: Window,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let weight = b.he_normal(&format!("{name}.weight"), &[out_channels, in_channels, kh, kw], in_channels * kh * kw)?;
        let bias = if spec.bias { Some(b.filled(&format!("{name}.bias"), &[out_channels], EntryKind::Parameter, 0.0)?) } else { None };
        Ok(Conv2d { weight, bias, window: spec.window(), in_channels, out_channels })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|id| g.param(id));
        g.conv2d(x, w, b, self.window)
    }

    pub fn parameter_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: b.filled(&format!("{name}.weight"), &[channels], EntryKind::Parameter, 1.0)?,
            beta: b.filled(&format!("{name}.bias"), &[channels], EntryKind::Parameter, 0.0)?,
            running_mean: b.filled(&format!("{name}.running_mean"), &[channels], EntryKind::Buffer, 0.0)?,
            running_var: b.filled(&format!("{name}.running_var"), &[channels], EntryKind::Buffer, 1.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, (self.running_mean, self.running_var))
    }
}

/// Convolution → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl Cbr {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Cbr {
            conv: Conv2d::new(b, &format!("{name}.conv"), in_channels, out_channels, spec)?,
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), out_channels)?,
            relu: true,
        })
    }

    /// Convolution + batch norm without the activation.
    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}
