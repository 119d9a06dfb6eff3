use serde::{Deserialize, Serialize};

use super::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::ops::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Norm,
    Relu,
    Sigmoid,
    Resize,
    Pool,
    Linear,
    Add,
    Concat,
}

/// One primitive layer as seen by the cost report.
#[derive(Clone, Debug, Serialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub params: usize,
    pub macs: u64,
    pub output: Vec<usize>,
}

impl LayerNode {
    fn simple(name: &str, kind: LayerKind, output: &[usize]) -> Self {
        let c = output.get(1).copied().unwrap_or(0);
        LayerNode {
            name: name.to_string(),
            kind,
            in_channels: c,
            out_channels: c,
            kernel: 0,
            stride: 1,
            dilation: 1,
            params: 0,
            macs: 0,
            output: output.to_vec(),
        }
    }
}

/// Accumulates [`LayerNode`]s during a symbolic pass.
///
/// MACs count only convolution and linear layers (`K²·Cin·Cout·H'·W'` and
/// `In·Out` per sample); normalization, activation, resize and elementwise
/// ops are recorded with zero MACs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CostTrace {
    pub nodes: Vec<LayerNode>,
}

impl CostTrace {
    pub fn params(&self) -> usize {
        self.nodes.iter().map(|n| n.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    pub fn push(&mut self, node: LayerNode) {
        self.nodes.push(node);
    }

    pub fn note(&mut self, name: &str, kind: LayerKind, output: &[usize]) {
        self.nodes.push(LayerNode::simple(name, kind, output));
    }

    pub fn extend(&mut self, other: CostTrace) {
        self.nodes.extend(other.nodes);
    }
}

pub trait Module: Send + Sync {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// Symbolic shape propagation; records every primitive layer in `t`.
    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>>;

    /// Trainable parameters owned by this module.
    fn param_ids(&self) -> Vec<ParamId>;
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid(op, format!("expected rank-4 shape, got {s:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// Square convolution with "same" padding for its dilation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let mut sub = pb.sub(name);
        let fan_in = in_channels * kernel * kernel;
        let weight = sub.trainable("weight", &[out_channels, in_channels, kernel, kernel], Init::HeNormal { fan_in });
        let bias = bias.then(|| sub.trainable("bias", &[out_channels], Init::Constant(0.0)));
        Conv2d {
            name: sub.prefix().to_string(),
            in_channels,
            out_channels,
            kernel,
            geom: ConvGeometry::same(kernel, stride, dilation),
            weight,
            bias,
        }
    }
}

impl Module for Conv2d {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.conv2d(x, w, self.geom)?;
        match self.bias {
            Some(b) => {
                let bv = g.param(b)?;
                let b4 = g.reshape(bv, &[1, self.out_channels, 1, 1])?;
                g.add(y, b4)
            }
            None => Ok(y),
        }
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let (b, c, h, w) = dims4("conv2d", input)?;
        if c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                input,
                &[self.out_channels, self.in_channels, self.kernel, self.kernel],
            ));
        }
        let (ho, wo) = match (self.geom.output_extent(h, self.kernel), self.geom.output_extent(w, self.kernel)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::invalid("conv2d", format!("input {h}×{w} too small for {}", self.name))),
        };
        let k2 = (self.kernel * self.kernel) as u64;
        let params = self.out_channels * self.in_channels * self.kernel * self.kernel
            + self.bias.map_or(0, |_| self.out_channels);
        let out = vec![b, self.out_channels, ho, wo];
        t.push(LayerNode {
            name: self.name.clone(),
            kind: LayerKind::Conv,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.geom.stride,
            dilation: self.geom.dilation,
            params,
            macs: k2 * (self.in_channels * self.out_channels * b * ho * wo) as u64,
            output: out.clone(),
        });
        Ok(out)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Batch normalization with affine scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub cfg: NormConfig,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, cfg: NormConfig) -> Self {
        let mut sub = pb.sub(name);
        BatchNorm2d {
            name: sub.prefix().to_string(),
            channels,
            gamma: sub.trainable("gamma", &[channels], Init::Constant(1.0)),
            beta: sub.trainable("beta", &[channels], Init::Constant(0.0)),
            running_mean: sub.buffer("running_mean", &[channels], Init::Constant(0.0)),
            running_var: sub.buffer("running_var", &[channels], Init::Constant(1.0)),
            cfg,
        }
    }
}

impl Module for BatchNorm2d {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.cfg.momentum,
            self.cfg.eps,
        )
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let (_, c, _, _) = dims4("batch_norm", input)?;
        if c != self.channels {
            return Err(Error::shape("batch_norm", input, &[self.channels]));
        }
        let mut node = LayerNode::simple(&self.name, LayerKind::Norm, input);
        node.params = 2 * self.channels;
        t.push(node);
        Ok(input.to_vec())
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Convolution → batch norm → optional ReLU. The convolution carries no
/// bias since the norm shift subsumes it.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
    pub act: Activation,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        norm: NormConfig,
    ) -> Self {
        let mut sub = pb.sub(name);
        ConvNormAct {
            conv: Conv2d::new(&mut sub, "conv", in_channels, out_channels, kernel, stride, 1, false),
            norm: BatchNorm2d::new(&mut sub, "norm", out_channels, norm),
            act,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

impl Module for ConvNormAct {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(match self.act {
            Activation::Relu => g.relu(y),
            Activation::None => y,
        })
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let y = self.conv.trace(input, t)?;
        let y = self.norm.trace(&y, t)?;
        if self.act == Activation::Relu {
            t.note(&format!("{}.relu", self.conv.name), LayerKind::Relu, &y);
        }
        Ok(y)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.conv.param_ids();
        v.extend(self.norm.param_ids());
        v
    }
}

/// Two 3×3 conv-norm pairs with an identity skip, or a 1×1 projected skip
/// when stride or width changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub name: String,
    pub first: ConvNormAct,
    pub second: ConvNormAct,
    pub skip: Option<ConvNormAct>,
}

impl ResidualBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_channels: usize, out_channels: usize, stride: usize, norm: NormConfig) -> Self {
        let mut sub = pb.sub(name);
        let first = ConvNormAct::new(&mut sub, "first", in_channels, out_channels, 3, stride, Activation::Relu, norm);
        let second = ConvNormAct::new(&mut sub, "second", out_channels, out_channels, 3, 1, Activation::None, norm);
        let skip = (stride != 1 || in_channels != out_channels)
            .then(|| ConvNormAct::new(&mut sub, "skip", in_channels, out_channels, 1, stride, Activation::None, norm));
        ResidualBlock {
            name: sub.prefix().to_string(),
            first,
            second,
            skip,
        }
    }

    /// Zeroes the last norm's scale so the block reduces to `relu(skip(x))`.
    pub fn zero_init_last_norm(&self, store: &mut ParamStore) -> Result<()> {
        store.get_mut(self.second.norm.gamma)?.data_mut().fill(0.0);
        Ok(())
    }
}

impl Module for ResidualBlock {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.first.forward(g, x)?;
        let y = self.second.forward(g, y)?;
        let s = match &self.skip {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let sum = g.add(y, s)?;
        Ok(g.relu(sum))
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let y = self.first.trace(input, t)?;
        let y = self.second.trace(&y, t)?;
        let s = match &self.skip {
            Some(p) => p.trace(input, t)?,
            None => input.to_vec(),
        };
        if s != y {
            return Err(Error::shape("residual_block", &s, &y));
        }
        t.note(&format!("{}.add", self.name), LayerKind::Add, &y);
        t.note(&format!("{}.relu", self.name), LayerKind::Relu, &y);
        Ok(y)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.first.param_ids();
        v.extend(self.second.param_ids());
        if let Some(p) = &self.skip {
            v.extend(p.param_ids());
        }
        v
    }
}

/// Fully connected layer on `B×In` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_features: usize, out_features: usize) -> Self {
        let mut sub = pb.sub(name);
        Linear {
            name: sub.prefix().to_string(),
            in_features,
            out_features,
            weight: sub.trainable("weight", &[out_features, in_features], Init::HeNormal { fan_in: in_features }),
            bias: sub.trainable("bias", &[out_features], Init::Constant(0.0)),
        }
    }
}

impl Module for Linear {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.linear(x, w, b)
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let &[b, f] = input else {
            return Err(Error::invalid("linear", format!("expected B×In, got {input:?}")));
        };
        if f != self.in_features {
            return Err(Error::shape("linear", input, &[self.out_features, self.in_features]));
        }
        t.push(LayerNode {
            name: self.name.clone(),
            kind: LayerKind::Linear,
            in_channels: self.in_features,
            out_channels: self.out_features,
            kernel: 1,
            stride: 1,
            dilation: 1,
            params: self.in_features * self.out_features + self.out_features,
            macs: (b * self.in_features * self.out_features) as u64,
            output: vec![b, self.out_features],
        });
        Ok(vec![b, self.out_features])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

impl<M: Module> Module for Vec<M> {
    fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for m in self {
            x = m.forward(g, x)?;
        }
        Ok(x)
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for m in self {
            s = m.trace(&s, t)?;
        }
        Ok(s)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.iter().flat_map(|m| m.param_ids()).collect()
    }
}
