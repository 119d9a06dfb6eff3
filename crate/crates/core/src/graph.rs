//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations in execution order, which is a topological
//! order by construction. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every parameter and input reachable from the loss.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::loss::kernels as lk;
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization behaviour: batch statistics while training, running
/// statistics otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (id, batch) in [(self.running_mean, &self.batch_mean), (self.running_var, &self.batch_var)] {
            let t = store.get_mut(id)?;
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Resize {
        input: Var,
        scale: usize,
    },
    Concat(Var, Var),
    Narrow {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy {
        logits: Var,
        cache: lk::LossCache,
    },
    SmoothL1 {
        pred: Var,
        cache: lk::LossCache,
    },
    Focal {
        logits: Var,
        cache: lk::LossCache,
    },
    MaskedL1 {
        pred: Var,
        cache: lk::LossCache,
    },
    /// A value computed outside the graph from recorded inputs; it has no
    /// derivative rule and backward through it is an error.
    Opaque { name: String, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Resize { .. } => "bilinear_resize",
            Op::Concat(..) => "concat_channels",
            Op::Narrow { .. } => "narrow_channels",
            Op::Reshape(_) => "reshape",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::WeightedSum(_) => "weighted_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Focal { .. } => "focal",
            Op::MaskedL1 { .. } => "masked_l1",
            Op::Opaque { name, .. } => name,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// L2 norm over the gradients of the given parameters.
    pub fn norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.params.get(id))
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
    warnings: Vec<String>,
    fault: Option<(String, f64)>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
            warnings: Vec::new(),
            fault: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales every input gradient produced by ops named `op` by
    /// `factor` during backward.
    pub fn inject_fault(&mut self, op: &str, factor: f64) {
        self.fault = Some((op.to_string(), factor));
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id).expect("param leaves are checked on creation"),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Names of the recorded ops in tape order.
    pub fn op_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// Leaf for a stored parameter. Repeated calls return the same `Var`.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        self.store.get(id)?;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Substitutes `value` for a stored parameter in this graph only. Must be
    /// called before the parameter is first used.
    pub fn override_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let expected = &self.store.entry(id).shape;
        if value.shape() != expected.as_slice() {
            return Err(Error::shape("override_param", expected, value.shape()));
        }
        if self.param_vars.contains_key(&id) {
            return Err(Error::invalid("override_param", "parameter already used in this graph"));
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Some(value),
        });
        self.param_vars.insert(id, Var(self.nodes.len() - 1));
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(weight), geom)?;
        Ok(self.push(Op::Conv2d { input, weight, geom }, y))
    }

    /// Batch normalization over `(B, H, W)` per channel. In training mode the
    /// batch statistics are used and a running-statistics update is queued.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            let stats = ops::channel_stats(self.value(input))?;
            let unbiased = if stats.count > 1 {
                stats.var.iter().map(|v| v * stats.count as f64 / (stats.count - 1) as f64).collect()
            } else {
                stats.var.clone()
            };
            self.stat_updates.push(StatUpdate {
                running_mean,
                running_var,
                batch_mean: stats.mean.clone(),
                batch_var: unbiased,
                momentum,
            });
            (stats.mean, stats.var)
        } else {
            (
                self.store.get(running_mean)?.data().to_vec(),
                self.store.get(running_var)?.data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = ops::batch_norm_apply(self.value(input), &mean, &inv_std, self.value(g), self.value(b))?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
                train,
            },
            y,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu(x), y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), y)
    }

    pub fn resize(&mut self, x: Var, scale: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), scale)?;
        Ok(self.push(Op::Resize { input: x, scale }, y))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), y))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(Op::Narrow { input: x, start }, y))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), y))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), y))
    }

    /// `x·wᵀ + b` for `x: B×In`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { input: x, weight: w, bias: b }, y))
    }

    /// `a + b` with `b` broadcast over `a` on unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), y))
    }

    /// `a · b` with `b` broadcast over `a` on unit extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn mul_channelwise(&mut self, h: Var, alpha: Var) -> Result<Var> {
        let y = ops::mul_channelwise(self.value(h), self.value(alpha))?;
        Ok(self.push(Op::Mul(h, alpha), y))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `Σ wᵢ·xᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.scalar_of(v, "weighted_sum")?;
        }
        Ok(self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(s)))
    }

    fn scalar_of(&self, v: Var, op: &'static str) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::NonScalar {
                op,
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.data()[0])
    }

    /// Mean softmax cross-entropy over non-ignored pixels. Labels are
    /// `B×H×W` in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: u32) -> Result<Var> {
        let (loss, cache) = lk::cross_entropy(self.value(logits), labels, ignore)?;
        if cache.count == 0 {
            self.warnings.push("cross_entropy: every pixel ignored, loss defined as 0".into());
        }
        Ok(self.push(Op::CrossEntropy { logits, cache }, Tensor::scalar(loss)))
    }

    /// Mean smooth-L1 over pixels where `mask > 0.5`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let (loss, cache) = lk::smooth_l1(self.value(pred), target, mask)?;
        if cache.count == 0 {
            self.warnings.push("smooth_l1: empty mask, loss defined as 0".into());
        }
        Ok(self.push(Op::SmoothL1 { pred, cache }, Tensor::scalar(loss)))
    }

    /// Penalty-reduced focal loss on heatmap logits.
    pub fn focal(&mut self, logits: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
        let (loss, cache) = lk::focal(self.value(logits), target, alpha, beta)?;
        Ok(self.push(Op::Focal { logits, cache }, Tensor::scalar(loss)))
    }

    /// `Σ weight·|pred − target| / norm`.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, weight: &Tensor, norm: f64) -> Result<Var> {
        let (loss, cache) = lk::masked_l1(self.value(pred), target, weight, norm)?;
        Ok(self.push(Op::MaskedL1 { pred, cache }, Tensor::scalar(loss)))
    }

    /// Records an externally computed value. Backward through it fails.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor) -> Var {
        self.push(
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            value,
        )
    }

    /// Reverse-mode gradients of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalar {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contrib: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                    continue;
                }
                Op::Param(id) => {
                    match out.params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            out.params.insert(*id, g);
                        }
                    }
                    continue;
                }
                Op::Conv2d { input, weight, geom } => {
                    let (dx, dw) = ops::conv2d_backward(self.value(*input), self.value(*weight), *geom, &g)?;
                    contrib.push((*input, dx));
                    contrib.push((*weight, dw));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let gm = self.value(*gamma);
                    let (dx, dg, db) = if *train {
                        ops::batch_norm_train_backward(xhat, inv_std, gm, &g)?
                    } else {
                        ops::batch_norm_eval_backward(xhat, inv_std, gm, &g)?
                    };
                    contrib.push((*input, dx));
                    contrib.push((*gamma, dg));
                    contrib.push((*beta, db));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let d = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(xv.data()).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect(),
                    )?;
                    contrib.push((*x, d));
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("value");
                    let d = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(y.data()).map(|(&gi, &s)| gi * s * (1.0 - s)).collect(),
                    )?;
                    contrib.push((*x, d));
                }
                Op::Resize { input, scale } => {
                    contrib.push((*input, ops::bilinear_resize_backward(self.shape(*input), *scale, &g)?));
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(*a)[1];
                    let cb = self.shape(*b)[1];
                    contrib.push((*a, ops::narrow_channels(&g, 0, ca)?));
                    contrib.push((*b, ops::narrow_channels(&g, ca, cb)?));
                }
                Op::Narrow { input, start } => {
                    contrib.push((*input, ops::narrow_channels_backward(self.shape(*input), *start, &g)?));
                }
                Op::Reshape(x) => {
                    contrib.push((*x, g.reshape(self.shape(*x))?));
                }
                Op::GlobalAvgPool(x) => {
                    contrib.push((*x, ops::global_avg_pool_backward(self.shape(*x), &g)));
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*input), self.value(*weight), &g)?;
                    contrib.push((*input, dx));
                    contrib.push((*weight, dw));
                    contrib.push((*bias, db));
                }
                Op::Add(a, b) => {
                    let db = ops::reduce_to("add", &g, self.shape(*b))?;
                    contrib.push((*b, db));
                    contrib.push((*a, g));
                }
                Op::Mul(a, b) => {
                    let da = ops::mul(&g, self.value(*b))?;
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect(),
                    )?;
                    contrib.push((*b, ops::reduce_to("mul", &gb, self.shape(*b))?));
                    contrib.push((*a, da));
                }
                Op::Sum(x) => {
                    contrib.push((*x, Tensor::full(self.shape(*x), g.data()[0])));
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        contrib.push((v, Tensor::full(self.shape(v), w * g.data()[0])));
                    }
                }
                Op::CrossEntropy { logits, cache } => {
                    contrib.push((*logits, cache.backward(g.data()[0])));
                }
                Op::SmoothL1 { pred, cache } => {
                    contrib.push((*pred, cache.backward(g.data()[0])));
                }
                Op::Focal { logits, cache } => {
                    contrib.push((*logits, cache.backward(g.data()[0])));
                }
                Op::MaskedL1 { pred, cache } => {
                    contrib.push((*pred, cache.backward(g.data()[0])));
                }
                Op::Opaque { name, inputs } => {
                    return Err(Error::UnsupportedOp {
                        op: format!("{name} (no backward rule, {} inputs)", inputs.len()),
                    });
                }
            }
            let factor = match &self.fault {
                Some((name, f)) if name == node.op.name() => Some(*f),
                _ => None,
            };
            for (v, mut t) in contrib {
                if let Some(f) = factor {
                    t.data_mut().iter_mut().for_each(|x| *x *= f);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(out)
    }
}
