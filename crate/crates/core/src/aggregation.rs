//! Coarse-to-fine iterative aggregation of the low-branch scales and fusion
//! with the detail branch.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Conv2d, ConvNormAct, CostTrace, LayerKind, Module, NormConfig, ParamBuilder, ParamId};

/// Order in which merge nodes are applied to a list of `n` scales. Pair
/// `(i, j)` replaces `L[j-1]` with `f(L[j-1], L[j])`.
pub fn schedule(n: usize) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::invalid("aggregate", format!("need at least 2 scales, got {n}")));
    }
    let mut out = Vec::new();
    for idx1 in 1..n {
        for idx2 in (1..=idx1).rev() {
            out.push((idx1, idx2));
        }
    }
    Ok(out)
}

fn check_pair(op: &'static str, coarse: &[usize], fine: &[usize]) -> Result<()> {
    let ok = coarse.len() == 4
        && fine.len() == 4
        && coarse[0] == fine[0]
        && 2 * coarse[2] == fine[2]
        && 2 * coarse[3] == fine[3];
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            op,
            format!("coarse {coarse:?} must be exactly half the spatial extent of fine {fine:?}"),
        ))
    }
}

/// `f(x, y) = P2(concat(up2(P1(x)), y))` with conv-norm-act projections.
#[derive(Clone, Debug)]
pub struct MergeNode {
    pub idx: (usize, usize),
    pub p1: ConvNormAct,
    pub p2: ConvNormAct,
}

impl MergeNode {
    pub fn new(pb: &mut ParamBuilder, idx: (usize, usize), coarse: usize, fine: usize, norm: NormConfig) -> Self {
        let mut sub = pb.sub(&format!("f{}{}", idx.0, idx.1));
        MergeNode {
            idx,
            p1: ConvNormAct::new(&mut sub, "p1", coarse, fine, 3, 1, Activation::Relu, norm),
            p2: ConvNormAct::new(&mut sub, "p2", 2 * fine, fine, 3, 1, Activation::Relu, norm),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        check_pair("merge", g.shape(x), g.shape(y))?;
        let a = self.p1.forward(g, x)?;
        let a = g.resize(a, 2)?;
        let c = g.concat(a, y)?;
        self.p2.forward(g, c)
    }

    pub fn trace(&self, x: &[usize], y: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        check_pair("merge", x, y)?;
        let mut a = self.p1.trace(x, t)?;
        a[2] *= 2;
        a[3] *= 2;
        let name = &self.p1.conv.name;
        t.note(&format!("{name}.resize"), LayerKind::Resize, &a);
        if a[1] != self.p2.conv.in_channels - y[1] {
            return Err(Error::shape("merge", &a, y));
        }
        let mut c = y.to_vec();
        c[1] += a[1];
        t.note(&format!("{name}.concat"), LayerKind::Concat, &c);
        self.p2.trace(&c, t)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.p1.param_ids();
        v.extend(self.p2.param_ids());
        v
    }
}

/// Aggregation over scales ordered coarsest first. Each merge node owns its
/// own weights.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub channels: Vec<usize>,
    pub nodes: Vec<MergeNode>,
}

impl Aggregation {
    pub fn new(pb: &mut ParamBuilder, channels: &[usize], norm: NormConfig) -> Result<Self> {
        let order = schedule(channels.len())?;
        let mut pb = pb.sub("aggregation");
        let mut ch = channels.to_vec();
        let nodes = order
            .into_iter()
            .map(|(i, j)| {
                let node = MergeNode::new(&mut pb, (i, j), ch[j - 1], ch[j], norm);
                ch[j - 1] = ch[j];
                node
            })
            .collect();
        Ok(Aggregation {
            channels: channels.to_vec(),
            nodes,
        })
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Runs the merge schedule and returns the final `L[0]` together with the
    /// `(i, j)` pairs in application order.
    pub fn forward_traced(&self, g: &mut Graph, scales: &[Var]) -> Result<(Var, Vec<(usize, usize)>)> {
        if scales.len() != self.depth() {
            return Err(Error::invalid(
                "aggregate",
                format!("built for {} scales, got {}", self.depth(), scales.len()),
            ));
        }
        let mut l = scales.to_vec();
        let mut applied = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (_, j) = node.idx;
            l[j - 1] = node.forward(g, l[j - 1], l[j])?;
            applied.push(node.idx);
        }
        Ok((l[0], applied))
    }

    pub fn forward(&self, g: &mut Graph, scales: &[Var]) -> Result<Var> {
        Ok(self.forward_traced(g, scales)?.0)
    }

    /// Symbolic pass. Returns, per outer iteration, the trace of its merge
    /// nodes and the shape of `L[0]` after it.
    pub fn trace_stages(&self, shapes: &[Vec<usize>]) -> Result<Vec<(CostTrace, Vec<usize>)>> {
        if shapes.len() != self.depth() {
            return Err(Error::invalid("aggregate", "scale count mismatch"));
        }
        let mut l = shapes.to_vec();
        let mut stages: Vec<(CostTrace, Vec<usize>)> = Vec::new();
        for node in &self.nodes {
            let (i, j) = node.idx;
            if stages.len() < i {
                stages.push((CostTrace::default(), Vec::new()));
            }
            let stage = stages.last_mut().expect("stage pushed");
            l[j - 1] = node.trace(&l[j - 1], &l[j], &mut stage.0)?;
            stage.1 = l[0].clone();
        }
        Ok(stages)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.nodes.iter().flat_map(|n| n.param_ids()).collect()
    }
}

/// Stand-in when aggregation is ablated: a 1×1 projection of the deepest
/// scale followed by bilinear upsampling to the finest aggregation scale.
#[derive(Clone, Debug)]
pub struct ContextHead {
    pub proj: ConvNormAct,
    pub scale: usize,
}

impl ContextHead {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, scale: usize, norm: NormConfig) -> Self {
        let mut sub = pb.sub("context");
        ContextHead {
            proj: ConvNormAct::new(&mut sub, "proj", cin, cout, 1, 1, Activation::Relu, norm),
            scale,
        }
    }
}

impl Module for ContextHead {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.proj.forward(g, x)?;
        g.resize(y, self.scale)
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let mut y = self.proj.trace(input, t)?;
        y[2] *= self.scale;
        y[3] *= self.scale;
        t.note(&format!("{}.resize", self.proj.conv.name), LayerKind::Resize, &y);
        Ok(y)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.proj.param_ids()
    }
}

/// `h = up2(x_agg) + g(x_detail)` with `g` a bias-free 1×1 conv.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: Option<Conv2d>,
    pub channels: usize,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, detail_channels: Option<usize>, channels: usize) -> Self {
        let mut sub = pb.sub("fusion");
        Fusion {
            proj: detail_channels.map(|c| Conv2d::new(&mut sub, "g", c, channels, 1, 1, 1, false)),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x_agg: Var, x_detail: Option<Var>) -> Result<Var> {
        let up = g.resize(x_agg, 2)?;
        match (&self.proj, x_detail) {
            (Some(p), Some(d)) => {
                let a = g.shape(up).to_vec();
                let ds = g.shape(d);
                if a.len() != 4 || ds.len() != 4 || a[0] != ds[0] || a[2..] != ds[2..] {
                    return Err(Error::shape("fuse", &a, ds));
                }
                let gd = p.forward(g, d)?;
                g.add(up, gd)
            }
            (None, None) => Ok(up),
            _ => Err(Error::invalid("fuse", "detail feature presence does not match the fusion layout")),
        }
    }

    pub fn trace(&self, x_agg: &[usize], x_detail: Option<&[usize]>, t: &mut CostTrace) -> Result<Vec<usize>> {
        let mut up = x_agg.to_vec();
        up[2] *= 2;
        up[3] *= 2;
        t.note("fusion.resize", LayerKind::Resize, &up);
        if let (Some(p), Some(d)) = (&self.proj, x_detail) {
            let gd = p.trace(d, t)?;
            if gd != up {
                return Err(Error::shape("fuse", &up, &gd));
            }
            t.note("fusion.add", LayerKind::Add, &up);
        }
        Ok(up)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.proj.iter().flat_map(|p| p.param_ids()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_small_cases() {
        assert_eq!(schedule(2).unwrap(), vec![(1, 1)]);
        assert_eq!(schedule(3).unwrap(), vec![(1, 1), (2, 2), (2, 1)]);
        assert!(schedule(1).is_err());
        assert!(schedule(0).is_err());
    }

    #[test]
    fn symbolic_shapes_full_width() {
        let mut store = ParamStore::new();
        let agg = Aggregation::new(&mut ParamBuilder::new(&mut store), &[1024, 512, 256], NormConfig::default()).unwrap();
        assert_eq!(agg.nodes.len(), 3);
        let stages = agg
            .trace_stages(&[vec![1, 1024, 16, 32], vec![1, 512, 32, 64], vec![1, 256, 64, 128]])
            .unwrap();
        assert_eq!(stages.len(), 2);
        assert_eq!(stages[0].1, vec![1, 512, 32, 64]);
        assert_eq!(stages[1].1, vec![1, 256, 64, 128]);
        let mut t = CostTrace::default();
        let out = agg.nodes[0].trace(&[1, 1024, 16, 32], &[1, 512, 32, 64], &mut t).unwrap();
        assert_eq!(out, vec![1, 512, 32, 64]);
        assert!(agg.nodes[0].trace(&[1, 1024, 16, 32], &[1, 512, 48, 64], &mut t).is_err());
    }

    #[test]
    fn zero_weights_stay_finite() {
        let mut store = ParamStore::new();
        let agg = Aggregation::new(&mut ParamBuilder::new(&mut store), &[8, 4], NormConfig::default()).unwrap();
        store.materialize(1);
        for id in agg.param_ids() {
            if store.entry(id).shape.len() == 4 {
                store.get_mut(id).unwrap().data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::randn(&[1, 8, 2, 3], &mut rng));
        let y = g.input(Tensor::randn(&[1, 4, 4, 6], &mut rng));
        let (out, applied) = agg.forward_traced(&mut g, &[x, y]).unwrap();
        assert_eq!(applied, vec![(1, 1)]);
        assert_eq!(g.shape(out), &[1, 4, 4, 6]);
        assert!(g.value(out).all_finite());
    }

    #[test]
    fn fusion_without_detail_signal_is_upsample() {
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut ParamBuilder::new(&mut store), Some(3), 5);
        store.materialize(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let agg = Tensor::randn(&[1, 5, 2, 4], &mut rng);
        let mut g = Graph::new(&store, Mode::Train);
        let a = g.input(agg.clone());
        let d = g.input(Tensor::zeros(&[1, 3, 4, 8]));
        let h = fusion.forward(&mut g, a, Some(d)).unwrap();
        let up = crate::tensor::ops::bilinear_resize(&agg, 2).unwrap();
        assert!(g.value(h).bit_eq(&up));
        let bad = g.input(Tensor::zeros(&[1, 3, 6, 8]));
        assert!(fusion.forward(&mut g, a, Some(bad)).is_err());
    }
}
