//! Task-adaptive gating: per-task channel gates from the semantic feature and
//! a shared spatial map from the detail feature, applied as `α·h + β`.

use crate::config::TagConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, CostTrace, LayerKind, Linear, Module, ParamBuilder, ParamId};

/// Pool → linear → ReLU → linear → sigmoid, reshaped to `B×C×1×1`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, hidden: usize, cout: usize) -> Self {
        let mut sub = pb.sub(name);
        ChannelAttention {
            fc1: Linear::new(&mut sub, "fc1", cin, hidden),
            fc2: Linear::new(&mut sub, "fc2", hidden, cout),
        }
    }
}

impl Module for ChannelAttention {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let p = g.global_avg_pool(x)?;
        let p = g.reshape(p, &[b, self.fc1.in_features])?;
        let z = self.fc1.forward(g, p)?;
        let z = g.relu(z);
        let z = self.fc2.forward(g, z)?;
        let a = g.sigmoid(z);
        g.reshape(a, &[b, self.fc2.out_features, 1, 1])
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let &[b, c, _, _] = input else {
            return Err(Error::invalid("channel_attention", format!("expected rank 4, got {input:?}")));
        };
        t.note(&format!("{}.pool", self.fc1.name), LayerKind::Pool, &[b, c, 1, 1]);
        let z = self.fc1.trace(&[b, c], t)?;
        t.note(&format!("{}.relu", self.fc1.name), LayerKind::Relu, &z);
        let z = self.fc2.trace(&z, t)?;
        t.note(&format!("{}.sigmoid", self.fc2.name), LayerKind::Sigmoid, &z);
        Ok(vec![b, z[1], 1, 1])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fc1.param_ids();
        v.extend(self.fc2.param_ids());
        v
    }
}

/// Dilated 3×3 conv with bias, followed by sigmoid. Extent preserving.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, dilation: usize) -> Self {
        let mut sub = pb.sub("spatial");
        SpatialAttention {
            conv: Conv2d::new(&mut sub, "conv", cin, cout, 3, 1, dilation, true),
        }
    }
}

impl Module for SpatialAttention {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        Ok(g.sigmoid(y))
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let y = self.conv.trace(input, t)?;
        t.note(&format!("{}.sigmoid", self.conv.name), LayerKind::Sigmoid, &y);
        Ok(y)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.conv.param_ids()
    }
}

#[derive(Clone, Debug)]
pub struct Tag {
    /// One gate per task, absent when channel attention is ablated.
    pub channel: Option<Vec<ChannelAttention>>,
    pub spatial: Option<SpatialAttention>,
    pub tasks: usize,
}

impl Tag {
    /// `semantic_channels` feeds the gates, `spatial_in` the spatial map,
    /// `channels` is the width of `h`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        cfg: &TagConfig,
        task_names: &[&str],
        semantic_channels: usize,
        spatial_in: usize,
        channels: usize,
        use_channel: bool,
        use_spatial: bool,
    ) -> Self {
        let mut pb = pb.sub("tag");
        let channel = use_channel.then(|| {
            let mut sub = pb.sub("channel");
            task_names
                .iter()
                .map(|n| ChannelAttention::new(&mut sub, n, semantic_channels, cfg.hidden, channels))
                .collect()
        });
        let beta_c = if cfg.beta_full_channels { channels } else { 1 };
        let spatial = use_spatial.then(|| SpatialAttention::new(&mut pb, spatial_in, beta_c, cfg.dilation));
        Tag {
            channel,
            spatial,
            tasks: task_names.len(),
        }
    }

    /// `α_t`, or `None` when channel attention is disabled.
    pub fn channel_attention(&self, g: &mut Graph, x_semantic: Var, t: usize) -> Result<Option<Var>> {
        if t >= self.tasks {
            return Err(Error::TaskIndex {
                index: t,
                count: self.tasks,
            });
        }
        match &self.channel {
            Some(heads) => Ok(Some(heads[t].forward(g, x_semantic)?)),
            None => Ok(None),
        }
    }

    /// `β`, or `None` when spatial attention is disabled.
    pub fn spatial_attention(&self, g: &mut Graph, x: Var) -> Result<Option<Var>> {
        match &self.spatial {
            Some(s) => Ok(Some(s.forward(g, x)?)),
            None => Ok(None),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.channel.iter().flatten().flat_map(|c| c.param_ids()).collect();
        if let Some(s) = &self.spatial {
            v.extend(s.param_ids());
        }
        v
    }
}

/// `h_t = α ⊙ h + β`; a missing factor is skipped rather than applied as an
/// identity, so ablations reproduce `h` bit for bit.
pub fn task_adapt(g: &mut Graph, h: Var, alpha: Option<Var>, beta: Option<Var>) -> Result<Var> {
    let y = match alpha {
        Some(a) => g.mul_channelwise(h, a)?,
        None => h,
    };
    match beta {
        Some(b) => {
            let (hs, bs) = (g.shape(y), g.shape(b));
            let ok = hs.len() == 4 && bs.len() == 4 && bs[0] == hs[0] && bs[2..] == hs[2..] && (bs[1] == 1 || bs[1] == hs[1]);
            if !ok {
                return Err(Error::shape("task_adapt", hs, bs));
            }
            g.add(y, b)
        }
        None => Ok(y),
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

    fn build(cin: usize, sp: usize, c: usize) -> (Tag, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = TagConfig { hidden: 6, ..TagConfig::default() };
        let tag = Tag::new(&mut ParamBuilder::new(&mut store), &cfg, &["det", "seg", "dep"], cin, sp, c, true, true);
        store.materialize(11);
        (tag, store)
    }

    #[test]
    fn shapes_and_ranges() {
        let (tag, store) = build(16, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store, Mode::Eval);
        let xs = g.input(Tensor::randn(&[2, 16, 2, 4], &mut rng));
        let xd = g.input(Tensor::randn(&[2, 8, 16, 32], &mut rng));
        let a0 = tag.channel_attention(&mut g, xs, 0).unwrap().unwrap();
        let a1 = tag.channel_attention(&mut g, xs, 1).unwrap().unwrap();
        assert_eq!(g.shape(a0), &[2, 12, 1, 1]);
        let b = tag.spatial_attention(&mut g, xd).unwrap().unwrap();
        assert_eq!(g.shape(b), &[2, 1, 16, 32]);
        for v in [a0, a1, b] {
            assert!(g.value(v).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
        let diff = g.value(a0).data().iter().zip(g.value(a1).data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
        assert!(matches!(
            tag.channel_attention(&mut g, xs, 3),
            Err(Error::TaskIndex { index: 3, count: 3 })
        ));
    }

    #[test]
    fn zero_weights_give_half() {
        let (tag, mut store) = build(16, 8, 12);
        for id in tag.param_ids() {
            store.get_mut(id).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&store, Mode::Eval);
        let xs = g.input(Tensor::randn(&[1, 16, 2, 4], &mut rng));
        let xd = g.input(Tensor::randn(&[1, 8, 8, 8], &mut rng));
        let a = tag.channel_attention(&mut g, xs, 2).unwrap().unwrap();
        let b = tag.spatial_attention(&mut g, xd).unwrap().unwrap();
        assert!(g.value(a).data().iter().chain(g.value(b).data()).all(|&x| x == 0.5));
    }

    #[test]
    fn spatial_map_is_translation_equivariant_inside() {
        let (tag, store) = build(4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, shift) = (24, 32, 8);
        let x = Tensor::randn(&[1, 3, h, w], &mut rng);
        let shifted = Tensor::from_fn(&[1, 3, h, w], |i| {
            let xx = i % w;
            if xx >= shift { x.data()[i - shift] } else { 0.0 }
        });
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.input(x);
        let b = g.input(shifted);
        let ba = tag.spatial_attention(&mut g, a).unwrap().unwrap();
        let bb = tag.spatial_attention(&mut g, b).unwrap().unwrap();
        let margin = 2 + shift;
        for y in margin..h - margin {
            for xx in margin..w - margin {
                assert_eq!(g.value(bb).at4(0, 0, y, xx), g.value(ba).at4(0, 0, y, xx - shift));
            }
        }
    }

    #[test]
    fn adapt_element_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let h = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let al = Tensor::uniform(&[2, 3, 1, 1], 0.0, 1.0, &mut rng);
        let be = Tensor::uniform(&[2, 1, 4, 5], 0.0, 1.0, &mut rng);
        let (hv, av, bv) = (g.input(h.clone()), g.input(al.clone()), g.input(be.clone()));
        let out = task_adapt(&mut g, hv, Some(av), Some(bv)).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let want = al.at4(b, c, 0, 0) * h.at4(b, c, y, x) + be.at4(b, 0, y, x);
                        assert_eq!(g.value(out).at4(b, c, y, x), want);
                    }
                }
            }
        }
        let same = task_adapt(&mut g, hv, None, None).unwrap();
        assert!(g.value(same).bit_eq(&h));
        let wrong = g.input(Tensor::zeros(&[2, 1, 4, 6]));
        assert!(task_adapt(&mut g, hv, None, Some(wrong)).is_err());
    }
}
