//! Two-pathway trunk: shared stem and layers 1-2, then a strided
//! low-resolution branch and a stride-free high-resolution branch.

use crate::config::{BackboneConfig, InputSize};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, ConvNormAct, CostTrace, Module, ParamBuilder, ParamId, ResidualBlock};

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutputs {
    pub x_layer3: Var,
    pub x_layer4: Var,
    pub x_semantic: Var,
    pub x_detail: Option<Var>,
}

/// One low-branch layer: a strided conv-norm-act followed by plain ones.
#[derive(Clone, Debug)]
pub struct PlainStage {
    pub layers: Vec<ConvNormAct>,
}

impl PlainStage {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, plain: usize, cfg: &BackboneConfig) -> Self {
        let mut sub = pb.sub(name);
        let mut layers = vec![ConvNormAct::new(&mut sub, "down", cin, cout, 3, 2, Activation::Relu, cfg.norm)];
        for i in 0..plain {
            layers.push(ConvNormAct::new(&mut sub, &format!("conv{i}"), cout, cout, 3, 1, Activation::Relu, cfg.norm));
        }
        PlainStage { layers }
    }
}

impl Module for PlainStage {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.layers.forward(g, x)
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        self.layers.trace(input, t)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.param_ids()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub in_channels: usize,
    pub stem: Vec<ConvNormAct>,
    pub layer1: Vec<ResidualBlock>,
    pub layer2: PlainStage,
    /// Layers 3, 4 and 5 of the low-resolution branch.
    pub low: [PlainStage; 3],
    /// Layers 3 and 4 of the high-resolution branch; layer 5 is the identity.
    pub high: Option<[Vec<ResidualBlock>; 2]>,
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.sub("backbone");
        let [c1, c2, c3, c4, c5] = cfg.layer_channels;
        let stem = {
            let mut sub = pb.sub("stem");
            vec![
                ConvNormAct::new(&mut sub, "0", cfg.in_channels, cfg.stem_channels, 3, 2, Activation::Relu, cfg.norm),
                ConvNormAct::new(&mut sub, "1", cfg.stem_channels, cfg.stem_channels, 3, 2, Activation::Relu, cfg.norm),
            ]
        };
        let layer1 = residual_stack(&mut pb, "layer1", cfg.stem_channels, c1, cfg);
        let layer2 = PlainStage::new(&mut pb, "layer2", c1, c2, cfg.plain_convs, cfg);
        let low = [
            PlainStage::new(&mut pb, "low3", c2, c3, cfg.plain_convs, cfg),
            PlainStage::new(&mut pb, "low4", c3, c4, cfg.plain_convs, cfg),
            PlainStage::new(&mut pb, "low5", c4, c5, cfg.plain_convs, cfg),
        ];
        let high = cfg.toggles.use_high_branch.then(|| {
            [
                residual_stack(&mut pb, "high3", c2, cfg.high_channels, cfg),
                residual_stack(&mut pb, "high4", cfg.high_channels, cfg.high_channels, cfg),
            ]
        });
        Ok(Backbone {
            in_channels: cfg.in_channels,
            stem,
            layer1,
            layer2,
            low,
            high,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<BackboneOutputs> {
        let s = g.shape(image).to_vec();
        let &[_, c, h, w] = s.as_slice() else {
            return Err(Error::invalid("backbone", format!("expected B×C×H×W image, got {s:?}")));
        };
        if c != self.in_channels {
            return Err(Error::invalid(
                "backbone",
                format!("image has {c} channels, expected {}", self.in_channels),
            ));
        }
        self.cfg.validate_input(InputSize::new(h, w))?;
        let x = self.stem.forward(g, image)?;
        let x = self.layer1.forward(g, x)?;
        let x2 = self.layer2.forward(g, x)?;
        let x_layer3 = self.low[0].forward(g, x2)?;
        let x_layer4 = self.low[1].forward(g, x_layer3)?;
        let x_semantic = self.low[2].forward(g, x_layer4)?;
        let x_detail = match &self.high {
            Some([h3, h4]) => {
                let d = h3.forward(g, x2)?;
                Some(h4.forward(g, d)?)
            }
            None => None,
        };
        Ok(BackboneOutputs {
            x_layer3,
            x_layer4,
            x_semantic,
            x_detail,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.stem.param_ids();
        v.extend(self.layer1.param_ids());
        v.extend(self.layer2.param_ids());
        for s in &self.low {
            v.extend(s.param_ids());
        }
        if let Some(h) = &self.high {
            v.extend(h.iter().flat_map(|s| s.param_ids()));
        }
        v
    }
}

fn residual_stack(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, cfg: &BackboneConfig) -> Vec<ResidualBlock> {
    let mut sub = pb.sub(name);
    (0..cfg.residual_blocks)
        .map(|i| {
            let c = if i == 0 { cin } else { cout };
            ResidualBlock::new(&mut sub, &i.to_string(), c, cout, 1, cfg.norm)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn desk_scale_shapes() {
        let cfg = BackboneConfig::slim(InputSize::new(64, 128));
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut ParamBuilder::new(&mut store), &cfg).unwrap();
        store.materialize(0);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::zeros(&[1, 3, 64, 128]));
        let o = bb.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(o.x_layer3), &[1, 16, 4, 8]);
        assert_eq!(g.shape(o.x_layer4), &[1, 32, 2, 4]);
        assert_eq!(g.shape(o.x_semantic), &[1, 64, 1, 2]);
        assert_eq!(g.shape(o.x_detail.unwrap()), &[1, 8, 8, 16]);
        assert!(g.value(o.x_semantic).all_finite());
    }

    #[test]
    fn rejects_bad_images() {
        let cfg = BackboneConfig::slim(InputSize::new(64, 128));
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut ParamBuilder::new(&mut store), &cfg).unwrap();
        store.materialize(0);
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::zeros(&[1, 4, 64, 128]));
        assert!(bb.forward(&mut g, x).unwrap_err().to_string().contains("4 channels"));
        let x = g.input(Tensor::zeros(&[1, 3, 60, 128]));
        assert!(bb.forward(&mut g, x).is_err());
    }

    #[test]
    fn no_high_branch() {
        let mut cfg = BackboneConfig::slim(InputSize::new(64, 128));
        cfg.toggles.use_high_branch = false;
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut ParamBuilder::new(&mut store), &cfg).unwrap();
        assert!(bb.high.is_none());
        assert!(store.find("backbone.high3.0.first.conv.weight").is_none());
    }
}
