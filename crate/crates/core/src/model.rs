//! The complete multi-task network.

use crate::aggregation::{Aggregation, ContextHead, Fusion};
use crate::backbone::{Backbone, BackboneOutputs};
use crate::config::{BackboneConfig, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heads::TaskHead;
use crate::loss::{self, DetLossTerms, FocalParams, IGNORE_LABEL};
use crate::nn::{Module, ParamBuilder, ParamId, ParamStore};
use crate::synth::Batch;
use crate::tag::{task_adapt, Tag};

#[derive(Clone, Debug)]
pub struct NetOutputs {
    pub backbone: BackboneOutputs,
    pub x_agg: Var,
    pub h: Var,
    /// Per task, in config order.
    pub alphas: Vec<Option<Var>>,
    pub beta: Option<Var>,
    pub task_features: Vec<Var>,
    pub predictions: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub per_task: Vec<(TaskKind, Var)>,
    pub det_terms: Option<DetLossTerms>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct MultiTaskNet {
    pub config: BackboneConfig,
    pub backbone: Backbone,
    pub aggregation: Option<Aggregation>,
    pub context: Option<ContextHead>,
    pub fusion: Fusion,
    pub tag: Tag,
    pub heads: Vec<TaskHead>,
    pub focal: FocalParams,
}

impl MultiTaskNet {
    /// Builds the network and an unmaterialized parameter store.
    pub fn build(cfg: &BackboneConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store);
        let backbone = Backbone::new(&mut pb, cfg)?;
        let [_, _, c3, c4, c5] = cfg.layer_channels;
        let c = cfg.feature_channels();
        let (aggregation, context) = if cfg.toggles.use_aggregation {
            (Some(Aggregation::new(&mut pb, &[c5, c4, c3], cfg.norm)?), None)
        } else {
            (None, Some(ContextHead::new(&mut pb, c5, c, 4, cfg.norm)))
        };
        let detail = cfg.toggles.use_high_branch.then_some(cfg.high_channels);
        let fusion = Fusion::new(&mut pb, detail, c);
        let names: Vec<&str> = cfg.tasks.iter().map(|t| t.short_name()).collect();
        let tag = Tag::new(
            &mut pb,
            &cfg.tag,
            &names,
            c5,
            detail.unwrap_or(c),
            c,
            cfg.toggles.use_channel_attention,
            cfg.toggles.use_spatial_attention,
        );
        let heads = {
            let mut sub = pb.sub("heads");
            cfg.tasks
                .iter()
                .map(|&k| TaskHead::new(&mut sub, k, c, cfg.task_channels(k), &cfg.head))
                .collect()
        };
        let net = MultiTaskNet {
            config: cfg.clone(),
            backbone,
            aggregation,
            context,
            fusion,
            tag,
            heads,
            focal: FocalParams::default(),
        };
        Ok((net, store))
    }

    /// Builds and materializes with `seed`.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let (net, mut store) = Self::build(cfg)?;
        store.materialize(seed);
        Ok((net, store))
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<NetOutputs> {
        let bb = self.backbone.forward(g, image)?;
        let x_agg = match (&self.aggregation, &self.context) {
            (Some(a), _) => a.forward(g, &[bb.x_semantic, bb.x_layer4, bb.x_layer3])?,
            (None, Some(c)) => c.forward(g, bb.x_semantic)?,
            (None, None) => unreachable!("either aggregation or its substitute is built"),
        };
        let h = self.fusion.forward(g, x_agg, bb.x_detail)?;
        let beta = self.tag.spatial_attention(g, bb.x_detail.unwrap_or(h))?;
        let mut alphas = Vec::with_capacity(self.heads.len());
        let mut task_features = Vec::with_capacity(self.heads.len());
        let mut predictions = Vec::with_capacity(self.heads.len());
        for (t, head) in self.heads.iter().enumerate() {
            let a = self.tag.channel_attention(g, bb.x_semantic, t)?;
            let ht = task_adapt(g, h, a, beta)?;
            predictions.push(head.forward(g, ht)?);
            alphas.push(a);
            task_features.push(ht);
        }
        Ok(NetOutputs {
            backbone: bb,
            x_agg,
            h,
            alphas,
            beta,
            task_features,
            predictions,
        })
    }

    /// Per-task losses and their weighted total.
    pub fn loss(&self, g: &mut Graph, out: &NetOutputs, batch: &Batch) -> Result<LossBreakdown> {
        let w = self.config.loss_weights;
        let mut per_task = Vec::new();
        let mut det_terms = None;
        let mut weighted = Vec::new();
        for (head, &pred) in self.heads.iter().zip(&out.predictions) {
            let (v, weight) = match head.kind {
                TaskKind::Detection => {
                    let terms = loss::det_loss(g, pred, &batch.det, self.config.detection, self.focal)?;
                    det_terms = Some(terms);
                    (terms.total, w.det)
                }
                TaskKind::Segmentation => {
                    if let Some(&bad) = batch.seg_labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= self.config.seg_classes) {
                        return Err(Error::invalid("seg_loss", format!("label {bad} outside {} classes", self.config.seg_classes)));
                    }
                    (loss::seg_loss(g, pred, &batch.seg_labels)?, w.seg)
                }
                TaskKind::Depth => (loss::depth_loss(g, pred, &batch.depth, &batch.depth_valid)?, w.dep),
            };
            per_task.push((head.kind, v));
            weighted.push((head.kind.short_name(), v, weight));
        }
        let total = loss::weighted_total(g, &weighted)?;
        Ok(LossBreakdown {
            per_task,
            det_terms,
            total,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.modules().into_iter().flat_map(|(_, ids)| ids).collect()
    }

    /// Trainable parameters grouped by module, in forward order.
    pub fn modules(&self) -> Vec<(String, Vec<ParamId>)> {
        let bb = &self.backbone;
        let mut m = vec![
            ("backbone.stem".to_string(), bb.stem.param_ids()),
            ("backbone.layer1".into(), bb.layer1.param_ids()),
            ("backbone.layer2".into(), bb.layer2.param_ids()),
        ];
        for (i, s) in bb.low.iter().enumerate() {
            m.push((format!("backbone.low{}", i + 3), s.param_ids()));
        }
        if let Some(high) = &bb.high {
            for (i, s) in high.iter().enumerate() {
                m.push((format!("backbone.high{}", i + 3), s.param_ids()));
            }
        }
        if let Some(a) = &self.aggregation {
            for n in &a.nodes {
                m.push((format!("aggregation.f{}{}", n.idx.0, n.idx.1), n.param_ids()));
            }
        }
        if let Some(c) = &self.context {
            m.push(("context".into(), c.param_ids()));
        }
        if self.fusion.proj.is_some() {
            m.push(("fusion".into(), self.fusion.param_ids()));
        }
        if let Some(ch) = &self.tag.channel {
            for (k, c) in self.config.tasks.iter().zip(ch) {
                m.push((format!("tag.channel.{}", k.short_name()), c.param_ids()));
            }
        }
        if let Some(s) = &self.tag.spatial {
            m.push(("tag.spatial".into(), s.param_ids()));
        }
        for h in &self.heads {
            m.push((format!("heads.{}", h.kind.short_name()), h.param_ids()));
        }
        m
    }
}
