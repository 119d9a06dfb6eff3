//! Per-task output stacks of 3×3 conv → ReLU → 1×1 conv blocks.

use crate::config::{HeadConfig, TaskKind};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, CostTrace, LayerKind, Module, ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct CrcBlock {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
}

impl Module for CrcBlock {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv3.forward(g, x)?;
        let y = g.relu(y);
        self.conv1.forward(g, y)
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let y = self.conv3.trace(input, t)?;
        t.note(&format!("{}.relu", self.conv3.name), LayerKind::Relu, &y);
        self.conv1.trace(&y, t)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.conv3.param_ids();
        v.extend(self.conv1.param_ids());
        v
    }
}

/// Stacked blocks; the last 1×1 emits the task channels. Dense tasks are
/// upsampled to input resolution, detection stays at map resolution.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub blocks: Vec<CrcBlock>,
    pub upsample: usize,
}

impl TaskHead {
    pub fn new(pb: &mut ParamBuilder, kind: TaskKind, cin: usize, out: usize, cfg: &HeadConfig) -> Self {
        let mut sub = pb.sub(kind.short_name());
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut b = sub.sub(&format!("block{i}"));
                let c_in = if i == 0 { cin } else { cfg.channels };
                let c_out = if i + 1 == cfg.blocks { out } else { cfg.channels };
                CrcBlock {
                    conv3: Conv2d::new(&mut b, "conv3", c_in, cfg.channels, 3, 1, 1, true),
                    conv1: Conv2d::new(&mut b, "conv1", cfg.channels, c_out, 1, 1, 1, true),
                }
            })
            .collect();
        let upsample = match kind {
            TaskKind::Detection => 1,
            _ => cfg.upsample,
        };
        TaskHead { kind, blocks, upsample }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv1.out_channels)
    }
}

impl Module for TaskHead {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.blocks.forward(g, x)?;
        if self.upsample > 1 {
            g.resize(y, self.upsample)
        } else {
            Ok(y)
        }
    }

    fn trace(&self, input: &[usize], t: &mut CostTrace) -> Result<Vec<usize>> {
        let mut y = self.blocks.trace(input, t)?;
        if self.upsample > 1 {
            y[2] *= self.upsample;
            y[3] *= self.upsample;
            t.note(&format!("{}.resize", self.kind.short_name()), LayerKind::Resize, &y);
        }
        Ok(y)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.param_ids()
    }
}
