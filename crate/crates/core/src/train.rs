//! Adam with polynomial learning-rate decay, and the fixed-batch overfit run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::TaskKind;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Mode};
use crate::model::MultiTaskNet;
use crate::nn::{ParamId, ParamStore};
use crate::synth::Batch;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Exponent of the polynomial decay `lr·(1 − step/steps)^power`.
    pub power: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            power: 0.9,
        }
    }
}

pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - (step.min(total) as f64) / total as f64).powf(power)
}

/// Per-parameter first and second moment estimates.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    moments: Vec<Option<(Tensor, Tensor)>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            cfg,
            moments: (0..store.len()).map(|_| None).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (id, g) in grads.params() {
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id)?;
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss values after `step` updates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Unweighted per-task losses, in config task order.
    pub tasks: Vec<(TaskKind, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossCurve {
    pub weights: crate::loss::LossWeights,
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn initial(&self) -> f64 {
        self.points[0].total
    }

    pub fn last(&self) -> f64 {
        self.points.last().expect("curve has the initial point").total
    }

    /// One row per point: step, lr, weighted total, then raw and weighted
    /// value per task.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,total");
        let Some(first) = self.points.first() else {
            return s + "\n";
        };
        for (k, _) in &first.tasks {
            let n = k.short_name();
            let _ = write!(s, ",{n},weighted_{n}");
        }
        s.push('\n');
        for p in &self.points {
            let _ = write!(s, "{},{},{}", p.step, p.lr, p.total);
            for &(k, v) in &p.tasks {
                let w = match k {
                    TaskKind::Detection => self.weights.det,
                    TaskKind::Segmentation => self.weights.seg,
                    TaskKind::Depth => self.weights.dep,
                };
                let _ = write!(s, ",{v},{}", w * v);
            }
            s.push('\n');
        }
        s
    }
}

/// Trains on one fixed batch for `steps` updates. The curve has `steps + 1`
/// points, the first taken before any update.
pub fn overfit(
    net: &MultiTaskNet,
    store: &mut ParamStore,
    batch: &Batch,
    steps: usize,
    cfg: AdamConfig,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<LossCurve> {
    let mut adam = Adam::new(cfg, store);
    let trainable: Vec<ParamId> = store.trainable_ids();
    let mut points = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let lr = poly_lr(cfg.lr, step, steps, cfg.power);
        let (point, update) = {
            let mut g = Graph::new(store, Mode::Train);
            let x = g.input(batch.image.clone());
            let out = net.forward(&mut g, x)?;
            let losses = net.loss(&mut g, &out, batch).map_err(|e| match e {
                Error::NonFinite { what } => Error::Diverged { step, what },
                other => other,
            })?;
            let total = g.value(losses.total).item()?;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: "total loss".into(),
                });
            }
            let tasks = losses
                .per_task
                .iter()
                .map(|&(k, v)| Ok((k, g.value(v).item()?)))
                .collect::<Result<Vec<_>>>()?;
            let point = CurvePoint { step, lr, total, tasks };
            let update = if step < steps {
                let grads = g.backward(losses.total)?;
                if trainable.iter().any(|id| grads.param(*id).is_some_and(|t| !t.all_finite())) {
                    return Err(Error::Diverged {
                        step,
                        what: "gradient".into(),
                    });
                }
                Some((grads, g.stat_updates().to_vec()))
            } else {
                None
            };
            (point, update)
        };
        on_point(&point);
        points.push(point);
        if let Some((grads, stats)) = update {
            adam.step(store, &grads, lr)?;
            for s in &stats {
                s.apply(store)?;
            }
        }
    }
    Ok(LossCurve {
        weights: net.config.loss_weights,
        points,
    })
}
